# ## Synthetic ultrasound phantom
#
# Every lesion has a tight box (the minimal box around its mask) and a coarse box,
# a jittered copy standing in for a quick manual annotation. Training only ever
# sees the coarse boxes; the tight ones are kept for scoring localization.

import numpy as np
from PIL import Image, ImageDraw

from tsddnet.dnet import iou
from tsddnet.phantom import PhantomSpec, iter_phantom

spec = PhantomSpec(n_patients=6, images_per_patient=2, image_size=256, seed=0)
images = list(iter_phantom(spec))
len(images)

# ### How coarse are the coarse boxes?

vals = np.array([iou(img.coarse, img.tight) for *_, img in images])
print(f"coarse vs tight IoU: mean {vals.mean():.3f}, min {vals.min():.3f}")

# ### Benign vs malignant
#
# Malignant lesions cast a darker posterior shadow and have a brighter rim.

for image_id, pid, label, img in images[:4]:
    print(image_id, "malignant" if label else "benign", img.tight, img.coarse)

# ### Save a contact sheet: tight box green, coarse box red

tiles = []
for *_, img in images[:6]:
    tile = Image.fromarray((img.pixels * 255).astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(tile)
    for box, colour in ((img.tight, (0, 200, 0)), (img.coarse, (220, 0, 0))):
        draw.rectangle([box.x, box.y, box.x2, box.y2], outline=colour)
    tiles.append(tile)
sheet = Image.new("RGB", (256 * 3, 256 * 2))
for i, tile in enumerate(tiles):
    sheet.paste(tile, ((i % 3) * 256, (i // 3) * 256))
sheet.save("phantom_sheet.png")
