# ## Stage 1: pseudo labels and candidate selection
#
# A fraction p of the images keeps its coarse box (FA, fully annotated); the rest
# only carry an image-level label (PA). The detector proposes k boxes per image,
# the classifier scores each crop by the probability of the true class, and a
# stored box is replaced only when a candidate scores strictly higher.

import torch

from tsddnet.data import apply_annotation_fraction, load_manifest
from tsddnet.experiment import build_config, cmd_gen_data
from tsddnet.labels import Origin
from tsddnet.refine import RefinementConfig, run_stage1

torch.set_num_threads(1)
manifest = cmd_gen_data("demo_data", n_patients=20, images_per_patient=3, image_size=256, seed=1)
records = apply_annotation_fraction(load_manifest(manifest, eager=True), p=0.3, seed=0)
print(sum(r.manual_roi is not None for r in records), "of", len(records), "images keep a box")

# ### Train and refine

cfg = RefinementConfig(k_candidates=3, n_outer_iterations=2, epochs_per_iteration=2, warmup_epochs=6,
                       learning_rate=1e-3, batch_size=8)
desk = build_config()  # reduced backbones sized for a CPU
state = run_stage1(records, cfg, desk.dnet(), desk.cnet())

# ### What happened to the labels
#
# Each entry keeps its full history; a REFINED origin marks a replacement.

store = state.store
refined = [e for e in store.entries() if e.origin is Origin.REFINED]
print(len(refined), "labels replaced by a better scoring candidate")
for e in list(store.entries())[:5]:
    print(e.image_id, [(h.iteration, round(h.score, 3)) for h in e.history])
