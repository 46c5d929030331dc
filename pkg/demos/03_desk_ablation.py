# ## Ablation on the desk profile
#
# Four variants share one data split: B (plain two-stage), CS (candidate
# selection in stage 1), SD (self-distillation in stage 2) and FULL (both).
# One seed on one fold takes a few minutes on a single CPU thread.

from tsddnet.experiment import build_config, cmd_ablate, cmd_gen_data, load_fold_metrics

data_dir = cmd_gen_data("desk_data").parent
cfg = build_config(overrides={"data_dir": str(data_dir), "out_dir": "desk_runs", "folds": "0", "seed": 0})
print(cfg.to_text())

run = cmd_ablate(cfg, force=True)
print((run / "report.txt").read_text())

# ### Localization of the stored labels against the tight boxes

for variant, folds in load_fold_metrics(run).items():
    m = folds[0]
    print(f"{variant:5s} acc {m['accuracy']:.3f}  auc {m['auc']:.3f}  "
          f"stored IoU {m['stored_iou']:.3f}  coarse IoU {m['coarse_iou']:.3f}")

# The same run from the command line:
#
#   tsddnet gen-data --out desk_data
#   tsddnet ablate --data desk_data --out desk_runs --only-folds 0
