"""Three-stage training of a few variants on the small set.

Runs in a minute or two on one core. The full model is the only one that
can separate family C, where the label depends on motion and object jointly.
"""
import sys

from mmff.config import desk_config
from mmff.training import ablation_table, run_ablation

root = sys.argv[1] if len(sys.argv) > 1 else "demo_out/synth"
cfg = desk_config(root)
cfg.train.epochs_stream, cfg.train.epochs_fusion, cfg.train.epochs_finetune = 10, 6, 2

log = []
rows = run_ablation(root, ["full", "skeleton_only", "rgb_only", "sum"], cfg, sink=log.append)
print(ablation_table(rows))
print("last fusion epoch:", next(e.line() for e in reversed(log) if e.stage == "fusion"))
