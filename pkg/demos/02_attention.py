"""Skeleton-attention square and relation mask for one clip, with untrained weights."""
import os
import sys

import numpy as np
import torch
from PIL import Image

from mmff.config import desk_config
from mmff.dataset import crop_frame, feature_grid, load_frame
from mmff.fusion import build_combined
from mmff.rgb_stream import max_moving_joint, skeleton_attention_mask
from mmff.skeleton_io import load_manifest, load_sample
from mmff.training import build_model

root = sys.argv[1] if len(sys.argv) > 1 else "demo_out/synth"
m = load_manifest(root)
cfg = desk_config(root)
entry = next(e for e in m.samples if e.meta["family"] == "A")
s = load_sample(m, entry)
mid = (s.skeleton.frame_count - 1) // 2

j, d = max_moving_joint(s.skeleton, mid)
print("largest displacement: joint", j, f"{d:.3f} m (metadata says joint {entry.meta['moving_joint']})")

crop, tf = crop_frame(load_frame(s.frame_paths[mid]), s, mid, cfg, False, np.random.default_rng(0))
fh, fw = feature_grid(cfg)
mask, full = skeleton_attention_mask(s.skeleton, s.camera, tf, fw, fh, cfg.model.square_frac,
                                     mid_index=mid, return_full=True)
print("square covers", int(full.sum()), "of", full.size, "crop pixels; feature-grid mask:")
print(np.array2string(mask[0], precision=2, suppress_small=True))

# paint the square over the crop
img = np.moveaxis(crop, 0, -1).copy()
img[full > 0] = 0.5 * img[full > 0] + 0.5 * np.array([1.0, 0.2, 0.2])
out = os.path.join(root, "attention_demo.png")
Image.fromarray((img * 255).round().astype(np.uint8)).resize((128, 128), Image.NEAREST).save(out)
print("wrote", out)

# shape of the cross-modal matrix the relation module works on
model = build_model(cfg, len(m.classes)).eval()
sk = torch.zeros(1, 3, cfg.model.seq_len, 10)
with torch.no_grad():
    F_gcn = model.skeleton(sk)
F_rgb = torch.zeros(1, model.rgb.backbone.out_channels, fh * fw)
print("skeleton map", tuple(F_gcn.shape[1:]), "-> combined feature", tuple(build_combined(F_gcn, F_rgb).shape[1:]))
