"""Generate a small synthetic set and check what each modality alone can see."""
import os
import sys

import numpy as np
from PIL import Image

from mmff.skeleton_io import load_manifest, load_sample
from mmff.synthdata import SynthSpec, generate_dataset
from mmff.testing import oracle_accuracy

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/synth"

spec = SynthSpec(train_per_class=6, test_per_class=6, noise=0.0, seed=11)
root = generate_dataset(spec, out)
m = load_manifest(root)
print(len(m.samples), "clips,", len(m.classes), "classes:", ", ".join(m.classes))

# one clip per family, middle frame side by side
tiles = []
for fam in "ABC":
    e = next(e for e in m.samples if e.meta["family"] == fam)
    s = load_sample(m, e)
    mid = (s.skeleton.frame_count - 1) // 2
    tiles.append(np.asarray(Image.open(s.frame_paths[mid])))
    print(fam, e.sample_id, m.classes[e.label], "moving joint", e.meta["moving_joint"],
          "object", e.meta["object"])
Image.fromarray(np.concatenate(tiles, axis=1)).save(os.path.join(out, "families.png"))

# nearest neighbour on normalised skeletons vs on colour histograms of the middle frame
for kind in ("skeleton", "color"):
    accs = [oracle_accuracy(m, kind, f) for f in "ABC"]
    print(f"{kind:8s} NN  A {accs[0]:.2f}  B {accs[1]:.2f}  C {accs[2]:.2f}")
