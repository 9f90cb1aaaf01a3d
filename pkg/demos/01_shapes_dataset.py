"""Generate a small shapes dataset, read it back, and tint each image by its class mask.

    python demos/01_shapes_dataset.py /tmp/percept-demo
"""
import os
import sys

import numpy as np

from percept.render import save_overlay
from percept.synthdata import Dataset, ShapesConfig, generate_shapes

out = sys.argv[1] if len(sys.argv) > 1 else "percept-demo"
root = os.path.join(out, "shapes")

# every caption, mask and instance comes from one scene description
generate_shapes(root, ShapesConfig(canvas=48), count=6, seed=0)
ds = Dataset(root)
ds.validate()
print(f"{len(ds)} samples, labels: {', '.join(ds.labels)}")

for i, sample in enumerate(ds):
    shown = sorted(ds.labels[c] for c in np.unique(sample.class_mask) if c != 255)
    print(f"  {i}: {sample.caption!r} -> mask classes {shown}, {len(sample.instance_masks)} instances")
    save_overlay(os.path.join(out, f"mask_{i}.ppm"), sample.image, sample.class_mask, ds.labels)

print("prompt ensembles used for zero-shot labelling:")
for label, prompts in list(ds.prompts().items())[:3]:
    print(f"  {label}: {prompts[:3]}{' ...' if len(prompts) > 3 else ''}")
print(f"overlays written to {out}/mask_*.ppm")
