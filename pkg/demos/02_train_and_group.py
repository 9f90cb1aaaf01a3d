"""Train a tiny MAX-pooled model, then label every location and cluster the feature field.

Takes a couple of minutes on one core. Pass a pool name (max, avg, cls, tsp, wmp) to compare.

    python demos/02_train_and_group.py max
"""
import os
import sys

import numpy as np
import torch

from percept.experiments import evaluate_shapes, prepare_shapes, trend_config, trend_setup
from percept.inference import embed_label_set, group_unsupervised, segment_dense
from percept.render import save_overlay
from percept.training import train_run

pool = sys.argv[1] if len(sys.argv) > 1 else "max"
out = sys.argv[2] if len(sys.argv) > 2 else "percept-demo"
os.makedirs(out, exist_ok=True)
torch.set_num_threads(int(os.environ.get("PERCEPT_THREADS", "1")))

prep = prepare_shapes(trend_setup(n_train=1000, n_test=50, n_single=100))
cfg = trend_config(image_pool=pool, epochs=8)
print(f"training {pool} for {cfg.epochs} epochs on {len(prep.train)} captioned images")
state = train_run(cfg, prep.train_data(cfg.max_len), prep.vocab,
                  progress=lambda e, st: print(f"  epoch {e + 1}: loss {np.mean(st.losses[-15:]):.3f}"))
model = state.model

metrics = evaluate_shapes(model, prep)
print("accuracy {accuracy:.2f}  mIoU {miou:.3f}  JS {js:.3f}  tau {tau:.3f}".format(**metrics))

images = torch.as_tensor(np.stack([s.image for s in prep.test[:4]]))
labels = embed_label_set(model, prep.vocab, prep.prompts)
for i, (lm, gm) in enumerate(zip(segment_dense(model, images, labels), group_unsupervised(model, images, 8))):
    save_overlay(os.path.join(out, f"labels_{pool}_{i}.ppm"), prep.test[i].image, lm, prep.prompts.labels)
    save_overlay(os.path.join(out, f"groups_{pool}_{i}.ppm"), prep.test[i].image, gm)
    print(f"  {prep.test[i].caption!r}: predicted {sorted({prep.prompts.labels[c] for c in np.unique(lm)})}")
print(f"overlays written to {out}/labels_{pool}_*.ppm and groups_{pool}_*.ppm")
