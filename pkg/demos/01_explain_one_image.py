"""Train a small prototype network on a Clever Hans dataset and explain one prediction.

Run: python demos/01_explain_one_image.py [output_dir]

The stop-sign class is poisoned: half of its training images carry a small
artifact patch. After training we compare, for one poisoned training image,
the upsampled similarity heatmap with the PRP map of each stop-sign
prototype. Both are written as PNGs.
"""
import sys
from pathlib import Path

import numpy as np

from protoprp import build_model, forward, make_preset, protopnet_heatmap, prp_maps, train
from protoprp.artifacts import CLASS_NAMES, STOP
from protoprp.model import TrainSchedule
from protoprp.prp import render_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/explain")
out.mkdir(parents=True, exist_ok=True)

train_ds, _, _, spec = make_preset("CH-50", per_class=40, test_per_class=10, image_size=32, seed=0)
model = build_model(prototypes_per_class=3, input_shape=(3, 32, 32), seed=0)
report = train(model, train_ds, TrainSchedule(total_epochs=12, push_every=6, lr_decay_every=10, seed=0))
print(f"final training accuracy {report.epochs[-1].accuracy:.3f}")

idx = int(np.flatnonzero(train_ds.artifact_flags)[0])
image = train_ds.images[idx]
logits, sims, _, trace = forward(model, image)
print(f"image {idx}: predicted {CLASS_NAMES[int(np.argmax(logits))]}, artifact box {train_ds.artifact_boxes[idx]}")

protos = model.prototypes_of(STOP)
for m, rel in zip(protos, prp_maps(model, image, protos, trace=trace)):
    heat = protopnet_heatmap(model, image, m, trace)
    render_png(rel.values, out / f"prp_p{m:02d}.png")
    render_png(heat.values, out / f"heatmap_p{m:02d}.png")
    peak = tuple(int(v) for v in np.unravel_index(np.abs(rel.values).sum(0).argmax(), rel.values.shape[1:]))
    print(f"prototype {m}: similarity {sims[m]:.3f}, PRP total {rel.total:.3f}, PRP peak at {peak}")
print(f"PNGs written to {out}")
