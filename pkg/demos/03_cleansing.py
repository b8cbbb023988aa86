"""Find the poisoned training images by clustering their PRP maps.

Run: python demos/03_cleansing.py

Each stop-sign training image gets one PRP map per stop-sign prototype.
Treating those maps as views of the same image, co-regularized spectral
clustering splits the images in two; the split is scored against the true
artifact flags and compared with single-view baselines.

Clustering needs a well-trained model, so this uses the full 64 px recipe
and takes a few minutes on a laptop CPU.
"""
import numpy as np

from protoprp import build_model, build_views, coreg_consensus_cluster, make_preset, prp_maps
from protoprp import score_clustering, spectral_cluster, spray_lrp_map, train
from protoprp.artifacts import STOP
from protoprp.model import TrainSchedule

train_ds, _, _, _ = make_preset("CH-50", per_class=100, test_per_class=10, image_size=64, seed=0)
model = build_model(prototypes_per_class=10, input_shape=(3, 64, 64), seed=0)
train(model, train_ds, TrainSchedule(total_epochs=20, push_every=10, lr=2e-3, lr_decay_every=10, seed=0))

sel = np.flatnonzero(train_ds.labels == STOP)
flags = train_ds.artifact_flags[sel]
protos = model.prototypes_of(STOP)
maps = np.stack([np.stack([r.values for r in prp_maps(model, train_ds.images[i], protos)]) for i in sel])
lrp = np.stack([spray_lrp_map(model, train_ds.images[i], STOP).values for i in sel])

results = {
    "co-reg consensus": coreg_consensus_cluster(build_views(maps, normalize="l2")).assignment,
    "SpRAy-PRP": spectral_cluster(build_views(maps, "summed_concat", normalize="l2").views[0]),
    "SpRAy-LRP": spectral_cluster(build_views(lrp, "lrp_single", normalize="l2").views[0]),
}
print(f"{len(sel)} stop-sign images, {int(flags.sum())} carry the artifact")
for name, assignment in results.items():
    acc, f1, _ = score_clustering(assignment, flags)
    print(f"{name:>17}: ACC {acc:.3f}  F1 {f1:.3f}")
