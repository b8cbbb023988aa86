"""How faithful are explanations, and does pruning remove a Clever Hans feature?

Run: python demos/02_ordering_and_pruning.py

1. Relevance ordering: pixels of a test image are copied into a random image
   in order of relevance. The faster a prototype's similarity recovers, the
   better the ranking. PRP is compared with upsampled heatmaps and a random
   order.
2. Pruning: the prototype pair whose removal hurts stop-sign accuracy most is
   pruned and the last layer retrained. On a fully poisoned class the
   artifact still drives the decision afterwards.
"""
import numpy as np

from protoprp import build_model, make_preset, ordering_experiment, predict, pruning_matrix, train
from protoprp.artifacts import STOP
from protoprp.model import TrainSchedule, prune_prototypes

train_ds, art, clean, _ = make_preset("CH-100", per_class=40, test_per_class=20, image_size=32, seed=0)
model = build_model(prototypes_per_class=4, input_shape=(3, 32, 32), seed=0)
train(model, train_ds, TrainSchedule(total_epochs=10, push_every=5, lr_decay_every=10, seed=0))


def stop_acc(m, ds):
    sel = ds.orig_labels == STOP
    return float(np.mean(predict(m, ds.images[sel]) == STOP))


print(f"stop accuracy: artifact test {stop_acc(model, art):.2f}, clean test {stop_acc(model, clean):.2f}")

sel = np.flatnonzero(clean.orig_labels == STOP)[:10]
res = ordering_experiment(model, clean.images[sel], model.prototypes_of(STOP), seed=0)
for method, auc in res.aucs().items():
    print(f"ordering AUC {method:>8}: {auc:.3f}")

dm = pruning_matrix(model, art, STOP)
pair = dm.highest_pair()
pruned = prune_prototypes(model, list(pair), retrain_last_layer=True, dataset=train_ds,
                          schedule=TrainSchedule(seed=0))
print(f"pruned prototypes {pair}: artifact-test stop accuracy {stop_acc(model, art):.2f} -> {stop_acc(pruned, art):.2f}")
