"""Faithfulness and behaviour experiments.

* relevance ordering: restore the most relevant pixels of a test image into
  a random image and watch a similarity or class score recover;
* pruning drop matrix: class accuracy lost when one or two prototypes are
  switched off (no retraining);
* plain accuracy reports.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import PrototypeModel, forward, forward_batch, predict, similarities_batch
from .prp import RelevanceMap, prp_maps
from .tensor import bilinear_upsample

__all__ = [
    "Target",
    "OrderingCurve",
    "relevance_ordering",
    "average_curves",
    "ordering_experiment",
    "curve_auc",
    "DropMatrix",
    "pruning_matrix",
    "AccuracyReport",
    "accuracy",
    "write_curves_csv",
]

METHODS = ("prp", "upsample", "random")


class Target(NamedTuple):
    """Score tracked by an ordering curve: ``("similarity", m)`` or ``("class", c)``."""

    kind: str
    index: int

    @classmethod
    def similarity(cls, m: int) -> "Target":
        return cls("similarity", int(m))

    @classmethod
    def class_score(cls, c: int) -> "Target":
        return cls("class", int(c))


@dataclass
class OrderingCurve:
    fractions: np.ndarray
    scores: np.ndarray
    method: str = "prp"
    level: str = "per-prototype"  # or "averaged"
    target: Target | None = None

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        f = self.fractions
        if f.ndim != 1 or f.shape != self.scores.shape or len(f) < 2:
            raise ValueError("fractions and scores must be matching 1-d sequences of length >= 2")
        if f[0] != 0 or f[-1] != 1 or np.any(np.diff(f) <= 0):
            raise ValueError("fractions must increase strictly from 0 to 1")

    @property
    def auc(self) -> float:
        return curve_auc(self)


def curve_auc(curve: OrderingCurve) -> float:
    """Trapezoidal area under score versus fraction."""
    f, s = curve.fractions, curve.scores
    return float(np.sum(np.diff(f) * (s[1:] + s[:-1]) / 2))


def _score(model: PrototypeModel, images: np.ndarray, target: Target) -> np.ndarray:
    logits, sims, _ = forward_batch(model, images)
    if target.kind == "similarity":
        return sims[:, target.index]
    if target.kind == "class":
        return logits[:, target.index]
    raise ValueError(f"unknown target kind {target.kind!r}")


def _pixel_order(relevance) -> np.ndarray:
    """Pixel indices by descending channel-summed relevance; ties keep row-major order."""
    r = relevance.values if isinstance(relevance, RelevanceMap) else np.asarray(relevance)
    if r.ndim == 3:
        r = r.sum(axis=0, dtype=np.float64)
    return np.argsort(-r.ravel(), kind="stable")


def random_image(shape, seed) -> np.ndarray:
    """Uniform [0, 1) start image for the ordering test."""
    return np.random.default_rng(seed).random(shape, dtype=np.float64).astype(np.float32)


def relevance_ordering(
    model: PrototypeModel,
    relevance,
    image: np.ndarray,
    target: Target,
    *,
    seed=0,
    steps: int = 20,
    start: np.ndarray | None = None,
    method: str = "prp",
) -> OrderingCurve:
    """Score curve while the top ``t`` fraction of pixels is copied into a random image.

    ``relevance`` is a ``[C,H,W]`` or ``[H,W]`` map over the image; at
    fraction ``t = k / steps`` the ``floor(t * P + 0.5)`` most relevant of the
    ``P`` pixels (all channels of a location) come from ``image``. ``start``
    overrides the seeded uniform start image.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    image = np.asarray(image)
    c, h, w = image.shape
    rel_shape = np.shape(relevance.values if isinstance(relevance, RelevanceMap) else relevance)
    if tuple(rel_shape[-2:]) != (h, w):
        raise ValueError(f"relevance map {rel_shape} does not match image {image.shape}")
    if target.kind == "similarity" and not 0 <= target.index < model.num_prototypes:
        raise IndexError(f"prototype {target.index} out of range")
    if target.kind == "class" and not 0 <= target.index < model.num_classes:
        raise IndexError(f"class {target.index} out of range")
    order = _pixel_order(relevance)
    base = random_image(image.shape, seed) if start is None else np.asarray(start, dtype=image.dtype)
    fractions = np.arange(steps + 1) / steps
    counts = np.floor(fractions * (h * w) + 0.5).astype(np.int64)
    src = image.reshape(c, -1)
    batch = np.empty((steps + 1, c, h * w), dtype=image.dtype)
    for k, n in enumerate(counts):
        batch[k] = base.reshape(c, -1)
        batch[k][:, order[:n]] = src[:, order[:n]]
    scores = _score(model, batch.reshape(steps + 1, c, h, w), target)
    return OrderingCurve(fractions, scores, method=method, target=target)


def average_curves(curves: Sequence[OrderingCurve], method: str | None = None) -> OrderingCurve:
    if not curves:
        raise ValueError("no curves to average")
    f = curves[0].fractions
    for cv in curves[1:]:
        if not np.array_equal(cv.fractions, f):
            raise ValueError("curves use different fraction grids")
    scores = np.mean([cv.scores for cv in curves], axis=0)
    return OrderingCurve(f, scores, method=method or curves[0].method, level="averaged")


@dataclass
class OrderingResult:
    """Averaged curves per method plus per-prototype curves (averaged over images)."""

    averaged: dict
    per_prototype: dict  # method -> {prototype: OrderingCurve}
    image_indices: list = field(default_factory=list)

    def aucs(self) -> dict:
        return {meth: curve_auc(cv) for meth, cv in self.averaged.items()}


def ordering_experiment(
    model: PrototypeModel,
    images: np.ndarray,
    prototypes: Sequence[int],
    *,
    target_kind: str = "similarity",
    class_index: int | None = None,
    methods: Sequence[str] = METHODS,
    steps: int = 20,
    seed: int = 0,
    eps: float | None = None,
) -> OrderingResult:
    """Relevance ordering averaged over images, then over prototypes.

    Every image gets its own random start image shared by all methods and
    prototypes, so the methods differ only in the pixel order. For
    ``target_kind="class"`` each prototype's map is scored by the logit of
    ``class_index`` (defaults to the class of the first prototype).
    """
    for meth in methods:
        if meth not in METHODS:
            raise ValueError(f"unknown ordering method {meth!r}")
    prototypes = [int(m) for m in prototypes]
    if class_index is None:
        class_index = int(model.prototype_class[prototypes[0]])
    per = {meth: {m: [] for m in prototypes} for meth in methods}
    hw = tuple(model.input_shape[1:])
    kw = {} if eps is None else {"eps": eps}
    for i, img in enumerate(images):
        trace = forward(model, img)[3]
        start = random_image(img.shape, np.random.SeedSequence([seed, i]))
        maps = dict(zip(prototypes, prp_maps(model, img, prototypes, trace=trace, **kw))) if "prp" in methods else {}
        for m in prototypes:
            target = Target.similarity(m) if target_kind == "similarity" else Target.class_score(class_index)
            for meth in methods:
                if meth == "prp":
                    rel = maps[m].values
                elif meth == "upsample":
                    rel = bilinear_upsample(trace.activations[m], hw)
                else:
                    rel = np.random.default_rng(np.random.SeedSequence([seed, i, m, 1])).random(hw)
                per[meth][m].append(
                    relevance_ordering(model, rel, img, target, steps=steps, start=start, method=meth)
                )
    per_proto = {meth: {m: average_curves(cs, meth) for m, cs in d.items()} for meth, d in per.items()}
    averaged = {meth: average_curves(list(d.values()), meth) for meth, d in per_proto.items()}
    return OrderingResult(averaged, per_proto, list(range(len(images))))


def write_curves_csv(curves: dict, path) -> None:
    """One row per fraction, one column per named curve."""
    names = list(curves)
    f = curves[names[0]].fractions
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fraction"] + names)
        for k, t in enumerate(f):
            wr.writerow([f"{t:.6f}"] + [f"{curves[n].scores[k]:.8g}" for n in names])


# ----------------------------------------------------------------------------
# pruning and accuracy
# ----------------------------------------------------------------------------


def _images_labels(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, np.asarray(dataset.labels)
    images, labels = dataset
    return images, np.asarray(labels)


@dataclass
class DropMatrix:
    base_accuracy: float
    drop: np.ndarray  # [k,k]; diagonal is single-prototype removal
    prototypes: list
    class_index: int

    def highest_pair(self) -> tuple[int, int]:
        """Prototype ids of the off-diagonal cell with the largest drop (first in row-major order)."""
        d = self.drop.copy()
        np.fill_diagonal(d, -np.inf)
        i, j = np.unravel_index(np.argmax(d), d.shape)
        return self.prototypes[i], self.prototypes[j]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["prototype"] + [str(p) for p in self.prototypes])
            for p, row in zip(self.prototypes, self.drop):
                wr.writerow([str(p)] + [f"{v:.6f}" for v in row])

    def to_dict(self) -> dict:
        return {
            "class_index": self.class_index,
            "base_accuracy": self.base_accuracy,
            "prototypes": list(self.prototypes),
            "drop": self.drop.tolist(),
        }


def _argmax_accuracy(logits: np.ndarray, cls: int) -> float:
    return float(np.mean(logits.argmax(axis=1) == cls))


def pruning_matrix(model: PrototypeModel, dataset, class_c: int) -> DropMatrix:
    """Accuracy drop on class ``class_c`` images for every single and pairwise prototype removal.

    Removing a prototype deletes its column from the last layer; the
    remaining weights are not retrained.
    """
    protos = [int(p) for p in model.prototypes_of(class_c)]
    if len(protos) < 2:
        raise ValueError(f"class {class_c} needs at least 2 prototypes, has {len(protos)}")
    images, labels = _images_labels(dataset)
    sel = labels == class_c
    if not sel.any():
        raise ValueError(f"dataset has no images of class {class_c}")
    sims = similarities_batch(model, images[sel]).astype(np.float64)
    W = model.last_layer.astype(np.float64)
    b = model.last_bias.astype(np.float64)
    base = _argmax_accuracy(sims @ W.T + b, class_c)
    k = len(protos)
    drop = np.zeros((k, k))
    for a in range(k):
        for c in range(a, k):
            keep = np.ones(model.num_prototypes, bool)
            keep[[protos[a], protos[c]]] = False
            acc = _argmax_accuracy(sims[:, keep] @ W[:, keep].T + b, class_c)
            drop[a, c] = drop[c, a] = base - acc
    return DropMatrix(base, drop, protos, int(class_c))


@dataclass
class AccuracyReport:
    overall: float
    per_class: dict
    counts: dict

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(model: PrototypeModel, dataset, per_class: bool = True) -> AccuracyReport:
    """Overall and per-class accuracy of arg-max predictions (ties to the lowest class)."""
    images, labels = _images_labels(dataset)
    if len(labels) == 0:
        raise ValueError("cannot score an empty dataset")
    pred = predict(model, images)
    hit = pred == labels
    pc, counts = {}, {}
    if per_class:
        for c in np.unique(labels):
            sel = labels == c
            pc[int(c)] = float(hit[sel].mean())
            counts[int(c)] = int(sel.sum())
    return AccuracyReport(float(hit.mean()), pc, counts)


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
