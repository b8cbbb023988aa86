"""Prototype network: conv backbone, prototype layer and linear head.

The similarity between a latent patch and a prototype is the log-ratio
``log((d + 1) / (d + eps))`` of the squared L2 distance ``d``; each
prototype's similarity score is the max of that map over space, and the
class logits are a linear function of the scores.

Training follows the usual three-stage loop: joint optimisation of the
backbone and prototypes with the last layer frozen, projection ("push") of
each prototype onto its nearest same-class training patch, then
optimisation of the last layer alone. All gradients are written out by hand
for the fixed layer set (conv, ReLU, max-pool, prototype layer, linear).
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import ptns
from .tensor import (
    ConvLayer,
    PoolArgmax,
    conv2d_backward_input,
    conv2d_backward_weights,
    conv2d_forward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu,
)

log = logging.getLogger(__name__)

EPS = 1e-4


@dataclass
class ReLU:
    pass


@dataclass
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass
class PrototypeModel:
    backbone: list
    prototypes: np.ndarray  # [n, D]
    prototype_class: np.ndarray  # [n] class id per prototype
    last_layer: np.ndarray  # [num_classes, n]
    last_bias: np.ndarray  # [num_classes], kept at zero
    input_shape: tuple[int, int, int]
    eps: float = EPS

    def __post_init__(self):
        self.prototype_class = np.asarray(self.prototype_class, dtype=np.int64)
        n = len(self.prototype_class)
        if self.prototypes.shape[0] != n or self.last_layer.shape[1] != n:
            raise ValueError(
                f"inconsistent prototype count: prototypes {self.prototypes.shape}, "
                f"class map {n}, last layer {self.last_layer.shape}"
            )

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.last_layer.shape[0]

    @property
    def depth(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dtype(self):
        return self.prototypes.dtype

    def prototypes_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.prototype_class == cls)

    def copy(self) -> "PrototypeModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "PrototypeModel":
        m = self.copy()
        for layer in m.backbone:
            if isinstance(layer, ConvLayer):
                layer.weights = layer.weights.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        m.prototypes = m.prototypes.astype(dtype)
        m.last_layer = m.last_layer.astype(dtype)
        m.last_bias = m.last_bias.astype(dtype)
        return m


def build_model(
    num_classes: int = 5,
    prototypes_per_class: int = 5,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    widths: Sequence[int] = (16, 32, 32),
    seed: int = 0,
    eps: float = EPS,
) -> PrototypeModel:
    """Three conv(3x3, pad 1)+ReLU stages with a 2x2 max-pool between them.

    Conv weights use He initialisation, prototypes are uniform on [0, 1) and
    the last layer starts at +1 for own-class and -0.5 for other-class
    connections.
    """
    rng = np.random.default_rng(seed)
    backbone: list = []
    c_in = input_shape[0]
    for k, c_out in enumerate(widths):
        if k:
            backbone.append(MaxPool(2, 2))
        std = np.sqrt(2.0 / (c_in * 9))
        w = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32)
        backbone.append(ConvLayer(w, np.zeros(c_out, np.float32), stride=1, padding=1))
        backbone.append(ReLU())
        c_in = c_out
    n = num_classes * prototypes_per_class
    proto_class = np.repeat(np.arange(num_classes), prototypes_per_class)
    prototypes = rng.random((n, widths[-1])).astype(np.float32)
    onehot = (proto_class[None, :] == np.arange(num_classes)[:, None])
    last = np.where(onehot, 1.0, -0.5).astype(np.float32)
    return PrototypeModel(
        backbone=backbone,
        prototypes=prototypes,
        prototype_class=proto_class,
        last_layer=last,
        last_bias=np.zeros(num_classes, np.float32),
        input_shape=tuple(input_shape),
        eps=eps,
    )


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything the relevance rules need from one forward pass of one image."""

    layer_inputs: list  # input of every backbone stage, [C,H,W] each
    pool_argmax: dict  # stage index -> PoolArgmax
    features: np.ndarray  # z, [D,H,W]
    channel_distances: np.ndarray  # d_mijc, [n,D,H,W]
    distances: np.ndarray  # [n,H,W]
    activations: np.ndarray  # a_m, [n,H,W]
    argmax: np.ndarray  # [n] row-major flat index of max a_m
    similarities: np.ndarray  # s_m, [n]
    logits: np.ndarray  # [num_classes]


def activation_map(zpatches: np.ndarray, prototype: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Log-similarity map of one prototype against every 1x1 patch of ``zpatches`` [D,H,W]."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if zpatches.shape[0] != prototype.shape[0]:
        raise ValueError(
            f"patch depth {zpatches.shape[0]} != prototype depth {prototype.shape[0]}"
        )
    diff = zpatches - prototype[:, None, None]
    d = (diff * diff).sum(axis=0)
    return similarity_from_distance(d, eps)


def similarity_from_distance(d: np.ndarray, eps: float = EPS) -> np.ndarray:
    d = np.asarray(d)
    return np.log((d + 1) / (d + eps)).astype(d.dtype if d.dtype.kind == "f" else np.float64)


def _check_model(model: PrototypeModel):
    if model is None or not model.backbone or model.prototypes is None or model.prototypes.size == 0:
        raise ValueError("model is not configured (empty backbone or prototype bank)")


def backbone_forward(backbone: list, x: np.ndarray):
    """Run the backbone on a batch; returns (z, stage inputs, pool argmaxes)."""
    inputs = []
    argmaxes = {}
    for k, layer in enumerate(backbone):
        inputs.append(x)
        if isinstance(layer, ConvLayer):
            x = conv2d_forward(x, layer)
        elif isinstance(layer, ReLU):
            x = relu(x)
        elif isinstance(layer, MaxPool):
            x, argmaxes[k] = maxpool2d_forward(x, layer.window, layer.stride)
        else:
            raise TypeError(f"unknown backbone stage {layer!r}")
    return x, inputs, argmaxes


def _prototype_layer(z: np.ndarray, prototypes: np.ndarray, eps: float):
    """Batched distances [B,n,H,W], activations and per-channel differences."""
    diff = z[:, None] - prototypes[None, :, :, None, None]  # [B,n,D,H,W]
    dist = (diff * diff).sum(axis=2)
    act = np.log((dist + 1) / (dist + eps))
    return diff, dist, act


def forward_batch(model: PrototypeModel, images: np.ndarray):
    """Logits [B,K], similarities [B,n] and activation maps [B,n,H,W] of a batch."""
    _check_model(model)
    z, _, _ = backbone_forward(model.backbone, images)
    _, _, act = _prototype_layer(z, model.prototypes, model.eps)
    sims = act.reshape(act.shape[0], act.shape[1], -1).max(axis=2)
    logits = linear_forward(sims, model.last_layer, model.last_bias)
    return logits, sims, act


def features_batch(model: PrototypeModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(backbone_forward(model.backbone, images[s : s + batch_size])[0])
    return np.concatenate(out) if out else np.zeros((0,))


def similarities_batch(model: PrototypeModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_batch(model, images[s : s + batch_size])[1] for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_prototypes), model.dtype)


def forward(model: PrototypeModel, image: np.ndarray):
    """Forward pass of one ``[C,H,W]`` image.

    Returns ``(logits, similarities, activation_maps, trace)``.
    """
    _check_model(model)
    image = np.asarray(image)
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValueError(f"image shape {image.shape} != configured input {model.input_shape}")
    z, inputs, argmaxes = backbone_forward(model.backbone, image[None])
    diff, dist, act = _prototype_layer(z, model.prototypes, model.eps)
    n = model.num_prototypes
    flat = act[0].reshape(n, -1)
    arg = flat.argmax(axis=1)
    sims = flat[np.arange(n), arg]
    logits = linear_forward(sims, model.last_layer, model.last_bias)
    trace = ForwardTrace(
        layer_inputs=[x[0] for x in inputs],
        pool_argmax={
            k: PoolArgmax(a.indices[0], a.input_shape[1:], a.window, a.stride)
            for k, a in argmaxes.items()
        },
        features=z[0],
        channel_distances=diff[0] * diff[0],
        distances=dist[0],
        activations=act[0],
        argmax=arg,
        similarities=sims,
        logits=logits,
    )
    return logits, sims, act[0], trace


def predict(model: PrototypeModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest class id."""
    preds = [
        forward_batch(model, images[s : s + batch_size])[0].argmax(axis=1)
        for s in range(0, len(images), batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


# ----------------------------------------------------------------------------
# losses and gradients
# ----------------------------------------------------------------------------


@dataclass
class LossWeights:
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08

    def __post_init__(self):
        if not (np.isfinite(self.lambda_clst) and np.isfinite(self.lambda_sep)):
            raise ValueError("loss weights must be finite")
        if self.lambda_clst < 0:
            raise ValueError("lambda_clst must be >= 0")


class LossTerms(NamedTuple):
    total: float
    ce: float
    cluster: float
    separation: float


def _check_labels(model, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes}), got {labels.min()}..{labels.max()}")
    for k in np.unique(labels):
        if not (model.prototype_class == k).any():
            raise ValueError(f"class {k} has no prototypes")
    return labels


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), shifted - np.log(e.sum(axis=1, keepdims=True))


def loss_and_gradients(
    model: PrototypeModel,
    images: np.ndarray,
    labels,
    weights: LossWeights = LossWeights(),
    need_grads: bool = True,
):
    """Total loss, its terms and gradients for the backbone and prototypes.

    Returns ``(LossTerms, grads)`` where ``grads`` maps ``"prototypes"`` and
    ``("conv", stage_index)`` to ``(dW, db)``; the last layer receives no
    gradient here.
    """
    _check_model(model)
    labels = _check_labels(model, labels)
    b = len(labels)
    z, inputs, argmaxes = backbone_forward(model.backbone, images)
    diff, dist, act = _prototype_layer(z, model.prototypes, model.eps)
    n = model.num_prototypes
    flat_act = act.reshape(b, n, -1)
    arg = flat_act.argmax(axis=2)  # [B,n]
    sims = np.take_along_axis(flat_act, arg[..., None], axis=2)[..., 0]
    logits = linear_forward(sims, model.last_layer, model.last_bias)
    probs, logp = _softmax(logits.astype(np.float64))
    rows = np.arange(b)
    ce = -logp[rows, labels].mean()

    flat_dist = dist.reshape(b, n, -1)
    min_cell = flat_dist.argmin(axis=2)  # [B,n]
    min_dist = np.take_along_axis(flat_dist, min_cell[..., None], axis=2)[..., 0]
    own = model.prototype_class[None, :] == labels[:, None]  # [B,n]
    own_d = np.where(own, min_dist, np.inf)
    other_d = np.where(~own, min_dist, np.inf)
    own_m = own_d.argmin(axis=1)
    cluster = own_d[rows, own_m].mean()
    has_other = (~own).any(axis=1)
    other_m = other_d.argmin(axis=1)
    sep_vals = np.where(has_other, other_d[rows, other_m], 0.0)
    separation = -sep_vals.mean()
    total = ce + weights.lambda_clst * cluster + weights.lambda_sep * separation
    terms = LossTerms(float(total), float(ce), float(cluster), float(separation))
    if not need_grads:
        return terms, None

    dtype = model.dtype
    # d total / d dist, sparse in space
    g_dist = np.zeros((b, n, flat_dist.shape[2]), dtype=np.float64)
    g_logits = (probs.copy())
    g_logits[rows, labels] -= 1.0
    g_logits /= b
    g_sims = g_logits @ model.last_layer.astype(np.float64)  # [B,n]
    d_at = np.take_along_axis(flat_dist, arg[..., None], axis=2)[..., 0].astype(np.float64)
    da_dd = 1.0 / (d_at + 1.0) - 1.0 / (d_at + model.eps)
    bi, mi = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
    np.add.at(g_dist, (bi.ravel(), mi.ravel(), arg.ravel()), (g_sims * da_dd).ravel())
    np.add.at(g_dist, (rows, own_m, min_cell[rows, own_m]), weights.lambda_clst / b)
    hr = rows[has_other]
    np.add.at(g_dist, (hr, other_m[hr], min_cell[hr, other_m[hr]]), -weights.lambda_sep / b)
    g_dist = g_dist.reshape(dist.shape).astype(dtype)

    # dist = sum_c diff^2 with diff = z - p
    g_diff = 2.0 * diff * g_dist[:, :, None]  # [B,n,D,H,W]
    grads = {"prototypes": -g_diff.sum(axis=(0, 3, 4))}
    g = g_diff.sum(axis=1)
    for k in reversed(range(len(model.backbone))):
        layer = model.backbone[k]
        x = inputs[k]
        if isinstance(layer, ConvLayer):
            grads[("conv", k)] = conv2d_backward_weights(g, x, layer)
            if k > 0:
                g = conv2d_backward_input(g, layer.weights, x.shape[1:], layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, MaxPool):
            g = maxpool2d_backward(g, argmaxes[k])
    return terms, grads


def loss_total(model: PrototypeModel, batch, weights: LossWeights = LossWeights()) -> LossTerms:
    """Cross-entropy plus weighted cluster and separation terms for ``batch = (images, labels)``."""
    images, labels = batch
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("empty batch")
    return loss_and_gradients(model, images, labels, weights, need_grads=False)[0]


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self, key, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update; with ``lr == 0`` the parameter is left untouched."""
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[key] = (m, v, t)
        if lr == 0:
            return
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype)


@dataclass
class TrainSchedule:
    total_epochs: int = 20
    push_every: int = 10
    last_layer_epochs_after_push: int = 20
    lr: float = 2e-3
    last_layer_lr: float = 1e-2
    lr_decay: float = 0.1
    lr_decay_every: int = 5
    batch_size: int = 50
    last_layer_l1: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < 0 or self.last_layer_epochs_after_push < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.push_every < 1 or self.lr_decay_every < 1 or self.batch_size < 1:
            raise ValueError("push_every, lr_decay_every and batch_size must be positive")
        if self.lr < 0 or self.last_layer_lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning rates must be >= 0 and lr_decay in (0, 1]")
        if self.total_epochs % self.push_every:
            raise ValueError(
                f"push_every={self.push_every} must divide total_epochs={self.total_epochs}"
            )


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # "joint" or "last_layer"
    total: float
    ce: float
    cluster: float
    separation: float
    accuracy: float


@dataclass
class PushRecord:
    image_ids: np.ndarray  # [n] source image id per prototype
    locations: np.ndarray  # [n,2] (row, col) of the source patch
    distances: np.ndarray  # [n] squared distance before projection


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    pushes: list = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, phase: str):
        super().__init__(f"non-finite loss at epoch {epoch} ({phase} phase)")
        self.epoch = epoch
        self.phase = phase


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def sgd_step(model: PrototypeModel, grads: dict, lr: float, opt: Adam | None = None) -> None:
    """Apply one update to backbone and prototypes (last layer untouched)."""
    opt = opt or Adam()
    opt.step("prototypes", model.prototypes, grads["prototypes"].astype(model.dtype), lr)
    for key, val in grads.items():
        if key == "prototypes":
            continue
        dw, db = val
        layer = model.backbone[key[1]]
        opt.step(("w", key[1]), layer.weights, dw.astype(layer.weights.dtype), lr)
        opt.step(("b", key[1]), layer.bias, db.astype(layer.bias.dtype), lr)


def _ce_and_grad(W, sims, labels, l1, off_class):
    logits = sims @ W.T
    probs, logp = _softmax(logits.astype(np.float64))
    rows = np.arange(len(labels))
    ce = -logp[rows, labels].mean()
    g = probs
    g[rows, labels] -= 1.0
    gW = (g.T @ sims.astype(np.float64)) / len(labels) + l1 * np.sign(W) * off_class
    return float(ce + l1 * np.abs(W * off_class).sum()), gW, logits


def train_last_layer(
    model: PrototypeModel,
    images: np.ndarray,
    labels,
    epochs: int,
    lr: float,
    batch_size: int = 50,
    l1: float = 1e-4,
    rng: np.random.Generator | None = None,
    report: TrainReport | None = None,
    epoch_index: int = 0,
) -> None:
    """Optimise the last layer alone with everything else frozen.

    Cross-entropy plus an L1 penalty on connections between a prototype and
    classes other than its own.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if epochs <= 0 or len(labels) == 0:
        return
    rng = rng or np.random.default_rng(0)
    sims = similarities_batch(model, images)
    off_class = (model.prototype_class[None, :] != np.arange(model.num_classes)[:, None]).astype(np.float64)
    opt = Adam()
    for e in range(epochs):
        losses = []
        for idx in _batches(len(labels), batch_size, rng):
            loss, gW, _ = _ce_and_grad(model.last_layer, sims[idx], labels[idx], l1, off_class)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch_index, "last_layer")
            opt.step("W", model.last_layer, gW.astype(model.last_layer.dtype), lr)
            losses.append(loss * len(idx))
        if report is not None:
            acc = float((linear_forward(sims, model.last_layer, model.last_bias).argmax(1) == labels).mean())
            ce = sum(losses) / len(labels)
            report.epochs.append(EpochRecord(epoch_index, "last_layer", ce, ce, float("nan"), float("nan"), acc))


def push_prototypes(model: PrototypeModel, dataset, batch_size: int = 256) -> PushRecord:
    """Replace every prototype by its nearest latent patch among same-class training images.

    Ties are broken by lower image id, then row-major patch position. The
    model is modified in place.
    """
    _check_model(model)
    images, labels, ids = _unpack(dataset)
    n = model.num_prototypes
    rec = PushRecord(np.zeros(n, np.int64), np.zeros((n, 2), np.int64), np.zeros(n, np.float64))
    z_all = features_batch(model, images, batch_size)
    h, w = z_all.shape[2:]
    new = model.prototypes.copy()
    for cls in np.unique(model.prototype_class):
        sel = np.flatnonzero(labels == cls)
        if sel.size == 0:
            raise ValueError(f"class {cls} has no training images to push onto")
        # order candidates by image id so the first minimum is the lowest id
        sel = sel[np.argsort(ids[sel], kind="stable")]
        z = z_all[sel]  # [Nc,D,H,W]
        for m in model.prototypes_of(cls):
            diff = z - model.prototypes[m][None, :, None, None]
            d = (diff * diff).sum(axis=1).reshape(-1)
            best = int(d.argmin())
            img, cell = divmod(best, h * w)
            r, c = divmod(cell, w)
            new[m] = z[img, :, r, c]
            rec.image_ids[m] = ids[sel[img]]
            rec.locations[m] = (r, c)
            rec.distances[m] = float(d[best])
    model.prototypes = new
    return rec


def _unpack(dataset):
    if hasattr(dataset, "images"):
        images = np.asarray(dataset.images)
        labels = np.asarray(dataset.labels, dtype=np.int64)
        ids = np.asarray(getattr(dataset, "ids", np.arange(len(labels))), dtype=np.int64)
    else:
        images, labels = dataset[0], dataset[1]
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.arange(len(labels))
    return images, labels, ids


def train(
    model: PrototypeModel,
    dataset,
    schedule: TrainSchedule = TrainSchedule(),
    weights: LossWeights = LossWeights(),
) -> TrainReport:
    """Three-stage training, in place. Deterministic given ``schedule.seed``."""
    _check_model(model)
    images, labels, _ = _unpack(dataset)
    _check_labels(model, labels)
    report = TrainReport()
    if schedule.total_epochs == 0:
        return report
    rng = np.random.default_rng(schedule.seed)
    opt = Adam()
    for epoch in range(schedule.total_epochs):
        lr = schedule.lr * schedule.lr_decay ** (epoch // schedule.lr_decay_every)
        sums = np.zeros(4)
        correct = 0
        for idx in _batches(len(labels), schedule.batch_size, rng):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    terms, grads = loss_and_gradients(model, images[idx], labels[idx], weights)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, "joint") from exc
            if not np.isfinite(terms.total):
                raise TrainingDiverged(epoch, "joint")
            sgd_step(model, grads, lr, opt)
            sums += np.array(terms) * len(idx)
        preds = predict(model, images)
        correct = int((preds == labels).sum())
        t = sums / len(labels)
        report.epochs.append(EpochRecord(epoch, "joint", *map(float, t), correct / len(labels)))
        log.info("epoch %d joint loss %.4f acc %.3f", epoch, t[0], correct / len(labels))
        if (epoch + 1) % schedule.push_every == 0:
            report.pushes.append(push_prototypes(model, dataset))
            train_last_layer(
                model, images, labels, schedule.last_layer_epochs_after_push, schedule.last_layer_lr,
                schedule.batch_size, schedule.last_layer_l1, rng, report, epoch,
            )
    return report


def prune_prototypes(
    model: PrototypeModel,
    indices,
    retrain_last_layer: bool = False,
    dataset=None,
    schedule: TrainSchedule = TrainSchedule(),
) -> PrototypeModel:
    """Return a copy without the given prototypes (and their last-layer columns)."""
    indices = np.unique(np.asarray(indices, dtype=np.int64))
    if indices.size and (indices.min() < 0 or indices.max() >= model.num_prototypes):
        raise IndexError(f"prototype indices out of range [0, {model.num_prototypes})")
    keep = np.setdiff1d(np.arange(model.num_prototypes), indices)
    for cls in np.unique(model.prototype_class):
        if not (model.prototype_class[keep] == cls).any():
            raise ValueError(f"pruning would remove every prototype of class {cls}")
    pruned = model.copy()
    pruned.prototypes = pruned.prototypes[keep]
    pruned.prototype_class = pruned.prototype_class[keep]
    pruned.last_layer = np.ascontiguousarray(pruned.last_layer[:, keep])
    if retrain_last_layer:
        if dataset is None:
            raise ValueError("retraining the last layer needs a dataset")
        images, labels, _ = _unpack(dataset)
        train_last_layer(
            pruned, images, labels, schedule.last_layer_epochs_after_push, schedule.last_layer_lr,
            schedule.batch_size, schedule.last_layer_l1, np.random.default_rng(schedule.seed),
        )
    return pruned


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(model: PrototypeModel, path, extra: dict | None = None) -> None:
    """Write a directory of PTNS tensors plus ``manifest.json``."""
    os.makedirs(path, exist_ok=True)
    layers = []
    for k, layer in enumerate(model.backbone):
        if isinstance(layer, ConvLayer):
            ptns.save(os.path.join(path, f"conv{k}_weights.ptns"), layer.weights)
            ptns.save(os.path.join(path, f"conv{k}_bias.ptns"), layer.bias)
            layers.append({"type": "conv", "stride": layer.stride, "padding": layer.padding,
                           "weights": f"conv{k}_weights.ptns", "bias": f"conv{k}_bias.ptns"})
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu"})
        else:
            layers.append({"type": "maxpool", "window": layer.window, "stride": layer.stride})
    ptns.save(os.path.join(path, "prototypes.ptns"), model.prototypes)
    ptns.save(os.path.join(path, "last_layer.ptns"), model.last_layer)
    ptns.save(os.path.join(path, "last_bias.ptns"), model.last_bias)
    manifest = {
        "layers": layers,
        "prototype_class": [int(c) for c in model.prototype_class],
        "input_shape": list(model.input_shape),
        "eps": model.eps,
    }
    manifest.update(extra or {})
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[PrototypeModel, dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    backbone: list = []
    for spec in manifest["layers"]:
        if spec["type"] == "conv":
            backbone.append(ConvLayer(
                ptns.load(os.path.join(path, spec["weights"])),
                ptns.load(os.path.join(path, spec["bias"])),
                spec["stride"], spec["padding"],
            ))
        elif spec["type"] == "relu":
            backbone.append(ReLU())
        elif spec["type"] == "maxpool":
            backbone.append(MaxPool(spec["window"], spec["stride"]))
        else:
            raise ValueError(f"unknown layer type {spec['type']!r}")
    model = PrototypeModel(
        backbone=backbone,
        prototypes=ptns.load(os.path.join(path, "prototypes.ptns")),
        prototype_class=np.array(manifest["prototype_class"]),
        last_layer=ptns.load(os.path.join(path, "last_layer.ptns")),
        last_bias=ptns.load(os.path.join(path, "last_bias.ptns")),
        input_shape=tuple(manifest["input_shape"]),
        eps=manifest.get("eps", EPS),
    )
    return model, manifest
