"""Relevance propagation for prototype networks.

A prototype's similarity score is pushed back to the input in four steps:

1. winner-take-all from the score to the arg-max cell of its activation map;
2. from that cell to the ``D`` latent channels, weighted by the inverse
   per-channel squared distance ``1 / (d_c + eps)``;
3. through the backbone: alpha-beta rule on conv layers, arg-max routing on
   max-pool layers, identity on ReLU;
4. the bounded-domain deep Taylor (z^B) rule on the first conv layer.

Every rule here accepts relevance with extra leading axes (one slice per
prototype) against a single forward pass, so several prototypes of the
same image are propagated together. Bias terms never receive relevance and
any ``0/0`` ratio counts as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .model import MaxPool, PrototypeModel, ReLU, forward
from .tensor import (
    ConvLayer,
    PoolArgmax,
    ShapeError,
    bilinear_upsample,
    conv2d_backward_input,
    conv2d_forward,
)

__all__ = [
    "STAGES",
    "RelevanceMap",
    "InputDomain",
    "relevance_similarity_to_activation",
    "relevance_activation_to_conv",
    "lrp_alphabeta",
    "lrp_maxpool",
    "lrp_epsilon",
    "dtd_zB",
    "prp_map",
    "prp_maps",
    "protopnet_heatmap",
    "spray_lrp_map",
    "render_png",
    "to_rgb",
]

EPS = 1e-4
STAGES = ("similarity", "activation", "conv", "input")


@dataclass
class RelevanceMap:
    values: np.ndarray
    stage: str
    prototype_index: int | None = None
    class_index: int | None = None
    dropped: int = 0  # zero-denominator cells discarded by the input rule

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if not np.isfinite(self.values).all():
            raise FloatingPointError(f"non-finite relevance at stage {self.stage}")

    @property
    def total(self) -> float:
        return float(np.sum(self.values, dtype=np.float64))


@dataclass
class InputDomain:
    """Per-channel pixel bounds used by the z^B rule."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ValueError("low and high must be matching per-channel vectors")
        if np.any(self.low > self.high):
            raise ValueError("input domain needs low <= high in every channel")

    @classmethod
    def unit(cls, channels: int) -> "InputDomain":
        return cls(np.zeros(channels), np.ones(channels))

    @property
    def channels(self) -> int:
        return self.low.shape[0]


def _div0(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``num / den`` with zero wherever ``den == 0``."""
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape), dtype=np.result_type(num, den))
    np.divide(num, den, out=out, where=den != 0)
    return out


def _lead(rel: np.ndarray, core_ndim: int) -> tuple[np.ndarray, tuple]:
    """Flatten leading axes of ``rel`` so the core shape has ``core_ndim`` axes."""
    lead = rel.shape[: rel.ndim - core_ndim]
    return rel.reshape((-1,) + rel.shape[rel.ndim - core_ndim :]), lead


# ----------------------------------------------------------------------------
# prototype-specific stages
# ----------------------------------------------------------------------------


def _require_trace(trace):
    if trace is None or getattr(trace, "activations", None) is None:
        raise ValueError("a forward trace with activation maps is required")


def relevance_similarity_to_activation(trace, m: int, relevance: float | None = None) -> RelevanceMap:
    """Place the score relevance of prototype ``m`` on the arg-max cell of its map.

    ``relevance`` defaults to the similarity score ``s_m`` itself.
    """
    _require_trace(trace)
    n, h, w = trace.activations.shape
    if not 0 <= m < n:
        raise IndexError(f"prototype index {m} out of range for {n} prototypes")
    r = trace.similarities[m] if relevance is None else relevance
    out = np.zeros(h * w, dtype=trace.activations.dtype)
    out[trace.argmax[m]] = r
    return RelevanceMap(out.reshape(h, w), "activation", prototype_index=m)


def relevance_activation_to_conv(trace, m: int, rel: RelevanceMap, eps: float = EPS) -> RelevanceMap:
    """Split each activation cell's relevance across latent channels by ``1/(d_c + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _require_trace(trace)
    if rel.stage != "activation":
        raise ValueError(f"expected an activation-stage map, got {rel.stage!r}")
    d = trace.channel_distances[m]  # [D,H,W]
    if rel.values.shape != d.shape[1:]:
        raise ShapeError(f"relevance {rel.values.shape} does not match activation map {d.shape[1:]}")
    gamma = 1.0 / (d + eps)
    share = gamma / (gamma.sum(axis=0, keepdims=True) + eps)
    return RelevanceMap(share * rel.values[None], "conv", prototype_index=m)


# ----------------------------------------------------------------------------
# layer rules
# ----------------------------------------------------------------------------


def _pos(a):
    return np.maximum(a, 0)


def _neg(a):
    return np.minimum(a, 0)


def _check_alpha_beta(alpha: float, beta: float):
    if not np.isclose(alpha + beta, 1.0) or alpha < 1:
        raise ValueError(f"need alpha + beta == 1 and alpha >= 1, got alpha={alpha}, beta={beta}")


def _alphabeta_conv(x, layer: ConvLayer, rel, alpha, beta):
    w = layer.weights
    bare = lambda a, wt: conv2d_forward(a, ConvLayer(wt, np.zeros(wt.shape[0], wt.dtype), layer.stride, layer.padding))
    back = lambda g, wt: conv2d_backward_input(g, wt, x.shape, layer.stride, layer.padding)
    out_shape = bare(x, w).shape
    r, lead = _lead(rel, 3)
    if r.shape[1:] != out_shape:
        raise ShapeError(f"relevance {rel.shape[len(lead):]} does not match conv output {out_shape}")
    xp, xn, wp, wn = _pos(x), _neg(x), _pos(w), _neg(w)
    res = np.zeros((r.shape[0],) + x.shape, dtype=np.result_type(x, w, r))
    # positive contributions are x+ w+ and x- w-; negative ones x+ w- and x- w+
    for coef, pairs in ((alpha, ((xp, wp), (xn, wn))), (beta, ((xp, wn), (xn, wp)))):
        if coef == 0:
            continue
        zj = sum(bare(a, wt) for a, wt in pairs)
        s = _div0(r, zj[None])
        res += coef * sum(a[None] * back(s, wt) for a, wt in pairs)
    return res.reshape(lead + x.shape)


def _alphabeta_linear(x, weights, rel, alpha, beta):
    if weights.ndim != 2 or x.shape != (weights.shape[1],):
        raise ShapeError(f"linear input {x.shape} does not match weights {weights.shape}")
    r, lead = _lead(rel, 1)
    if r.shape[1] != weights.shape[0]:
        raise ShapeError(f"relevance {rel.shape} does not match {weights.shape[0]} outputs")
    z = weights * x[None, :]  # z_ij laid out [out, in]
    res = np.zeros((r.shape[0], x.shape[0]), dtype=np.result_type(x, weights, r))
    for coef, part in ((alpha, _pos(z)), (beta, _neg(z))):
        if coef == 0:
            continue
        res += coef * (_div0(r, part.sum(axis=1)[None]) @ part)
    return res.reshape(lead + x.shape)


def lrp_alphabeta(layer_input, layer, rel_out, alpha: float = 1.0, beta: float = 0.0) -> np.ndarray:
    """Alpha-beta rule ``R_i = sum_j (alpha z_ij+/z_j+ + beta z_ij-/z_j-) R_j``.

    ``layer`` is a :class:`ConvLayer` or a ``[out, in]`` weight matrix; the
    contributions are ``z_ij = x_i w_ij`` without bias. ``rel_out`` may carry
    extra leading axes.
    """
    _check_alpha_beta(alpha, beta)
    x = np.asarray(layer_input)
    rel = np.asarray(rel_out)
    if isinstance(layer, ConvLayer):
        if x.ndim != 3:
            raise ShapeError(f"conv layer input must be [C,H,W], got {x.shape}")
        return _alphabeta_conv(x, layer, rel, alpha, beta)
    return _alphabeta_linear(x, np.asarray(layer), rel, alpha, beta)


def lrp_maxpool(pool_argmax: PoolArgmax, rel_out) -> np.ndarray:
    """Send every pooled cell's relevance to the input cell that won the max."""
    rel = np.asarray(rel_out)
    idx = pool_argmax.indices
    r, lead = _lead(rel, idx.ndim)
    if r.shape[1:] != idx.shape:
        raise ShapeError(f"relevance {rel.shape} does not match pooled shape {idx.shape}")
    shape = tuple(pool_argmax.input_shape)
    c = int(np.prod(shape[:-2]))
    plane = shape[-2] * shape[-1]
    out = np.zeros((r.shape[0], c, plane), dtype=r.dtype)
    np.add.at(
        out,
        (np.arange(r.shape[0])[:, None, None], np.arange(c)[None, :, None], idx.reshape(1, c, -1)),
        r.reshape(r.shape[0], c, -1),
    )
    return out.reshape(lead + shape)


def lrp_epsilon(layer_input, weights, rel_out, eps: float = EPS) -> np.ndarray:
    """Epsilon rule for a linear layer: ``R_i = sum_j z_ij / (z_j + eps sign(z_j)) R_j``.

    ``sign(0)`` is taken as ``+1`` so a vanishing ``z_j`` stays finite.
    """
    x = np.asarray(layer_input)
    weights = np.asarray(weights)
    rel = np.asarray(rel_out)
    if weights.ndim != 2 or x.shape != (weights.shape[1],) or rel.shape[-1] != weights.shape[0]:
        raise ShapeError(f"input {x.shape}, weights {weights.shape}, relevance {rel.shape} mismatch")
    z = weights * x[None, :]
    zj = z.sum(axis=1)
    den = zj + eps * np.where(zj >= 0, 1.0, -1.0)
    return (rel / den) @ z


def dtd_zB(input_image, first_layer: ConvLayer, rel_out, domain: InputDomain) -> RelevanceMap:
    """Bounded-domain deep Taylor rule for the first conv layer.

    ``R_i = sum_j (z_ij - l_i w_ij+ - h_i w_ij-) / sum_i(...) R_j``. Zero
    padding sits outside the image and gets ``l = h = 0``, so it takes no
    relevance. Output cells whose denominator is exactly zero while holding
    relevance are dropped; their count is stored on the returned map.
    """
    x = np.asarray(input_image)
    if x.ndim != 3:
        raise ShapeError(f"input image must be [C,H,W], got {x.shape}")
    c = x.shape[0]
    if domain.channels != c:
        raise ShapeError(f"domain has {domain.channels} channels, image has {c}")
    lo = domain.low[:, None, None]
    hi = domain.high[:, None, None]
    tol = 1e-6
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise ValueError("image lies outside the input domain bounds")
    w = first_layer.weights.astype(np.float64)
    wp, wn = _pos(w), _neg(w)
    xd = x.astype(np.float64)
    low = np.broadcast_to(lo, x.shape)
    high = np.broadcast_to(hi, x.shape)

    def bare(a, wt):
        return conv2d_forward(a, ConvLayer(wt, np.zeros(wt.shape[0]), first_layer.stride, first_layer.padding))

    def back(g, wt):
        return conv2d_backward_input(g, wt, x.shape, first_layer.stride, first_layer.padding)

    zj = bare(xd, w) - bare(low, wp) - bare(high, wn)
    r, lead = _lead(np.asarray(rel_out, dtype=np.float64), 3)
    if r.shape[1:] != zj.shape:
        raise ShapeError(f"relevance {np.shape(rel_out)} does not match first layer output {zj.shape}")
    dropped = int(np.count_nonzero((zj[None] == 0) & (r != 0)))
    s = _div0(r, zj[None])
    res = xd[None] * back(s, w) - low[None] * back(s, wp) - high[None] * back(s, wn)
    res = res.reshape(lead + x.shape).astype(np.result_type(x.dtype, np.float32))
    return RelevanceMap(res, "input", dropped=dropped)


# ----------------------------------------------------------------------------
# pipelines
# ----------------------------------------------------------------------------


def _backbone_relevance(model: PrototypeModel, trace, rel_conv: np.ndarray, domain: InputDomain,
                        alpha: float, beta: float) -> RelevanceMap:
    """Propagate latent relevance ``[..., D, H, W]`` down to the input."""
    if not model.backbone or not isinstance(model.backbone[0], ConvLayer):
        raise ValueError("the backbone must start with a conv layer for the input rule")
    rel = rel_conv
    for k in range(len(model.backbone) - 1, 0, -1):
        layer = model.backbone[k]
        if isinstance(layer, ConvLayer):
            rel = lrp_alphabeta(trace.layer_inputs[k], layer, rel, alpha, beta)
        elif isinstance(layer, MaxPool):
            rel = lrp_maxpool(trace.pool_argmax[k], rel)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise TypeError(f"no relevance rule for backbone stage {layer!r}")
    return dtd_zB(trace.layer_inputs[0], model.backbone[0], rel, domain)


def _conv_relevance(trace, indices, scores, eps: float) -> np.ndarray:
    out = []
    for m, r in zip(indices, scores):
        act = relevance_similarity_to_activation(trace, m, r)
        out.append(relevance_activation_to_conv(trace, m, act, eps).values)
    return np.stack(out)


def _domain_for(model: PrototypeModel, domain: InputDomain | None) -> InputDomain:
    return InputDomain.unit(model.input_shape[0]) if domain is None else domain


def prp_maps(model: PrototypeModel, image, indices=None, *, domain: InputDomain | None = None,
             alpha: float = 1.0, beta: float = 0.0, eps: float = EPS, trace=None) -> list[RelevanceMap]:
    """Input-space relevance maps ``[C,H,W]`` of several prototypes of one image."""
    if trace is None:
        trace = forward(model, image)[3]
    n = model.num_prototypes
    indices = list(range(n)) if indices is None else [int(m) for m in indices]
    for m in indices:
        if not 0 <= m < n:
            raise IndexError(f"prototype index {m} out of range for {n} prototypes")
    if not indices:
        return []
    conv = _conv_relevance(trace, indices, trace.similarities[indices], eps)
    res = _backbone_relevance(model, trace, conv, _domain_for(model, domain), alpha, beta)
    # dropped counts are reported for the whole batch
    return [RelevanceMap(v, "input", prototype_index=m, dropped=res.dropped) for m, v in zip(indices, res.values)]


def prp_map(model: PrototypeModel, image, m: int, **kwargs) -> RelevanceMap:
    """Input-space relevance map of prototype ``m`` for one image."""
    return prp_maps(model, image, [m], **kwargs)[0]


def protopnet_heatmap(model: PrototypeModel, image, m: int, trace=None) -> RelevanceMap:
    """Baseline explanation: the activation map of ``m`` upsampled to the image size."""
    if trace is None:
        trace = forward(model, image)[3]
    if not 0 <= m < model.num_prototypes:
        raise IndexError(f"prototype index {m} out of range")
    up = bilinear_upsample(trace.activations[m], tuple(model.input_shape[1:]))
    return RelevanceMap(up, "input", prototype_index=m)


def spray_lrp_map(model: PrototypeModel, image, target_class: int, *, domain: InputDomain | None = None,
                  alpha: float = 1.0, beta: float = 0.0, eps: float = EPS, trace=None) -> RelevanceMap:
    """Class-level map: the logit is spread over similarity scores with the
    epsilon rule, each score follows its prototype path to the latent layer,
    and the summed latent relevance is propagated once through the backbone.
    """
    if not 0 <= target_class < model.num_classes:
        raise IndexError(f"class index {target_class} out of range for {model.num_classes} classes")
    if trace is None:
        trace = forward(model, image)[3]
    w = model.last_layer[target_class : target_class + 1]
    r_sim = lrp_epsilon(trace.similarities, w, trace.logits[target_class : target_class + 1], eps)
    idx = range(model.num_prototypes)
    conv = _conv_relevance(trace, idx, r_sim, eps).sum(axis=0)
    res = _backbone_relevance(model, trace, conv, _domain_for(model, domain), alpha, beta)
    return RelevanceMap(res.values, "input", class_index=target_class, dropped=res.dropped)


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def to_rgb(values) -> np.ndarray:
    """Diverging 8-bit rendering of a relevance map.

    Channels are summed, values are divided by the largest magnitude ``M``
    and each pixel gets ``q = floor(255 * (1 - |v| / M) + 0.5)``. Positive
    pixels become ``(255, q, q)``, negative ``(q, q, 255)``, zero is white.
    An all-zero map renders white.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v.sum(axis=0)
    if v.ndim != 2:
        raise ShapeError(f"expected [H,W] or [C,H,W], got {np.shape(values)}")
    peak = np.abs(v).max() if v.size else 0.0
    mag = np.abs(v) / peak if peak > 0 else np.zeros_like(v)
    q = np.floor(255 * (1 - mag) + 0.5).astype(np.uint8)
    full = np.full_like(q, 255)
    pos = np.stack([full, q, q], axis=-1)
    neg = np.stack([q, q, full], axis=-1)
    return np.where((v < 0)[..., None], neg, pos)


def render_png(values, path) -> None:
    Image.fromarray(to_rgb(values)).save(path, format="PNG", optimize=False)
