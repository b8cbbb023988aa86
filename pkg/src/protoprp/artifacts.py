"""Synthetic traffic-sign-like datasets with Clever Hans and backdoor artifacts.

Five classes mirror the high-level LISA grouping (restriction, speed limit,
stop, warning, yield). Each image is a jittered, noisy rendering of the
class's canonical sign on a random background. The artifact is a yellow
square pasted below the sign centre.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ptns

CLASS_NAMES = ("restriction", "speed_limit", "stop", "warning", "yield")
RESTRICTION, SPEED_LIMIT, STOP, WARNING, YIELD = range(5)
MIN_IMAGE_SIZE = 16


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0, 1]
    labels: np.ndarray  # [N] training label (after any relabelling)
    artifact_flags: np.ndarray  # [N] bool
    orig_labels: np.ndarray  # [N] class the image was rendered from
    ids: np.ndarray  # [N] stable image ids
    artifact_boxes: np.ndarray  # [N,3] (row, col, size) of the square, -1 if none
    split: str = "train"
    seed: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        for name in ("labels", "artifact_flags", "orig_labels", "ids", "artifact_boxes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.images)

    def copy(self, **changes) -> "LabeledDataset":
        base = dict(
            images=self.images.copy(),
            labels=self.labels.copy(),
            artifact_flags=self.artifact_flags.copy(),
            orig_labels=self.orig_labels.copy(),
            ids=self.ids.copy(),
            artifact_boxes=self.artifact_boxes.copy(),
            split=self.split,
            seed=self.seed,
            history=list(self.history),
        )
        base.update(changes)
        return LabeledDataset(**base)

    def subset(self, mask) -> "LabeledDataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.artifact_flags[idx], self.orig_labels[idx],
            self.ids[idx], self.artifact_boxes[idx], self.split, self.seed, list(self.history),
        )


@dataclass
class ArtifactSpec:
    """Yellow-square artifact. ``size``/``offset`` of ``None`` mean the defaults
    for the image: side ``round(W/7)``, top-left at lower centre."""

    fraction: float = 1.0
    target_class: int = STOP
    relabel_to: int | None = None
    size: int | None = None
    color: tuple = (1.0, 1.0, 0.0)
    offset: tuple | None = None  # (row, col) of the top-left corner before jitter
    jitter: int = 2
    seed: int = 0

    def resolve(self, image_hw: tuple[int, int]) -> tuple[int, int, int]:
        h, w = image_hw
        size = self.size if self.size is not None else max(1, int(round(w / 7)))
        if self.offset is not None:
            r0, c0 = self.offset
        else:
            r0, c0 = int(round(0.69 * h)) - size // 2, (w - size) // 2
        if r0 - self.jitter < 0 or c0 - self.jitter < 0 or r0 + size + self.jitter > h or c0 + size + self.jitter > w:
            raise ValueError(f"artifact square (size {size} at {r0},{c0} +-{self.jitter}) leaves the {h}x{w} image")
        return size, r0, c0


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def _sign_masks(cls: int, yy, xx, r, rng):
    """Return a list of (mask, rgb) layers drawn in order for one sign."""
    red = np.array([0.85, 0.08, 0.1])
    white = np.array([0.95, 0.95, 0.95])
    black = np.array([0.05, 0.05, 0.05])
    yellow = np.array([0.95, 0.8, 0.1])
    ax, ay = np.abs(xx), np.abs(yy)
    if cls == RESTRICTION:
        # "do not enter": small red disc with a white bar
        r = 0.92 * r
        rad = np.sqrt(xx**2 + yy**2)
        bar = (ax <= 0.62 * r) & (ay <= 0.16 * r)
        return [(rad <= r, red), (bar, white)]
    if cls == SPEED_LIMIT:
        outer = (ax <= 0.72 * r) & (ay <= r)
        inner = (ax <= 0.6 * r) & (ay <= 0.88 * r)
        text = inner & (ax <= 0.45 * r) & ((np.abs(yy + 0.3 * r) < 0.12 * r) | (np.abs(yy - 0.25 * r) < 0.2 * r))
        return [(outer, black), (inner, white), (text, black)]
    if cls == STOP:
        r = 1.03 * r
        octagon = (ax <= r) & (ay <= r) & (ax + ay <= 1.42 * r)
        text = (ax <= 0.62 * r) & (ay <= 0.16 * r)
        return [(octagon, red), (text, white)]
    if cls == WARNING:
        diamond = ax + ay <= 1.15 * r
        inner = ax + ay <= 0.95 * r
        mark = (ax <= 0.1 * r) & (ay <= 0.45 * r)
        return [(diamond, black), (inner, yellow), (mark, black)]
    if cls == YIELD:
        top, tip = -0.75 * r, 0.95 * r
        tri = (yy >= top) & (ax <= (tip - yy) * 0.62)
        inner = (yy >= top + 0.28 * r) & (ax <= (tip - 0.4 * r - yy) * 0.62)
        return [(tri, red), (inner, white)]
    raise ValueError(f"unknown class {cls}")


def render_sign(cls: int, image_size: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    s = image_size
    base = rng.uniform(0.15, 0.65, size=3)
    grad = rng.uniform(-0.15, 0.15, size=3)
    ramp = np.linspace(-0.5, 0.5, s)
    img = base[:, None, None] + grad[:, None, None] * ramp[None, :, None] * np.ones((1, 1, s))
    cy = (s - 1) / 2 + rng.uniform(-1.5, 1.5) - 0.08 * s
    cx = (s - 1) / 2 + rng.uniform(-1.5, 1.5)
    r = s * 0.3 * rng.uniform(0.95, 1.05)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    yy, xx = yy - cy, xx - cx
    for mask, rgb in _sign_masks(cls, yy, xx, r, rng):
        img[:, mask] = rgb[:, None]
    img *= rng.uniform(0.8, 1.1)
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_base_dataset(
    num_classes: int = 5,
    per_class: int = 100,
    image_size: int = 32,
    seed: int = 0,
    split: str = "train",
    noise: float = 0.05,
) -> LabeledDataset:
    """Render ``per_class`` images for each class, class-major, ids ``0..N-1``."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size {image_size} too small; need >= {MIN_IMAGE_SIZE}")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.empty((n, 3, image_size, image_size), np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        images[i] = render_sign(int(c), image_size, rng, noise)
    return LabeledDataset(
        images=images,
        labels=labels.astype(np.int64),
        artifact_flags=np.zeros(n, bool),
        orig_labels=labels.astype(np.int64),
        ids=np.arange(n, dtype=np.int64),
        artifact_boxes=np.full((n, 3), -1, np.int64),
        split=split,
        seed=seed,
    )


# ----------------------------------------------------------------------------
# injection
# ----------------------------------------------------------------------------


def _select(ds: LabeledDataset, spec: ArtifactSpec) -> np.ndarray:
    if not 0.0 <= spec.fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {spec.fraction}")
    cand = np.flatnonzero(ds.orig_labels == spec.target_class)
    cand = cand[np.argsort(ds.ids[cand], kind="stable")]
    k = _round_half_up(spec.fraction * len(cand))
    rng = np.random.default_rng([spec.seed, spec.target_class, 0xA5])
    return np.sort(cand[rng.permutation(len(cand))[:k]])


def paste_square(image: np.ndarray, spec: ArtifactSpec, image_id: int) -> tuple[np.ndarray, tuple]:
    size, r0, c0 = spec.resolve(image.shape[1:])
    rng = np.random.default_rng([spec.seed, int(image_id), 0x5A])
    dr, dc = rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0)
    r, c = int(r0 + dr), int(c0 + dc)
    out = image.copy()
    out[:, r : r + size, c : c + size] = np.asarray(spec.color, np.float32)[:, None, None]
    return out, (r, c, size)


def _inject(ds: LabeledDataset, spec: ArtifactSpec, relabel: bool, indices=None) -> LabeledDataset:
    out = ds.copy()
    chosen = _select(ds, spec) if indices is None else indices
    for i in chosen:
        out.images[i], box = paste_square(ds.images[i], spec, ds.ids[i])
        out.artifact_boxes[i] = box
        out.artifact_flags[i] = True
        if relabel:
            out.labels[i] = spec.relabel_to
    out.history.append({"op": "backdoor" if relabel else "clever_hans", **asdict(spec)})
    return out


def insert_clever_hans(ds: LabeledDataset, spec: ArtifactSpec) -> LabeledDataset:
    """Paste the square on ``round(p * |class c|)`` class-c images; labels unchanged."""
    if spec.relabel_to is not None:
        raise ValueError("clever hans artifacts keep labels; relabel_to must be unset")
    return _inject(ds, spec, relabel=False)


def insert_backdoor(ds: LabeledDataset, spec: ArtifactSpec) -> LabeledDataset:
    """Paste the square on selected class-c images and relabel them to ``spec.relabel_to``."""
    if spec.relabel_to is None:
        raise ValueError("backdoor needs relabel_to")
    if spec.relabel_to == spec.target_class:
        raise ValueError("relabel_to must differ from the target class")
    return _inject(ds, spec, relabel=True)


def make_test_variants(base_test: LabeledDataset, spec: ArtifactSpec):
    """Artifact test (square on every class-c image) and clean test (no square)."""
    if not (base_test.orig_labels == spec.target_class).any():
        raise ValueError(f"test set has no images of class {spec.target_class}")
    clean = base_test.copy(split="clean-test")
    art_spec = replace(spec, fraction=1.0, relabel_to=None)
    artifact = insert_clever_hans(base_test, art_spec)
    artifact.split = "artifact-test"
    return artifact, clean


PRESETS = {
    "clean": ("clever_hans", 0.0),
    "CH-100": ("clever_hans", 1.0),
    "CH-50": ("clever_hans", 0.5),
    "CH-20": ("clever_hans", 0.2),
    "BD-15": ("backdoor", 0.15),
}


def make_preset(
    name: str,
    per_class: int = 100,
    test_per_class: int = 60,
    image_size: int = 32,
    seed: int = 0,
    target_class: int = STOP,
    relabel_to: int = SPEED_LIMIT,
):
    """Train set plus artifact/clean test sets for a named scenario."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kind, p = PRESETS[name]
    ss = np.random.SeedSequence(seed).spawn(3)
    train_seed, test_seed, art_seed = (int(s.generate_state(1)[0]) for s in ss)
    train = gen_base_dataset(5, per_class, image_size, train_seed, "train")
    test = gen_base_dataset(5, test_per_class, image_size, test_seed, "test")
    spec = ArtifactSpec(fraction=p, target_class=target_class, seed=art_seed)
    if kind == "backdoor":
        train = insert_backdoor(train, replace(spec, relabel_to=relabel_to))
    else:
        train = insert_clever_hans(train, spec)
    artifact_test, clean_test = make_test_variants(test, spec)
    return train, artifact_test, clean_test, spec


# ----------------------------------------------------------------------------
# directory format
# ----------------------------------------------------------------------------


def save_dataset(ds: LabeledDataset, path, extra: dict | None = None) -> None:
    """``images/<id>.ptns``, ``labels.csv`` (id,label,artifact_flag) and ``manifest.json``."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    for img, i in zip(ds.images, ds.ids):
        ptns.save(os.path.join(path, "images", f"{int(i):05d}.ptns"), img)
    with open(os.path.join(path, "labels.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "label", "artifact_flag"])
        for i, lab, flag in zip(ds.ids, ds.labels, ds.artifact_flags):
            wr.writerow([int(i), int(lab), int(bool(flag))])
    manifest = {
        "split": ds.split,
        "seed": int(ds.seed),
        "history": ds.history,
        "orig_labels": [int(v) for v in ds.orig_labels],
        "artifact_boxes": ds.artifact_boxes.tolist(),
        "class_names": list(CLASS_NAMES),
        "input_domain": {"low": [0.0, 0.0, 0.0], "high": [1.0, 1.0, 1.0]},
    }
    manifest.update(extra or {})
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_labels_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, labels, flags = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
            flags.append(bool(int(row["artifact_flag"])))
    return np.array(ids, np.int64), np.array(labels, np.int64), np.array(flags, bool)


def load_dataset(path) -> LabeledDataset:
    ids, labels, flags = read_labels_csv(os.path.join(path, "labels.csv"))
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    images = np.stack([ptns.load(os.path.join(path, "images", f"{i:05d}.ptns")) for i in ids])
    return LabeledDataset(
        images=images,
        labels=labels,
        artifact_flags=flags,
        orig_labels=np.array(manifest.get("orig_labels", labels), np.int64),
        ids=ids,
        artifact_boxes=np.array(manifest.get("artifact_boxes", [[-1, -1, -1]] * len(ids)), np.int64),
        split=manifest.get("split", "train"),
        seed=manifest.get("seed", 0),
        history=manifest.get("history", []),
    )
