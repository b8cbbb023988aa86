"""``proto-prp`` command line: data generation, training, explanation, evaluation, clustering.

Every command reads one JSON config (all fields optional, unknown keys
rejected) plus ``--section.field=value`` overrides, writes its outputs under
``output_dir`` and records a ``run.json`` with the resolved config and
SHA-256 hashes of its inputs and outputs.

Seeds: each stage draws ``SeedSequence([seed, STAGE_IDS[stage]])`` and uses
the first 32-bit word of its state, so stages are independent of each other
and of the order commands run in.

Layout under ``output_dir``::

    data/{train,artifact-test,clean-test}/   images/*.ptns, labels.csv, manifest.json
    checkpoint/                              PTNS tensors + manifest.json, train_log.csv
    maps/<method>/                           <id>_p<m>.ptns|png (prp, upsample), <id>.ptns|png (spray-lrp), labels.csv
    eval/                                    ordering.csv|json, prune.csv|json, accuracy.json
    cluster/<method>/                        clusters.csv, metrics.json

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import hashlib
import json
import logging
import os
import sys
import typing
from dataclasses import asdict, dataclass, field

import numpy as np

from . import artifacts, ptns
from .evaluation import accuracy, dump_json, ordering_experiment, pruning_matrix, write_curves_csv
from .model import (
    LossWeights,
    TrainingDiverged,
    TrainSchedule,
    build_model,
    forward,
    load_checkpoint,
    predict,
    prune_prototypes,
    save_checkpoint,
    train,
)
from .mvclust import (
    build_views,
    coreg_consensus_cluster,
    make_result,
    spectral_cluster,
    write_cluster_outputs,
)
from .prp import prp_maps, protopnet_heatmap, render_png, spray_lrp_map

log = logging.getLogger("protoprp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
STAGE_IDS = {"data": 0, "model": 1, "train": 2, "explain": 3, "eval": 4, "cluster": 5}
SPLITS = ("train", "artifact-test", "clean-test")
THREADS_ENV = "PROTO_PRP_THREADS"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


@dataclass
class DataConfig:
    preset: str = "CH-50"
    per_class: int = 100
    test_per_class: int = 60
    image_size: int = 64
    target_class: int = artifacts.STOP
    relabel_to: int = artifacts.SPEED_LIMIT


@dataclass
class ModelConfig:
    prototypes_per_class: int = 10
    widths: list = field(default_factory=lambda: [16, 32, 32])
    eps: float = 1e-4


@dataclass
class TrainConfig:
    total_epochs: int = 20
    push_every: int = 10
    last_layer_epochs_after_push: int = 20
    lr: float = 2e-3
    last_layer_lr: float = 1e-2
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    batch_size: int = 50
    last_layer_l1: float = 1e-4
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08


@dataclass
class ExplainConfig:
    method: str = "prp"  # prp | upsample | spray-lrp
    split: str = "train"
    class_index: int = artifacts.STOP
    prototypes: typing.Optional[list] = None  # default: every prototype of class_index
    image_ids: typing.Optional[list] = None  # default: every image of class_index
    max_images: typing.Optional[int] = None
    eps: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.0
    png: bool = True


@dataclass
class EvalConfig:
    test: str = "ordering"  # ordering | prune | accuracy
    split: str = "clean-test"
    class_index: int = artifacts.STOP
    target: str = "similarity"  # ordering score: similarity | class
    steps: int = 20
    max_images: typing.Optional[int] = 50
    methods: list = field(default_factory=lambda: ["prp", "upsample", "random"])
    retrain: bool = True  # prune: retrain the last layer after removing the highest-drop pair


@dataclass
class ClusterConfig:
    method: str = "coreg"  # coreg | spray-prp | spray-lrp
    maps_dir: typing.Optional[str] = None  # default: <output_dir>/maps/<prp|spray-lrp>
    k: int = 2
    lambda_coreg: float = 0.01
    max_iter: int = 50
    tol: float = 1e-4
    consensus_view: str = "concat"  # concat | auto | view index as a string
    sigma_scale: float = 1.0
    normalize: typing.Optional[str] = "l2"
    view_size: list = field(default_factory=lambda: [80, 80])


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def sub_seed(self, stage: str) -> int:
        return int(np.random.SeedSequence([self.seed, STAGE_IDS[stage]]).generate_state(1)[0])

    def to_dict(self) -> dict:
        return asdict(self)


CHOICES = {
    "data.preset": tuple(artifacts.PRESETS),
    "explain.method": ("prp", "upsample", "spray-lrp"),
    "explain.split": SPLITS,
    "eval.test": ("ordering", "prune", "accuracy"),
    "eval.split": SPLITS,
    "eval.target": ("similarity", "class"),
    "cluster.method": ("coreg", "spray-prp", "spray-lrp"),
    "cluster.normalize": (None, "l2"),
}


def _check_type(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return value
        return _check_type(value, next(a for a in args if a is not type(None)), path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(prefix + key, "unknown key")
    kwargs = {}
    for name in names & set(data):
        path, tp, value = prefix + name, hints[name], data[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path + ".")
        else:
            kwargs[name] = _check_type(value, tp, path)
            if path in CHOICES and kwargs[name] not in CHOICES[path]:
                raise ConfigError(path, f"{kwargs[name]!r} not one of {list(CHOICES[path])}")
    return cls(**kwargs)


def _set_path(doc: dict, path: str, value) -> None:
    keys = path.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot override inside a non-object value")
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Read a JSON config and apply ``key=value`` overrides (values parsed as JSON when possible)."""
    doc: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(path, f"invalid JSON: {exc}") from None
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like --key=value")
        _set_path(doc, key, _parse_value(raw))
    cfg = _build(RunConfig, doc)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.data.per_class < 1:
        raise ConfigError("data.per_class", "must be >= 1")
    if cfg.data.test_per_class < 1:
        raise ConfigError("data.test_per_class", "must be >= 1")
    if cfg.model.prototypes_per_class < 1:
        raise ConfigError("model.prototypes_per_class", "must be >= 1")
    if cfg.eval.steps < 2:
        raise ConfigError("eval.steps", "must be >= 2")
    for m in cfg.eval.methods:
        if m not in ("prp", "upsample", "random"):
            raise ConfigError("eval.methods", f"unknown method {m!r}")
    if cfg.cluster.k < 2:
        raise ConfigError("cluster.k", "must be >= 2")
    if cfg.cluster.sigma_scale <= 0:
        raise ConfigError("cluster.sigma_scale", "must be positive")
    cv = cfg.cluster.consensus_view
    if cv not in ("concat", "auto") and not cv.isdigit():
        raise ConfigError("cluster.consensus_view", "must be 'concat', 'auto' or a view index")
    if len(cfg.cluster.view_size) != 2:
        raise ConfigError("cluster.view_size", "must be [height, width]")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(path: str) -> str:
    """Content hash of a file or of a directory (relative paths and file hashes, sorted)."""
    if os.path.isfile(path):
        return sha256_file(path)
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path).replace(os.sep, "/")
            if rel == "run.json":
                continue
            h.update(f"{rel}\0{sha256_file(full)}\n".encode())
    return h.hexdigest()


def write_run_json(stage_dir: str, command: str, cfg: RunConfig, inputs: dict, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "inputs": {name: tree_hash(p) for name, p in sorted(inputs.items())},
        "outputs": tree_hash(stage_dir),
    }
    doc.update(extra or {})
    dump_json(doc, os.path.join(stage_dir, "run.json"))


def _paths(cfg: RunConfig) -> dict:
    out = cfg.output_dir
    return {
        "data": os.path.join(out, "data"),
        "checkpoint": os.path.join(out, "checkpoint"),
        "maps": os.path.join(out, "maps"),
        "eval": os.path.join(out, "eval"),
        "cluster": os.path.join(out, "cluster"),
    }


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found at {path}; run the earlier pipeline step first")


def _schedule(cfg: RunConfig) -> TrainSchedule:
    t = cfg.train
    try:
        return TrainSchedule(
            total_epochs=t.total_epochs, push_every=t.push_every,
            last_layer_epochs_after_push=t.last_layer_epochs_after_push, lr=t.lr,
            last_layer_lr=t.last_layer_lr, lr_decay=t.lr_decay, lr_decay_every=t.lr_decay_every,
            batch_size=t.batch_size, last_layer_l1=t.last_layer_l1, seed=cfg.sub_seed("train"),
        )
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None


def _select_images(ds, class_index: int, image_ids, max_images):
    if image_ids is not None:
        pos = {int(i): k for k, i in enumerate(ds.ids)}
        missing = [i for i in image_ids if int(i) not in pos]
        if missing:
            raise ConfigError("explain.image_ids", f"ids {missing} not in dataset")
        sel = np.array([pos[int(i)] for i in image_ids], np.int64)
    else:
        sel = np.flatnonzero(ds.orig_labels == class_index)
    return sel if max_images is None else sel[:max_images]


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> str:
    d = cfg.data
    out = _paths(cfg)["data"]
    try:
        train_ds, art, clean, spec = artifacts.make_preset(
            d.preset, per_class=d.per_class, test_per_class=d.test_per_class, image_size=d.image_size,
            seed=cfg.sub_seed("data"), target_class=d.target_class, relabel_to=d.relabel_to,
        )
    except ValueError as exc:
        raise ConfigError("data", str(exc)) from None
    extra = {"preset": d.preset, "spec": asdict(spec)}
    for ds in (train_ds, art, clean):
        artifacts.save_dataset(ds, os.path.join(out, ds.split), extra)
    write_run_json(out, "gen-data", cfg, {})
    log.info("wrote %d/%d/%d images to %s", len(train_ds), len(art), len(clean), out)
    return out


def cmd_train(cfg: RunConfig) -> str:
    p = _paths(cfg)
    data_dir = os.path.join(p["data"], "train")
    _require(data_dir, "training data")
    ds = artifacts.load_dataset(data_dir)
    m = cfg.model
    model = build_model(
        num_classes=len(artifacts.CLASS_NAMES), prototypes_per_class=m.prototypes_per_class,
        input_shape=tuple(ds.images.shape[1:]), widths=tuple(m.widths), seed=cfg.sub_seed("model"), eps=m.eps,
    )
    schedule = _schedule(cfg)
    try:
        weights = LossWeights(cfg.train.lambda_clst, cfg.train.lambda_sep)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
    report = train(model, ds, schedule, weights)
    out = p["checkpoint"]
    save_checkpoint(model, out, {"schedule": asdict(schedule), "seed": cfg.seed,
                                 "loss_weights": asdict(weights)})
    rows = report.to_rows()
    with open(os.path.join(out, "train_log.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["epoch"], lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    write_run_json(out, "train", cfg, {"data": data_dir})
    return out


def _load_split(cfg: RunConfig, split: str):
    path = os.path.join(_paths(cfg)["data"], split)
    _require(path, f"{split} data")
    return artifacts.load_dataset(path), path


def _load_model(cfg: RunConfig):
    path = _paths(cfg)["checkpoint"]
    _require(path, "checkpoint")
    return load_checkpoint(path)[0], path


def cmd_explain(cfg: RunConfig) -> str:
    e = cfg.explain
    model, ckpt = _load_model(cfg)
    ds, data_dir = _load_split(cfg, e.split)
    if not 0 <= e.class_index < model.num_classes:
        raise ConfigError("explain.class_index", f"out of range for {model.num_classes} classes")
    protos = list(model.prototypes_of(e.class_index)) if e.prototypes is None else [int(v) for v in e.prototypes]
    for v in protos:
        if not 0 <= v < model.num_prototypes:
            raise ConfigError("explain.prototypes", f"prototype {v} out of range")
    sel = _select_images(ds, e.class_index, e.image_ids, e.max_images)
    out = os.path.join(_paths(cfg)["maps"], e.method)
    os.makedirs(out, exist_ok=True)
    for i in sel:
        img, iid = ds.images[i], int(ds.ids[i])
        trace = forward(model, img)[3]
        if e.method == "spray-lrp":
            named = [(f"{iid:05d}", spray_lrp_map(model, img, e.class_index, alpha=e.alpha, beta=e.beta,
                                                  eps=e.eps, trace=trace).values)]
        elif e.method == "prp":
            maps = prp_maps(model, img, protos, alpha=e.alpha, beta=e.beta, eps=e.eps, trace=trace)
            named = [(f"{iid:05d}_p{m:03d}", r.values) for m, r in zip(protos, maps)]
        else:
            named = [(f"{iid:05d}_p{m:03d}", protopnet_heatmap(model, img, m, trace).values) for m in protos]
        for stem, values in named:
            ptns.save(os.path.join(out, stem + ".ptns"), values)
            if e.png:
                render_png(values, os.path.join(out, stem + ".png"))
    with open(os.path.join(out, "labels.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "label", "artifact_flag"])
        for i in sel:
            wr.writerow([int(ds.ids[i]), int(ds.labels[i]), int(bool(ds.artifact_flags[i]))])
    write_run_json(out, "explain", cfg, {"checkpoint": ckpt, "data": data_dir},
                   {"prototypes": [int(v) for v in protos]})
    return out


def cmd_eval(cfg: RunConfig) -> str:
    e = cfg.eval
    model, ckpt = _load_model(cfg)
    ds, data_dir = _load_split(cfg, e.split)
    out = _paths(cfg)["eval"]
    os.makedirs(out, exist_ok=True)
    inputs = {"checkpoint": ckpt, "data": data_dir}
    if e.test == "ordering":
        sel = np.flatnonzero(ds.orig_labels == e.class_index)
        if e.max_images is not None:
            sel = sel[: e.max_images]
        if sel.size == 0:
            raise ConfigError("eval.class_index", "no images of this class in the split")
        res = ordering_experiment(
            model, ds.images[sel], model.prototypes_of(e.class_index), target_kind=e.target,
            class_index=e.class_index, methods=e.methods, steps=e.steps, seed=cfg.sub_seed("eval"),
        )
        write_curves_csv(res.averaged, os.path.join(out, "ordering.csv"))
        dump_json({"auc": res.aucs(), "image_ids": [int(v) for v in ds.ids[sel]], "target": e.target},
                  os.path.join(out, "ordering.json"))
    elif e.test == "prune":
        dm = pruning_matrix(model, ds, e.class_index)
        dm.to_csv(os.path.join(out, "prune.csv"))
        summary = dm.to_dict()
        pair = dm.highest_pair()
        summary["highest_pair"] = [int(v) for v in pair]
        if e.retrain:
            train_ds, train_dir = _load_split(cfg, "train")
            inputs["train"] = train_dir
            pruned = prune_prototypes(model, list(pair), retrain_last_layer=True, dataset=train_ds,
                                      schedule=_schedule(cfg))
            sel = ds.orig_labels == e.class_index
            summary["accuracy_before"] = float(np.mean(predict(model, ds.images[sel]) == e.class_index))
            summary["accuracy_after_retrain"] = float(np.mean(predict(pruned, ds.images[sel]) == e.class_index))
        dump_json(summary, os.path.join(out, "prune.json"))
    else:
        dump_json(accuracy(model, ds).to_dict(), os.path.join(out, "accuracy.json"))
    write_run_json(out, f"eval-{e.test}", cfg, inputs)
    return out


def _read_maps(maps_dir: str, per_prototype: bool):
    labels_path = os.path.join(maps_dir, "labels.csv")
    _require(labels_path, "map labels")
    ids, labels, flags = artifacts.read_labels_csv(labels_path)
    stacks = []
    for iid in ids:
        if per_prototype:
            files = sorted(glob.glob(os.path.join(maps_dir, f"{iid:05d}_p*.ptns")))
            if not files:
                raise FileNotFoundError(f"no maps for image {iid} in {maps_dir}")
            stacks.append(np.stack([ptns.load(f) for f in files]))
        else:
            stacks.append(ptns.load(os.path.join(maps_dir, f"{iid:05d}.ptns")))
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        raise ValueError(f"maps in {maps_dir} have mixed shapes {sorted(shapes)}")
    return ids, flags, np.stack(stacks)


def cmd_cluster(cfg: RunConfig) -> str:
    c = cfg.cluster
    per_proto = c.method != "spray-lrp"
    maps_dir = c.maps_dir or os.path.join(_paths(cfg)["maps"], "prp" if per_proto else "spray-lrp")
    ids, flags, maps = _read_maps(maps_dir, per_proto)
    size = tuple(c.view_size)
    seed = cfg.sub_seed("cluster")
    if c.method == "coreg":
        views = build_views(maps, "per_prototype", flags, size=size, normalize=c.normalize)
        res = coreg_consensus_cluster(
            views, k=c.k, lambda_coreg=c.lambda_coreg, max_iter=c.max_iter, tol=c.tol,
            consensus_view=int(c.consensus_view) if c.consensus_view.isdigit() else c.consensus_view,
            sigma_scale=c.sigma_scale, seed=seed,
        )
        diag = {"consensus_view": res.consensus_view, "iterations": res.iterations,
                "converged": res.converged, "objective": res.objective,
                "view_scores": res.view_scores, "agreement": res.agreement}
        result = make_result(res.assignment, flags, "coreg", diag)
    else:
        mode = "summed_concat" if c.method == "spray-prp" else "lrp_single"
        view = build_views(maps, mode, flags, size=size, normalize=c.normalize).views[0]
        assignment = spectral_cluster(view, k=c.k, sigma_scale=c.sigma_scale, seed=seed)
        result = make_result(assignment, flags, c.method)
    out = os.path.join(_paths(cfg)["cluster"], c.method)
    write_cluster_outputs(result, ids, out)
    write_run_json(out, "cluster", cfg, {"maps": maps_dir})
    log.info("%s: acc %.4f f1 %.4f", c.method, result.acc, result.f1)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
}


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="proto-prp", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run config (defaults used for missing fields)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv: typing.Sequence[str] | None = None) -> int:
    args, rest = _parser().parse_known_args(argv)
    overrides = []
    for item in rest:
        if not item.startswith("--"):
            print(f"proto-prp: unexpected argument {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        overrides.append(item[2:])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides)
        limiter = _limit_threads()
        try:
            out = COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"proto-prp: config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, TrainingDiverged, np.linalg.LinAlgError) as exc:
        print(f"proto-prp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ptns.PTNSError) as exc:
        print(f"proto-prp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
