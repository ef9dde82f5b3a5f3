"""Command-line entry point.

Every command reads one flat key/value configuration (JSON file via
``--config``, overridden by ``--set key=value`` and the global flags),
writes its outputs under ``--out`` and echoes the resolved configuration
there as ``config.json``.

Exit codes: 0 success, 1 training abort or failed gradient check,
2 configuration error, 3 artifact error (checkpoint or feature file),
64 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .episodes import (FeatureFileError, SamplingError, Split, SyntheticConfig,
                       generate_synthetic_pool, load_feature_file, save_feature_file, task_episode)
from .graph import AdjacencyKind, MaskMode
from .models import (Consistency, HGNNModel, ModelConfig, Variant, compute_prototypes,
                     ignn_forward, pgnn_forward)
from .trainer import (DEFAULT_LR, FULL_SCALE_EPOCHS, FULL_SCALE_EVAL_TASKS, TrainConfig, TrainingAborted, ablate,
                      evaluate, train)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_USAGE = 0, 1, 2, 3, 64
GRADCHECK_MAX_DIM = 16
GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class ArtifactError(RuntimeError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(enum_cls):
    def parse(text):
        return enum_cls(str(text).lower()).value
    parse.__name__ = enum_cls.__name__
    return parse


def _optimizer(text) -> str:
    name = str(text).strip().lower()
    if name not in DEFAULT_LR:
        raise ValueError(f"choose one of {sorted(DEFAULT_LR)}")
    return name


def _int_list(text) -> str:
    values = [int(v) for v in str(text).split(",") if v.strip()]
    if not values:
        raise ValueError("empty list")
    return ",".join(map(str, values))


def _word_list(text) -> str:
    return ",".join(v.strip() for v in str(text).split(",") if v.strip())


_syn = SyntheticConfig()
_tr = TrainConfig()

# key -> (parser, default, help)
CONFIG_KEYS: dict[str, tuple] = {
    # data
    "data": (str, "", "feature file to read; empty means generate the synthetic pool from the keys below"),
    "n_train_classes": (int, _syn.n_train_classes, "synthetic: classes in the TRAIN split"),
    "n_val_classes": (int, _syn.n_val_classes, "synthetic: classes in the VAL split"),
    "n_test_classes": (int, _syn.n_test_classes, "synthetic: classes in the TEST split"),
    "records_per_class": (int, _syn.records_per_class, "synthetic: records per class"),
    "dim": (int, _syn.dim, "synthetic: feature dimension"),
    "intra_std": (float, _syn.intra_std, "synthetic: within-class standard deviation"),
    "inter_scale": (float, _syn.inter_scale, "synthetic: side of the hypercube holding class means"),
    "outlier_rate": (float, _syn.outlier_rate, "synthetic: probability a record is an outlier"),
    "outlier_scale": (float, _syn.outlier_scale, "synthetic: deviation multiplier for outliers"),
    "overlap_pairs": (int, _syn.overlap_pairs, "synthetic: class pairs pulled together per split"),
    "overlap_dist": (float, _syn.overlap_dist, "synthetic: distance between the means of an overlap pair"),
    # model
    "variant": (_choice(Variant), Variant.HGNN.value, "protonet | pgnn | ignn | hgnn | labelprop"),
    "adapter": (_bool, False, "learn a one-hidden-layer embedding adapter (identity otherwise)"),
    "embed_dim": (int, 0, "adapter output width; 0 keeps the input width"),
    "operator": (_choice(AdjacencyKind), AdjacencyKind.INNER_PRODUCT.value,
                 "adjacency: inner_product | concat_mlp | subtract_mlp"),
    "depth": (int, 1, "graph layers per GNN"),
    "slope": (float, 0.2, "leaky rectifier slope"),
    "squared_distance": (_bool, True, "squared Euclidean distance in the prototype classifier"),
    # training
    "epochs": (int, _tr.epochs, "training epochs"),
    "episodes_per_epoch": (int, _tr.episodes_per_epoch, "episodes per epoch"),
    "n_way": (int, _tr.n_way, "classes per episode"),
    "k_shot": (int, _tr.k_shot, "support records per class"),
    "q_queries": (int, _tr.q_queries, "query records per class"),
    "optimizer": (_optimizer, _tr.optimizer, "adam | sgd"),
    "lr_embedding": (float, 0.0, "learning rate of the adapter; 0 picks the optimizer default"),
    "lr_gnn": (float, 0.0, "learning rate of the GNNs; 0 picks the optimizer default"),
    "lr_halve_every": (int, _tr.lr_halve_every, "epochs between learning-rate halvings"),
    "momentum": (float, _tr.momentum, "SGD momentum"),
    "consistency": (_choice(Consistency), _tr.consistency.value, "none | l1 | mse | kl"),
    "mode": (_choice(MaskMode), _tr.mode.value, "inductive | transductive"),
    "val_tasks": (int, _tr.val_tasks, "validation tasks logged per epoch (0 disables)"),
    "full_scale": (_bool, False, "use 200 epochs and 10000 evaluation tasks unless set explicitly"),
    # evaluation and outputs
    "checkpoint": (str, "", "checkpoint path; empty means <out>/model.ckpt"),
    "eval_tasks": (int, 1000, "evaluation tasks"),
    "ablate_groups": (_word_list, "variants,consistency,depth", "variants, consistency, operator, depth"),
    "ablate_depths": (_int_list, "1,2,3", "depths for the depth group"),
    "export_task": (int, 0, "index of the test task projected by export-proj"),
    # gradient check
    "gradcheck_n_way": (int, 3, "gradcheck episode classes"),
    "gradcheck_k_shot": (int, 2, "gradcheck support records per class"),
    "gradcheck_q_queries": (int, 3, "gradcheck queries per class"),
    "gradcheck_dim": (int, 8, f"gradcheck feature dimension (at most {GRADCHECK_MAX_DIM})"),
    "gradcheck_eps": (float, 1e-5, "central-difference step"),
    "gradcheck_corrupt": (_bool, False, "test hook: perturb the analytic gradient (must then fail)"),
}


def resolve_config(file_values: dict, overrides: dict, seed: int | None) -> dict:
    """Defaults, then file values, then overrides; every key type-checked."""
    cfg = {key: spec[1] for key, spec in CONFIG_KEYS.items()}
    cfg["seed"] = 0
    explicit = set()
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key == "seed":
                cfg["seed"] = _parse_value("seed", int, raw)
                continue
            if key not in CONFIG_KEYS:
                raise ConfigError(key, "unknown key")
            cfg[key] = _parse_value(key, CONFIG_KEYS[key][0], raw)
            explicit.add(key)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["full_scale"]:
        if "epochs" not in explicit:
            cfg["epochs"] = FULL_SCALE_EPOCHS
        if "eval_tasks" not in explicit:
            cfg["eval_tasks"] = FULL_SCALE_EVAL_TASKS
    return cfg


def _parse_value(key: str, parser, raw):
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"bad value {raw!r} ({exc})") from None


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise ConfigError("config", f"{path} must hold a flat JSON object")
    for key, value in values.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(key, "nested values are not allowed")
    return values


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(key or pair, "overrides take the form key=value")
        out[key.strip()] = value
    return out


# ------------------------------------------------------------ config -> objects

def synthetic_config(cfg: dict) -> SyntheticConfig:
    fields = {f.name for f in dataclasses.fields(SyntheticConfig)}
    syn = SyntheticConfig(**{k: cfg[k] for k in fields})
    try:
        syn.validate()
    except ValueError as exc:
        raise ConfigError(_guess_key(str(exc), fields), str(exc)) from None
    return syn


def _guess_key(message: str, candidates) -> str:
    return next((k for k in sorted(candidates, key=len, reverse=True) if k in message), "config")


def _sampling_error(exc: SamplingError, store, cfg: dict, split=Split.TRAIN) -> ConfigError:
    """Blame n_way when the split is too small, else the per-class record demand."""
    key = "n_way" if len(store.classes(split)) < cfg["n_way"] else "k_shot"
    return ConfigError(key, f"{exc} (k_shot + q_queries records per class)" if key == "k_shot" else str(exc))


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["epochs"], episodes_per_epoch=cfg["episodes_per_epoch"], n_way=cfg["n_way"],
            k_shot=cfg["k_shot"], q_queries=cfg["q_queries"], optimizer=cfg["optimizer"],
            lr_embedding=cfg["lr_embedding"] or None, lr_gnn=cfg["lr_gnn"] or None,
            lr_halve_every=cfg["lr_halve_every"], momentum=cfg["momentum"], seed=cfg["seed"],
            consistency=cfg["consistency"], mode=cfg["mode"], val_tasks=cfg["val_tasks"])
    except ValueError as exc:
        raise ConfigError(_guess_key(str(exc), CONFIG_KEYS), str(exc)) from None


def model_config(cfg: dict, d_in: int) -> ModelConfig:
    try:
        return ModelConfig(d_in=d_in, d=cfg["embed_dim"] or None, adapter=cfg["adapter"],
                           operator=cfg["operator"], depth=cfg["depth"], slope=cfg["slope"],
                           squared_distance=cfg["squared_distance"], variant=cfg["variant"],
                           n_way=cfg["n_way"])
    except ValueError as exc:
        raise ConfigError(_guess_key(str(exc), ("embed_dim", "depth", "adapter")), str(exc)) from None


def load_store(cfg: dict):
    if cfg["data"]:
        if not os.path.isfile(cfg["data"]):
            raise ConfigError("data", f"feature file {cfg['data']!r} does not exist")
        try:
            return load_feature_file(cfg["data"])
        except FeatureFileError as exc:
            raise ArtifactError(str(exc)) from None
    return generate_synthetic_pool(synthetic_config(cfg))


def checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"


def _load_model(cfg: dict, out: Path) -> HGNNModel:
    path = checkpoint_path(cfg, out)
    if not path.is_file():
        raise ConfigError("checkpoint", f"checkpoint {str(path)!r} does not exist")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ArtifactError(f"{path}: {exc}") from None


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, out: Path) -> int:
    store = generate_synthetic_pool(synthetic_config(cfg))
    target = Path(cfg["data"]) if cfg["data"] else out / "features.csv"
    try:
        save_feature_file(store, target)
    except OSError as exc:
        raise ConfigError("data", f"cannot write {target}: {exc.strerror}") from None
    for split in Split:
        classes = store.classes(split)
        n = int(np.isin(store.class_ids, classes).sum())
        print(f"{split.value}: {len(classes)} classes, {n} records")
    print(f"outliers flagged: {int(store.outlier.sum())} of {len(store.class_ids)}")
    print(f"wrote {target}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    store = load_store(cfg)
    tcfg = train_config(cfg)
    model = HGNNModel.create(model_config(cfg, store.dim), seed=cfg["seed"])
    try:
        result = train(model, store, tcfg)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SamplingError as exc:
        raise _sampling_error(exc, store, cfg) from None
    path = checkpoint_path(cfg, out)
    save_checkpoint(model, path)
    _write(out / "train_log.csv", result.log_csv())
    if any(r.val_acc is not None for r in result.log):
        _write(out / "val_log.csv", "epoch,val_acc\n" + "".join(
            f"{r.epoch},{r.val_acc!r}\n" for r in result.log if r.val_acc is not None))
    last = result.log[-1]
    print(f"trained {model.variant.value} for {tcfg.epochs} epochs: "
          f"loss {last.mean_loss:.4f}, train accuracy {100 * last.train_acc:.2f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    model = _load_model(cfg, out)
    store = load_store(cfg)
    if store.dim != model.config.d_in:
        raise ArtifactError(f"checkpoint expects {model.config.d_in}-dim features, data has {store.dim}")
    try:
        report = evaluate(model, store, cfg["n_way"], cfg["k_shot"], n_tasks=cfg["eval_tasks"],
                          q_queries=cfg["q_queries"], seed=cfg["seed"], mode=cfg["mode"])
    except SamplingError as exc:
        raise _sampling_error(exc, store, cfg, Split.TEST) from None
    print(report.summary())
    _write(out / "eval_report.json", json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path) -> int:
    store = load_store(cfg)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg, store.dim)
    groups = tuple(g for g in cfg["ablate_groups"].split(",") if g)
    depths = tuple(int(d) for d in cfg["ablate_depths"].split(","))
    try:
        table = ablate(store, tcfg, mcfg, groups=groups, depths=depths, eval_tasks=cfg["eval_tasks"])
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        if "ablation group" in str(exc):
            raise ConfigError("ablate_groups", str(exc)) from None
        raise
    _write(out / "ablation.csv", table.to_csv())
    meta = {"seed": cfg["seed"], "shared_seed_schedule": True, "rows": len(table.rows),
            "epochs": tcfg.epochs, "episodes_per_epoch": tcfg.episodes_per_epoch,
            "eval_tasks": cfg["eval_tasks"], "n_way": tcfg.n_way, "k_shot": tcfg.k_shot}
    _write(out / "ablation_meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for row in table.rows:
        print(f"{row.group:<12}{row.variant:<10}{row.consistency:<6}{row.operator:<14}"
              f"depth {row.depth}  {100 * row.accuracy:.2f} ± {100 * row.ci95:.2f}")
    return EXIT_OK


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project onto the top two principal axes; each axis is signed so its largest |loading| is positive."""
    centred = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:2].copy()
    for axis in axes:
        if axis[np.argmax(np.abs(axis))] < 0:
            axis *= -1
    proj = centred @ axes.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def projection_rows(model: HGNNModel, episode) -> list[tuple[str, int, int, np.ndarray]]:
    """(kind, episode class, is_outlier, vector) for raw and adapted supports and prototypes."""
    if not (model.params.pgnn and model.params.ignn):
        raise ArtifactError("export-proj needs a checkpoint with both a PGNN and an IGNN")
    fs = model.embed(episode.support_x)
    fq = model.embed(episode.query_x[:1])
    n_way, y = episode.n_way, episode.support_y
    flags = episode.provenance.support_outlier.astype(int)
    s_hat, _ = ignn_forward(fs, fq, model.params.ignn)
    raw_protos = compute_prototypes(fs, y, n_way).values
    adapted = pgnn_forward(fs, y, model.params.pgnn, n_way).values
    rows = [("inst_raw", int(c), int(f), v) for c, f, v in zip(y, flags, fs.values)]
    rows += [("inst_ignn", int(c), int(f), v) for c, f, v in zip(y, flags, s_hat.values)]
    rows += [("proto_raw", c, 0, v) for c, v in enumerate(raw_protos)]
    rows += [("proto_pgnn", c, 0, v) for c, v in enumerate(adapted)]
    return rows


def cmd_export_proj(cfg: dict, out: Path) -> int:
    model = _load_model(cfg, out)
    store = load_store(cfg)
    episode = task_episode(store, cfg["n_way"], cfg["k_shot"], 1, cfg["seed"], cfg["export_task"])
    rows = projection_rows(model, episode)
    xy = pca_2d(np.stack([v for *_, v in rows])).tolist()
    lines = ["kind,class,is_outlier,x,y"]
    lines += [f"{kind},{c},{f},{x!r},{yv!r}" for (kind, c, f, _), (x, yv) in zip(rows, xy)]
    target = out / "projection.csv"
    _write(target, "\n".join(lines) + "\n")
    print(f"wrote {len(rows)} projected points to {target}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    dim = cfg["gradcheck_dim"]
    if not 1 <= dim <= GRADCHECK_MAX_DIM:
        raise ConfigError("gradcheck_dim", f"must lie in 1..{GRADCHECK_MAX_DIM}, got {dim}")
    n_way, k_shot, q = cfg["gradcheck_n_way"], cfg["gradcheck_k_shot"], cfg["gradcheck_q_queries"]
    pool = SyntheticConfig(n_train_classes=0, n_val_classes=0, n_test_classes=n_way,
                           records_per_class=k_shot + q, dim=dim, seed=cfg["seed"], overlap_pairs=0)
    store = generate_synthetic_pool(pool)
    episode = task_episode(store, n_way, k_shot, q, cfg["seed"], 0)
    if cfg["embed_dim"] > GRADCHECK_MAX_DIM:
        raise ConfigError("embed_dim", f"gradcheck needs at most {GRADCHECK_MAX_DIM}, got {cfg['embed_dim']}")
    mcfg = model_config({**cfg, "n_way": n_way}, dim)
    model = HGNNModel.create(mcfg, seed=cfg["seed"])
    params = model.params.all()
    if not params:
        print(f"{mcfg.variant.value} has no trainable parameters; nothing to check")
        return EXIT_OK
    consistency, mode = cfg["consistency"], cfg["mode"]

    def loss_fn():
        return model.loss(episode, consistency, mode)[0].total

    hook = None
    if cfg["gradcheck_corrupt"]:
        def hook(param, analytic):
            bad = analytic.copy()
            bad.flat[0] += 1.0 + abs(bad.flat[0])
            return bad

    report = dc.gradient_report(loss_fn, params, eps=cfg["gradcheck_eps"], grad_hook=hook)
    worst = 0.0
    for name, (err, index) in report.items():
        print(f"{name:<24} max rel err {err:.3e} at {index}")
        worst = max(worst, err)
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic feature pool"),
    "train": (cmd_train, "meta-train a model and write a checkpoint and training log"),
    "eval": (cmd_eval, "evaluate a checkpoint on test tasks"),
    "ablate": (cmd_ablate, "train and evaluate the ablation grid"),
    "export-proj": (cmd_export_proj, "write a 2-D PCA projection of one episode before and after adaptation"),
    "gradcheck": (cmd_gradcheck, "compare analytic gradients with central differences"),
}


# ------------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _keys_help() -> str:
    lines = ["configuration keys (JSON file or --set key=value):", "  seed (int, default 0)"]
    for key, (parser, default, text) in CONFIG_KEYS.items():
        lines.append(f"  {key} ({getattr(parser, '__name__', 'str').lstrip('_')}, default {default!r}): {text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    common.add_argument("--full-scale", action="store_true",
                        help="200 epochs and 10000 evaluation tasks unless set explicitly")
    parser = _Parser(prog="hgnn", description="Hybrid prototype/instance GNN few-shot toolkit.",
                     epilog=_keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text, epilog=_keys_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        overrides = _parse_overrides(args.set)
        if args.full_scale:
            overrides["full_scale"] = "true"
        cfg = resolve_config(_read_config_file(args.config), overrides, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        echo = {"command": args.command, **cfg}
        _write(out / "config.json", json.dumps(echo, indent=1, sort_keys=True) + "\n")
        return COMMANDS[args.command][0](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
