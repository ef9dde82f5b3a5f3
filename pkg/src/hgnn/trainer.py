"""Episodic meta-training, evaluation with 95% confidence intervals,
ablation grids and prototype/outlier diagnostics."""
from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np

from . import diffcore as dc
from .episodes import FeatureStore, Split, episode_stream, task_episode
from .graph import AdjacencyKind, MaskMode
from .models import (Consistency, HGNNModel, ModelConfig, Variant, compute_prototypes,
                     ignn_forward, pgnn_forward)

log = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = 200
FULL_SCALE_EVAL_TASKS = 10_000

DEFAULT_LR = {"adam": (1e-4, 1e-3), "sgd": (2e-4, 2e-3)}

LOG_HEADER = "epoch,mean_loss,l1,l2,l3,train_acc,lr_embed,lr_gnn"


class TrainingAborted(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 100
    n_way: int = 5
    k_shot: int = 5
    q_queries: int = 15
    optimizer: str = "adam"
    lr_embedding: float | None = None
    lr_gnn: float | None = None
    lr_halve_every: int = 40
    momentum: float = 0.9
    seed: int = 0
    consistency: Consistency = Consistency.KL
    mode: MaskMode = MaskMode.INDUCTIVE
    val_tasks: int = 0

    def __post_init__(self):
        self.optimizer = self.optimizer.lower()
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"optimizer must be one of {sorted(DEFAULT_LR)}, got {self.optimizer!r}")
        lr_e, lr_g = DEFAULT_LR[self.optimizer]
        if self.lr_embedding is None:
            self.lr_embedding = lr_e
        if self.lr_gnn is None:
            self.lr_gnn = lr_g
        self.consistency = Consistency(self.consistency)
        self.mode = MaskMode(self.mode)
        for name in ("epochs", "episodes_per_epoch", "n_way", "k_shot", "q_queries", "lr_halve_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def lr_at(self, epoch: int) -> tuple[float, float]:
        factor = 2.0 ** -(epoch // self.lr_halve_every)
        return self.lr_embedding * factor, self.lr_gnn * factor


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    l1: float
    l2: float
    l3: float
    train_acc: float
    lr_embed: float
    lr_gnn: float
    val_acc: float | None = None

    def csv(self) -> str:
        return (f"{self.epoch},{self.mean_loss!r},{self.l1!r},{self.l2!r},{self.l3!r},"
                f"{self.train_acc!r},{self.lr_embed!r},{self.lr_gnn!r}")


@dataclass
class TrainResult:
    model: HGNNModel
    log: list[EpochRecord]

    def log_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.csv() for r in self.log]) + "\n"


def accuracy(probs: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def make_optimizer(model: HGNNModel, cfg: TrainConfig) -> dc.Optimizer:
    groups = [{"params": model.params.embedding_params(), "lr": cfg.lr_embedding, "role": "embedding"},
              {"params": model.params.gnn_params(), "lr": cfg.lr_gnn, "role": "gnn"}]
    groups = [g for g in groups if g["params"]]
    if cfg.optimizer == "adam":
        return dc.Adam(groups, lr=cfg.lr_gnn)
    return dc.SGD(groups, lr=cfg.lr_gnn, momentum=cfg.momentum)


def train(model: HGNNModel, store: FeatureStore, cfg: TrainConfig) -> TrainResult:
    """Meta-train ``model`` in place on TRAIN-split episodes."""
    params = model.params.all()
    optimizer = make_optimizer(model, cfg) if params else None
    episodes = episode_stream(store, cfg.n_way, cfg.k_shot, cfg.q_queries, cfg.seed, Split.TRAIN)
    history = []
    for epoch in range(cfg.epochs):
        lr_e, lr_g = cfg.lr_at(epoch)
        if optimizer is not None:
            for group in optimizer.param_groups:
                group["lr"] = lr_e if group["role"] == "embedding" else lr_g
        sums = np.zeros(4)
        acc = 0.0
        for i in range(cfg.episodes_per_epoch):
            episode = next(episodes)
            losses, pred = model.loss(episode, cfg.consistency, cfg.mode)
            values = losses.floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingAborted(f"non-finite loss {values} at epoch {epoch}, episode {i} "
                                      f"(seed {cfg.seed})")
            if optimizer is not None:
                dc.zero_grad(params)
                dc.backward(losses.total, params)
                optimizer.step()
            sums += [values["total"], values["l1"], values["l2"], values["l3"]]
            acc += accuracy(pred.p_combined.values, episode.query_y)
        n = cfg.episodes_per_epoch
        record = EpochRecord(epoch, *(sums / n).tolist(), acc / n, lr_e, lr_g)
        if cfg.val_tasks and store.classes(Split.VAL):
            record.val_acc = evaluate(model, store, cfg.n_way, cfg.k_shot, n_tasks=cfg.val_tasks,
                                      q_queries=cfg.q_queries, seed=cfg.seed + epoch,
                                      split=Split.VAL, mode=cfg.mode).mean_accuracy
        log.info("epoch %d loss %.4f acc %.4f", epoch, record.mean_loss, record.train_acc)
        history.append(record)
    return TrainResult(model, history)


@dataclass
class EvalReport:
    n_tasks: int
    mean_accuracy: float
    ci95_halfwidth: float
    task_accuracies: np.ndarray = field(repr=False)
    loss_means: dict[str, float] = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)

    def summary(self) -> str:
        return f"{100 * self.mean_accuracy:.2f} ± {100 * self.ci95_halfwidth:.2f}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task_accuracies"] = self.task_accuracies.tolist()
        return out

    def same_results(self, other: "EvalReport") -> bool:
        """Equality of everything except wall-clock time."""
        return (self.n_tasks == other.n_tasks and self.mean_accuracy == other.mean_accuracy
                and self.ci95_halfwidth == other.ci95_halfwidth
                and np.array_equal(self.task_accuracies, other.task_accuracies)
                and self.loss_means == other.loss_means)


def ci95(task_accuracies) -> float:
    accs = np.asarray(task_accuracies, dtype=np.float64)
    return 1.96 * float(np.std(accs)) / math.sqrt(accs.size)


def evaluate(model, store: FeatureStore, n_way: int, k_shot: int, n_tasks: int = 1000,
             q_queries: int = 15, seed: int = 0, split=Split.TEST,
             mode=MaskMode.INDUCTIVE) -> EvalReport:
    """Mean accuracy over ``n_tasks`` episodes, each drawn from its own (seed, task) stream.

    ``model`` needs ``predict_proba(episode, mode)``; when it also has
    ``loss`` the per-term loss means are reported too.
    """
    if not store.classes(split):
        raise ValueError(f"the {Split(split).value} split is empty")
    start = time.perf_counter()
    accs = np.empty(n_tasks)
    loss_sums = {}
    with_loss = isinstance(model, HGNNModel)
    for t in range(n_tasks):
        episode = task_episode(store, n_way, k_shot, q_queries, seed, t, split)
        if with_loss:
            losses, pred = model.loss(episode, Consistency.KL, mode)
            probs = pred.p_combined.values
            for key, value in losses.floats().items():
                loss_sums[key] = loss_sums.get(key, 0.0) + value
        else:
            probs = model.predict_proba(episode, mode)
        accs[t] = accuracy(probs, episode.query_y)
    return EvalReport(
        n_tasks=n_tasks,
        mean_accuracy=float(np.mean(accs)),
        ci95_halfwidth=ci95(accs),
        task_accuracies=accs,
        loss_means={k: v / n_tasks for k, v in loss_sums.items()},
        wall_clock=time.perf_counter() - start,
    )


# ------------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("group", "variant", "consistency", "operator", "depth", "seed",
                    "accuracy", "ci95")


@dataclass
class AblationRow:
    group: str
    variant: str
    consistency: str
    operator: str
    depth: int
    seed: int
    accuracy: float
    ci95: float

    def csv(self) -> str:
        return (f"{self.group},{self.variant},{self.consistency},{self.operator},{self.depth},"
                f"{self.seed},{self.accuracy:.6f},{self.ci95:.6f}")


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        return "\n".join([",".join(ABLATION_COLUMNS)] + [r.csv() for r in self.rows]) + "\n"

    def select(self, group: str) -> list[AblationRow]:
        return [r for r in self.rows if r.group == group]


def ablation_grid(groups=("variants", "consistency", "depth"),
                  operators=tuple(AdjacencyKind), depths=(1, 2, 3)) -> list[tuple]:
    """(group, variant, consistency, operator, depth) tuples.

    ``variants``: ProtoNet / PGNN / IGNN / HGNN. ``consistency``: HGNN with each
    consistency loss. ``operator``: IGNN, PGNN and HGNN with each adjacency
    operator. ``depth``: IGNN and PGNN at each depth.
    """
    ip, kl = AdjacencyKind.INNER_PRODUCT, Consistency.KL
    grid = []
    for group in groups:
        if group == "variants":
            grid += [(group, v, kl, ip, 1) for v in
                     (Variant.PROTONET, Variant.PGNN_ONLY, Variant.IGNN_ONLY, Variant.HGNN)]
        elif group == "consistency":
            grid += [(group, Variant.HGNN, c, ip, 1) for c in Consistency]
        elif group == "operator":
            grid += [(group, v, kl, AdjacencyKind(op), 1)
                     for v in (Variant.IGNN_ONLY, Variant.PGNN_ONLY, Variant.HGNN) for op in operators]
        elif group == "depth":
            grid += [(group, v, kl, ip, d) for v in (Variant.IGNN_ONLY, Variant.PGNN_ONLY)
                     for d in depths]
        else:
            raise ValueError(f"unknown ablation group {group!r}")
    return grid


def ablate(store: FeatureStore, base_cfg: TrainConfig, model_cfg: ModelConfig,
           groups=("variants", "consistency", "depth"), operators=tuple(AdjacencyKind),
           depths=(1, 2, 3), eval_tasks: int = 1000) -> AblationTable:
    """Train and evaluate every grid entry under the same seed schedule.

    Identical configurations appearing in several groups are trained once.
    """
    cache: dict[tuple, tuple[float, float]] = {}
    rows = []
    for group, variant, consistency, op, depth in ablation_grid(groups, operators, depths):
        key = (variant, consistency if variant is Variant.HGNN else None, op, depth)
        if key not in cache:
            mcfg = replace(model_cfg, variant=variant, operator=op, depth=depth)
            model = HGNNModel.create(mcfg, seed=base_cfg.seed)
            train(model, store, replace(base_cfg, consistency=consistency))
            report = evaluate(model, store, base_cfg.n_way, base_cfg.k_shot, n_tasks=eval_tasks,
                              q_queries=base_cfg.q_queries, seed=base_cfg.seed, mode=base_cfg.mode)
            cache[key] = (report.mean_accuracy, report.ci95_halfwidth)
            log.info("ablation %s %s %s %s depth=%d: %s", group, variant.value, consistency.value,
                     op.value, depth, report.summary())
        acc, ci = cache[key]
        label = consistency.value if variant is Variant.HGNN else "n/a"
        rows.append(AblationRow(group, variant.value, label, op.value, depth,
                                base_cfg.seed, acc, ci))
    return AblationTable(rows)


# ---------------------------------------------------------------- diagnostics

def standardize_rows(x: np.ndarray) -> np.ndarray:
    """Per-row zero mean, unit population variance (the shared pre/post normalisation)."""
    centred = x - x.mean(axis=1, keepdims=True)
    return centred / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + 1e-12)


def mean_pairwise_distance(x: np.ndarray) -> float:
    return float(np.mean([np.linalg.norm(x[i] - x[j]) for i, j in combinations(range(len(x)), 2)]))


@dataclass
class DiagnosticsReport:
    n_episodes: int
    proto_dist_before: np.ndarray
    proto_dist_after: np.ndarray
    outlier_dist_before: np.ndarray
    outlier_dist_after: np.ndarray
    outlier_ratio_before: np.ndarray = field(default_factory=lambda: np.zeros(0))
    outlier_ratio_after: np.ndarray = field(default_factory=lambda: np.zeros(0))
    notice: str = ""

    @property
    def proto_win_rate(self) -> float:
        """Share of episodes where the adapted prototypes are further apart."""
        return float(np.mean(self.proto_dist_after > self.proto_dist_before))

    @property
    def outlier_episodes(self) -> int:
        return int(self.outlier_dist_before.size)

    @property
    def outlier_win_rate(self) -> float:
        """Share of episodes (with flagged supports) where outliers end up closer to their prototype."""
        if not self.outlier_dist_before.size:
            return float("nan")
        return float(np.mean(self.outlier_dist_after < self.outlier_dist_before))

    @property
    def outlier_ratio_win_rate(self) -> float:
        """Share of episodes where outliers sit relatively closer, measured against the inliers' spread."""
        ok = np.isfinite(self.outlier_ratio_before) & np.isfinite(self.outlier_ratio_after)
        if not ok.any():
            return float("nan")
        return float(np.mean(self.outlier_ratio_after[ok] < self.outlier_ratio_before[ok]))

    def fields(self) -> dict[str, float]:
        nan = float("nan")
        return {
            "n_episodes": self.n_episodes,
            "proto_dist_before_mean": float(np.mean(self.proto_dist_before)),
            "proto_dist_after_mean": float(np.mean(self.proto_dist_after)),
            "proto_win_rate": self.proto_win_rate,
            "outlier_episodes": self.outlier_episodes,
            "outlier_dist_before_mean": float(np.mean(self.outlier_dist_before)) if self.outlier_episodes else nan,
            "outlier_dist_after_mean": float(np.mean(self.outlier_dist_after)) if self.outlier_episodes else nan,
            "outlier_win_rate": self.outlier_win_rate,
            "outlier_ratio_win_rate": self.outlier_ratio_win_rate,
        }

    def to_text(self) -> str:
        out = io.StringIO()
        for key, value in self.fields().items():
            out.write(f"{key} = {value}\n")
        if self.notice:
            out.write(f"notice = {self.notice}\n")
        return out.getvalue()

    def raw_csv(self) -> str:
        lines = ["kind,episode_value_before,episode_value_after"]
        lines += [f"proto,{b!r},{a!r}" for b, a in zip(self.proto_dist_before.tolist(), self.proto_dist_after.tolist())]
        lines += [f"outlier,{b!r},{a!r}" for b, a in zip(self.outlier_dist_before.tolist(), self.outlier_dist_after.tolist())]
        lines += [f"outlier_ratio,{b!r},{a!r}" for b, a in zip(self.outlier_ratio_before.tolist(), self.outlier_ratio_after.tolist())]
        return "\n".join(lines) + "\n"


def _own_class_distances(support: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = standardize_rows(support)
    protos = compute_prototypes(z, labels).values
    return np.linalg.norm(z - protos[labels], axis=1)


def outlier_distances(support: np.ndarray, labels: np.ndarray, flags: np.ndarray) -> float:
    """Mean distance from flagged supports to their own class mean, after row standardisation."""
    return float(np.mean(_own_class_distances(support, labels)[flags]))


def outlier_ratio(support: np.ndarray, labels: np.ndarray, flags: np.ndarray) -> float:
    """Outlier distance divided by the inliers' distance to their class mean (nan without inliers)."""
    d = _own_class_distances(support, labels)
    if flags.all():
        return float("nan")
    return float(np.mean(d[flags]) / np.mean(d[~flags]))


def diagnostics_fig4(model: HGNNModel, store: FeatureStore, n_episodes: int = 200,
                     n_way: int = 5, k_shot: int = 5, seed: int = 0,
                     split=Split.TEST) -> DiagnosticsReport:
    """Prototype separation before/after the PGNN, outlier pull-in before/after the IGNN.

    Distances are measured after the same per-row standardisation in both
    spaces so the layer norm's rescaling alone cannot register as a change.
    """
    if not (model.params.pgnn and model.params.ignn):
        raise ValueError("diagnostics need a model with both PGNN and IGNN")
    flags_available = store.has_outlier_flags()
    before_p, after_p, before_o, after_o, before_r, after_r = [], [], [], [], [], []
    for t in range(n_episodes):
        ep = task_episode(store, n_way, k_shot, 1, seed, t, split)
        fs = model.embed(ep.support_x)
        raw_protos = compute_prototypes(fs, ep.support_y, n_way).values
        adapted = pgnn_forward(fs, ep.support_y, model.params.pgnn, n_way).values
        before_p.append(mean_pairwise_distance(standardize_rows(raw_protos)))
        after_p.append(mean_pairwise_distance(standardize_rows(adapted)))
        flags = ep.provenance.support_outlier
        if flags_available and flags.any():
            s_hat, _ = ignn_forward(fs, model.embed(ep.query_x), model.params.ignn)
            before_o.append(outlier_distances(fs.values, ep.support_y, flags))
            after_o.append(outlier_distances(s_hat.values, ep.support_y, flags))
            before_r.append(outlier_ratio(fs.values, ep.support_y, flags))
            after_r.append(outlier_ratio(s_hat.values, ep.support_y, flags))
    notice = "" if flags_available else "store has no outlier flags; outlier diagnostics skipped"
    return DiagnosticsReport(n_episodes, np.asarray(before_p), np.asarray(after_p),
                             np.asarray(before_o), np.asarray(after_o),
                             np.asarray(before_r), np.asarray(after_r), notice)
