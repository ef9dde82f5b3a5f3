import math

import numpy as np
import pytest

from hgnn.episodes import SyntheticConfig, generate_synthetic_pool, parse_feature_file
from hgnn.graph import AdjacencyKind
from hgnn.models import Consistency, HGNNModel, ModelConfig, Variant
from hgnn.trainer import (LOG_HEADER, DiagnosticsReport, TrainConfig, TrainingAborted, ablate,
                          accuracy, ci95, diagnostics_fig4, evaluate, train)

QUICK = dict(epochs=2, episodes_per_epoch=5, n_way=3, k_shot=2, q_queries=3)


def snapshot(model):
    return {name: p.values.copy() for name, p in model.named_params().items()}


class Oracle:
    """Predicts the true query label with certainty."""

    def predict_proba(self, episode, mode):
        return np.eye(episode.n_way)[episode.query_y]


class Guesser:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_proba(self, episode, mode):
        return np.eye(episode.n_way)[self.rng.integers(0, episode.n_way, len(episode.query_y))]


# ----------------------------------------------------------------- config

def test_default_learning_rates():
    assert TrainConfig().lr_at(0) == (1e-4, 1e-3)
    assert TrainConfig(optimizer="SGD").lr_at(0) == (2e-4, 2e-3)


def test_learning_rate_halves_on_schedule():
    cfg = TrainConfig(lr_embedding=0.4, lr_gnn=0.8, lr_halve_every=40)
    assert cfg.lr_at(39) == (0.4, 0.8)
    assert cfg.lr_at(40) == (0.2, 0.4)
    assert cfg.lr_at(80) == (0.1, 0.2)
    assert cfg.lr_at(199) == (0.4 / 16, 0.8 / 16)


def test_logged_learning_rates_follow_schedule(small_store):
    model = HGNNModel.create(ModelConfig(d_in=8), seed=0)
    result = train(model, small_store, TrainConfig(**{**QUICK, "epochs": 5}, lr_halve_every=2))
    assert [r.lr_gnn for r in result.log] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]
    assert [r.lr_embed for r in result.log] == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5]


@pytest.mark.parametrize("kwargs", [{"optimizer": "rmsprop"}, {"epochs": 0}, {"k_shot": 0}])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# --------------------------------------------------------------- training

@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_zero_learning_rate_leaves_params_untouched(optimizer, small_store):
    model = HGNNModel.create(ModelConfig(d_in=8, adapter=True), seed=1)
    before = snapshot(model)
    train(model, small_store, TrainConfig(**QUICK, optimizer=optimizer, lr_embedding=0.0, lr_gnn=0.0))
    after = snapshot(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_changes_params(small_store):
    model = HGNNModel.create(ModelConfig(d_in=8), seed=1)
    before = model.checksum()
    train(model, small_store, TrainConfig(**QUICK))
    assert model.checksum() != before


def test_same_seed_same_loss_curve(small_store):
    def run():
        model = HGNNModel.create(ModelConfig(d_in=8), seed=2)
        return train(model, small_store, TrainConfig(**QUICK, seed=6))

    a, b = run(), run()
    assert a.log_csv() == b.log_csv()
    assert a.model.checksum() == b.model.checksum()


def test_log_csv_layout(small_store):
    result = train(HGNNModel.create(ModelConfig(d_in=8)), small_store, TrainConfig(**QUICK))
    lines = result.log_csv().splitlines()
    assert lines[0] == LOG_HEADER
    assert len(lines) == 3
    for rec in result.log:
        assert math.isclose(rec.mean_loss, rec.l1 + rec.l2 + rec.l3, rel_tol=1e-12)
        assert 0.0 <= rec.train_acc <= 1.0


def test_validation_accuracy_recorded(small_store):
    result = train(HGNNModel.create(ModelConfig(d_in=8)), small_store, TrainConfig(**QUICK, val_tasks=4))
    assert all(0.0 <= r.val_acc <= 1.0 for r in result.log)


def test_protonet_on_well_separated_pool():
    store = generate_synthetic_pool(SyntheticConfig(n_train_classes=10, n_val_classes=0, n_test_classes=10,
                                                    records_per_class=40, dim=8, inter_scale=40.0,
                                                    outlier_rate=0.0, overlap_pairs=0))
    model = HGNNModel.create(ModelConfig(d_in=8, variant=Variant.PROTONET))
    result = train(model, store, TrainConfig(epochs=5, episodes_per_epoch=10))
    assert result.log[-1].train_acc >= 0.99
    assert evaluate(model, store, 5, 5, n_tasks=50).mean_accuracy >= 0.99


def test_non_finite_loss_aborts(small_store):
    model = HGNNModel.create(ModelConfig(d_in=8), seed=0)
    model.params.pgnn[0].phi_w.values[0, 0] = np.nan
    with pytest.raises(TrainingAborted, match="seed 0"):
        train(model, small_store, TrainConfig(**QUICK))


# ------------------------------------------------------------- evaluation

def test_accuracy_ties_resolve_to_lowest_index():
    assert accuracy(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1]) == 0.5


def test_perfect_predictor(small_store):
    report = evaluate(Oracle(), small_store, 5, 1, n_tasks=20)
    assert report.mean_accuracy == 1.0 and report.ci95_halfwidth == 0.0


def test_random_predictor_near_chance(small_store):
    report = evaluate(Guesser(0), small_store, 5, 1, n_tasks=10_000, q_queries=1)
    assert abs(report.mean_accuracy - 0.2) <= 0.02


def test_ci_formula():
    accs = np.array([0.2, 0.4, 0.4, 0.8])
    mean = accs.mean()
    std = math.sqrt(sum((a - mean) ** 2 for a in accs) / 4)
    assert math.isclose(ci95(accs), 1.96 * std / 2, rel_tol=1e-12)
    assert ci95([0.7] * 9) == 0.0


def test_report_summary_format(small_store):
    model = HGNNModel.create(ModelConfig(d_in=8, variant=Variant.PROTONET))
    report = evaluate(model, small_store, 3, 1, n_tasks=30)
    assert report.summary() == f"{100 * report.mean_accuracy:.2f} ± {100 * report.ci95_halfwidth:.2f}"
    assert report.n_tasks == 30 and report.task_accuracies.shape == (30,)
    assert math.isclose(report.ci95_halfwidth, ci95(report.task_accuracies))


def test_evaluation_leaves_model_untouched(small_store, tiny_hgnn):
    before = tiny_hgnn.checksum()
    evaluate(tiny_hgnn, small_store, 3, 2, n_tasks=10)
    assert tiny_hgnn.checksum() == before


def test_evaluation_deterministic_and_task_indexed(small_store, tiny_hgnn):
    a = evaluate(tiny_hgnn, small_store, 3, 2, n_tasks=12, seed=4)
    b = evaluate(tiny_hgnn, small_store, 3, 2, n_tasks=12, seed=4)
    assert a.same_results(b)
    prefix = evaluate(tiny_hgnn, small_store, 3, 2, n_tasks=5, seed=4)
    assert np.array_equal(prefix.task_accuracies, a.task_accuracies[:5])
    assert set(a.loss_means) == {"l1", "l2", "l3", "total"}


def test_empty_split_rejected():
    store = parse_feature_file("#dim=1\ntrain,0,1\ntrain,1,2\n")
    with pytest.raises(ValueError, match="test"):
        evaluate(Oracle(), store, 2, 1, n_tasks=1)


# --------------------------------------------------------------- ablation

@pytest.fixture(scope="module")
def ablation(small_store):
    cfg = TrainConfig(**{**QUICK, "epochs": 1})
    return ablate(small_store, cfg, ModelConfig(d_in=8), groups=("variants", "consistency", "depth"),
                  depths=(1, 2), eval_tasks=5)


def test_ablation_structure(ablation):
    variants = ablation.select("variants")
    assert [r.variant for r in variants] == ["protonet", "pgnn", "ignn", "hgnn"]
    assert {r.consistency for r in ablation.select("consistency")} == {"none", "l1", "mse", "kl"}
    assert [(r.variant, r.depth) for r in ablation.select("depth")] == [
        ("ignn", 1), ("ignn", 2), ("pgnn", 1), ("pgnn", 2)]
    assert all(r.seed == 0 for r in ablation.rows)
    assert ablation.to_csv().splitlines()[0] == "group,variant,consistency,operator,depth,seed,accuracy,ci95"


def test_ablation_shares_identical_configs(ablation):
    by_variant = {r.variant: r.accuracy for r in ablation.select("variants")}
    ignn_depth1 = next(r for r in ablation.select("depth") if r.variant == "ignn" and r.depth == 1)
    assert ignn_depth1.accuracy == by_variant["ignn"]
    kl = next(r for r in ablation.select("consistency") if r.consistency == "kl")
    assert kl.accuracy == by_variant["hgnn"]


def test_ablation_deterministic(small_store, ablation):
    cfg = TrainConfig(**{**QUICK, "epochs": 1})
    again = ablate(small_store, cfg, ModelConfig(d_in=8), groups=("variants", "consistency", "depth"),
                   depths=(1, 2), eval_tasks=5)
    assert again.to_csv() == ablation.to_csv()


def test_ablation_operator_group(small_store):
    table = ablate(small_store, TrainConfig(**{**QUICK, "epochs": 1}), ModelConfig(d_in=8),
                   groups=("operator",), eval_tasks=2)
    assert len(table.rows) == 3 * len(AdjacencyKind)


def test_unknown_ablation_group(small_store):
    with pytest.raises(ValueError):
        ablate(small_store, TrainConfig(**QUICK), ModelConfig(d_in=8), groups=("width",))


# ------------------------------------------------------------ diagnostics

def test_diagnostics_fields_finite(small_store, tiny_hgnn):
    report = diagnostics_fig4(tiny_hgnn, small_store, n_episodes=10, n_way=3, k_shot=5)
    fields = report.fields()
    assert fields["n_episodes"] == 10
    assert fields["outlier_episodes"] > 0
    assert all(math.isfinite(v) for v in fields.values())
    assert report.notice == ""


def test_diagnostics_win_rates_recomputable_from_raw(small_store, tiny_hgnn):
    report = diagnostics_fig4(tiny_hgnn, small_store, n_episodes=10, n_way=3, k_shot=5)
    rows = [line.split(",") for line in report.raw_csv().splitlines()[1:]]
    proto = [(float(b), float(a)) for kind, b, a in rows if kind == "proto"]
    outlier = [(float(b), float(a)) for kind, b, a in rows if kind == "outlier"]
    assert len(proto) == 10
    assert report.proto_win_rate == np.mean([a > b for b, a in proto])
    assert report.outlier_win_rate == np.mean([a < b for b, a in outlier])


def test_diagnostics_without_flags(tiny_hgnn):
    store = generate_synthetic_pool(SyntheticConfig(n_train_classes=3, n_val_classes=0, n_test_classes=4,
                                                    records_per_class=12, dim=8, outlier_rate=0.0))
    report = diagnostics_fig4(tiny_hgnn, store, n_episodes=3, n_way=3, k_shot=2)
    assert report.notice
    assert report.outlier_episodes == 0 and math.isnan(report.outlier_win_rate)


def test_diagnostics_need_both_heads(small_store):
    with pytest.raises(ValueError):
        diagnostics_fig4(HGNNModel.create(ModelConfig(d_in=8, variant=Variant.PGNN_ONLY)), small_store)


def test_win_rate_definitions():
    report = DiagnosticsReport(4, np.array([1.0, 2.0, 3.0, 4.0]), np.array([2.0, 1.0, 4.0, 4.0]),
                               np.array([1.0, 1.0]), np.array([0.5, 1.5]))
    assert report.proto_win_rate == 0.5
    assert report.outlier_win_rate == 0.5


def test_consistency_choice_changes_training(small_store):
    def run(c):
        model = HGNNModel.create(ModelConfig(d_in=8), seed=3)
        return train(model, small_store, TrainConfig(**QUICK, consistency=c)).model.checksum()

    assert run(Consistency.NONE) != run(Consistency.KL)
