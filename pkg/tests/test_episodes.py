import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgnn.episodes import (Episode, FeatureFileError, FeatureStore, SamplingError, Split,
                           SyntheticConfig, episode_stream, format_feature_file,
                           generate_synthetic_pool, load_feature_file, parse_feature_file,
                           sample_episode, save_feature_file, split_meta, task_episode)


def store_equal(a, b):
    return (a.dim == b.dim and np.array_equal(a.class_ids, b.class_ids)
            and np.array_equal(a.features, b.features) and np.array_equal(a.outlier, b.outlier)
            and a.splits == b.splits)


# -------------------------------------------------------------- generator

def test_no_outliers_when_rate_zero():
    store = generate_synthetic_pool(SyntheticConfig(outlier_rate=0.0, records_per_class=20))
    assert not store.outlier.any()
    assert not store.has_outlier_flags()


def test_generator_deterministic():
    cfg = SyntheticConfig(records_per_class=10, seed=11)
    assert store_equal(generate_synthetic_pool(cfg), generate_synthetic_pool(cfg))
    other = generate_synthetic_pool(SyntheticConfig(records_per_class=10, seed=12))
    assert not np.array_equal(other.features, generate_synthetic_pool(cfg).features)


def test_class_sample_mean_law_of_large_numbers():
    cfg = SyntheticConfig(n_train_classes=3, n_val_classes=0, n_test_classes=0, records_per_class=10_000,
                          dim=4, outlier_rate=0.0, overlap_pairs=0, seed=7)
    store = generate_synthetic_pool(cfg)
    # generating means: first draw of the pool's stream
    means = np.random.default_rng([7, 0]).uniform(-0.5, 0.5, (3, 4)) * cfg.inter_scale
    bound = 3 * cfg.intra_std / np.sqrt(10_000)
    for c in range(3):
        assert np.all(np.abs(store.features[store.class_ids == c].mean(axis=0) - means[c]) <= bound)


def test_outlier_fraction_binomial():
    cfg = SyntheticConfig(n_train_classes=100, n_val_classes=0, n_test_classes=0, records_per_class=100)
    store = generate_synthetic_pool(cfg)
    assert len(store) == 10_000
    assert abs(store.outlier.mean() - 0.15) <= 0.02


def test_outliers_sit_further_from_their_class():
    cfg = SyntheticConfig(n_train_classes=20, n_val_classes=0, n_test_classes=0, records_per_class=400,
                          outlier_scale=4.0, overlap_pairs=0)
    store = generate_synthetic_pool(cfg)
    dist = np.empty(len(store))
    for c in store.classes():
        rows = store.class_ids == c
        inliers = rows & ~store.outlier
        dist[rows] = np.linalg.norm(store.features[rows] - store.features[inliers].mean(axis=0), axis=1)
    ratio = dist[store.outlier].mean() / dist[~store.outlier].mean()
    assert 3.6 < ratio < 4.4


def test_overlap_pair_per_split():
    cfg = SyntheticConfig(n_train_classes=8, n_val_classes=4, n_test_classes=4, records_per_class=4000,
                          outlier_rate=0.0, overlap_pairs=1, overlap_dist=2.0, inter_scale=20.0)
    store = generate_synthetic_pool(cfg)
    for split in Split:
        classes = store.classes(split)
        means = np.stack([store.features[store.class_ids == c].mean(axis=0) for c in classes])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        close = np.argwhere(np.triu(d < 4.0, k=1))
        assert len(close) == 1
        i, j = close[0]
        assert abs(d[i, j] - 2.0) < 0.15


@pytest.mark.parametrize("field,value", [("dim", 0), ("outlier_rate", 1.0), ("outlier_scale", 0.5),
                                         ("records_per_class", 0), ("intra_std", 0.0)])
def test_degenerate_config_rejected(field, value):
    with pytest.raises(ValueError):
        generate_synthetic_pool(SyntheticConfig(**{field: value}))


def test_store_is_read_only(small_store):
    with pytest.raises(ValueError):
        small_store.features[0, 0] = 1.0


def test_store_splits_disjoint(small_store):
    seen = [set(small_store.classes(s)) for s in Split]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])
    assert sum(map(len, seen)) == len(small_store.classes())


# --------------------------------------------------------------- sampling

def test_episode_sizes(small_store, rng):
    ep = sample_episode(small_store, 5, 1, 15, rng)
    assert ep.support_x.shape == (5, 8) and ep.query_x.shape == (75, 8)
    assert ep.support_y.tolist() == [0, 1, 2, 3, 4]
    assert ep.query_y.tolist() == sorted(ep.query_y.tolist())


def test_support_query_disjoint_over_many_episodes(small_store):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ep = sample_episode(small_store, 3, 2, 4, rng)
        prov = ep.provenance
        assert not set(prov.support_records.tolist()) & set(prov.query_records.tolist())
        assert len(set(prov.class_ids.tolist())) == 3


def test_sampling_deterministic(small_store):
    a = [next(s) for s in [episode_stream(small_store, 3, 2, 2, seed=4)] for _ in range(5)]
    b = [next(s) for s in [episode_stream(small_store, 3, 2, 2, seed=4)] for _ in range(5)]
    for x, y in zip(a, b):
        assert np.array_equal(x.support_x, y.support_x) and np.array_equal(x.query_x, y.query_x)


def test_sampling_respects_split(small_store, rng):
    train = set(small_store.classes(Split.TRAIN))
    test = set(small_store.classes(Split.TEST))
    for _ in range(50):
        assert set(sample_episode(small_store, 3, 1, 1, rng).provenance.class_ids.tolist()) <= train
        assert set(sample_episode(small_store, 3, 1, 1, rng, Split.TEST).provenance.class_ids.tolist()) <= test


def test_task_episode_independent_of_order(small_store):
    a = task_episode(small_store, 3, 1, 2, seed=1, task=7)
    task_episode(small_store, 3, 1, 2, seed=1, task=3)
    b = task_episode(small_store, 3, 1, 2, seed=1, task=7)
    assert np.array_equal(a.support_x, b.support_x)


def test_insufficient_classes_or_records(small_store, rng):
    with pytest.raises(SamplingError):
        sample_episode(small_store, 11, 1, 1, rng)
    with pytest.raises(SamplingError):
        sample_episode(small_store, 2, 20, 20, rng)


def test_model_visible_fields_carry_no_provenance(small_store, rng):
    ep = sample_episode(small_store, 4, 2, 3, rng)
    visible = {"n_way", "k_shot", "q_queries", "support_x", "support_y", "query_x", "query_y"}
    assert set(Episode.__dataclass_fields__) - {"provenance"} == visible
    assert set(ep.support_y.tolist()) == set(range(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 99))
def test_episode_shape_contract(n, k, q, seed):
    store = generate_synthetic_pool(SyntheticConfig(n_train_classes=6, n_val_classes=0, n_test_classes=0,
                                                    records_per_class=8, dim=3, seed=seed))
    ep = sample_episode(store, n, k, q, np.random.default_rng(seed))
    assert np.bincount(ep.support_y).tolist() == [k] * n
    assert np.bincount(ep.query_y).tolist() == [q] * n


# -------------------------------------------------------------- file I/O

TINY = "#dim=2\ntrain,0,1.0,2.0\ntrain,0,1.5,2.5\ntest,1,-1.0,0.25\ntest,1,-2.0,0.5\n"


def test_feature_file_round_trip(tmp_path):
    store = parse_feature_file(TINY)
    assert store.dim == 2 and len(store) == 4 and not store.outlier.any()
    path = tmp_path / "f.csv"
    save_feature_file(store, path)
    assert path.read_text() == TINY
    assert store_equal(load_feature_file(path), store)


def test_feature_file_preserves_flags_and_bits(tmp_path):
    store = generate_synthetic_pool(SyntheticConfig(records_per_class=5))
    path = tmp_path / "pool.csv"
    save_feature_file(store, path)
    assert store_equal(load_feature_file(path), store)


def test_feature_file_wrong_arity_names_line():
    with pytest.raises(FeatureFileError, match="line 3"):
        parse_feature_file("#dim=2\ntrain,0,1,2\ntrain,0,1\n")


def test_feature_file_dim_mismatch():
    with pytest.raises(FeatureFileError, match="line 2"):
        parse_feature_file("#dim=3\ntrain,0,1,2\n")


@pytest.mark.parametrize("text,where", [
    ("dim=2\ntrain,0,1,2\n", "line 1"),
    ("#dim=x\n", "line 1"),
    ("#dim=2\nvalidation,0,1,2\n", "line 2"),
    ("#dim=2\ntrain,a,1,2\n", "line 2"),
    ("#dim=2\ntrain,0,1,2\ntest,0,1,2\n", "line 3"),
])
def test_feature_file_errors(text, where):
    with pytest.raises(FeatureFileError, match=where):
        parse_feature_file(text)


def test_feature_file_comments_and_blank_lines():
    store = parse_feature_file("#dim=1\n# a note\n\ntrain,4,0.5\n#outliers=0\n")
    assert store.outlier.tolist() == [True]
    assert store.classes() == [4]


def test_format_is_stable():
    store = parse_feature_file(TINY)
    assert format_feature_file(store) == format_feature_file(parse_feature_file(format_feature_file(store)))


# ------------------------------------------------------------- split_meta

def test_split_meta_mini_imagenet_proportions():
    store = generate_synthetic_pool(SyntheticConfig(n_train_classes=100, n_val_classes=0,
                                                    n_test_classes=0, records_per_class=2))
    ids = list(range(100))
    out = split_meta(store, {"train": ids[:64], "val": ids[64:80], "test": ids[80:]})
    assert [len(out.classes(s)) for s in Split] == [64, 16, 20]


def test_split_meta_rejects_double_assignment(small_store):
    classes = small_store.classes()
    with pytest.raises(ValueError, match="both"):
        split_meta(small_store, {"train": classes, "test": classes[:1]})


def test_split_meta_rejects_missing_class(small_store):
    with pytest.raises(ValueError, match="misses"):
        split_meta(small_store, {"train": small_store.classes()[1:]})


def test_split_meta_warns_on_empty_test(small_store):
    with pytest.warns(UserWarning, match="TEST"):
        out = split_meta(small_store, {"train": small_store.classes()})
    assert out.classes(Split.TEST) == []


def test_store_rejects_class_without_split():
    with pytest.raises(ValueError):
        FeatureStore(1, np.array([0, 1]), np.zeros((2, 1)), np.zeros(2, bool), {0: Split.TRAIN})
