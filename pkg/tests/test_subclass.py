import itertools

import numpy as np
import pytest

from weakcam.fields import make_rng
from weakcam.nn import NetConfig, TrainingDiverged
from weakcam.subclass import (
    TrainConfig,
    build_subclass_labels,
    class_response_maps,
    cluster_subclasses,
    compute_cam,
    compute_cams_batch,
    extract_frozen_features,
    kmeans,
    run_probe,
    train_classifier,
)
from weakcam.synth import SynthConfig, generate_dataset, split_dataset


def best_partition_sse(points, k):
    """Exhaustive search over all k-labelings with no empty cluster."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    best = (np.inf, None)
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) < k:
            continue
        labels = np.array(labels)
        sse = 0.0
        for j in range(k):
            members = points[labels == j]
            sse += ((members - members.mean(axis=0)) ** 2).sum()
        if sse < best[0] - 1e-12:
            best = (sse, labels)
    return best


def canonical(labels):
    """Partition as a frozenset of index-frozensets (label-permutation invariant)."""
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


class TestFrozenFeatures:
    def test_deterministic(self):
        img = make_rng(0).uniform(size=(64, 64))
        a = extract_frozen_features(img, probe_seed=4)
        b = extract_frozen_features(img, probe_seed=4)
        assert np.array_equal(a, b)

    def test_length_is_configured_dim(self):
        img = make_rng(0).uniform(size=(32, 32))
        assert extract_frozen_features(img, 0, dim=64).shape == (64,)
        assert extract_frozen_features(img, 0, dim=32).shape == (32,)

    def test_constant_shift_moves_only_mean_half(self):
        # Linear stack + centered max pooling: a constant intensity shift
        # shows up only in the mean-pooled coordinates.
        img = make_rng(3).uniform(0.0, 0.5, (64, 64))
        base = extract_frozen_features(img, probe_seed=7)
        shifted = extract_frozen_features(img + 0.25, probe_seed=7)
        d = base.shape[0] // 2
        assert not np.allclose(base[:d], shifted[:d], atol=1e-9)
        assert np.allclose(base[d:], shifted[d:], atol=1e-9)

    def test_different_seed_different_features(self):
        img = make_rng(0).uniform(size=(64, 64))
        assert not np.allclose(
            extract_frozen_features(img, 1), extract_frozen_features(img, 2)
        )


class TestKmeans:
    FIXTURE = np.array([[0.0], [1.0], [10.0], [11.0]])

    def test_matches_exhaustive_partition_search(self):
        _, best_labels = best_partition_sse(self.FIXTURE, 2)
        for seed in range(6):
            result = kmeans(self.FIXTURE, 2, seed=seed)
            assert canonical(result.labels) == canonical(best_labels)

    def test_single_cluster_centroid_is_mean(self):
        result = kmeans(self.FIXTURE, 1, seed=0)
        assert np.allclose(result.centroids[0], self.FIXTURE.mean(axis=0))
        assert set(result.labels) == {0}

    def test_stable_under_duplication(self):
        doubled = np.vstack([self.FIXTURE, self.FIXTURE])
        result = kmeans(doubled, 2, seed=1)
        # Duplicates co-cluster and the induced partition matches the original.
        assert np.array_equal(result.labels[:4], result.labels[4:])
        _, best_labels = best_partition_sse(self.FIXTURE, 2)
        assert canonical(result.labels[:4]) == canonical(best_labels)

    def test_deterministic_in_seed(self):
        x = make_rng(5).standard_normal((40, 6))
        a = kmeans(x, 4, seed=9)
        b = kmeans(x, 4, seed=9)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centroids, b.centroids)

    def test_sse_history_non_increasing(self):
        x = make_rng(6).standard_normal((60, 4))
        result = kmeans(x, 5, seed=2)
        diffs = np.diff(result.sse_history)
        assert np.all(diffs <= 1e-9)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="lower the sub-class count"):
            kmeans(np.zeros((2, 3)), 4, seed=0)


class TestSubclassLabels:
    def test_one_hot_block(self):
        y_p = np.array([[1]])
        out = build_subclass_labels({(0, 0): 2}, y_p, k=4)
        assert np.array_equal(out, [[0, 0, 1, 0]])

    def test_absent_class_zero_block(self):
        y_p = np.array([[1, 0]])
        out = build_subclass_labels({(0, 0): 1}, y_p, k=2)
        assert np.array_equal(out, [[0, 1, 0, 0]])

    def test_assignment_for_missing_class_rejected(self):
        y_p = np.array([[0]])
        with pytest.raises(ValueError, match="no class"):
            build_subclass_labels({(0, 0): 0}, y_p, k=2)

    def test_missing_assignment_rejected(self):
        y_p = np.array([[1]])
        with pytest.raises(ValueError, match="missing"):
            build_subclass_labels({}, y_p, k=2)

    def test_row_sums_match_presence(self):
        ds = generate_dataset(SynthConfig(n_samples=40, n_classes=2, seed=7))
        assignments = cluster_subclasses(ds.samples, 2, 3, cluster_seed=1, feature_seed=2)
        y_p = np.stack([s.y_p for s in ds.samples])
        y_s = build_subclass_labels(assignments, y_p, k=3)
        for i in range(len(ds)):
            for c in range(2):
                assert y_s[i, c * 3 : (c + 1) * 3].sum() == y_p[i, c]


@pytest.fixture(scope="module")
def small_benchmark():
    ds = generate_dataset(SynthConfig(n_samples=60, image_size=64, seed=21))
    train, val, _ = split_dataset(ds, (0.7, 0.15, 0.15), seed=1)
    assignments = cluster_subclasses(train.samples, 1, 4, cluster_seed=0, feature_seed=0)
    y_p = np.stack([s.y_p for s in train.samples])
    y_s = build_subclass_labels(assignments, y_p, k=4)
    net = NetConfig(image_size=64, n_classes=1, k_subclasses=4, channels=(8, 16), init_seed=0)
    return net, train, val, y_s


class TestTraining:
    def test_zero_epochs_returns_init(self, small_benchmark):
        net, train, val, y_s = small_benchmark
        result = train_classifier(net, TrainConfig(epochs=0), train.samples, y_s)
        assert result.log == []
        from weakcam.nn import init_params

        init = init_params(net)
        assert all(np.array_equal(result.params[k], init[k]) for k in init)

    def test_fixed_seed_reproducible(self, small_benchmark):
        net, train, val, y_s = small_benchmark
        cfg = TrainConfig(epochs=2, seed=3)
        a = train_classifier(net, cfg, train.samples, y_s, val_samples=val.samples)
        b = train_classifier(net, cfg, train.samples, y_s, val_samples=val.samples)
        assert abs(a.log[-1].loss_p - b.log[-1].loss_p) < 1e-6
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_divergence_carries_last_params(self, small_benchmark):
        net, train, _, y_s = small_benchmark
        cfg = TrainConfig(epochs=3, peak_lr=1e30, start_div=1.0, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged) as err:
                train_classifier(net, cfg, train.samples, y_s)
        assert err.value.last_params is not None


class TestProbe:
    def test_subclass_head_bitwise_frozen(self, small_benchmark):
        net, train, val, y_s = small_benchmark
        from weakcam.nn import init_params

        init = init_params(net)
        result, rows = run_probe(
            net, TrainConfig(epochs=2, seed=4), train.samples, y_s,
            val_samples=val.samples, eval_interval=3,
        )
        assert np.array_equal(result.params["head_s.w"], init["head_s.w"])
        assert np.array_equal(result.params["head_s.b"], init["head_s.b"])
        assert len(rows) > 0

    def test_rows_at_interval(self, small_benchmark):
        net, train, val, y_s = small_benchmark
        _, rows = run_probe(
            net, TrainConfig(epochs=1, batch_size=12, seed=4), train.samples, y_s,
            val_samples=val.samples, eval_interval=2,
        )
        assert [r.step for r in rows] == [0, 2]

    def test_primary_loss_decreases(self, small_benchmark):
        net, train, val, y_s = small_benchmark
        result, _ = run_probe(
            net, TrainConfig(epochs=6, seed=4, peak_lr=0.08), train.samples, y_s,
            val_samples=val.samples, eval_interval=1000,
        )
        assert result.log[-1].loss_p < result.log[0].loss_p


class TestCam:
    def test_zero_head_zero_cam(self, small_benchmark):
        net, train, _, _ = small_benchmark
        from weakcam.nn import init_params

        params = init_params(net)
        params["head_p.w"] = np.zeros_like(params["head_p.w"])
        params["head_p.b"] = np.zeros_like(params["head_p.b"])
        cam = compute_cam(net, params, train.samples[0].image)
        assert np.array_equal(cam, np.zeros_like(cam))

    def test_range_and_peak(self, small_benchmark):
        net, train, _, y_s = small_benchmark
        trained = train_classifier(net, TrainConfig(epochs=2, seed=5), train.samples, y_s)
        cams = compute_cams_batch(
            net, trained.params,
            np.stack([s.image.astype(np.float64) for s in train.samples[:8]])[:, None],
        )
        assert cams.min() >= 0.0 and cams.max() <= 1.0
        for cam in cams:
            for c in range(cam.shape[0]):
                if cam[c].max() > 0:
                    assert cam[c].max() == 1.0

    def test_response_gap_equals_logit(self, small_benchmark):
        net, train, _, _ = small_benchmark
        from weakcam.nn import forward_batch, init_params

        params = init_params(net)
        images = np.stack([s.image.astype(np.float64) for s in train.samples[:4]])[:, None]
        resp = class_response_maps(net, params, images)
        logits = forward_batch(net, params, images).logits_p
        assert np.allclose(resp.mean(axis=(2, 3)), logits, atol=1e-6)

    def test_deterministic(self, small_benchmark):
        net, train, _, _ = small_benchmark
        from weakcam.nn import init_params

        params = init_params(net)
        a = compute_cam(net, params, train.samples[0].image)
        b = compute_cam(net, params, train.samples[0].image)
        assert np.array_equal(a, b)
