import csv

import numpy as np
import pytest

from pemb import BadConfig, MixConfig, OutOfRange, ToyConfig, generate_toy, run_toy

# trimmed sizes keep each optimization under a second; the full-scale
# thresholds are exercised by the acceptance suite
FAST = dict(samples_per_class=120, confusing_per_pair=40, epochs=80, batch_size=128)


class TestGenerate:
    def test_counts_and_pair_structure(self):
        cfg = ToyConfig(seed=0, **FAST)
        data = generate_toy(cfg)
        n = cfg.num_classes * cfg.samples_per_class
        assert data.num_points == n
        assert data.is_confusing.sum() == cfg.num_classes * cfg.confusing_per_pair
        # confusing points in class c borrow the cyclically next class
        for c in range(cfg.num_classes):
            sel = (data.label_primary == c) & data.is_confusing
            assert sel.sum() == cfg.confusing_per_pair
            assert (data.label_second[sel] == (c + 1) % cfg.num_classes).all()
        assert (data.label_second[~data.is_confusing] == -1).all()

    def test_centroid_separation(self):
        for seed in range(5):
            data = generate_toy(ToyConfig(seed=seed, **FAST))
            c = data.centroids
            for i in range(len(c)):
                for j in range(i + 1, len(c)):
                    assert np.linalg.norm(c[i] - c[j]) >= 0.5

    def test_log_sigma_within_configured_range(self):
        cfg = ToyConfig(seed=3, **FAST)
        data = generate_toy(cfg)
        lo, hi = cfg.log_sigma_range
        half = 0.5 * data.log_var
        assert half.min() >= lo and half.max() <= hi

    def test_deterministic(self):
        a = generate_toy(ToyConfig(seed=11, **FAST))
        b = generate_toy(ToyConfig(seed=11, **FAST))
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.log_var, b.log_var)
        np.testing.assert_array_equal(a.label_second, b.label_second)


class TestDrawLabels:
    def test_only_confusing_points_flip(self):
        data = generate_toy(ToyConfig(seed=0, **FAST))
        rng = np.random.default_rng(0)
        for _ in range(5):
            labels = data.draw_labels(rng)
            steady = ~data.is_confusing
            assert (labels[steady] == data.label_primary[steady]).all()
            flipped = labels != data.label_primary
            assert (labels[flipped] == data.label_second[flipped]).all()

    def test_flip_rate_near_half(self):
        data = generate_toy(ToyConfig(seed=1, **FAST))
        rng = np.random.default_rng(7)
        draws = np.array([
            (data.draw_labels(rng) != data.label_primary)[data.is_confusing]
            for _ in range(200)
        ])
        rate = draws.mean()
        assert 0.45 < rate < 0.55


class TestRun:
    def test_deterministic_reports(self):
        cfg = ToyConfig(seed=5, objective="csd", **FAST)
        r1 = run_toy(cfg)
        r2 = run_toy(cfg)
        assert r1.to_dict() == r2.to_dict()

    def test_report_fields(self):
        r = run_toy(ToyConfig(seed=0, objective="csd", **FAST))
        d = r.to_dict()
        assert set(d) == {"mean_var_certain", "mean_var_uncertain", "ratio", "final_loss"}
        assert d["ratio"] == pytest.approx(d["mean_var_uncertain"] / d["mean_var_certain"])

    def test_csd_shrinks_certain_variance(self):
        cfg = ToyConfig(seed=2, objective="csd", **FAST)
        data = generate_toy(cfg)
        init_certain = np.exp(data.log_var)[~data.is_confusing].mean()
        r = run_toy(cfg)
        assert r.mean_var_certain < init_certain

    def test_csd_separates_more_than_wasserstein(self):
        # the headline effect survives at reduced scale
        r_csd = run_toy(ToyConfig(seed=0, objective="csd", **FAST))
        r_w2 = run_toy(ToyConfig(seed=0, objective="wasserstein2", **FAST))
        assert r_csd.ratio > r_w2.ratio

    def test_triplet_leaves_variances_at_init(self):
        cfg = ToyConfig(seed=4, objective="triplet_hnm", **FAST)
        data = generate_toy(cfg)
        var0 = np.exp(data.log_var)
        r = run_toy(cfg)
        assert r.mean_var_certain == pytest.approx(var0[~data.is_confusing].mean())
        assert r.mean_var_uncertain == pytest.approx(var0[data.is_confusing].mean())

    def test_mix_path_deterministic(self):
        cfg = ToyConfig(seed=0, objective="csd", mix=MixConfig(), **FAST)
        assert run_toy(cfg).to_dict() == run_toy(cfg).to_dict()

    def test_snapshot_csv(self, tmp_path):
        path = tmp_path / "states.csv"
        cfg = ToyConfig(seed=0, objective="csd", samples_per_class=40,
                        confusing_per_pair=10, epochs=6, batch_size=64)
        run_toy(cfg, snapshot_path=str(path), snapshot_every=3)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "index", "mu_x", "mu_y", "var_x", "var_y", "confusing"]
        n = cfg.num_classes * cfg.samples_per_class
        # snapshots at epochs 3 and 6 (1-based stride) -> epochs 2 and 5
        assert len(rows) - 1 == 2 * n
        epochs = {r[0] for r in rows[1:]}
        assert epochs == {"2", "5"}
        assert all(float(r[4]) > 0 for r in rows[1:])


class TestValidation:
    def test_unknown_objective(self):
        with pytest.raises(BadConfig):
            ToyConfig(objective="contrastive")

    def test_positive_epochs(self):
        with pytest.raises(OutOfRange):
            ToyConfig(epochs=0)

    def test_confusing_bounded_by_class_size(self):
        with pytest.raises(OutOfRange):
            ToyConfig(samples_per_class=100, confusing_per_pair=101)

    def test_mix_ratio_range(self):
        with pytest.raises(OutOfRange):
            MixConfig(mix_ratio=1.5)
        with pytest.raises(OutOfRange):
            MixConfig(beta_param=0.0)
