import numpy as np
import pytest

from lsxlab import datasets, logic


def chi2_critical(df, z=2.3263):
    """Wilson-Hilferty upper quantile (z=2.3263 -> p=0.01)."""
    h = 2.0 / (9.0 * df)
    return df * (1.0 - h + z * np.sqrt(h)) ** 3


def chi2_stat(table):
    table = np.asarray(table, dtype=np.float64)
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    expect = rows * cols / table.sum()
    keep = expect > 0
    return float(((table - expect)[keep] ** 2 / expect[keep]).sum())


def fake_digits(n, seed, label_seed=None):
    """Cheap MNIST-shaped stand-in for confounder-construction tests."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 1.0, (n, 1, 28, 28))
    labels = np.random.default_rng(label_seed or seed + 1).integers(0, 10, n)
    return datasets.LabeledSet(x, labels, kind="fake", n_classes=10)


class TestIdx:
    def test_round_trip_and_pixel_scaling(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (10, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, 10).astype(np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        datasets.write_idx(ip, lp, imgs, labels)
        ds = datasets.load_idx(ip, lp)
        assert ds.inputs.shape == (10, 1, 28, 28)
        assert ds.inputs[0, 0, 0, 0] == imgs[0, 0, 0] / 255.0
        assert np.array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(1)
        imgs = rng.integers(0, 256, (3, 28, 28)).astype(np.uint8)
        labels = np.zeros(3, np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        datasets.write_idx(ip, lp, imgs, labels)
        with pytest.raises(datasets.DataError, match="magic"):
            datasets.load_idx(lp, lp)  # labels file where images expected

    def test_truncated_payload(self, tmp_path):
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        datasets.write_idx(ip, lp, np.zeros((4, 28, 28), np.uint8), np.zeros(4, np.uint8))
        raw = ip.read_bytes()
        ip.write_bytes(raw[:-100])
        with pytest.raises(datasets.DataError, match="truncated"):
            datasets.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        ip2 = tmp_path / "img2.idx"
        datasets.write_idx(ip, lp, np.zeros((4, 28, 28), np.uint8), np.zeros(4, np.uint8))
        datasets.write_idx(ip2, tmp_path / "x.idx", np.zeros((5, 28, 28), np.uint8), np.zeros(5, np.uint8))
        with pytest.raises(datasets.DataError, match="mismatch"):
            datasets.load_idx(ip2, lp)


class TestSynthDigits:
    def test_deterministic(self):
        a = datasets.synth_digits(30, seed=5)
        b = datasets.synth_digits(30, seed=5)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_seeds_differ(self):
        a = datasets.synth_digits(10, seed=1)
        b = datasets.synth_digits(10, seed=2)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_shape_and_range(self):
        ds = datasets.synth_digits(20, seed=3)
        assert ds.inputs.shape == (20, 1, 28, 28)
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
        assert set(np.unique(ds.labels)) <= set(range(10))


class TestDecoy:
    def test_train_shades_follow_class_code(self):
        base = fake_digits(60, 0)
        out = datasets.make_decoy(base, "train", seed=1)
        assert out.confounded
        for i in range(60):
            shade = datasets.decoy_shade(base.labels[i])
            corners = [out.inputs[i, 0, r:r + 4, c:c + 4] for r, c in ((0, 0), (0, 24), (24, 0), (24, 24))]
            hits = [np.all(c == shade) for c in corners]
            assert any(hits)

    def test_class0_patch_is_one_class9_is_30_255(self):
        assert datasets.decoy_shade(0) == 1.0
        assert datasets.decoy_shade(9) == pytest.approx(30 / 255)

    def test_pixels_outside_corners_untouched(self):
        base = fake_digits(20, 2)
        out = datasets.make_decoy(base, "train", seed=3)
        assert np.array_equal(out.inputs[:, :, 8:20, 8:20], base.inputs[:, :, 8:20, 8:20])

    def test_test_mode_seed_dependent(self):
        base = fake_digits(20, 4)
        a = datasets.make_decoy(base, "test", seed=1)
        b = datasets.make_decoy(base, "test", seed=2)
        assert not np.array_equal(a.inputs, b.inputs)
        assert not a.confounded

    def test_test_mode_shade_independent_of_label(self):
        base = datasets.LabeledSet(np.zeros((10_000, 1, 28, 28)),
                                   np.random.default_rng(7).integers(0, 10, 10_000),
                                   kind="fake", n_classes=10)
        out = datasets.make_decoy(base, "test", seed=9)
        shade = np.stack([out.inputs[:, 0, r:r + 4, c:c + 4].mean(axis=(1, 2))
                          for r, c in ((0, 0), (0, 24), (24, 0), (24, 24))]).max(axis=0)
        bins = np.minimum((shade * 8).astype(int), 7)
        table = np.zeros((10, 8))
        np.add.at(table, (out.labels, bins), 1)
        assert chi2_stat(table) < chi2_critical(9 * 7)

    def test_train_mode_shade_is_function_of_label(self):
        base = fake_digits(100, 5)
        out = datasets.make_decoy(base, "train", seed=6)
        shades = datasets.decoy_shade_vector(out.labels)
        for i in range(100):
            corners = [out.inputs[i, 0, r:r + 4, c:c + 4] for r, c in ((0, 0), (0, 24), (24, 0), (24, 24))]
            assert any(np.all(c == shades[i]) for c in corners)


class TestColor:
    def test_train_class_color_fixed_and_intensity_preserved(self):
        base = fake_digits(40, 1)
        out = datasets.make_color(base, "train", seed=2)
        assert out.inputs.shape == (40, 3, 28, 28)
        for i in range(40):
            want = base.inputs[i, 0][None] * datasets.COLOR_PALETTE[base.labels[i]][:, None, None]
            assert np.allclose(out.inputs[i], want, atol=1e-12)

    def test_black_background(self):
        base = fake_digits(5, 2)
        base.inputs[:, :, :5, :5] = 0.0
        out = datasets.make_color(base, "train", seed=0)
        assert np.all(out.inputs[:, :, :5, :5] == 0.0)

    def test_test_mode_color_independent_of_label(self):
        x = np.zeros((10_000, 1, 28, 28))
        x[:, 0, 0, 0] = 1.0  # marker pixel identifies the assigned palette color
        base = datasets.LabeledSet(x, np.random.default_rng(3).integers(0, 10, 10_000),
                                   kind="fake", n_classes=10)
        out = datasets.make_color(base, "test", seed=4)
        marker = out.inputs[:, :, 0, 0]
        color_idx = np.argmax((marker[:, None, :] == datasets.COLOR_PALETTE[None]).all(axis=2), axis=1)
        table = np.zeros((10, 10))
        np.add.at(table, (out.labels, color_idx), 1)
        assert chi2_stat(table) < chi2_critical(81)


class TestConceptHans:
    SPACE = logic.hans_space()

    def test_counts_and_determinism(self):
        rules = datasets.default_hans_rules()
        a = datasets.make_concept_hans(rules, 30, "train", seed=5)
        b = datasets.make_concept_hans(rules, 30, "train", seed=5)
        assert len(a) == 90 and a.n_classes == 3
        assert np.array_equal(a.inputs, b.inputs)

    def test_one_hot_groups(self):
        ds = datasets.make_concept_hans(datasets.default_hans_rules(), 20, "train", seed=1)
        space = self.SPACE
        pcol = space.presence_column()
        for z in ds.inputs:
            occupied = z[:, pcol] == 1.0
            for g in space.groups:
                if g.name == space.presence:
                    continue
                block = z[:, space.offset(g.name):space.offset(g.name) + len(g.values)]
                assert np.array_equal(block.sum(axis=1), occupied.astype(float))
            assert np.all(z[~occupied] == 0.0)

    def test_train_confounder_applied(self):
        # every train sample of class 0 contains a gray large cube
        rules = datasets.default_hans_rules()
        ds = datasets.make_concept_hans(rules, 40, "train", seed=2)
        gray_large_cube = logic.Rule.make(0, [[("shape", "cube"), ("size", "large"), ("color", "gray")]])
        for z, y in zip(ds.inputs, ds.labels):
            if y == 0:
                assert logic.rule_validity(gray_large_cube, z, self.SPACE) == 1.0

    def test_test_mode_cube_color_spread(self):
        rules = datasets.default_hans_rules()
        ds = datasets.make_concept_hans(rules, 200, "test", seed=3)
        gray_large_cube = logic.Rule.make(0, [[("shape", "cube"), ("size", "large"), ("color", "gray")]])
        hits = sum(
            logic.rule_validity(gray_large_cube, z, self.SPACE) == 1.0
            for z, y in zip(ds.inputs, ds.labels) if y == 0
        )
        # 8 colors -> about 1/8 of class-0 test cubes stay gray
        assert 0.02 < hits / 200 < 0.35

    def test_no_sample_satisfies_foreign_rule(self):
        rules = datasets.default_hans_rules()
        hard = {r.class_id: r.to_rule() for r in rules}
        for mode in ("train", "test"):
            ds = datasets.make_concept_hans(rules, 50, mode, seed=4)
            for z, y in zip(ds.inputs, ds.labels):
                assert logic.rule_validity(hard[y], z, self.SPACE) == 1.0
                for k, rule in hard.items():
                    if k != y:
                        assert logic.rule_validity(rule, z, self.SPACE) < 1.0


class TestCubNoisy:
    def test_prototype_ones_survive(self):
        protos = datasets.default_cub_prototypes()
        ds = datasets.make_cub_noisy(protos, 30, seed=1)
        assert len(ds) == 300
        for z, y in zip(ds.inputs[:, 0, :], ds.labels):
            assert np.all(z[protos[y] == 1.0] == 1.0)

    def test_zero_flip_rate(self):
        protos = np.zeros((1, 100))
        ds = datasets.make_cub_noisy(protos, 100, seed=2)  # 10k zero-bits
        rate = ds.inputs.mean()
        assert abs(rate - 0.25) < 0.02

    def test_rejects_non_binary(self):
        with pytest.raises(datasets.DataError):
            datasets.make_cub_noisy(np.full((2, 4), 0.5), 3, seed=0)


class TestSplits:
    def test_subset(self):
        pool = fake_digits(100, 0)
        pol = datasets.SplitPolicy(60, 20, "subset")
        learner, critic = datasets.make_splits(pool, pol, seed=1)
        assert len(learner) == 60 and len(critic) == 20
        assert set(critic.sample_ids) <= set(learner.sample_ids)

    def test_disjoint(self):
        pool = fake_digits(100, 1)
        pol = datasets.SplitPolicy(60, 20, "disjoint")
        learner, critic = datasets.make_splits(pool, pol, seed=2)
        assert len(np.intersect1d(learner.sample_ids, critic.sample_ids)) == 0

    def test_deconfounded_heldout(self):
        pool = fake_digits(100, 2)
        deconf = fake_digits(50, 3)
        deconf.sample_ids += 1_000_000
        pol = datasets.SplitPolicy(60, 30, "deconfounded-heldout")
        learner, critic = datasets.make_splits(pool, pol, seed=3, deconf_pool=deconf)
        assert len(np.intersect1d(learner.sample_ids, critic.sample_ids)) == 0
        assert len(critic) == 30

    def test_overlap_detected(self):
        pool = fake_digits(10, 4)
        pol = datasets.SplitPolicy(5, 5, "disjoint")
        learner, critic = datasets.make_splits(pool, pol, seed=0)
        with pytest.raises(datasets.DataError, match="overlap"):
            pol.check(learner, learner)


class TestCache:
    def test_round_trip(self, tmp_path):
        ds = datasets.make_concept_hans(datasets.default_hans_rules(), 5, "train", seed=9)
        datasets.save_set(tmp_path / "hans", ds)
        back = datasets.load_set(tmp_path / "hans")
        assert np.array_equal(back.inputs, ds.inputs)
        assert np.array_equal(back.labels, ds.labels)
        assert back.kind == ds.kind and back.confounded == ds.confounded
        assert (tmp_path / "hans.meta").read_text().startswith("kind=concept-hans")
