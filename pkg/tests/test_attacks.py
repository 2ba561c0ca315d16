import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xairefine import attacks, nn
from xairefine.attacks import AttackSpec
from xairefine.datagen import DatasetSplit

from conftest import linear_model, random_mlp


def _binary_linear(seed=0, d=5):
    rng = np.random.default_rng(seed)
    return linear_model(rng.normal(size=(2, d)), rng.normal(size=2) * 0.1)


class TestFgsm:
    def test_moves_every_coordinate_by_eps(self):
        m = random_mlp(0, [5, 4, 3])
        x = np.random.default_rng(0).uniform(-1, 1, 5)
        adv = attacks.fgsm(m, x, 1, 0.05)
        g = nn.backward(m, x, 1).input_grad
        np.testing.assert_allclose(adv - x, 0.05 * np.sign(g))

    def test_clipped_to_box(self):
        m = _binary_linear()
        x = np.full(5, 3.99)
        adv = attacks.fgsm(m, x, 0, 0.5)
        assert adv.max() <= 4.0

    def test_batch_equals_single(self):
        m = random_mlp(1, [4, 6, 2])
        X = np.random.default_rng(1).normal(size=(6, 4))
        y = np.array([0, 1, 0, 1, 1, 0])
        batch = attacks.fgsm(m, X, y, 0.1)
        for i in range(6):
            np.testing.assert_array_equal(batch[i], attacks.fgsm(m, X[i], y[i], 0.1))

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            attacks.fgsm(_binary_linear(), np.zeros(5), 0, -0.1)


class TestPgd:
    def test_single_step_equals_fgsm(self):
        for seed in range(10):
            m = random_mlp(seed, [6, 8, 3])
            X = np.random.default_rng(seed).uniform(-3, 3, size=(20, 6))
            y = np.random.default_rng(seed + 1).integers(0, 3, 20)
            for eps in (0.01, 0.1, 0.7):
                spec = AttackSpec("pgd", eps, steps=1, step_size=eps, random_start=False)
                assert attacks.pgd(m, X, y, spec).tobytes() == attacks.fgsm(m, X, y, eps).tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.01, 1.0), st.sampled_from([math.inf, 2]))
    def test_stays_in_ball_and_box(self, seed, eps, p):
        m = random_mlp(seed, [4, 5, 2])
        X = np.random.default_rng(seed).uniform(-4, 4, size=(5, 4))
        y = np.zeros(5, int)
        adv = attacks.pgd(m, X, y, AttackSpec("pgd", eps, steps=5, seed=seed), p=p)
        dist = np.linalg.norm(adv - X, ord=p, axis=1)
        assert np.all(dist <= eps * (1 + 1e-12))
        assert adv.min() >= -4 and adv.max() <= 4

    def test_linear_reaches_corner(self):
        m = _binary_linear(2)
        x = np.zeros(5)
        adv = attacks.pgd(m, x, 0, AttackSpec("pgd", 0.3, steps=20, seed=0))
        w = m.weights[0]
        np.testing.assert_allclose(adv, 0.3 * np.sign(w[1] - w[0]))

    def test_at_least_as_strong_as_fgsm(self):
        m = random_mlp(3, [6, 16, 2])
        X = np.random.default_rng(3).normal(size=(200, 6))
        y = nn.predict(m, X)
        s = DatasetSplit(X, y, 2)
        f = attacks.evaluate(m, s, AttackSpec("fgsm", 0.3)).accuracy
        p = attacks.evaluate(m, s, AttackSpec("pgd", 0.3, steps=20, seed=0)).accuracy
        assert p <= f

    def test_independent_of_batching(self):
        m = random_mlp(4, [4, 5, 2])
        X = np.random.default_rng(4).normal(size=(6, 4))
        y = np.ones(6, int)
        spec = AttackSpec("pgd", 0.2, steps=3, seed=7)
        whole = attacks.pgd(m, X, y, spec)
        tail = attacks.pgd(m, X[3:], y[3:], spec, index_offset=3)
        np.testing.assert_array_equal(whole[3:], tail)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AttackSpec("pgd", 0.1, steps=0)
        with pytest.raises(ValueError):
            AttackSpec("cw", 0.1)


class TestEvaluate:
    def test_separable(self):
        X = np.array([[-1.0, 0.0], [1.0, 0.0], [-2.0, 1.0], [2.0, -1.0]])
        y = np.array([0, 1, 0, 1])
        m = linear_model([[-1.0, 0.0], [1.0, 0.0]])
        assert attacks.evaluate(m, DatasetSplit(X, y, 2)).accuracy == 1.0

    def test_constant_predictor(self):
        X = np.random.default_rng(0).normal(size=(10, 3))
        y = np.array([0, 1] * 5)
        m = linear_model(np.zeros((2, 3)), [1.0, 0.0])
        res = attacks.evaluate(m, DatasetSplit(X, y, 2))
        assert res.accuracy == 0.5
        assert res.per_class == {0: 1.0, 1: 0.0}

    def test_deterministic(self):
        m = random_mlp(0, [4, 5, 2])
        s = DatasetSplit(np.random.default_rng(0).normal(size=(30, 4)), np.zeros(30, int), 2)
        spec = AttackSpec("pgd", 0.3, seed=3)
        assert attacks.evaluate(m, s, spec) == attacks.evaluate(m, s, spec)


class TestCorruptionGrid:
    def test_unattacked_cells_are_clean_accuracy(self):
        from xairefine.datagen import corrupt
        m = _binary_linear(0, 16)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(60, 16))
        s = DatasetSplit(X, nn.predict(m, X), 2)
        grid = attacks.eval_corruption_grid(m, s, ["gaussian_noise", "box_blur"], [1, 3], seed=2)
        for ki, k in enumerate(grid.kinds):
            for sev in grid.severities:
                bad = corrupt(s, k, sev, seed=2000 + ki * 10 + sev)
                assert grid.accuracy(k, sev) == attacks.evaluate(m, bad).accuracy

    def test_summary_rows(self):
        m = _binary_linear(1, 9)
        X = np.random.default_rng(1).normal(size=(40, 9))
        s = DatasetSplit(X, np.zeros(40, int), 2)
        grid = attacks.eval_corruption_grid(m, s, severities=[1, 2], seed=0)
        cells = np.array([[grid.accuracy(k, v) for v in (1, 2)] for k in grid.kinds])
        assert grid.mean == pytest.approx(cells.mean())
        assert grid.std == pytest.approx(cells.mean(axis=1).std())
        assert grid.mean_row()[1] == pytest.approx(cells[:, 0].mean())
        assert len(grid.to_dict()["cells"]) == 10


class TestMinPerturbation:
    @pytest.mark.parametrize("seed", range(5))
    def test_linear_analytic(self, seed):
        m = _binary_linear(seed, 6)
        x = np.random.default_rng(seed + 10).uniform(-0.5, 0.5, 6)
        y = int(nn.predict(m, x))
        w = m.weights[0]
        margin = nn.forward(m, x)[y] - nn.forward(m, x)[1 - y]
        truth = margin / np.abs(w[y] - w[1 - y]).sum()
        if truth > 3.0:
            pytest.skip("ball would reach the domain edge")
        res = 1e-3
        emp = attacks.min_perturbation_search(m, x, y, resolution=res, seed=seed)
        assert abs(emp - truth) <= 2 * res

    def test_misclassified(self):
        m = _binary_linear(0)
        x = np.zeros(5)
        y = 1 - int(nn.predict(m, x))
        assert attacks.min_perturbation_search(m, x, y) == 0.0

    def test_constant_model(self):
        m = linear_model(np.zeros((2, 3)), [1.0, 0.0])
        assert attacks.min_perturbation_search(m, np.zeros(3), 0) is None

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 200))
    def test_finer_resolution_tightens(self, seed):
        m = _binary_linear(seed, 4)
        x = np.random.default_rng(seed).uniform(-0.3, 0.3, 4)
        y = int(nn.predict(m, x))
        coarse = attacks.min_perturbation_search(m, x, y, resolution=1e-1, seed=seed, steps=20)
        fine = attacks.min_perturbation_search(m, x, y, resolution=1e-3, seed=seed, steps=20)
        if coarse is None:
            assert fine is None
        else:
            assert fine <= coarse + 1e-1
