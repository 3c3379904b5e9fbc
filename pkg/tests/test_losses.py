"""Tests for the single-instance and mixed-instance losses."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bsimlab import losses as L
from bsimlab import ndgrad as nd
from bsimlab.ndgrad import AntipodalTargets, DegenerateNorm
from bsimlab.verify import gradient_suite


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def reverse_pairing(n):
    return np.arange(n)[::-1].copy()


def random_batch(n=4, dim=6, seed=0, lambdas=None):
    rng = np.random.default_rng(seed)
    z = [rng.standard_normal((n, dim)) for _ in range(4)]
    lam = rng.uniform(0, 1, n) if lambdas is None else lambdas
    return z, lam


def make_batch(z, lam, pairing=None):
    n = len(z[0])
    return L.BatchEmbeddings(*(nd.Tensor(x) for x in z), lam, reverse_pairing(n) if pairing is None else pairing)


class TestNtXent:
    def test_closed_form(self):
        za = np.eye(4)[:2]
        loss = L.nt_xent_baseline(za, za.copy(), 1.0)
        expected = -math.log(math.e / (math.e + 2.0))
        np.testing.assert_allclose(loss.per_anchor, expected, atol=1e-15)
        assert loss.value == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        za, zb = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        assert abs(L.nt_xent_baseline(za, zb, 0.2).value - oracles.nt_xent(za, zb, 0.2)) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        za, zb = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        perm = rng.permutation(6)
        a = L.nt_xent_baseline(za, zb, 0.5).value
        b = L.nt_xent_baseline(za[perm], zb[perm], 0.5).value
        assert abs(a - b) < 1e-12

    def test_counts(self):
        rng = np.random.default_rng(0)
        loss = L.nt_xent_baseline(rng.standard_normal((8, 3)), rng.standard_normal((8, 3)), 0.2)
        assert loss.counts == (16, 2 * 8 * 7)

    def test_too_small(self):
        with pytest.raises(ValueError):
            L.nt_xent_baseline(np.ones((1, 3)), np.ones((1, 3)), 0.2)


class TestSimclrBsim:
    @pytest.mark.parametrize("seed", range(5))
    def test_double_loop_oracle(self, seed):
        z, lam = random_batch(seed=seed)
        got = L.simclr_bsim_loss(make_batch(z, lam), 0.2).value
        assert abs(got - oracles.simclr_bsim(*z, lam, reverse_pairing(4), 0.2)) < 1e-12

    def test_other_pairing(self):
        z, lam = random_batch(n=6, seed=3)
        pairing = np.array([2, 4, 0, 5, 1, 3])
        got = L.simclr_bsim_loss(make_batch(z, lam, pairing), 0.3).value
        assert abs(got - oracles.simclr_bsim(*z, lam, pairing, 0.3)) < 1e-12

    def test_lambda_one_single_positive(self):
        z, _ = random_batch(seed=4)
        lam = np.ones(4)
        got = L.simclr_bsim_loss(make_batch(z, lam), 0.2)
        ref = L.simclr_paired_sim_loss(make_batch(z, lam), 0.2)
        assert got.value == ref.value
        assert abs(got.value - oracles.simclr_bsim(*z, lam, reverse_pairing(4), 0.2)) < 1e-12

    def test_anchor_symmetry(self):
        rng = np.random.default_rng(5)
        n = 6
        anchors = rng.standard_normal((n, 4))
        anchors[5] = anchors[0]  # the shared mixed embedding of pair (0, 5)
        positives = rng.standard_normal((n, 4))
        lam = rng.uniform(0, 1, n)
        lam[5] = 1.0 - lam[0]
        per = L._simclr_stream(nd.Tensor(anchors), nd.Tensor(positives), lam, reverse_pairing(n), 0.2).data
        assert abs(per[0] - per[5]) < 1e-12

    @pytest.mark.parametrize("n", [4, 8, 16, 32])
    def test_counts(self, n):
        z, lam = random_batch(n=n, dim=3)
        assert L.simclr_bsim_loss(make_batch(z, lam), 0.2).counts == (4 * n, 2 * n * (n - 2))

    def test_lambda_continuity(self):
        z, _ = random_batch(seed=6)
        values = [L.simclr_bsim_loss(make_batch(z, np.full(4, t)), 0.2).value for t in np.linspace(0, 1, 201)]
        assert np.max(np.abs(np.diff(values))) < 0.05

    @pytest.mark.parametrize("bad", [
        np.array([1, 0, 3]),        # wrong length
        np.array([1, 2, 3, 0]),     # not an involution
        np.array([0, 1, 3, 2]),     # fixed points
        np.array([3, 2, 1, 4]),     # out of range
    ])
    def test_invalid_pairing(self, bad):
        z, lam = random_batch()
        with pytest.raises(ValueError):
            make_batch(z, lam, bad)

    def test_odd_batch(self):
        z, lam = random_batch(n=5)
        with pytest.raises(ValueError):
            make_batch(z, lam, np.array([4, 3, 2, 1, 0]))

    def test_stream_shapes(self):
        z, lam = random_batch()
        z[2] = z[2][:, :3]
        with pytest.raises(ValueError):
            make_batch(z, lam)

    def test_temperature_limit(self):
        z, lam = random_batch(n=8)
        got = L.simclr_bsim_loss(make_batch(z, lam), 1e6).value
        assert abs(got - math.log(2 * 8 - 2)) < 1e-3


class TestMoco:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.q = unit_rows(rng.standard_normal((4, 6)))
        self.k1 = unit_rows(rng.standard_normal((4, 6)))
        self.k2 = unit_rows(rng.standard_normal((4, 6)))
        self.queue = unit_rows(rng.standard_normal((8, 6)))
        self.lam = rng.uniform(0, 1, 4)

    def test_oracle(self):
        got = L.moco_bsim_batch(self.q, self.k1, self.k2, self.queue, self.lam, 0.2).value
        ref = oracles.moco_bsim(self.q, self.k1, self.k2, self.queue, self.lam, 0.2)
        assert abs(got - ref) < 1e-12

    def test_infonce_oracle(self):
        got = L.moco_infonce(self.q, self.k1, self.queue, 0.2).value
        assert abs(got - oracles.moco_infonce(self.q, self.k1, self.queue, 0.2)) < 1e-12

    def test_lambda_one_collapse(self):
        a = L.moco_bsim_batch(self.q, self.k1, self.k2, self.queue, np.ones(4), 0.2)
        b = L.moco_infonce(self.q, self.k1, self.queue, 0.2, extra_negatives=self.k2)
        assert a.value == b.value
        ref = np.mean([oracles.moco_bsim(self.q[i:i + 1], self.k1[i:i + 1], self.k2[i:i + 1], self.queue, [1.0], 0.2)
                       for i in range(4)])
        assert abs(a.value - ref) < 1e-12

    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
    def test_closed_form(self, lam):
        q = np.zeros(10)
        q[0] = 1.0
        queue = np.eye(10)[1:9]
        loss = L.moco_bsim_loss(q, q, q, queue, lam, 1.0)
        assert abs(loss.value + math.log(math.e / (2 * math.e + 8))) < 1e-14

    def test_single_query(self):
        one = L.moco_bsim_loss(self.q[0], self.k1[0], self.k2[0], self.queue, self.lam[0], 0.2).value
        ref = oracles.moco_bsim(self.q[:1], self.k1[:1], self.k2[:1], self.queue, self.lam[:1], 0.2)
        assert abs(one - ref) < 1e-12

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            L.moco_bsim_batch(self.q * 2, self.k1, self.k2, self.queue, self.lam, 0.2)
        with pytest.raises(ValueError):
            L.moco_bsim_batch(self.q, self.k1 * 2, self.k2, self.queue, self.lam, 0.2)

    def test_missing_key(self):
        with pytest.raises(ValueError):
            L.moco_bsim_batch(self.q, self.k1, None, self.queue, 0.5, 0.2)
        with pytest.raises(ValueError):
            L.moco_bsim_batch(self.q, self.k1, None, None, 1.0, 0.2)

    def test_temperature_limit(self):
        got = L.moco_bsim_batch(self.q, self.k1, self.k2, self.queue, self.lam, 1e6).value
        assert abs(got - math.log(2 + 8)) < 1e-3

    def test_counts(self):
        loss = L.moco_bsim_batch(self.q, self.k1, self.k2, self.queue, self.lam, 0.2)
        assert loss.counts == (8, 32)


class TestByol:
    def test_perfect_alignment(self):
        z = np.random.default_rng(0).standard_normal((3, 5))
        assert L.byol_bsim_v0(z, z, z, 0.3).value == pytest.approx(0.0, abs=1e-15)

    def test_lambda_one_is_baseline(self):
        rng = np.random.default_rng(1)
        q, z1, z2 = (rng.standard_normal((3, 5)) for _ in range(3))
        assert abs(L.byol_bsim_v0(q, z1, z2, 1.0).value - L.byol_loss(q, z1).value) < 1e-15
        assert abs(L.byol_bsim_v1(q, z1, z2, 1.0).value - L.byol_loss(q, z1).value) < 1e-15

    def test_orthogonal_is_two(self):
        e = np.eye(3)
        assert L.byol_bsim_v0(e[0], e[1], e[2], 0.4).value == 2.0

    def test_equal_targets_v1_equals_v0(self):
        rng = np.random.default_rng(2)
        q, z = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        for lam in (0.0, 0.25, 0.9):
            assert abs(L.byol_bsim_v1(q, z, z, lam).value - L.byol_bsim_v0(q, z, z, lam).value) < 1e-14

    def test_orthogonal_midpoint(self):
        e = np.eye(3)
        assert abs(L.byol_bsim_v1(e[0], e[0], e[1], 0.5).value - (2 - math.sqrt(2))) < 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_oracles(self, seed):
        rng = np.random.default_rng(seed)
        q, z1, z2 = (rng.standard_normal((4, 6)) for _ in range(3))
        lam = rng.uniform(0, 1, 4)
        assert abs(L.byol_bsim_v0(q, z1, z2, lam).value - oracles.byol_v0(q, z1, z2, lam)) < 1e-12
        assert abs(L.byol_bsim_v1(q, z1, z2, lam).value - oracles.byol_v1(q, z1, z2, lam)) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_v1_gradient_is_scaled_v0(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(6)
        z1, z2 = unit_rows(rng.standard_normal((2, 6)))
        lam = float(rng.random())
        s = 1.0 / np.linalg.norm(lam * z1 + (1 - lam) * z2)
        grads = []
        for fn in (L.byol_bsim_v0, L.byol_bsim_v1):
            leaf = nd.Tensor(q, requires_grad=True)
            grads.append(nd.backward(fn(leaf, z1, z2, lam).scalar)[leaf])
        g0, g1 = grads
        cos = g0 @ g1 / (np.linalg.norm(g0) * np.linalg.norm(g1))
        assert abs(cos - 1) < 1e-10
        assert abs(np.linalg.norm(g1) / np.linalg.norm(g0) - s) < 1e-10
        assert s >= 1.0

    def test_antipodal(self):
        z = np.array([1.0, 0.0, 0.0])
        with pytest.raises(AntipodalTargets):
            L.byol_bsim_v1(np.ones(3), z, -z, 0.5)

    def test_degenerate_input(self):
        with pytest.raises(DegenerateNorm):
            L.byol_bsim_v0(np.zeros(3), np.ones(3), np.ones(3), 0.5)

    def test_symmetrize_identical_streams(self):
        rng = np.random.default_rng(3)
        q, z1, z2 = (rng.standard_normal((4, 5)) for _ in range(3))
        args = (q, z1, z2, 0.3)
        a = L.byol_bsim_v1(*args)
        tot = L.symmetrize_byol(L.byol_bsim_v1, args, args)
        assert tot.value == 2 * a.value

    def test_symmetrize_recomposition(self):
        rng = np.random.default_rng(4)
        a = [rng.standard_normal((4, 5)) for _ in range(3)] + [rng.uniform(0, 1, 4)]
        b = [rng.standard_normal((4, 5)) for _ in range(3)] + [rng.uniform(0, 1, 4)]
        tot = L.symmetrize_byol(L.byol_bsim_v0, a, b).value
        assert abs(tot - (L.byol_bsim_v0(*a).value + L.byol_bsim_v0(*b).value)) < 1e-15

    def test_symmetrize_lambda_one_baseline(self):
        rng = np.random.default_rng(5)
        p1, p2, t1, t2, o1, o2 = (rng.standard_normal((4, 5)) for _ in range(6))
        mixed = L.symmetrize_byol(L.byol_bsim_v1, (p1, t2, o2, 1.0), (p2, t1, o1, 1.0)).value
        base = L.symmetrize_byol(L.byol_loss, (p1, t2), (p2, t1)).value
        assert abs(mixed - base) < 1e-12


class TestWbsim:
    def setup_method(self):
        z, lam = random_batch(seed=7)
        self.bsim = L.simclr_bsim_loss(make_batch(z, lam), 0.2)
        self.sim = L.nt_xent_baseline(z[3], z[1], 0.2)

    def test_sim_only(self):
        assert L.wbsim_combine(self.bsim, self.sim, 0.0, 1.0).value == self.sim.value

    def test_bsim_only(self):
        assert L.wbsim_combine(self.bsim, self.sim, 1.0, 0.0).value == self.bsim.value

    def test_missing_zero_weight_term(self):
        assert L.wbsim_combine(None, self.sim, 0.0, 1.0).value == self.sim.value

    def test_linear(self):
        a = L.wbsim_combine(self.bsim, self.sim, 0.3, 0.2).value
        b = L.wbsim_combine(self.bsim, self.sim, 0.6, 0.4).value
        assert abs(b - 2 * a) < 1e-12
        assert abs(a - (0.3 * self.bsim.value + 0.2 * self.sim.value)) < 1e-14

    def test_invalid(self):
        with pytest.raises(ValueError):
            L.wbsim_combine(self.bsim, self.sim, 0.0, 0.0)
        with pytest.raises(ValueError):
            L.wbsim_combine(self.bsim, self.sim, 1.5, 0.0)
        with pytest.raises(ValueError):
            L.wbsim_combine(None, self.sim, 1.0, 0.0)


class TestLossConfig:
    def test_valid(self):
        assert L.LossConfig(0.2, 1.0, 1.0, "v1").byol_variant == "v1"

    @pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"w1": 1.2}, {"byol_variant": "v2"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            L.LossConfig(**kwargs)


class TestGradientSuite:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_losses(self, seed):
        errors = gradient_suite(n=8, seed=seed)
        assert len(errors) == 9
        assert max(errors.values()) < 1e-4, errors

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.05, 5.0))
    def test_simclr_any_temperature(self, tau):
        z, lam = random_batch(n=4, dim=3, seed=2)

        def fn(p):
            b = L.BatchEmbeddings(p["a"], p["b"], p["c"], p["d"], lam, reverse_pairing(4))
            return L.simclr_bsim_loss(b, tau).scalar

        rep = nd.grad_check(fn, dict(zip("abcd", z)), eps=1e-5)
        assert rep.worst < 1e-4
