import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindeq.elbo import (
    C_FLOOR,
    LinearChannelModel,
    SymbolPrior,
    VolterraChannelModel,
    cross_moment,
    kl_term,
    lag_windows,
    oracle_residual,
    quad_sq_moment,
    residual_linear,
    residual_volterra,
    sigma2_plugin,
    sym_grad_to_triu,
    triu_to_sym,
    vae_loss,
    vae_loss_and_grad,
)
from blindeq.optim import grad_check
from blindeq.qstats import PAM4, Constellation, compute_moments, upsample_moments

BPSK = Constellation((-1.0, 1.0))


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def sym(rng, L, scale=1.0):
    A = rng.normal(size=(L, L)) * scale
    return 0.5 * (A + A.T)


def window_expectation(p, const, f):
    """E_Q[f(x)] for one window of independent symbols with row distributions p (L x M)."""
    A = const.array
    total = 0.0
    for combo in itertools.product(range(const.size), repeat=p.shape[0]):
        w = np.prod([p[i, c] for i, c in enumerate(combo)])
        total += w * f(A[list(combo)])
    return total


def window_of(p, const):
    return compute_moments(p, const)


# ---------------------------------------------------------------------------
# residual_linear


class TestResidualLinear:
    def test_exact_fit_is_zero(self):
        rng = np.random.default_rng(0)
        idx = rng.integers(0, 4, 10)
        h = np.array([0.5, 1.0, -0.3])
        ms = compute_moments(np.eye(4)[idx], PAM4)
        y = lag_windows(ms.m1, 3, 10) @ h
        C, c = residual_linear(y, ms, h)
        assert C == 0.0 and np.all(c == 0.0)

    def test_single_sample_hand_value(self):
        ms = compute_moments([[0.5, 0.5]], BPSK)
        C, c = residual_linear([0.0], ms, [1.0])
        assert C == 1.0 and c.tolist() == [1.0]

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(11)
        p = rng.dirichlet(np.ones(4), 6)
        y, h = rng.normal(size=6), rng.normal(size=3)
        C, _ = residual_linear(y, compute_moments(p, PAM4), h)
        assert rel(C, oracle_residual(p, PAM4, y, h)) < 1e-10

    def test_rejects_nonfinite(self):
        ms = compute_moments([[0.5, 0.5]], BPSK)
        with pytest.raises(ValueError):
            residual_linear([np.nan], ms, [1.0])

    def test_oracle_l1_closed_form(self):
        rng = np.random.default_rng(2)
        p = rng.dirichlet(np.ones(4), 5)
        y = rng.normal(size=5)
        h = 0.7
        ms = compute_moments(p, PAM4)
        expect = np.sum(y**2 - 2 * y * ms.m1 * h + ms.m2 * h * h)
        assert rel(oracle_residual(p, PAM4, y, [h]), expect) < 1e-12


# ---------------------------------------------------------------------------
# cross / squared-quadratic moments


class TestCrossMoment:
    def test_l1_bpsk_zero(self):
        w = window_of(np.array([[0.5, 0.5]]), BPSK)
        assert cross_moment(w, [1.3], [[0.4]]) == 0.0

    def test_l1_closed_form(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(4), 1)
        w = window_of(p, PAM4)
        assert rel(cross_moment(w, [1.3], [[0.4]]), 1.3 * 0.4 * w.m3[0]) < 1e-14

    def test_one_hot(self):
        x = np.array([3.0, -1.0, 1.0])
        p = np.eye(4)[[3, 1, 2]]
        h, H = np.array([0.2, -0.5, 1.0]), sym(np.random.default_rng(0), 3)
        got = cross_moment(window_of(p, PAM4), h, H)
        assert rel(got, (x @ h) * (x @ H @ x)) < 1e-12

    def test_random_matches_enumeration(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = rng.dirichlet(np.ones(4), 3)
            h, H = rng.normal(size=3), sym(rng, 3)
            ref = window_expectation(p, PAM4, lambda x: (x @ h) * (x @ H @ x))
            assert rel(cross_moment(window_of(p, PAM4), h, H), ref) < 1e-10

    def test_rejects_asymmetric(self):
        w = window_of(np.full((2, 4), 0.25), PAM4)
        with pytest.raises(ValueError, match="symmetric"):
            cross_moment(w, [1.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


class TestQuadSqMoment:
    def test_l1_bpsk(self):
        w = window_of(np.array([[0.5, 0.5]]), BPSK)
        assert quad_sq_moment(w, [[0.7]]) == pytest.approx(0.49, rel=1e-15)

    def test_l1_pam4_uniform(self):
        w = window_of(np.full((1, 4), 0.25), PAM4)
        assert quad_sq_moment(w, [[1.0]]) == 41.0

    def test_random_matches_enumeration(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            p = rng.dirichlet(np.ones(4), 3)
            H = sym(rng, 3)
            ref = window_expectation(p, PAM4, lambda x: (x @ H @ x) ** 2)
            assert rel(quad_sq_moment(window_of(p, PAM4), H), ref) < 1e-10

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_dominates_squared_mean(self, L, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(4, 0.5), L)
        H = sym(rng, L)
        w = window_of(p, PAM4)
        mean = window_expectation(p, PAM4, lambda x: x @ H @ x)
        assert quad_sq_moment(w, H) >= mean**2 - 1e-9

    def test_rejects_asymmetric(self):
        w = window_of(np.full((2, 4), 0.25), PAM4)
        with pytest.raises(ValueError):
            quad_sq_moment(w, np.triu(np.ones((2, 2))))


# ---------------------------------------------------------------------------
# residual_volterra


class TestResidualVolterra:
    def test_h_zero_reduces_to_linear(self):
        rng = np.random.default_rng(7)
        for sps in (1, 2):
            p = rng.dirichlet(np.ones(4), 8)
            ms = upsample_moments(compute_moments(p, PAM4), sps)
            y, h = rng.normal(size=8 * sps), rng.normal(size=4)
            model = VolterraChannelModel(h, np.zeros(10), 1.0)
            Cv, cv = residual_volterra(y, ms, model)
            Cl, cl = residual_linear(y, ms, h)
            assert np.max(np.abs(cv - cl) / np.abs(cl)) <= 1e-12
            assert rel(Cv, Cl) <= 1e-12

    def test_exact_fit_is_zero(self):
        rng = np.random.default_rng(8)
        idx = rng.integers(0, 4, 9)
        h, H = rng.normal(size=3), sym(rng, 3)
        ms = compute_moments(np.eye(4)[idx], PAM4)
        W = lag_windows(ms.m1, 3, 9)
        y = W @ h + np.einsum("ni,ij,nj->n", W, H, W)
        C, _ = residual_volterra(y, ms, VolterraChannelModel(h, H, 1.0))
        assert abs(C) < 1e-9

    def test_random_l2_matches_oracle(self):
        rng = np.random.default_rng(9)
        p = rng.dirichlet(np.ones(4), 5)
        y, h, H = rng.normal(size=5), rng.normal(size=2), sym(rng, 2)
        C, _ = residual_volterra(y, compute_moments(p, PAM4), VolterraChannelModel(h, H, 1.0))
        assert rel(C, oracle_residual(p, PAM4, y, h, H)) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.sampled_from([1, 2, 3]), st.integers(0, 2**32 - 1))
    def test_fast_equals_naive(self, L, sps, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(4), 4)
        ms = upsample_moments(compute_moments(p, PAM4), sps)
        y = rng.normal(size=len(ms))
        model = VolterraChannelModel(rng.normal(size=L), sym(rng, L), 1.0)
        _, cf = residual_volterra(y, ms, model, method="fast")
        _, cn = residual_volterra(y, ms, model, method="naive")
        assert np.allclose(cf, cn, rtol=1e-10, atol=1e-10 * np.max(np.abs(cn)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_nonnegative(self, L, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(4, 0.3), 6)
        y = rng.normal(size=6)
        C, _ = residual_volterra(y, compute_moments(p, PAM4), VolterraChannelModel(rng.normal(size=L), sym(rng, L), 1.0))
        assert C >= -1e-9

    def test_unknown_method(self):
        ms = compute_moments(np.full((2, 4), 0.25), PAM4)
        with pytest.raises(ValueError):
            residual_volterra([0.0, 0.0], ms, VolterraChannelModel.identity(1), method="fft")


class TestOracle:
    def test_one_hot_is_realized_residual(self):
        idx = [0, 3, 1]
        h = np.array([1.0, 0.5])
        x = PAM4.array[idx]
        y = np.array([1.0, 2.0, 3.0])
        yhat = np.array([x[0] * h[0], x[1] * h[0] + x[0] * h[1], x[2] * h[0] + x[1] * h[1]])
        got = oracle_residual(np.eye(4)[idx], PAM4, y, h, offset=0)
        assert rel(got, np.sum((y - yhat) ** 2)) < 1e-14

    def test_lag_limit(self):
        with pytest.raises(ValueError, match="L <= 8"):
            oracle_residual(np.full((9, 2), 0.5), BPSK, np.zeros(9), np.ones(9))

    def test_window_budget(self):
        big = Constellation(tuple(float(i) for i in range(32)))
        with pytest.raises(ValueError, match="budget"):
            oracle_residual(np.full((8, 32), 1 / 32), big, np.zeros(8), np.ones(8))


def test_lag_windows_zero_padding():
    W = lag_windows(np.array([1.0, 2.0, 3.0]), 3, 3, offset=1)
    assert W.tolist() == [[2, 1, 0], [3, 2, 1], [0, 3, 2]]


def test_triu_roundtrip():
    rng = np.random.default_rng(0)
    H = sym(rng, 5)
    t = H[np.triu_indices(5)]
    assert np.array_equal(triu_to_sym(t, 5), H)
    G = rng.normal(size=(5, 5))
    g = sym_grad_to_triu(G)
    # directional derivative of <G, triu_to_sym(t)> along e_k equals g_k
    for k in range(t.size):
        e = np.zeros_like(t)
        e[k] = 1.0
        assert np.sum(G * triu_to_sym(e, 5)) == pytest.approx(g[k])


def test_channel_model_validation():
    with pytest.raises(ValueError):
        LinearChannelModel(np.ones(3), 0.0)
    with pytest.raises(ValueError):
        VolterraChannelModel(np.ones(2), np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0)
    m = VolterraChannelModel(np.ones(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)
    assert np.array_equal(m.H, [[1, 2], [2, 1]])


# ---------------------------------------------------------------------------
# KL, plug-in, loss


class TestKL:
    def test_uniform_is_zero(self):
        assert kl_term(np.full((7, 4), 0.25), SymbolPrior.flat(4)) == 0.0

    def test_one_hot(self):
        assert kl_term(np.eye(4)[[2]], SymbolPrior.flat(4)) == pytest.approx(np.log(4), rel=1e-15)

    def test_half_half(self):
        assert kl_term([[0.5, 0.5, 0, 0]], SymbolPrior.flat(4)) == pytest.approx(np.log(2), rel=1e-15)

    def test_zero_prior_mass_rejected(self):
        with pytest.raises(ValueError, match="zero mass"):
            kl_term([[0.5, 0.5]], SymbolPrior(np.array([1.0, 0.0])))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(4, 0.7), 5)
        prior = rng.dirichlet(np.ones(4))
        perm = rng.permutation(4)
        a = kl_term(p, SymbolPrior(prior))
        b = kl_term(p[:, perm], SymbolPrior(prior[perm]))
        assert a >= 0.0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


class TestSigma2:
    def test_values(self):
        assert sigma2_plugin(10.0, 5) == 2.0
        assert sigma2_plugin(0.0, 5) == C_FLOOR
        with pytest.raises(ValueError):
            sigma2_plugin(1.0, 0)

    def test_stationarity(self):
        rng = np.random.default_rng(4)
        p = rng.dirichlet(np.ones(4), 20)
        y = rng.normal(size=40)
        model = VolterraChannelModel(rng.normal(size=5), sym(rng, 5, 0.2), 1.0)
        res = vae_loss_and_grad(p, y, model, SymbolPrior.flat(4), PAM4, sps=2, grad=False)
        N, C = res.n_samples, res.C

        def nelbo(s2):  # Gaussian likelihood with sigma^2 explicit; constants dropped
            return 0.5 * N * np.log(s2) + C / (2.0 * s2) + res.kl

        s2 = sigma2_plugin(C, N)
        eps = 1e-6 * s2
        d = (nelbo(s2 + eps) - nelbo(s2 - eps)) / (2 * eps)
        assert abs(d) < 1e-6


class TestLoss:
    def test_uniform_q_is_n_log_c(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=12)
        res = vae_loss_and_grad(np.full((6, 4), 0.25), y, LinearChannelModel(rng.normal(size=3), 1.0),
                                SymbolPrior.flat(4), PAM4, sps=2, grad=False)
        assert res.kl == 0.0
        assert res.loss == 12 * np.log(res.C)

    def test_v2vae_h_zero_equals_vae(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(4), 10)
        y, h = rng.normal(size=20), rng.normal(size=5)
        a = vae_loss(p, y, LinearChannelModel(h, 1.0), SymbolPrior.flat(4), PAM4, sps=2)
        b = vae_loss(p, y, VolterraChannelModel(h, np.zeros(15), 1.0), SymbolPrior.flat(4), PAM4, sps=2)
        assert rel(b, a) <= 1e-12

    def test_floor_applied(self):
        idx = [0, 1, 2]
        ms = compute_moments(np.eye(4)[idx], PAM4)
        res = vae_loss_and_grad(np.eye(4)[idx], ms.m1, LinearChannelModel([1.0], 1.0), SymbolPrior.flat(4), PAM4)
        assert res.C == 0.0
        assert res.loss == pytest.approx(3 * np.log(4) + 3 * np.log(C_FLOOR))
        assert np.all(res.grad_h == 0.0)

    @pytest.mark.parametrize("volterra", [False, True])
    @pytest.mark.parametrize("sps", [1, 2])
    def test_gradients_finite_difference(self, volterra, sps):
        rng = np.random.default_rng(20 + sps + 2 * volterra)
        prior = SymbolPrior.flat(4)
        for _ in range(5):
            L, n = 5, 8
            p = rng.dirichlet(np.full(4, 4.0), n)
            y = rng.normal(size=n * sps)
            h = rng.normal(size=L)
            h2 = rng.normal(size=L * (L + 1) // 2) * 0.3

            def model(h_, h2_):
                return VolterraChannelModel(h_, h2_, 1.0) if volterra else LinearChannelModel(h_, 1.0)

            res = vae_loss_and_grad(p, y, model(h, h2), prior, PAM4, sps=sps)
            f_p = lambda x: vae_loss(x.reshape(p.shape), y, model(h, h2), prior, PAM4, sps=sps)  # noqa: E731
            assert grad_check(f_p, res.grad_probs, p) < 1e-4
            assert grad_check(lambda x: vae_loss(p, y, model(x, h2), prior, PAM4, sps=sps), res.grad_h, h) < 1e-4
            if volterra:
                g = grad_check(lambda x: vae_loss(p, y, model(h, x), prior, PAM4, sps=sps), res.grad_h2, h2)
                assert g < 1e-4
            else:
                assert res.grad_h2 is None

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_descent_along_negative_gradient(self, seed, volterra):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(4), 6)
        y = rng.normal(size=12)
        h, h2 = rng.normal(size=3), rng.normal(size=6) * 0.2
        prior = SymbolPrior.flat(4)

        def loss(t, gh, gh2):
            m = (VolterraChannelModel(h - t * gh, h2 - t * gh2, 1.0) if volterra
                 else LinearChannelModel(h - t * gh, 1.0))
            return vae_loss(p, y, m, prior, PAM4, sps=2)

        m0 = VolterraChannelModel(h, h2, 1.0) if volterra else LinearChannelModel(h, 1.0)
        res = vae_loss_and_grad(p, y, m0, prior, PAM4, sps=2)
        gh = res.grad_h
        gh2 = res.grad_h2 if volterra else np.zeros(6)
        gnorm = np.sqrt(np.sum(gh**2) + np.sum(gh2**2))
        if gnorm < 1e-8:
            return
        ts = np.geomspace(1e-8, 1.0, 60) / gnorm
        vals = np.array([loss(t, gh, gh2) for t in ts])
        best = np.argmin(vals)
        # exact line search over the grid lands strictly below the start, and
        # the loss decreases monotonically up to the minimizer
        assert vals[best] < res.loss
        assert np.all(np.diff(vals[: best + 1]) <= 1e-9 * abs(res.loss))
