"""Monte Carlo EM driver tests.

Oracles: penalized spline regression solved directly, batch-means arithmetic
recomputed inline, central finite differences of the Monte Carlo objective,
and algebraic identities of the normalization map.
"""

import numpy as np
import pytest

from fpcox.basis import make_hazard_basis, make_orthonormal_bspline, roughness_penalty
from fpcox.errors import (
    DegenerateComponentError,
    InsufficientSamplesError,
    SamplerFailureError,
    StaleFitError,
)
from fpcox.model import (
    Bases,
    JointParams,
    Subject,
    SurvivalRecord,
    TrajectorySet,
    TuningParams,
    complete_loglik,
    flatten_params,
    penalized_loglik,
    penalty_value,
)
from fpcox.mcem import (
    FitConfig,
    MHState,
    MonteCarloQ,
    estep,
    expected_complete_loglik,
    fit,
    mc_error,
    monte_carlo_q,
    mstep,
    normalize_identifiability,
    sample_scores,
)
from fpcox import mcem as mcem_mod


@pytest.fixture(scope="module")
def basis():
    return make_orthonormal_bspline(q=8, degree=3, domain=(0.0, 20.0))


def random_params(q, p, K, m, family="gaussian", seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    theta_psi = np.linalg.qr(rng.normal(size=(q, p)))[0] if p \
        else np.zeros((q, 0))
    d = np.sort(rng.uniform(0.5, 6.0, size=p))[::-1] if p else np.zeros(0)
    return JointParams(
        theta_mu=rng.normal(scale=0.5, size=q),
        theta_psi=theta_psi,
        sigma_eps2=float(rng.uniform(0.3, 1.5)) if family == "gaussian"
        else None,
        d=d,
        a=np.array([-1.5, rng.normal(scale=0.02)]),
        b=rng.normal(scale=scale / 3, size=K),
        beta=rng.normal(scale=scale, size=p),
        eta=rng.normal(scale=scale, size=m),
    )


def joint_data(basis, n_subjects=9, seed=0, family="gaussian", n_obs=6,
               empty=False):
    """Mixed-censoring dataset simulated from a smooth trajectory model."""
    rng = np.random.default_rng(seed)
    q = basis.q
    theta_psi = np.linalg.qr(rng.normal(size=(q, 2)))[0]
    theta_mu = rng.normal(scale=0.5, size=q)
    subjects = []
    kinds = ["exact", "interval", "right"]
    for i in range(n_subjects):
        if empty:
            times = np.empty(0)
            y = np.empty(0)
        else:
            times = np.sort(rng.uniform(0.3, 19.7, size=n_obs))
            xi = rng.normal(size=2) * np.sqrt([4.0, 1.0])
            x = basis.design(times) @ (theta_mu + theta_psi @ xi)
            if family == "gaussian":
                y = x + rng.normal(scale=0.7, size=n_obs)
            else:
                y = (rng.random(n_obs) < 1 / (1 + np.exp(-x))).astype(float)
        surv = {
            "exact": SurvivalRecord(3.0 + 0.9 * i, 3.0 + 0.9 * i, 1),
            "interval": SurvivalRecord(2.0 + 0.4 * i, 6.0 + 0.8 * i, 1),
            "right": SurvivalRecord(9.0 + 0.5 * i, 9.0 + 0.5 * i, 0),
        }[kinds[i % 3]]
        subjects.append(Subject(id=f"s{i}", times=times, y=y,
                                z=np.array([float(i % 2)]), survival=surv))
    return TrajectorySet(subjects=subjects, family=family,
                         domain=(0.0, 20.0))


def joint_bases(basis, data, K=3):
    hazard = make_hazard_basis([s.survival for s in data.subjects], K=K)
    return Bases(longitudinal=basis, hazard=hazard)


class TestMcError:
    def test_iid_normal_matches_root_r(self):
        rng = np.random.default_rng(3)
        se = mc_error(rng.standard_normal(1000))
        assert 0.5 * 0.0316 < se < 1.5 * 0.0316

    def test_constant_sequence_zero(self):
        assert mc_error(np.full(1000, 2.5)) == 0.0

    def test_batch_layout_1000(self):
        values = np.arange(1000.0)
        oracle = values.reshape(10, 100).mean(axis=1).std(ddof=1) \
            / np.sqrt(10)
        assert mc_error(values) == pytest.approx(oracle, rel=1e-12)

    def test_cube_root_never_overshoots(self):
        # 728 = 9^3 - 1 must give 8 batches, not 9
        values = np.arange(728.0)
        oracle = values[: 8 * 91].reshape(8, 91).mean(axis=1).std(ddof=1) \
            / np.sqrt(8)
        assert mc_error(values) == pytest.approx(oracle, rel=1e-12)

    def test_exact_cube(self):
        values = np.sin(np.arange(1331.0))
        oracle = values.reshape(11, 121).mean(axis=1).std(ddof=1) \
            / np.sqrt(11)
        assert mc_error(values) == pytest.approx(oracle, rel=1e-12)

    def test_too_few_draws(self):
        with pytest.raises(InsufficientSamplesError):
            mc_error(np.arange(7.0))


class TestNormalize:
    def test_orthonormal_descending_signs(self, basis):
        params = random_params(8, 3, 2, 1, seed=5)
        params.theta_psi = np.random.default_rng(5).normal(size=(8, 3))
        new, A = normalize_identifiability(params)
        assert np.allclose(new.theta_psi.T @ new.theta_psi, np.eye(3),
                           atol=1e-10)
        assert np.all(np.diff(new.d) <= 0) and np.all(new.d > 0)
        for l in range(3):
            col = new.theta_psi[:, l]
            assert col[np.argmax(np.abs(col))] > 0

    def test_similarity_preserved(self):
        params = random_params(8, 2, 2, 1, seed=6)
        params.theta_psi = np.random.default_rng(6).normal(size=(8, 2))
        C = params.theta_psi @ np.diag(params.d) @ params.theta_psi.T
        new, _ = normalize_identifiability(params)
        C2 = new.theta_psi @ np.diag(new.d) @ new.theta_psi.T
        assert np.abs(C - C2).max() < 1e-10

    def test_idempotent(self):
        params = random_params(8, 2, 2, 1, seed=7)
        once, _ = normalize_identifiability(params)
        twice, A2 = normalize_identifiability(once)
        assert np.allclose(twice.theta_psi, once.theta_psi, atol=1e-10)
        assert np.allclose(twice.d, once.d, atol=1e-12)
        assert np.allclose(twice.beta, once.beta, atol=1e-10)
        assert np.allclose(A2, np.eye(2), atol=1e-8)

    def test_score_map_identities(self):
        params = random_params(8, 2, 2, 1, seed=8)
        params.theta_psi = np.random.default_rng(8).normal(size=(8, 2))
        new, A = normalize_identifiability(params)
        rng = np.random.default_rng(80)
        for _ in range(20):
            xi = rng.normal(size=2)
            assert np.allclose(new.theta_psi @ (A @ xi),
                               params.theta_psi @ xi, atol=1e-10)
            assert (A @ xi) @ new.beta == pytest.approx(xi @ params.beta,
                                                        abs=1e-10)

    def test_likelihood_preserved_per_draw(self, basis):
        # orthonormal loadings with shuffled variances and adversarial
        # signs: the normalization is a signed permutation, |det A| = 1
        data = joint_data(basis, n_subjects=6, seed=9)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=9)
        params.theta_psi = params.theta_psi * np.array([-1.0, 1.0])
        params.d = np.array([1.0, 5.0])
        new, A = normalize_identifiability(params)
        rng = np.random.default_rng(90)
        for _ in range(30):
            xi = rng.normal(size=(6, 2), scale=1.5)
            before = complete_loglik(data, params, bases, list(xi))
            after = complete_loglik(data, new, bases, list(xi @ A.T))
            assert after == pytest.approx(before, abs=1e-8)

    def test_general_input_shifts_by_log_det(self, basis):
        # non-orthonormal loadings: the score map carries a volume factor,
        # so the frailty term shifts by exactly -log|det A|
        data = joint_data(basis, n_subjects=6, seed=9)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=9)
        params.theta_psi = np.random.default_rng(9).normal(size=(8, 2))
        new, A = normalize_identifiability(params)
        logdet = np.linalg.slogdet(A)[1]
        rng = np.random.default_rng(91)
        for _ in range(10):
            xi = rng.normal(size=(6, 2), scale=1.5)
            before = complete_loglik(data, params, bases, list(xi))
            after = complete_loglik(data, new, bases, list(xi @ A.T))
            assert after + len(data.subjects) * logdet == pytest.approx(
                before, abs=1e-8)

    def test_degenerate_component_named(self):
        params = random_params(8, 2, 2, 1, seed=10)
        params.d = np.array([4.0, 0.0])
        with pytest.raises(DegenerateComponentError) as err:
            normalize_identifiability(params)
        assert err.value.component == 2

    def test_p_zero_passthrough(self):
        params = random_params(8, 0, 2, 1, seed=11)
        new, A = normalize_identifiability(params)
        assert A.shape == (0, 0)
        assert np.allclose(new.theta_mu, params.theta_mu)


class TestEstep:
    def test_zero_draw_q_equals_penalized_loglik(self, basis):
        data = joint_data(basis, n_subjects=5, seed=12)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=12)
        tuning = TuningParams(p=2, h_mu=0.7, h_psi=1.3, sigma_b2=0.9)
        penalty = roughness_penalty(basis)
        draws = np.zeros((5, 1, 2))
        got = monte_carlo_q(data, params, tuning, penalty, bases, draws)
        want = penalized_loglik(data, params, tuning, penalty, bases,
                                [np.zeros(2)] * 5)
        assert got == pytest.approx(want, rel=1e-12)

    def test_moments_are_draw_averages(self, basis):
        data = joint_data(basis, n_subjects=4, seed=13)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=13)
        state = MHState(xi=np.zeros((4, 2)), scales=np.ones((4, 2)),
                        acceptance=np.zeros((4, 2)), seed=1)
        mc = estep(data, params, bases, R=64, state=state)
        assert mc.draws.shape == (4, 64, 2)
        assert np.allclose(mc.xi_bar, mc.draws.mean(axis=1), atol=1e-14)
        want = np.einsum("irp,irq->ipq", mc.draws, mc.draws) / 64
        assert np.allclose(mc.xi_outer, want, atol=1e-14)

    def test_doubling_r_shrinks_q_error(self, basis):
        data = joint_data(basis, n_subjects=1, seed=14)
        hazard = make_hazard_basis([SurvivalRecord(2, 6, 1),
                                    SurvivalRecord(3, 9, 1)], K=1)
        bases = Bases(longitudinal=basis, hazard=hazard)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=14)
        ratios = []
        for trial in range(20):
            ses = []
            for R in (256, 512):
                state = MHState(xi=np.zeros((1, 2)), scales=np.ones((1, 2)),
                                acceptance=np.zeros((1, 2)), seed=trial)
                mc = estep(data, params, bases, R=R, state=state,
                           em_iter=trial)
                ses.append(mc_error(mc.increments))
            ratios.append(ses[0] / ses[1])
        mean_ratio = float(np.exp(np.mean(np.log(ratios))))
        assert np.sqrt(2.0) / 1.6 < mean_ratio < np.sqrt(2.0) * 1.6

    def test_bad_start_recovers(self, basis):
        data = joint_data(basis, n_subjects=3, seed=15)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=15)
        params.beta = np.array([5.0, 0.0])
        state = MHState(xi=np.full((3, 2), 1e200), scales=np.ones((3, 2)),
                        acceptance=np.zeros((3, 2)), seed=2)
        mc = estep(data, params, bases, R=32, state=state)
        assert np.all(np.isfinite(mc.draws))

    def test_persistent_bad_target_names_subject(self, basis):
        data = joint_data(basis, n_subjects=3, seed=16)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=16)
        params.eta = np.array([800.0])  # exact-event subject overflows
        state = MHState(xi=np.zeros((3, 2)), scales=np.ones((3, 2)),
                        acceptance=np.zeros((3, 2)), seed=3)
        with pytest.raises(SamplerFailureError) as err:
            estep(data, params, bases, R=16, state=state)
        assert err.value.subject_id in {"s0", "s1", "s2"}


class TestSampleScores:
    def test_prior_recovery_empty_subject(self, basis):
        subject = Subject(id="empty", times=np.empty(0), y=np.empty(0),
                          z=np.zeros(0), survival=SurvivalRecord(1, 1, 0))
        hazard = make_hazard_basis([SurvivalRecord(2, 6, 1),
                                    SurvivalRecord(3, 9, 1)], K=1)
        bases = Bases(longitudinal=basis, hazard=hazard)
        params = random_params(8, 2, 1, 0, seed=17)
        params.d = np.array([4.0, 1.0])
        draws = sample_scores(subject, params, bases, R=5000,
                              include_survival=False, seed=11)
        for l in range(2):
            se = mc_error(draws[:, l])
            assert abs(draws[:, l].mean()) < 3 * se + 0.02
            assert draws[:, l].var() == pytest.approx(params.d[l], rel=0.10)

    def test_deterministic_given_seed(self, basis):
        data = joint_data(basis, n_subjects=1, seed=18)
        hazard = make_hazard_basis([SurvivalRecord(2, 6, 1),
                                    SurvivalRecord(3, 9, 1)], K=1)
        bases = Bases(longitudinal=basis, hazard=hazard)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=18)
        one = sample_scores(data.subjects[0], params, bases, R=50, seed=7)
        two = sample_scores(data.subjects[0], params, bases, R=50, seed=7)
        np.testing.assert_array_equal(one, two)
        other = sample_scores(data.subjects[0], params, bases, R=50, seed=8)
        assert not np.array_equal(one, other)


def _mc_from_draws(draws):
    R = draws.shape[1]
    return MonteCarloQ(
        draws=draws,
        xi_bar=draws.mean(axis=1),
        xi_outer=np.einsum("irp,irq->ipq", draws, draws) / R,
        acceptance=np.zeros(draws.shape[::2]),
        increments=np.zeros(R),
    )


class TestMstep:
    def test_score_variance_pinned_draws(self, basis):
        data = joint_data(basis, n_subjects=5, seed=20)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=20)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        penalty = roughness_penalty(basis)
        c = 1.7
        draws = np.zeros((5, 1, 2))
        draws[:, 0, 0] = c
        new = mstep(_mc_from_draws(draws), data, params, tuning, bases,
                    penalty, include_survival=False)
        assert new.d[0] == pytest.approx(c * c, rel=1e-12)
        assert new.d[1] == pytest.approx(1e-10)

    def test_p_zero_reduces_to_penalized_spline(self, basis):
        data = joint_data(basis, n_subjects=6, seed=21)
        bases = joint_bases(basis, data)
        params = random_params(8, 0, len(bases.hazard.knots), 1, seed=21)
        tuning = TuningParams(p=0, h_mu=2.5, h_psi=1.0, sigma_b2=1.0)
        penalty = roughness_penalty(basis)
        draws = np.zeros((6, 1, 0))
        new = mstep(_mc_from_draws(draws), data, params, tuning, bases,
                    penalty, include_survival=False)
        BtB = sum(basis.design(s.times).T @ basis.design(s.times)
                  for s in data.subjects)
        Bty = sum(basis.design(s.times).T @ s.y for s in data.subjects)
        want = np.linalg.solve(
            BtB + params.sigma_eps2 * tuning.h_mu * penalty.J, Bty)
        assert np.allclose(new.theta_mu, want, atol=1e-10)

    @pytest.mark.parametrize("family", ["gaussian", "binary"])
    def test_ascent_from_random_starts(self, basis, family):
        data = joint_data(basis, n_subjects=8, seed=22, family=family)
        bases = joint_bases(basis, data)
        tuning = TuningParams(p=2, h_mu=0.8, h_psi=1.2, sigma_b2=0.7)
        penalty = roughness_penalty(basis)
        rng = np.random.default_rng(220)
        for start in range(10):
            params = random_params(8, 2, len(bases.hazard.knots), 1,
                                   family=family, seed=300 + start)
            draws = rng.normal(scale=1.2, size=(8, 25, 2))
            q_old = monte_carlo_q(data, params, tuning, penalty, bases,
                                  draws)
            new = mstep(_mc_from_draws(draws), data, params, tuning, bases,
                        penalty)
            q_new = monte_carlo_q(data, new, tuning, penalty, bases, draws)
            assert q_new >= q_old - 1e-10

    def test_survival_gradient_matches_finite_differences(self, basis):
        data = joint_data(basis, n_subjects=9, seed=23)
        bases = joint_bases(basis, data)
        K = len(bases.hazard.knots)
        params = random_params(8, 2, K, 1, seed=23)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=0.8)
        cache = mcem_mod._build_cache(data, bases)
        draws = np.random.default_rng(230).normal(scale=1.3, size=(9, 40, 2))
        nw = 2 + K

        def unpack(v):
            pr = params.copy()
            pr.a, pr.b = v[:2].copy(), v[2:nw].copy()
            pr.beta, pr.eta = v[nw:nw + 2].copy(), v[nw + 2:].copy()
            return pr

        x0 = np.concatenate([params.a, params.b, params.beta, params.eta])
        grad, hess = mcem_mod._survival_grad_hess(data, params, tuning,
                                                  bases, draws, cache)
        h = 1e-6
        for j in range(len(x0)):
            e = np.zeros(len(x0))
            e[j] = h
            fd = (mcem_mod._survival_q(data, unpack(x0 + e), tuning, bases,
                                       draws, cache)
                  - mcem_mod._survival_q(data, unpack(x0 - e), tuning,
                                         bases, draws, cache)) / (2 * h)
            assert grad[j] == pytest.approx(fd, rel=1e-4, abs=1e-6)
            gp = mcem_mod._survival_grad_hess(data, unpack(x0 + e), tuning,
                                              bases, draws, cache)[0]
            gm = mcem_mod._survival_grad_hess(data, unpack(x0 - e), tuning,
                                              bases, draws, cache)[0]
            assert np.allclose(hess[:, j], (gp - gm) / (2 * h), rtol=1e-4,
                               atol=1e-6)

    def test_no_observations_keep_trajectory_block(self, basis):
        data = joint_data(basis, n_subjects=4, seed=24, empty=True)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=24)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        penalty = roughness_penalty(basis)
        draws = np.random.default_rng(240).normal(size=(4, 30, 2))
        new = mstep(_mc_from_draws(draws), data, params, tuning, bases,
                    penalty, include_survival=False)
        np.testing.assert_array_equal(new.theta_mu, params.theta_mu)
        np.testing.assert_array_equal(new.theta_psi, params.theta_psi)
        assert new.sigma_eps2 == params.sigma_eps2


class TestFit:
    def test_deterministic_traces(self, basis):
        data = joint_data(basis, n_subjects=8, seed=30)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        cfg = FitConfig(seed=5, r0=50, r_max=120, max_iter=3,
                        hazard_knots=2)
        one = fit(data, tuning, config=cfg)
        two = fit(data, tuning, config=cfg)
        assert len(one.trace) == len(two.trace) == one.iterations
        for ta, tb in zip(one.trace, two.trace):
            assert ta["q"] == tb["q"]
            assert ta["mc_se"] == tb["mc_se"]
            np.testing.assert_array_equal(ta["params"], tb["params"])
        np.testing.assert_array_equal(
            flatten_params(one.params, "gaussian"),
            flatten_params(two.params, "gaussian"))

    def test_best_iterate_returned_without_convergence(self, basis):
        data = joint_data(basis, n_subjects=8, seed=31)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        cfg = FitConfig(seed=6, r0=40, r_max=80, max_iter=3, hazard_knots=2)
        res = fit(data, tuning, config=cfg)
        assert not res.converged
        best = int(np.argmax([t["q"] for t in res.trace]))
        np.testing.assert_array_equal(
            flatten_params(res.params, "gaussian"),
            res.trace[best]["params"])

    def test_result_invariants(self, basis):
        data = joint_data(basis, n_subjects=8, seed=32)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        cfg = FitConfig(seed=7, r0=50, r_max=100, max_iter=4,
                        hazard_knots=2)
        res = fit(data, tuning, config=cfg)
        assert np.abs(res.params.theta_psi.T @ res.params.theta_psi
                      - np.eye(2)).max() < 1e-8
        assert res.params.d[0] >= res.params.d[1] > 0
        assert res.draws.shape == (8, res.final_r, 2)
        assert res.score_means.shape == (8, 2)
        for i in range(8):
            cov = res.score_covs[i]
            assert np.allclose(cov, cov.T, atol=1e-12)
            assert np.all(np.linalg.eigvalsh(cov) > -1e-10)
        for row in res.trace:
            assert set(row) >= {"iteration", "q", "mc_se",
                                "max_rel_change", "acceptance", "r",
                                "params"}
        assert np.isfinite(expected_complete_loglik(res, data))

    def test_stale_result_without_draws(self, basis):
        data = joint_data(basis, n_subjects=5, seed=33)
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        cfg = FitConfig(seed=8, r0=40, r_max=80, max_iter=2, hazard_knots=2)
        res = fit(data, tuning, config=cfg)
        res.draws = None
        with pytest.raises(StaleFitError):
            expected_complete_loglik(res, data)

    def test_prior_recovery_no_data(self, basis):
        data = joint_data(basis, n_subjects=40, seed=34, empty=True)
        bases = joint_bases(basis, data)
        params = random_params(8, 2, len(bases.hazard.knots), 1, seed=34)
        params.theta_psi = np.eye(8)[:, :2]
        params.d = np.array([4.0, 1.0])
        tuning = TuningParams(p=2, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        penalty = roughness_penalty(basis)
        state = MHState(xi=np.zeros((40, 2)), scales=np.ones((40, 2)),
                        acceptance=np.zeros((40, 2)), seed=12)
        cur = params
        for it in (1, 2):
            mc = estep(data, cur, bases, R=400, state=state, em_iter=it,
                       include_survival=False)
            cur = mstep(mc, data, cur, tuning, bases, penalty,
                        include_survival=False)
            cur, A = normalize_identifiability(cur)
            state.xi = state.xi @ A.T
        assert np.allclose(cur.d, params.d, rtol=0.2)
        np.testing.assert_array_equal(cur.theta_mu, params.theta_mu)

    def test_recovers_single_component_shape(self, basis):
        rng = np.random.default_rng(35)
        grid = np.linspace(0.0, 20.0, 200)

        def psi_true(t):
            return np.sin(np.pi * t / 10.0) / np.sqrt(10.0)

        def mu_true(t):
            return t / 30.0 + 0.5 * np.cos(np.pi * t / 20.0)

        subjects = []
        for i in range(50):
            times = np.sort(rng.uniform(0.2, 19.8, size=10))
            xi = rng.normal(scale=np.sqrt(6.0))
            y = mu_true(times) + xi * psi_true(times) \
                + rng.normal(scale=0.5, size=10)
            cens = 10.0 + 0.1 * i
            subjects.append(Subject(id=f"s{i}", times=times, y=y,
                                    z=np.zeros(0),
                                    survival=SurvivalRecord(cens, cens, 0)))
        data = TrajectorySet(subjects=subjects, family="gaussian",
                             domain=(0.0, 20.0))
        tuning = TuningParams(p=1, h_mu=1.0, h_psi=1.0, sigma_b2=1.0)
        cfg = FitConfig(seed=9, r0=80, r_max=300, max_iter=10,
                        hazard_knots=1)
        res = fit(data, tuning, config=cfg, include_survival=False)
        est = res.bases.longitudinal.design(grid) @ res.params.theta_psi[:, 0]
        truth = psi_true(grid)
        if np.trapezoid(est * truth, grid) < 0:
            est = -est
        imse = np.trapezoid((est - truth) ** 2, grid)
        assert imse < 0.05
