import json

import numpy as np
import pytest

from gtesim import debiased as db, simulator as sim
from gtesim.choicemodel import ScoreBundle, choice_loss, exposure_probs, response_loss
from gtesim.debiased import (
    HessianPolicy,
    PolicyError,
    estimate_gte,
    expected_hessian,
    expected_psi,
    grad_loss,
    grad_mu,
    hessian_loss,
    orthogonality_check,
    perturbation_sensitivity,
    plugin_mu,
    psi_value,
)
from gtesim.nnet import TrainConfig
from gtesim.simulator import enumerate_treatments


def to_vec(b):
    return np.concatenate([b.s0_diff, b.s1, b.z])


def from_vec(v, k):
    return ScoreBundle(v[: k - 1], v[k - 1 : 2 * k - 1], v[2 * k - 1 :])


def rand_bundle(rng, k, scale=2.0):
    return from_vec(rng.uniform(-scale, scale, 3 * k - 1), k)


class TestPluginMu:
    def test_no_uplift(self):
        rng = np.random.default_rng(0)
        b = ScoreBundle(rng.uniform(-1, 1, 2), np.zeros(3), rng.uniform(-1, 1, 3))
        assert plugin_mu(b) == pytest.approx(0.0, abs=1e-15)

    def test_constant_response(self):
        rng = np.random.default_rng(1)
        b = ScoreBundle(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 3),
                        np.full(3, 1.7))
        assert plugin_mu(b) == pytest.approx(0.0, abs=1e-14)

    def test_hand_softmax_case(self):
        b = ScoreBundle([0.0], [1.0, 0.0], [1.0, 0.0])
        e = np.e
        expected = e / (1 + e) - 0.5
        assert plugin_mu(b) == pytest.approx(expected, abs=1e-10)
        assert plugin_mu(b) == pytest.approx(0.23106, abs=1e-5)


class TestGradMu:
    def test_flat_estimand(self):
        b = ScoreBundle([0.3, -0.2], np.zeros(3), np.full(3, 2.0))
        assert np.abs(grad_mu(b)).max() < 1e-14

    def test_z_components_are_probability_gaps(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = int(rng.integers(2, 6))
            b = rand_bundle(rng, k)
            g = grad_mu(b)
            gap = (exposure_probs(b, np.ones(k))
                   - exposure_probs(b, np.zeros(k)))
            assert np.abs(g[2 * k - 1 :] - gap).max() < 1e-14

    @pytest.mark.parametrize("k", [2, 3, 5, 8])
    def test_finite_differences(self, k):
        rng = np.random.default_rng(k)
        for _ in range(50):
            vec = rng.uniform(-2, 2, 3 * k - 1)
            g = grad_mu(from_vec(vec, k))
            for j in rng.choice(len(vec), size=4, replace=False):
                hi, lo = vec.copy(), vec.copy()
                hi[j] += 1e-6
                lo[j] -= 1e-6
                fd = (plugin_mu(from_vec(hi, k))
                      - plugin_mu(from_vec(lo, k))) / 2e-6
                assert abs(g[j] - fd) < 1e-5 * max(1.0, abs(fd))


class TestGradLoss:
    def test_zero_at_loss_minimum(self):
        # probabilities one-hot at k_star and z matching y
        k = 3
        b = ScoreBundle([-60.0, -60.0], np.zeros(k), [1.5, 0.0, 0.0])
        g = grad_loss(b, np.zeros(k), 0, 1.5)
        assert np.abs(g).max() < 1e-12

    def test_uplift_block_masked_by_treatment(self):
        rng = np.random.default_rng(3)
        k = 4
        b = rand_bundle(rng, k)
        g = grad_loss(b, np.zeros(k), 1, 0.5)
        assert np.abs(g[k - 1 : 2 * k - 1]).max() == 0.0

    def test_response_block_one_hot(self):
        rng = np.random.default_rng(4)
        k = 4
        b = rand_bundle(rng, k)
        g = grad_loss(b, np.ones(k), 2, 0.25)
        z_block = g[2 * k - 1 :]
        assert np.count_nonzero(z_block) == 1
        assert z_block[2] == pytest.approx(b.z[2] - 0.25)

    @pytest.mark.parametrize("k", [2, 3, 5, 8])
    def test_finite_differences(self, k):
        rng = np.random.default_rng(100 + k)
        for _ in range(50):
            vec = rng.uniform(-2, 2, 3 * k - 1)
            w = (rng.random(k) < 0.5).astype(float)
            ks = int(rng.integers(k))
            y = float(rng.normal())
            g = grad_loss(from_vec(vec, k), w, ks, y)

            def loss(v):
                b = from_vec(v, k)
                return choice_loss(b, w, ks) + 0.5 * response_loss(b.z[ks], y)

            for j in rng.choice(len(vec), size=4, replace=False):
                hi, lo = vec.copy(), vec.copy()
                hi[j] += 1e-6
                lo[j] -= 1e-6
                fd = (loss(hi) - loss(lo)) / 2e-6
                assert abs(g[j] - fd) < 1e-5 * max(1.0, abs(fd))


class TestHessianLoss:
    def test_uniform_k2(self):
        b = ScoreBundle([0.0], np.zeros(2), np.zeros(2))
        h = hessian_loss(b, np.zeros(2))
        assert h[0, 0] == pytest.approx(0.25)

    def test_control_masks_uplift_rows(self):
        rng = np.random.default_rng(5)
        k = 3
        b = rand_bundle(rng, k)
        h = hessian_loss(b, np.zeros(k))
        assert np.abs(h[k - 1 : 2 * k - 1, :]).max() == 0.0
        assert np.abs(h[:, k - 1 : 2 * k - 1]).max() == 0.0

    def test_symmetric_and_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            k = int(rng.integers(2, 9))
            b = rand_bundle(rng, k, scale=3.0)
            w = (rng.random(k) < 0.5).astype(float)
            h = hessian_loss(b, w)
            assert np.abs(h - h.T).max() < 1e-14
            assert np.linalg.eigvalsh(h).min() >= -1e-10

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_finite_differences(self, k):
        rng = np.random.default_rng(200 + k)
        vec = rng.uniform(-1.5, 1.5, 3 * k - 1)
        w = (rng.random(k) < 0.5).astype(float)
        h = hessian_loss(from_vec(vec, k), w)
        dim = 2 * k - 1  # choice block only
        step = 1e-4

        def cl(v):
            return choice_loss(from_vec(v, k), w, 0)

        for i in range(dim):
            for j in range(i, dim):
                vpp, vpm, vmp, vmm = (vec.copy() for _ in range(4))
                vpp[i] += step; vpp[j] += step
                vpm[i] += step; vpm[j] -= step
                vmp[i] -= step; vmp[j] += step
                vmm[i] -= step; vmm[j] -= step
                fd = (cl(vpp) - cl(vpm) - cl(vmp) + cl(vmm)) / (4 * step**2)
                assert abs(h[i, j] - fd) < 1e-5 * max(1.0, abs(fd))


class TestExpectedHessian:
    def test_symmetric_uniform_response_block(self):
        b = ScoreBundle([0.0], np.zeros(2), np.zeros(2))
        h = expected_hessian(b, 0.5)
        assert np.abs(h[3:, 3:] - np.diag([0.5, 0.5])).max() < 1e-14

    def test_matches_brute_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            k = int(rng.integers(2, 5))
            q = float(rng.uniform(0.2, 0.8))
            b = rand_bundle(rng, k)
            h = expected_hessian(b, q)
            brute = np.zeros_like(h)
            for w in enumerate_treatments(k):
                pw = q ** w.sum() * (1 - q) ** (k - w.sum())
                term = hessian_loss(b, w)
                term[2 * k - 1 :, 2 * k - 1 :] = np.diag(exposure_probs(b, w))
                brute += pw * term
            assert np.abs(h - brute).max() < 1e-12

    def test_monte_carlo_close_to_exact(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            b = rand_bundle(rng, 3)
            exact = expected_hessian(b, 0.5)
            mc = expected_hessian(
                b, 0.5, HessianPolicy(mode="monte-carlo", mc_draws=500,
                                      seed=trial)
            )
            bound = 5.0 / np.sqrt(500) * np.linalg.norm(exact)
            assert np.linalg.norm(mc - exact) < bound

    def test_positive_definite_sweep(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            k = int(rng.integers(2, 7))
            b = rand_bundle(rng, k, scale=3.0)
            q = float(rng.choice([0.2, 0.5, 0.8]))
            assert np.linalg.eigvalsh(expected_hessian(b, q)).min() > 0

    def test_exact_mode_k_limit(self):
        b = ScoreBundle(np.zeros(12), np.zeros(13), np.zeros(13))
        with pytest.raises(PolicyError):
            expected_hessian(b, 0.5, HessianPolicy(exact_max_k=12))

    def test_bad_q(self):
        b = ScoreBundle([0.0], np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            expected_hessian(b, 0.0)


class TestPsiValue:
    def test_flat_estimand_gives_zero(self):
        b = ScoreBundle([0.4], np.zeros(2), np.full(2, 3.0))
        obs = sim.Observation(0, 1.0, [0, 1], [1, 0], 0, 2.5)
        rec = psi_value(obs, b, 0.5)
        assert rec.mu == pytest.approx(0.0, abs=1e-14)
        assert rec.psi == pytest.approx(0.0, abs=1e-12)

    def test_psi_definitional_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            k = 3
            b = rand_bundle(rng, k)
            obs = sim.Observation(
                0, 1.0, [0, 1, 2],
                list((rng.random(k) < 0.5).astype(int)),
                int(rng.integers(k)), float(rng.normal()),
            )
            rec = psi_value(obs, b, 0.5)
            assert rec.psi == rec.mu - rec.correction
            assert rec.h_min_eig > 0

    def test_exact_expectation_equals_mu(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            b = rand_bundle(rng, 3)
            assert abs(expected_psi(b, 0.5) - plugin_mu(b)) <= 1e-10

    def test_normalization_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            k = 3
            raw0 = rng.uniform(-2, 2, k)
            s1 = rng.uniform(-2, 2, k)
            z = rng.uniform(-2, 2, k)
            c = float(rng.uniform(-4, 4))
            b1 = ScoreBundle(raw0[1:] - raw0[0], s1, z)
            b2 = ScoreBundle((raw0 + c)[1:] - (raw0 + c)[0], s1, z)
            assert plugin_mu(b1) == pytest.approx(plugin_mu(b2), abs=1e-13)
            assert np.abs(grad_mu(b1) - grad_mu(b2)).max() < 1e-13
            assert np.abs(
                expected_hessian(b1, 0.5) - expected_hessian(b2, 0.5)
            ).max() < 1e-13


class TestOrthogonality:
    def test_mean_gradient_within_3_se(self):
        def draw(rng, n):
            return rng.uniform(-1, 1, (n, 5))

        means, ses = orthogonality_check(draw, 0.5, 100000, seed=1)
        assert np.all(np.abs(means) <= 3 * ses)

    def test_debiased_quadratic_plugin_linear(self):
        rng = np.random.default_rng(13)
        bundles = [rand_bundle(rng, 3, scale=1.0) for _ in range(50)]

        def direction(b):
            return np.concatenate(
                [np.ones(2), np.linspace(-1.0, 1.0, 3), np.full(3, 0.5)]
            )

        db_shift, plug_shift = perturbation_sensitivity(
            bundles, 0.5, direction, [0.05, 0.1]
        )
        assert db_shift[1] / db_shift[0] >= 3.0
        assert plug_shift[1] / plug_shift[0] == pytest.approx(2.0, abs=0.3)


@pytest.fixture(scope="module")
def small_estimate():
    data = sim.simulate(sim.DgpConfig(n_queries=600, seed=50))
    report = estimate_gte(
        data, folds=3, train_config=TrainConfig(epochs=15, seed=50), seed=50
    )
    return data, report


class TestEstimateGte:
    def test_null_effect_covered(self):
        data = sim.simulate(
            sim.DgpConfig(score_spec="null", n_queries=900, seed=51)
        )
        rep = estimate_gte(
            data, folds=3, train_config=TrainConfig(epochs=15, seed=51),
            seed=51,
        )
        assert abs(rep.tau_hat) <= 3 * rep.se

    def test_report_consistency(self, small_estimate):
        data, rep = small_estimate
        assert rep.n == data.n_queries
        assert rep.ci95[0] == pytest.approx(rep.tau_hat - 1.96 * rep.se)
        assert rep.ci95[1] == pytest.approx(rep.tau_hat + 1.96 * rep.se)
        taus = [t for _, t, _ in rep.per_fold]
        vars_ = [v for _, _, v in rep.per_fold]
        assert rep.tau_hat == pytest.approx(np.mean(taus))
        assert rep.se == pytest.approx(np.sqrt(np.mean(vars_) / rep.n))

    def test_json_schema(self, small_estimate):
        _, rep = small_estimate
        payload = json.loads(rep.to_json())
        assert set(payload) == {
            "tau_hat", "se", "ci_lo", "ci_hi", "n", "folds", "diagnostics"
        }
        assert {f["id"] for f in payload["folds"]} == {0, 1, 2}
        assert set(payload["diagnostics"]) == {"min_eig", "jittered", "fit"}
        assert set(payload["diagnostics"]["fit"]) == {
            "logloss", "acc", "auc", "mse"
        }

    def test_too_few_folds(self):
        data = sim.simulate(sim.DgpConfig(n_queries=100, seed=52))
        with pytest.raises(ValueError):
            estimate_gte(data, folds=1)

    def test_deterministic(self):
        data = sim.simulate(sim.DgpConfig(n_queries=300, seed=53))
        reps = [
            estimate_gte(data, folds=2,
                         train_config=TrainConfig(epochs=5, seed=53), seed=53)
            for _ in range(2)
        ]
        assert reps[0].tau_hat == reps[1].tau_hat
        assert reps[0].se == reps[1].se
