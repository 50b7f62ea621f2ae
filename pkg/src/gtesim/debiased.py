"""Debiased estimation of the global treatment effect.

Plug-in counterfactual contrast, analytic gradients and Hessians in the
normalized score-bundle coordinates, expected Hessian over the treatment
assignment, per-query influence values, the cross-fitted estimator with
its variance, and numerical orthogonality checks.

Coordinate convention: a bundle with K slots is flattened to a vector of
length 3K-1 ordered (s0_diff[2..K], s1[1..K], z[1..K]).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._rng import mix64, stream
from .choicemodel import (
    FeatureSpec,
    NetConfig,
    ScoreBundle,
    bundles_from_nuisances,
    exposure_probs,
    fit_diagnostics,
    fit_nuisances,
)
from .nnet import TrainConfig
from .simulator import enumerate_treatments


class SingularHessianError(np.linalg.LinAlgError):
    pass


class PolicyError(ValueError):
    pass


@dataclass
class HessianPolicy:
    mode: str = "exact"           # "exact" | "monte-carlo"
    mc_draws: int = 500
    exact_max_k: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "monte-carlo"):
            raise PolicyError(f"unknown hessian mode {self.mode!r}")
        if self.mode == "monte-carlo" and self.mc_draws < 1:
            raise PolicyError("mc_draws must be >= 1")


@dataclass
class InfluenceRecord:
    query_id: int
    mu: float
    correction: float
    psi: float
    h_min_eig: float
    jittered: bool = False


@dataclass
class EstimateReport:
    tau_hat: float
    se: float
    ci95: tuple
    n: int
    per_fold: list                 # [(fold_id, tau, var)]
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        out = {
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci_lo": self.ci95[0],
            "ci_hi": self.ci95[1],
            "n": self.n,
            "folds": [
                {"id": int(f), "tau": t, "var": v} for f, t, v in self.per_fold
            ],
            "diagnostics": self.diagnostics,
        }
        return json.dumps(out, indent=2)


def plugin_mu(bundle: ScoreBundle) -> float:
    """Model-implied contrast of expected outcome, all-treated vs all-control."""
    k = bundle.k
    p1 = exposure_probs(bundle, np.ones(k))
    p0 = exposure_probs(bundle, np.zeros(k))
    return float(bundle.z @ (p1 - p0))


def grad_mu(bundle: ScoreBundle) -> np.ndarray:
    """Gradient of plugin_mu in the flattened bundle coordinates."""
    k = bundle.k
    p1 = exposure_probs(bundle, np.ones(k))
    p0 = exposure_probs(bundle, np.zeros(k))
    ybar1 = p1 @ bundle.z
    ybar0 = p0 @ bundle.z
    d_s0 = p1[1:] * (bundle.z[1:] - ybar1) - p0[1:] * (bundle.z[1:] - ybar0)
    d_s1 = p1 * (bundle.z - ybar1)
    d_z = p1 - p0
    return np.concatenate([d_s0, d_s1, d_z])


def grad_loss(bundle: ScoreBundle, w, k_star: int, y: float) -> np.ndarray:
    """Gradient of the per-query nuisance loss at the bundle.

    The choice part follows the softmax residual p - onehot(k_star); the
    response part is the half-squared-error derivative, nonzero only in
    the exposed slot's z coordinate.
    """
    k = bundle.k
    w = np.asarray(w, dtype=float)
    p = exposure_probs(bundle, w)
    resid = p.copy()
    resid[k_star] -= 1.0
    d_s0 = resid[1:]
    d_s1 = w * resid
    d_z = np.zeros(k)
    d_z[k_star] = bundle.z[k_star] - y
    return np.concatenate([d_s0, d_s1, d_z])


def _choice_jacobian(w, k):
    """K x (2K-1) map from (s0_diff, s1) coordinates to per-slot logits."""
    w = np.asarray(w, dtype=float)
    a = np.zeros((k, 2 * k - 1))
    a[1:, : k - 1] = np.eye(k - 1)
    a[np.arange(k), k - 1 + np.arange(k)] = w
    return a


def hessian_loss(bundle: ScoreBundle, w) -> np.ndarray:
    """Hessian of the choice loss, embedded in full bundle coordinates.

    The raw response-loss curvature depends on the exposed slot, so its
    block is left zero here and filled in by expected_hessian.
    """
    k = bundle.k
    p = exposure_probs(bundle, w)
    m = np.diag(p) - np.outer(p, p)
    a = _choice_jacobian(w, k)
    h = np.zeros((3 * k - 1, 3 * k - 1))
    h[: 2 * k - 1, : 2 * k - 1] = a.T @ m @ a
    return h


def _treatment_grid(k, q, policy: HessianPolicy):
    """(w matrix, probability weights) for the assignment expectation."""
    if policy.mode == "exact":
        if k > policy.exact_max_k:
            raise PolicyError(
                f"exact hessian limited to K <= {policy.exact_max_k}, got {k}"
            )
        grid = enumerate_treatments(k).astype(float)
        n_on = grid.sum(axis=1)
        weights = q**n_on * (1 - q) ** (k - n_on)
    else:
        rng = stream(policy.seed, 0x48455353)
        grid = (rng.random((policy.mc_draws, k)) < q).astype(float)
        weights = np.full(len(grid), 1.0 / len(grid))
    return grid, weights


def _probs_matrix(bundle: ScoreBundle, grid):
    u = np.concatenate(([0.0], bundle.s0_diff)) + grid * bundle.s1
    u -= u.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def _expected_hessian_from_probs(p, grid, weights, k):
    """Assemble E_W[hessian] from the per-assignment probability matrix."""
    pw = p * weights[:, None]
    e_p = weights @ p                       # E[p_k]
    e_pp = p.T @ pw                         # E[p_k p_l]
    e_wp = weights @ (grid * p)             # E[w_k p_k]
    e_p_wp = p.T @ (grid * pw)              # E[p_k w_l p_l]
    e_wp_wp = (grid * p).T @ (grid * pw)    # E[w_k p_k w_l p_l]

    s0s0 = np.diag(e_p) - e_pp
    s0s1 = np.diag(e_wp) - e_p_wp
    s1s1 = np.diag(e_wp) - e_wp_wp

    dim = 3 * k - 1
    h = np.zeros((dim, dim))
    h[: k - 1, : k - 1] = s0s0[1:, 1:]
    h[: k - 1, k - 1 : 2 * k - 1] = s0s1[1:, :]
    h[k - 1 : 2 * k - 1, : k - 1] = s0s1[1:, :].T
    h[k - 1 : 2 * k - 1, k - 1 : 2 * k - 1] = s1s1
    h[2 * k - 1 :, 2 * k - 1 :] = np.diag(e_p)
    return h


def expected_hessian(bundle: ScoreBundle, q: float, policy=None) -> np.ndarray:
    """Expected loss Hessian over the treatment assignment at fixed scores."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    policy = policy or HessianPolicy()
    k = bundle.k
    grid, weights = _treatment_grid(k, q, policy)
    p = _probs_matrix(bundle, grid)
    return _expected_hessian_from_probs(p, grid, weights, k)


def _solve_spd(h, rhs):
    """SPD solve with a ridge fallback; returns (solution, min_eig, jittered)."""
    min_eig = float(np.linalg.eigvalsh(h).min())
    jittered = False
    work = h
    if min_eig < 1e-10:
        lam = 1e-8 * np.trace(h) / h.shape[0]
        work = h + lam * np.eye(h.shape[0])
        jittered = True
    try:
        c = np.linalg.cholesky(work)
        u = np.linalg.solve(c.T, np.linalg.solve(c, rhs))
    except np.linalg.LinAlgError:
        raise SingularHessianError(
            f"expected Hessian singular (min eig {min_eig:.3e})"
        ) from None
    return u, min_eig, jittered


def psi_value(observation, bundle: ScoreBundle, q: float,
              policy=None) -> InfluenceRecord:
    """One query's debiased influence value mu - grad_mu' H^-1 grad_loss."""
    h = expected_hessian(bundle, q, policy)
    mu = plugin_mu(bundle)
    gmu = grad_mu(bundle)
    gl = grad_loss(bundle, observation.treatment, observation.exposed_slot,
                   observation.outcome)
    u, min_eig, jittered = _solve_spd(h, gmu)
    try:
        correction = float(u @ gl)
    except SingularHessianError:
        raise SingularHessianError(
            f"singular Hessian at query {observation.query_id}"
        ) from None
    return InfluenceRecord(
        query_id=observation.query_id,
        mu=mu,
        correction=correction,
        psi=mu - correction,
        h_min_eig=min_eig,
        jittered=jittered,
    )


def _fold_assignment(n, folds, seed):
    rng = stream(seed, 0x464F4C44)
    return rng.permutation(np.arange(n) % folds)


def _psi_fold(dataset, idx, nuisances, q, policy):
    """Influence values for the queries in idx under fold-external nuisances."""
    feats = dataset.item_features()[idx]
    bundles = bundles_from_nuisances(nuisances, dataset.viewer_v[idx], feats)
    records = []
    for j, i in enumerate(idx):
        b = bundles[j]
        h = expected_hessian(b, q, policy)
        mu = plugin_mu(b)
        u, min_eig, jittered = _solve_spd(h, grad_mu(b))
        gl = grad_loss(b, dataset.treatment[i], int(dataset.exposed_slot[i]),
                       float(dataset.outcome[i]))
        corr = float(u @ gl)
        records.append(InfluenceRecord(int(i), mu, corr, mu - corr,
                                       min_eig, jittered))
    return records


def estimate_gte(dataset, folds=3, net_config=None, train_config=None,
                 policy=None, seed=0) -> EstimateReport:
    """Cross-fitted debiased GTE estimate with a per-fold variance average."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    n = dataset.n_queries
    if n < folds:
        raise ValueError("fewer queries than folds")
    net_config = net_config or NetConfig()
    base_train = train_config or TrainConfig()
    policy = policy or HessianPolicy()
    q = dataset.config.treat_prob

    assign = _fold_assignment(n, folds, seed)
    feats = dataset.item_features()
    per_fold, all_records, fit_metrics = [], [], []
    for f in range(folds):
        test = np.flatnonzero(assign == f)
        tr = np.flatnonzero(assign != f)
        tc = TrainConfig(
            learning_rate=base_train.learning_rate,
            epochs=base_train.epochs,
            batch_size=base_train.batch_size,
            seed=mix64(base_train.seed, seed, f) % 2**63,
            validation_fraction=base_train.validation_fraction,
            early_stop_patience=base_train.early_stop_patience,
            output_clamp=base_train.output_clamp,
        )
        nuis = fit_nuisances(
            dataset.viewer_v[tr], feats[tr], dataset.treatment[tr],
            dataset.exposed_slot[tr], dataset.outcome[tr],
            net_config=net_config, train_config=tc, trained_on=f"fold-{f}",
        )
        fit_metrics.append(
            fit_diagnostics(nuis, dataset.viewer_v[test], feats[test],
                            dataset.treatment[test], dataset.exposed_slot[test],
                            dataset.outcome[test])
        )
        records = _psi_fold(dataset, test, nuis, q, policy)
        all_records.extend(records)
        psis = np.array([r.psi for r in records])
        per_fold.append((f, float(psis.mean()), float(psis.var(ddof=1))))

    tau = float(np.mean([t for _, t, _ in per_fold]))
    vhat = float(np.mean([v for _, _, v in per_fold]))
    se = float(np.sqrt(vhat / n))
    fit = np.mean(np.array(fit_metrics), axis=0)
    diagnostics = {
        "min_eig": float(min(r.h_min_eig for r in all_records)),
        "jittered": int(sum(r.jittered for r in all_records)),
        "fit": {
            "logloss": float(fit[0]),
            "acc": float(fit[1]),
            "auc": float(fit[2]),
            "mse": float(fit[3]),
        },
    }
    return EstimateReport(
        tau_hat=tau,
        se=se,
        ci95=(tau - 1.96 * se, tau + 1.96 * se),
        n=n,
        per_fold=per_fold,
        diagnostics=diagnostics,
    )


def expected_psi(bundle: ScoreBundle, q: float, noise_mean=0.0,
                 policy=None) -> float:
    """Exact expectation of psi over (w, k*) at the given scores.

    Treats the bundle's z entries as the true conditional outcome means
    (plus an optional shared noise mean). Used by the unbiasedness and
    orthogonality diagnostics.
    """
    policy = policy or HessianPolicy()
    k = bundle.k
    grid, weights = _treatment_grid(k, q, policy)
    p = _probs_matrix(bundle, grid)
    h = _expected_hessian_from_probs(p, grid, weights, k)
    mu = plugin_mu(bundle)
    u, _, _ = _solve_spd(h, grad_mu(bundle))
    # E[grad_loss]: choice residual averages to zero only at the true
    # probabilities; here p is computed from the bundle itself, so the
    # choice blocks vanish and the z block carries E[I(k*=k)(Z_k - Y)].
    e_gl = np.zeros(3 * k - 1)
    # with outcome mean z_k + noise_mean at exposure k the z block of
    # E[grad_loss] is -E[p_k] * noise_mean
    e_gl[2 * k - 1 :] = -(weights @ p) * noise_mean
    return mu - float(u @ e_gl)


def _psi_scalar(bundle, w, k_star, y, q, policy):
    h = expected_hessian(bundle, q, policy)
    u, _, _ = _solve_spd(h, grad_mu(bundle))
    return plugin_mu(bundle) - float(u @ grad_loss(bundle, w, k_star, y))


def _psi_batch(vecs, k, w, k_star, y, q, grid, weights):
    """Influence values for n queries at once.

    vecs is (n, 3K-1) flattened bundles; (w, k_star, y) are the realized
    assignments, exposures and outcomes. Exact expected Hessian per query.
    """
    n = len(vecs)
    s0_full = np.concatenate([np.zeros((n, 1)), vecs[:, : k - 1]], axis=1)
    s1 = vecs[:, k - 1 : 2 * k - 1]
    z = vecs[:, 2 * k - 1 :]

    def probs(wmat):
        u = s0_full[:, None, :] + wmat[None, :, :] * s1[:, None, :]
        u -= u.max(axis=2, keepdims=True)
        e = np.exp(u)
        return e / e.sum(axis=2, keepdims=True)

    pg = probs(grid)                                   # (n, G, K)
    p1 = probs(np.ones((1, k)))[:, 0, :]
    p0 = probs(np.zeros((1, k)))[:, 0, :]
    mu = np.sum(z * (p1 - p0), axis=1)

    ybar1 = np.sum(p1 * z, axis=1, keepdims=True)
    ybar0 = np.sum(p0 * z, axis=1, keepdims=True)
    gmu = np.concatenate(
        [
            (p1 * (z - ybar1) - p0 * (z - ybar0))[:, 1:],
            p1 * (z - ybar1),
            p1 - p0,
        ],
        axis=1,
    )

    wp = grid[None, :, :] * pg
    e_p = np.einsum("g,ngk->nk", weights, pg)
    e_pp = np.einsum("g,ngk,ngl->nkl", weights, pg, pg)
    e_wp = np.einsum("g,ngk->nk", weights, wp)
    e_p_wp = np.einsum("g,ngk,ngl->nkl", weights, pg, wp)
    e_wp_wp = np.einsum("g,ngk,ngl->nkl", weights, wp, wp)
    eye = np.eye(k)
    s0s0 = eye * e_p[:, None, :] - e_pp
    s0s1 = eye * e_wp[:, None, :] - e_p_wp
    s1s1 = eye * e_wp[:, None, :] - e_wp_wp
    dim = 3 * k - 1
    h = np.zeros((n, dim, dim))
    h[:, : k - 1, : k - 1] = s0s0[:, 1:, 1:]
    h[:, : k - 1, k - 1 : 2 * k - 1] = s0s1[:, 1:, :]
    h[:, k - 1 : 2 * k - 1, : k - 1] = np.swapaxes(s0s1[:, 1:, :], 1, 2)
    h[:, k - 1 : 2 * k - 1, k - 1 : 2 * k - 1] = s1s1
    h[:, 2 * k - 1 :, 2 * k - 1 :] = eye * e_p[:, None, :]
    h += (1e-12 * np.trace(h, axis1=1, axis2=2) / dim)[:, None, None] * np.eye(dim)
    u = np.linalg.solve(h, gmu[..., None])[..., 0]

    uw = s0_full + w * s1
    uw -= uw.max(axis=1, keepdims=True)
    ew = np.exp(uw)
    pw = ew / ew.sum(axis=1, keepdims=True)
    resid = pw.copy()
    idx = np.arange(n)
    resid[idx, k_star] -= 1.0
    gz = np.zeros((n, k))
    gz[idx, k_star] = z[idx, k_star] - y
    gl = np.concatenate([resid[:, 1:], w * resid, gz], axis=1)
    return mu - np.sum(u * gl, axis=1)


def orthogonality_check(bundle_draw, q, n_mc, step=1e-4, seed=0):
    """Monte Carlo test that the mean nuisance gradient of psi is zero.

    bundle_draw(rng, n) must return flattened true-score bundles as an
    (n, 3K-1) array. For each draw the full (w, k*, y) outcome is sampled
    from the model that bundle implies, and psi is centrally differenced
    along every bundle coordinate (common random numbers across the two
    sides). Returns (means, ses) arrays of length 3K-1: the mean gradient
    per coordinate and its Monte Carlo standard error.
    """
    rng = stream(seed, 0x4F525448)
    vecs = np.asarray(bundle_draw(rng, n_mc), dtype=float)
    dim = vecs.shape[1]
    k = (dim + 1) // 3
    grid = enumerate_treatments(k).astype(float)
    n_on = grid.sum(axis=1)
    weights = q**n_on * (1 - q) ** (k - n_on)

    s0_full = np.concatenate([np.zeros((n_mc, 1)), vecs[:, : k - 1]], axis=1)
    s1 = vecs[:, k - 1 : 2 * k - 1]
    z = vecs[:, 2 * k - 1 :]
    w = (rng.random((n_mc, k)) < q).astype(float)
    u = s0_full + w * s1
    u -= u.max(axis=1, keepdims=True)
    e = np.exp(u)
    p = e / e.sum(axis=1, keepdims=True)
    draws = rng.random(n_mc)
    k_star = (p.cumsum(axis=1) < draws[:, None]).sum(axis=1)
    y = z[np.arange(n_mc), k_star] + rng.standard_normal(n_mc) * 0.1

    means = np.empty(dim)
    ses = np.empty(dim)
    for j in range(dim):
        hi, lo = vecs.copy(), vecs.copy()
        hi[:, j] += step
        lo[:, j] -= step
        g = (
            _psi_batch(hi, k, w, k_star, y, q, grid, weights)
            - _psi_batch(lo, k, w, k_star, y, q, grid, weights)
        ) / (2 * step)
        means[j] = g.mean()
        ses[j] = g.std(ddof=1) / np.sqrt(n_mc)
    return means, ses


def perturbation_sensitivity(bundles, q, direction, deltas, weights_y=None,
                             policy=None):
    """Exact-expectation response of the debiased and plug-in estimates to
    a shared nuisance perturbation.

    direction(bundle) returns a coordinate vector (length 3K-1) added,
    scaled by each delta, to every bundle. Returns two lists of |change|:
    (debiased, plugin), one entry per delta, in expectation over (w, k*)
    under the unperturbed truth.
    """
    policy = policy or HessianPolicy()
    db_shift, plug_shift = [], []
    base_db, base_plug = _expected_estimates(bundles, q, None, 0.0, policy)
    for d in deltas:
        db, plug = _expected_estimates(bundles, q, direction, d, policy)
        db_shift.append(abs(db - base_db))
        plug_shift.append(abs(plug - base_plug))
    return db_shift, plug_shift


def _expected_estimates(bundles, q, direction, delta, policy):
    """Mean over queries of exact E[psi] and mu under a perturbed bundle,
    with (w, k*, y) still drawn from the true (unperturbed) model."""
    db_vals, plug_vals = [], []
    for b in bundles:
        k = b.k
        if direction is None or delta == 0.0:
            bp = b
        else:
            vec = np.concatenate([b.s0_diff, b.s1, b.z]) + delta * direction(b)
            bp = ScoreBundle(vec[: k - 1], vec[k - 1 : 2 * k - 1],
                             vec[2 * k - 1 :])
        grid, weights = _treatment_grid(k, q, policy)
        p_true = _probs_matrix(b, grid)
        p_hat = _probs_matrix(bp, grid)
        h = _expected_hessian_from_probs(p_hat, grid, weights, k)
        mu = plugin_mu(bp)
        u, _, _ = _solve_spd(h, grad_mu(bp))
        # E[grad_loss(bp)] under the true law: choice residual p_hat - p_true
        # per assignment; z block E[I(k*=k)] (Zhat_k - Ztrue_k).
        resid = p_hat - p_true
        e_s0 = weights @ resid[:, 1:]
        e_s1 = weights @ (grid * resid)
        e_z = (weights @ p_true) * (bp.z - b.z)
        e_gl = np.concatenate([e_s0, e_s1, e_z])
        db_vals.append(mu - float(u @ e_gl))
        plug_vals.append(mu)
    return float(np.mean(db_vals)), float(np.mean(plug_vals))
