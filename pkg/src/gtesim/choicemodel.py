"""Semiparametric algorithm choice model.

Exposure probabilities in normalized score-bundle coordinates, the two
nuisance losses, joint fitting of the baseline/uplift score networks via
the per-query choice likelihood, closed-form identification from exposure
probabilities, and fit diagnostics.
"""

from dataclasses import dataclass

import numpy as np

from . import nnet
from ._rng import stream
from .nnet import Adam, DenseNet, TrainConfig, TrainingDivergenceError


class IdentificationError(ValueError):
    pass


@dataclass
class ScoreBundle:
    """Per-query normalized score vectors.

    s0_diff[k-1] is the baseline score of slot k minus slot 0 (the
    location normalization that pins the first slot's baseline to zero),
    s1 the uplift scores and z the expected responses per slot.
    """

    s0_diff: np.ndarray  # (K-1,)
    s1: np.ndarray       # (K,)
    z: np.ndarray        # (K,)

    def __post_init__(self):
        self.s0_diff = np.asarray(self.s0_diff, dtype=float)
        self.s1 = np.asarray(self.s1, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if len(self.s1) != len(self.s0_diff) + 1 or len(self.z) != len(self.s1):
            raise ValueError("inconsistent bundle lengths")
        if not (
            np.all(np.isfinite(self.s0_diff))
            and np.all(np.isfinite(self.s1))
            and np.all(np.isfinite(self.z))
        ):
            raise ValueError("bundle entries must be finite")

    @property
    def k(self):
        return len(self.s1)


def logits(bundle: ScoreBundle, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    u = np.concatenate(([0.0], bundle.s0_diff)) + w * bundle.s1
    return u


def exposure_probs(bundle: ScoreBundle, w) -> np.ndarray:
    """Multinomial-logit exposure probabilities, overflow-safe."""
    u = logits(bundle, w)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite scores")
    u = u - u.max()
    e = np.exp(u)
    return e / e.sum()


def choice_loss(bundle: ScoreBundle, w, k_star: int) -> float:
    """Negative log likelihood of the exposed slot."""
    if not (0 <= k_star < bundle.k):
        raise ValueError("k_star out of range")
    u = logits(bundle, w)
    m = u.max()
    return float(np.log(np.exp(u - m).sum()) + m - u[k_star])


def response_loss(z_k_star: float, y: float) -> float:
    return float((z_k_star - y) ** 2)


@dataclass
class FeatureSpec:
    """Maps raw (viewer, item) features to the network input vector."""

    viewer_dim: int = 1
    item_dim: int = 2

    @property
    def input_dim(self):
        return self.viewer_dim + self.item_dim

    def build(self, viewer_v, item_feats):
        """viewer_v: (n,) or (n, dv); item_feats: (n, K, dc) -> (n, K, d)."""
        viewer_v = np.asarray(viewer_v, dtype=float)
        if viewer_v.ndim == 1:
            viewer_v = viewer_v[:, None]
        if viewer_v.shape[1] != self.viewer_dim:
            raise ValueError("viewer feature width mismatch")
        item_feats = np.asarray(item_feats, dtype=float)
        if item_feats.shape[-1] != self.item_dim:
            raise ValueError("item feature width mismatch")
        k = item_feats.shape[1]
        vrep = np.repeat(viewer_v[:, None, :], k, axis=1)
        return np.concatenate([vrep, item_feats], axis=-1)


@dataclass
class NuisanceSet:
    s0_net: DenseNet
    s1_net: DenseNet
    z_net: DenseNet
    feature_spec: FeatureSpec
    trained_on: str = ""

    def __post_init__(self):
        dims = {self.s0_net.input_dim, self.s1_net.input_dim, self.z_net.input_dim}
        if dims != {self.feature_spec.input_dim}:
            raise ValueError("network input widths must match the feature spec")

    def scores(self, viewer_v, item_feats):
        """Evaluate all three networks; returns (s0, s1, z) of shape (n, K)."""
        x = self.feature_spec.build(viewer_v, item_feats)
        n, k, d = x.shape
        flat = x.reshape(n * k, d)
        s0 = self.s0_net.forward_batch(flat)[0].reshape(n, k)
        s1 = self.s1_net.forward_batch(flat)[0].reshape(n, k)
        z = self.z_net.forward_batch(flat)[0].reshape(n, k)
        return s0, s1, z

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"nuisances v1 {self.feature_spec.viewer_dim} {self.feature_spec.item_dim}\n")
            for net in (self.s0_net, self.s1_net, self.z_net):
                fh.write(nnet.serialize(net))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        head = lines[0].split()
        if head[:2] != ["nuisances", "v1"]:
            raise ValueError("not a nuisances v1 file")
        spec = FeatureSpec(viewer_dim=int(head[2]), item_dim=int(head[3]))
        blocks = []
        start = 1
        for _ in range(3):
            widths = [int(v) for v in lines[start + 1].split()]
            length = 3 + 2 * (len(widths) - 1)
            blocks.append("\n".join(lines[start : start + length]))
            start += length
        nets = [nnet.deserialize(b) for b in blocks]
        return cls(*nets, feature_spec=spec)


def bundle_from_scores(s0_row, s1_row, z_row) -> ScoreBundle:
    s0_row = np.asarray(s0_row, dtype=float)
    return ScoreBundle(s0_diff=s0_row[1:] - s0_row[0], s1=s1_row, z=z_row)


def bundle_from_nuisances(nuisances: NuisanceSet, viewer_v, item_feats) -> ScoreBundle:
    """Score bundle for one observation (viewer scalar/vector, (K, dc) items)."""
    v = np.atleast_1d(np.asarray(viewer_v, dtype=float))[None, :]
    s0, s1, z = nuisances.scores(v, np.asarray(item_feats, dtype=float)[None, :, :])
    return bundle_from_scores(s0[0], s1[0], z[0])


def bundles_from_nuisances(nuisances: NuisanceSet, viewer_v, item_feats):
    """Vectorized bundles for many observations."""
    s0, s1, z = nuisances.scores(viewer_v, item_feats)
    return [bundle_from_scores(s0[i], s1[i], z[i]) for i in range(len(s1))]


@dataclass
class NetConfig:
    hidden: tuple = (64, 64)
    output_clamp: float = 30.0

    def make(self, input_dim, seed):
        widths = [input_dim, *self.hidden, 1]
        return DenseNet(widths, output_clamp=self.output_clamp, seed=seed)


def _softmax_rows(u):
    u = u - u.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def _choice_nll(s0_net, s1_net, x_flat, n, k, w, k_star):
    u0 = s0_net.forward_batch(x_flat)[0].reshape(n, k)
    u1 = s1_net.forward_batch(x_flat)[0].reshape(n, k)
    p = _softmax_rows(u0 + w * u1)
    return float(-np.log(p[np.arange(n), k_star] + 1e-300).mean())


def fit_choice_nets(viewer_v, item_feats, w, k_star, feature_spec, net_config,
                    train_config):
    """Jointly fit the baseline and uplift score networks.

    Gradients flow through the per-query softmax: the downstream gradient
    at the score outputs is (p - onehot(k_star)), masked by the treatment
    vector for the uplift network.
    """
    x = feature_spec.build(viewer_v, item_feats)
    n, k, d = x.shape
    w = np.asarray(w, dtype=float)
    k_star = np.asarray(k_star)

    rng = stream(train_config.seed, 0xC401CE)
    s0_net = net_config.make(d, seed=int(rng.integers(2**63)))
    s1_net = net_config.make(d, seed=int(rng.integers(2**63)))
    n_val = int(round(train_config.validation_fraction * n))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    params = s0_net.parameters() + s1_net.parameters()
    opt = Adam(lr=train_config.learning_rate)
    best_loss, best_params, since_best = np.inf, None, 0
    use_val = n_val > 0 and train_config.early_stop_patience > 0
    trace = []

    xv_flat = x[val_idx].reshape(-1, d) if n_val else None
    for epoch in range(train_config.epochs):
        order = tr_idx[rng.permutation(len(tr_idx))]
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            m = len(idx)
            xb = x[idx].reshape(m * k, d)
            out0, cache0 = s0_net.forward_batch(xb)
            out1, cache1 = s1_net.forward_batch(xb)
            u = out0.reshape(m, k) + w[idx] * out1.reshape(m, k)
            p = _softmax_rows(u)
            g = p.copy()
            g[np.arange(m), k_star[idx]] -= 1.0
            g0 = g.reshape(m * k, 1)
            g1 = (g * w[idx]).reshape(m * k, 1)
            wg0, bg0 = s0_net.backward_batch(cache0, g0, batch_size=m)
            wg1, bg1 = s1_net.backward_batch(cache1, g1, batch_size=m)
            opt.step(params, wg0 + bg0 + wg1 + bg1)

        tr_loss = _choice_nll(
            s0_net, s1_net, x[tr_idx].reshape(-1, d), len(tr_idx), k,
            w[tr_idx], k_star[tr_idx],
        )
        if not np.isfinite(tr_loss):
            raise TrainingDivergenceError(epoch)
        val_loss = (
            _choice_nll(s0_net, s1_net, xv_flat, n_val, k, w[val_idx], k_star[val_idx])
            if n_val
            else None
        )
        trace.append((tr_loss, val_loss))
        if use_val:
            if val_loss < best_loss - 1e-12:
                best_loss, since_best = val_loss, 0
                best_params = [p_.copy() for p_ in params]
            else:
                since_best += 1
                if since_best > train_config.early_stop_patience:
                    break
    if use_val and best_params is not None:
        for p_, bp in zip(params, best_params):
            p_[...] = bp
    return s0_net, s1_net, trace


def fit_nuisances(viewer_v, item_feats, w, k_star, y, net_config=None,
                  train_config=None, feature_spec=None, trained_on=""):
    """Fit all three nuisance networks on a data slice.

    The response network is trained on exposed (viewer, item) pairs only.
    """
    if len(np.atleast_1d(k_star)) == 0:
        raise ValueError("empty data slice")
    net_config = net_config or NetConfig()
    train_config = train_config or TrainConfig()
    item_feats = np.asarray(item_feats, dtype=float)
    feature_spec = feature_spec or FeatureSpec(
        viewer_dim=1 if np.ndim(viewer_v) == 1 else np.shape(viewer_v)[1],
        item_dim=item_feats.shape[-1],
    )

    s0_net, s1_net, _ = fit_choice_nets(
        viewer_v, item_feats, w, k_star, feature_spec, net_config, train_config
    )

    n = item_feats.shape[0]
    x_all = feature_spec.build(viewer_v, item_feats)
    x_exposed = x_all[np.arange(n), k_star]
    rng = stream(train_config.seed, 0x5A4E4554)
    z0 = net_config.make(feature_spec.input_dim, seed=int(rng.integers(2**63)))
    z_net, _ = nnet.train(z0, (x_exposed, np.asarray(y, float)), train_config)

    return NuisanceSet(
        s0_net=s0_net,
        s1_net=s1_net,
        z_net=z_net,
        feature_spec=feature_spec,
        trained_on=trained_on,
    )


def identify_from_probs(p_all0, p_first1, p_all1):
    """Closed-form inversion from exposure probabilities to scores.

    p_all0: probabilities under the all-control assignment;
    p_first1: under (1, 0, ..., 0); p_all1: under all-treated.
    Returns (s0_diff of length K-1, s1 of length K).
    """
    p_all0 = np.asarray(p_all0, dtype=float)
    p_first1 = np.asarray(p_first1, dtype=float)
    p_all1 = np.asarray(p_all1, dtype=float)
    if np.any(p_all0 <= 0) or np.any(p_first1 <= 0) or np.any(p_all1 <= 0):
        raise IdentificationError("zero exposure probability: overlap violated")
    s0_diff = np.log(p_all0[1:] / p_all0[0])
    s1_first = np.log(
        np.exp(s0_diff).sum() * p_first1[0] / (1.0 - p_first1[0])
    )
    s1_rest = np.log(p_all1[1:] / p_all1[0]) - s0_diff + s1_first
    return s0_diff, np.concatenate(([s1_first], s1_rest))


def fit_diagnostics(nuisances: NuisanceSet, viewer_v, item_feats, w, k_star, y):
    """Held-out fit metrics: (choice log-loss, top-1 accuracy, AUC, response MSE)."""
    n = len(np.atleast_1d(k_star))
    if n == 0:
        raise ValueError("empty evaluation slice")
    item_feats = np.asarray(item_feats, dtype=float)
    s0, s1, z = nuisances.scores(viewer_v, item_feats)
    p = _softmax_rows(s0 + np.asarray(w, float) * s1)
    idx = np.arange(n)
    logloss = float(-np.log(p[idx, k_star] + 1e-300).mean())
    acc = float((p.argmax(axis=1) == k_star).mean())
    auc = ranking_auc(p, k_star)
    mse = float(np.mean((z[idx, k_star] - np.asarray(y, float)) ** 2))
    return logloss, acc, auc, mse


def ranking_auc(scores, k_star):
    """Exposed-vs-unexposed pairwise ranking AUC of per-slot scores."""
    n, k = scores.shape
    flat = scores.ravel()
    labels = np.zeros((n, k), dtype=bool)
    labels[np.arange(n), k_star] = True
    labels = labels.ravel()
    order = np.argsort(flat, kind="mergesort")
    ranks = np.empty(len(flat))
    ranks[order] = np.arange(1, len(flat) + 1)
    # midranks for ties
    sorted_vals = flat[order]
    i = 0
    while i < len(flat):
        j = i
        while j + 1 < len(flat) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    n_pos = labels.sum()
    n_neg = len(flat) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both exposed and unexposed rows")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
