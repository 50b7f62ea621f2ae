"""Benchmark estimators: difference-in-means in Horvitz-Thompson and
Hajek normalizations, full-assignment inverse propensity weighting, its
augmented variant, and the pure outcome-regression contrast."""

import json
from dataclasses import dataclass

import numpy as np

from ._rng import mix64, stream
from .nnet import DenseNet, TrainConfig, train


class DegenerateArmError(ValueError):
    pass


@dataclass
class BaselineReport:
    estimator: str
    tau_hat: float
    se: float
    n: int
    n_effective: int
    se_method: str = "per-query summand SD / sqrt(n)"

    def to_json(self):
        return json.dumps(
            {
                "estimator": self.estimator,
                "tau_hat": self.tau_hat,
                "se": self.se,
                "ci_lo": self.tau_hat - 1.96 * self.se,
                "ci_hi": self.tau_hat + 1.96 * self.se,
                "n": self.n,
                "n_effective": self.n_effective,
                "se_method": self.se_method,
            },
            indent=2,
        )


def ht_dim(dataset, q) -> BaselineReport:
    """Difference in means with fixed propensity normalization."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    wx = dataset.exposed_treatment().astype(float)
    y = dataset.outcome
    summand = wx * y / q - (1 - wx) * y / (1 - q)
    n = len(y)
    return BaselineReport(
        estimator="ht-dim",
        tau_hat=float(summand.mean()),
        se=float(summand.std(ddof=1) / np.sqrt(n)),
        n=n,
        n_effective=n,
    )


def ha_dim(dataset) -> BaselineReport:
    """Difference in means normalized by realized exposure counts."""
    wx = dataset.exposed_treatment().astype(bool)
    y = dataset.outcome
    n1 = int(wx.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise DegenerateArmError("need exposed queries in both arms")
    y1, y0 = y[wx], y[~wx]
    tau = float(y1.mean() - y0.mean())
    se = float(np.sqrt(y1.var(ddof=1) / n1 + y0.var(ddof=1) / n0))
    return BaselineReport(
        estimator="ha-dim",
        tau_hat=tau,
        se=se,
        n=len(y),
        n_effective=len(y),
        se_method="two-sample plug-in sqrt(S1^2/n1 + S0^2/n0)",
    )


def _uniform_masks(dataset):
    all1 = dataset.treatment.all(axis=1)
    all0 = ~dataset.treatment.any(axis=1)
    return all1, all0


def ipw(dataset, q) -> BaselineReport:
    """Weights by the likelihood of a uniform treatment vector.

    Only queries whose consideration set is entirely treated or entirely
    in control contribute; the weights are q^-K and -(1-q)^-K.
    """
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    k = dataset.set_size
    all1, all0 = _uniform_masks(dataset)
    y = dataset.outcome
    summand = all1 * y / q**k - all0 * y / (1 - q) ** k
    n = len(y)
    return BaselineReport(
        estimator="ipw",
        tau_hat=float(summand.mean()),
        se=float(summand.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        n=n,
        n_effective=int(all1.sum() + all0.sum()),
    )


class OutcomeModel:
    """Query-level outcome regression on (viewer, slot features, treatment)."""

    def __init__(self, net: DenseNet, k: int, item_dim: int = 2):
        self.net = net
        self.k = k
        self.item_dim = item_dim

    @staticmethod
    def build_inputs(viewer_v, item_feats, w):
        viewer_v = np.asarray(viewer_v, dtype=float)
        if viewer_v.ndim == 1:
            viewer_v = viewer_v[:, None]
        n = len(viewer_v)
        flat = np.asarray(item_feats, dtype=float).reshape(n, -1)
        return np.concatenate([viewer_v, flat, np.asarray(w, float)], axis=1)

    def predict(self, viewer_v, item_feats, w):
        x = self.build_inputs(viewer_v, item_feats, w)
        return self.net.forward_batch(x)[0][:, 0]

    def contrasts(self, viewer_v, item_feats):
        n = len(np.atleast_1d(viewer_v))
        ones = np.ones((n, self.k))
        return (
            self.predict(viewer_v, item_feats, ones)
            - self.predict(viewer_v, item_feats, np.zeros_like(ones))
        )


def fit_outcome_model(dataset, net_config=None, train_config=None) -> OutcomeModel:
    from .choicemodel import NetConfig

    net_config = net_config or NetConfig()
    train_config = train_config or TrainConfig()
    feats = dataset.item_features()
    x = OutcomeModel.build_inputs(dataset.viewer_v, feats, dataset.treatment)
    net = net_config.make(x.shape[1], seed=mix64(train_config.seed, 0x50444C) % 2**63)
    net, _ = train(net, (x, dataset.outcome), train_config)
    return OutcomeModel(net, k=dataset.set_size, item_dim=feats.shape[-1])


def pdl(dataset, net_config=None, train_config=None,
        outcome_model=None) -> BaselineReport:
    """Outcome-regression contrast: fit Y on all inputs, average the
    all-treated minus all-control prediction difference."""
    model = outcome_model or fit_outcome_model(dataset, net_config, train_config)
    contrasts = model.contrasts(dataset.viewer_v, dataset.item_features())
    n = len(contrasts)
    return BaselineReport(
        estimator="pdl",
        tau_hat=float(contrasts.mean()),
        se=float(contrasts.std(ddof=1) / np.sqrt(n)),
        n=n,
        n_effective=n,
        se_method="per-query contrast SD / sqrt(n); cross-replication SD "
                  "reported by the study harness",
    )


def aipw(dataset, q, outcome_model: OutcomeModel) -> BaselineReport:
    """Outcome-model contrast plus inverse-propensity residual corrections."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    k = dataset.set_size
    feats = dataset.item_features()
    contrasts = outcome_model.contrasts(dataset.viewer_v, feats)
    fitted = outcome_model.predict(dataset.viewer_v, feats, dataset.treatment)
    resid = dataset.outcome - fitted
    all1, all0 = _uniform_masks(dataset)
    summand = contrasts + all1 * resid / q**k - all0 * resid / (1 - q) ** k
    n = len(summand)
    return BaselineReport(
        estimator="aipw",
        tau_hat=float(summand.mean()),
        se=float(summand.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        n=n,
        n_effective=int(all1.sum() + all0.sum()),
    )
