"""Synthetic creator-side marketplace with persistent item-level treatment.

Generates viewer queries against a fixed catalog, allocates exposure via a
multinomial logit over treatment-shifted scores, and provides two
brute-force oracles: the ground-truth global treatment effect under the
all-treated / all-control policies, and the large-sample limits of the
two difference-in-means estimators computed by exhaustive enumeration of
treatment assignments within each consideration set.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream

# stream tags
_CATALOG, _VIEWERS, _SETS, _EXPOSE, _NOISE, _ORACLE = range(6)


class ConfigError(ValueError):
    pass


@dataclass
class Item:
    id: int
    c1: int
    c2: float
    w: int


@dataclass
class Observation:
    query_id: int
    viewer_v: float
    item_ids: list
    treatment: list
    exposed_slot: int
    outcome: float


@dataclass
class DgpConfig:
    n_items: int = 500
    n_queries: int = 3000
    set_size: int = 3
    treat_prob: float = 0.5
    noise_sd: float = float(np.sqrt(0.1))
    score_spec: str = "table1"
    seed: int = 0

    def __post_init__(self):
        if self.set_size > self.n_items:
            raise ConfigError("set_size must not exceed n_items")
        if not (0 <= self.treat_prob <= 1):
            raise ConfigError("treat_prob must be in [0, 1]")


class ScoreSpec:
    """Closed-form (s0, s1, z) triple; inputs are viewer value and item features."""

    def __init__(self, name, s0, s1, z):
        self.name = name
        self.s0 = s0
        self.s1 = s1
        self.z = z


def _table1_s0(v, c1, c2):
    t = v + c2
    return t + 0.1 * t * t


SCORE_SPECS = {
    "table1": ScoreSpec(
        "table1",
        s0=_table1_s0,
        s1=lambda v, c1, c2: c1 * (v + c2),
        z=lambda v, c1, c2: v + c2,
    ),
    # no treatment channel: exposure identical in both worlds
    "null": ScoreSpec(
        "null",
        s0=_table1_s0,
        s1=lambda v, c1, c2: np.zeros_like(np.asarray(v, float) + c2),
        z=lambda v, c1, c2: v + c2,
    ),
}


def get_spec(name: str) -> ScoreSpec:
    try:
        return SCORE_SPECS[name]
    except KeyError:
        raise ConfigError(f"unknown score spec {name!r}") from None


def true_scores(spec, viewer_v, item):
    """Exact (s0, s1, z_mean) for one viewer/item pair."""
    if isinstance(spec, str):
        spec = get_spec(spec)
    v, c1, c2 = float(viewer_v), item.c1, item.c2
    return (
        float(spec.s0(v, c1, c2)),
        float(spec.s1(v, c1, c2)),
        float(spec.z(v, c1, c2)),
    )


@dataclass
class Dataset:
    """Catalog plus query-level observations, stored columnwise."""

    item_c1: np.ndarray        # (J,) binary
    item_c2: np.ndarray        # (J,) in [0, 1]
    item_w: np.ndarray         # (J,) binary, persistent
    viewer_v: np.ndarray       # (Q,)
    item_idx: np.ndarray       # (Q, K) catalog indices
    treatment: np.ndarray      # (Q, K) binary
    exposed_slot: np.ndarray   # (Q,)
    outcome: np.ndarray        # (Q,)
    config: DgpConfig = None
    appearance_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.appearance_counts is None:
            self.appearance_counts = np.bincount(
                self.item_idx.ravel(), minlength=len(self.item_c1)
            )

    @property
    def n_queries(self):
        return len(self.viewer_v)

    @property
    def set_size(self):
        return self.item_idx.shape[1]

    def item_features(self):
        """(Q, K, 2) array of (c1, c2) per slot."""
        return np.stack(
            [self.item_c1[self.item_idx], self.item_c2[self.item_idx]], axis=-1
        )

    def exposed_treatment(self):
        q = np.arange(self.n_queries)
        return self.treatment[q, self.exposed_slot]

    def catalog(self):
        return [
            Item(i, int(self.item_c1[i]), float(self.item_c2[i]), int(self.item_w[i]))
            for i in range(len(self.item_c1))
        ]

    def observation(self, i) -> Observation:
        return Observation(
            query_id=i,
            viewer_v=float(self.viewer_v[i]),
            item_ids=list(map(int, self.item_idx[i])),
            treatment=list(map(int, self.treatment[i])),
            exposed_slot=int(self.exposed_slot[i]),
            outcome=float(self.outcome[i]),
        )


def gen_catalog(config: DgpConfig, rng=None):
    """Draw the item catalog: c1 ~ Bern(0.5), c2 ~ Unif(0,1), w ~ Bern(q)."""
    if rng is None:
        rng = stream(config.seed, _CATALOG)
    j = config.n_items
    c1 = (rng.random(j) < 0.5).astype(np.int64)
    c2 = rng.random(j)
    w = (rng.random(j) < config.treat_prob).astype(np.int64)
    return c1, c2, w


def _sample_sets(rng, n, j, k):
    """n consideration sets of k distinct items sampled uniformly from j."""
    if k > j:
        raise ConfigError("set size exceeds catalog size")
    # draw with replacement, then re-draw rows with duplicates (rare for k << j)
    out = rng.integers(0, j, size=(n, k))
    bad = np.array(
        [len(set(row)) != k for row in out]
    )
    while bad.any():
        idx = np.flatnonzero(bad)
        out[idx] = rng.integers(0, j, size=(len(idx), k))
        bad[idx] = [len(set(out[i])) != k for i in idx]
    return out


def softmax(u, axis=-1):
    u = u - u.max(axis=axis, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=axis, keepdims=True)


def simulate(config: DgpConfig, catalog=None, force_w=None) -> Dataset:
    """Run the data-generating process; deterministic given config.seed.

    `force_w` overrides every item's treatment status (0 or 1), used by
    global-policy cross-checks.
    """
    spec = get_spec(config.score_spec)
    if catalog is None:
        c1, c2, w = gen_catalog(config)
    else:
        c1, c2, w = catalog
    if force_w is not None:
        w = np.full_like(w, force_w)

    q_n = config.n_queries
    k = config.set_size
    v = stream(config.seed, _VIEWERS).uniform(0.0, 5.0, size=q_n)
    sets = _sample_sets(stream(config.seed, _SETS), q_n, config.n_items, k)

    sc1 = c1[sets]
    sc2 = c2[sets]
    sw = w[sets]
    vv = v[:, None]
    s0 = spec.s0(vv, sc1, sc2)
    s1 = spec.s1(vv, sc1, sc2)
    z = spec.z(vv, sc1, sc2)

    p = softmax(s0 + sw * s1, axis=1)
    u = stream(config.seed, _EXPOSE).random(q_n)
    exposed = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    exposed = np.minimum(exposed, k - 1)

    noise = stream(config.seed, _NOISE).normal(0.0, config.noise_sd, size=q_n)
    y = z[np.arange(q_n), exposed] + noise

    return Dataset(
        item_c1=c1,
        item_c2=c2,
        item_w=w,
        viewer_v=v,
        item_idx=sets,
        treatment=sw,
        exposed_slot=exposed,
        outcome=y,
        config=config,
    )


def _draw_population(config, n_oracle):
    """Fresh viewers and item features from the population distribution."""
    rng = stream(config.seed, _ORACLE)
    v = rng.uniform(0.0, 5.0, size=n_oracle)
    c1 = (rng.random((n_oracle, config.set_size)) < 0.5).astype(float)
    c2 = rng.random((n_oracle, config.set_size))
    return v[:, None], c1, c2


def oracle_gte(config: DgpConfig, n_oracle: int = 100_000):
    """Ground-truth GTE by common-random-number global policy contrast.

    Uses the noiseless expected response and analytic exposure
    probabilities, so the only Monte Carlo noise is over (viewer, set)
    draws. Returns (gte, mc_se).
    """
    spec = get_spec(config.score_spec)
    vv, c1, c2 = _draw_population(config, n_oracle)
    s0 = spec.s0(vv, c1, c2)
    s1 = spec.s1(vv, c1, c2)
    z = spec.z(vv, c1, c2)
    val_treat = (softmax(s0 + s1, axis=1) * z).sum(axis=1)
    val_ctrl = (softmax(s0, axis=1) * z).sum(axis=1)
    diff = val_treat - val_ctrl
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_oracle))


def enumerate_treatments(k: int):
    """All 2^k binary vectors as a (2^k, k) float array."""
    if k > 20:
        raise ConfigError("enumeration limited to set sizes <= 20")
    grid = np.indices((2,) * k).reshape(k, -1).T
    return grid.astype(float)


def dim_limits(config: DgpConfig, n_oracle: int = 100_000):
    """Large-sample limit values (tau_ht, tau_ha) of the two DIM estimators.

    For each sampled query, enumerates every treatment assignment of the
    consideration set with its Bernoulli(q) weight, computes exact
    exposure probabilities and noiseless responses, and accumulates the
    population moments that the estimators normalize.
    """
    spec = get_spec(config.score_spec)
    q = config.treat_prob
    vv, c1, c2 = _draw_population(config, n_oracle)
    s0 = spec.s0(vv, c1, c2)
    s1 = spec.s1(vv, c1, c2)
    z = spec.z(vv, c1, c2)

    w_all = enumerate_treatments(config.set_size)
    ew_y = np.zeros(n_oracle)
    ew = np.zeros(n_oracle)
    ec_y = np.zeros(n_oracle)
    for w in w_all:
        prob_w = float(np.prod(np.where(w > 0, q, 1 - q)))
        if prob_w == 0.0:
            continue
        p = softmax(s0 + w[None, :] * s1, axis=1)
        ew_y += prob_w * (p * w[None, :] * z).sum(axis=1)
        ew += prob_w * (p * w[None, :]).sum(axis=1)
        ec_y += prob_w * (p * (1 - w[None, :]) * z).sum(axis=1)
    m_wy, m_w, m_cy = ew_y.mean(), ew.mean(), ec_y.mean()
    tau_ht = m_wy / q - m_cy / (1 - q)
    tau_ha = m_wy / m_w - m_cy / (1 - m_w)
    return float(tau_ht), float(tau_ha)


# ---------------------------------------------------------------------------
# CSV interchange: one row per (query, slot), y only on the exposed row.

def write_csv(dataset: Dataset, path):
    k = dataset.set_size
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["query_id", "slot", "item_id", "viewer_v", "c1", "c2", "w", "exposed", "y"]
        )
        feats = dataset.item_features()
        for i in range(dataset.n_queries):
            for s in range(k):
                exposed = int(s == dataset.exposed_slot[i])
                writer.writerow(
                    [
                        i,
                        s,
                        int(dataset.item_idx[i, s]),
                        f"{dataset.viewer_v[i]:.17g}",
                        int(feats[i, s, 0]),
                        f"{feats[i, s, 1]:.17g}",
                        int(dataset.treatment[i, s]),
                        exposed,
                        f"{dataset.outcome[i]:.17g}" if exposed else "",
                    ]
                )


def read_csv(path) -> Dataset:
    """Read the interchange schema back into a Dataset.

    Accepts the native columns (viewer_v, c1, c2) or the generalized
    external-data form (v0..v{d-1}, f0..f{d-1}); generalized viewer
    features beyond the first column are currently folded into column 0.
    """
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames
        if cols is None:
            raise ValueError("empty CSV")
        viewer_cols = ["viewer_v"] if "viewer_v" in cols else sorted(
            c for c in cols if c.startswith("v") and c[1:].isdigit()
        )
        feat_cols = (
            ["c1", "c2"]
            if "c1" in cols
            else sorted(c for c in cols if c.startswith("f") and c[1:].isdigit())
        )
        rows = list(reader)

    by_query = {}
    for r in rows:
        by_query.setdefault(int(r["query_id"]), []).append(r)
    qids = sorted(by_query)
    k = len(by_query[qids[0]])

    n = len(qids)
    viewer = np.zeros(n)
    item_idx = np.zeros((n, k), dtype=np.int64)
    treatment = np.zeros((n, k), dtype=np.int64)
    exposed = np.zeros(n, dtype=np.int64)
    outcome = np.zeros(n)
    item_feat = {}
    item_w = {}
    for qi, qid in enumerate(qids):
        qrows = sorted(by_query[qid], key=lambda r: int(r["slot"]))
        if len(qrows) != k:
            raise ValueError(f"query {qid}: inconsistent set size")
        viewer[qi] = float(qrows[0][viewer_cols[0]])
        n_exposed = 0
        for s, r in enumerate(qrows):
            iid = int(r["item_id"])
            item_idx[qi, s] = iid
            treatment[qi, s] = int(r["w"])
            item_feat[iid] = tuple(float(r[c]) for c in feat_cols)
            item_w[iid] = int(r["w"])
            if int(r["exposed"]):
                exposed[qi] = s
                outcome[qi] = float(r["y"])
                n_exposed += 1
        if n_exposed != 1:
            raise ValueError(f"query {qid}: expected exactly one exposed row")

    # compact item ids to catalog indices
    ids = sorted(item_feat)
    remap = {iid: j for j, iid in enumerate(ids)}
    item_idx = np.vectorize(remap.get)(item_idx)
    c1 = np.array([item_feat[i][0] for i in ids])
    c2 = np.array([item_feat[i][1] for i in ids])
    w = np.array([item_w[i] for i in ids], dtype=np.int64)
    return Dataset(
        item_c1=c1,
        item_c2=c2,
        item_w=w,
        viewer_v=viewer,
        item_idx=item_idx,
        treatment=treatment,
        exposed_slot=exposed,
        outcome=outcome,
        config=DgpConfig(
            n_items=len(ids), n_queries=n, set_size=k, seed=0
        ),
    )
