"""Minimal dense feedforward networks with exact reverse-mode gradients.

ReLU hidden layers, identity output with a hard clamp, Adam optimizer.
Everything is plain numpy; networks are small (a few thousand parameters)
and serve as the flexible approximators for the three nuisance functions.
"""

from dataclasses import dataclass, field

import numpy as np

from ._rng import stream


class InputShapeError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    validation_fraction: float = 0.1
    early_stop_patience: int = 20
    output_clamp: float = 30.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.output_clamp <= 0:
            raise ValueError("output_clamp must be > 0")
        if not (0 <= self.validation_fraction < 1):
            raise ValueError("validation_fraction must be in [0, 1)")


class DenseNet:
    """Fully connected net: ReLU on hidden layers, clamped identity output.

    Weights are stored one matrix per layer with shape (fan_out, fan_in).
    Instances are treated as immutable during inference; training code
    operates on a private copy.
    """

    def __init__(self, layer_widths, output_clamp: float = 30.0, seed: int = 0):
        if len(layer_widths) < 2 or any(w < 1 for w in layer_widths):
            raise ValueError("layer_widths needs >= 2 positive entries")
        self.layer_widths = list(layer_widths)
        self.output_clamp = float(output_clamp)
        rng = stream(seed, 0x4E4E4554)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
            # fan-in scaled uniform init keeps initial pre-activations O(1)
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def copy(self) -> "DenseNet":
        out = DenseNet.__new__(DenseNet)
        out.layer_widths = list(self.layer_widths)
        out.output_clamp = self.output_clamp
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def parameters(self):
        return self.weights + self.biases

    def forward_batch(self, x: np.ndarray):
        """Forward pass on a (n, input_dim) batch; returns (out, cache)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise InputShapeError(
                f"expected (n, {self.input_dim}) input, got {x.shape}"
            )
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = np.clip(z, -self.output_clamp, self.output_clamp)
            acts.append(h)
        return acts[-1], acts

    def backward_batch(self, cache, dout: np.ndarray, batch_size=None):
        """Gradients of (1/batch_size) * sum_i <dout_i, out_i> w.r.t. parameters.

        `dout` is the per-sample loss gradient at the clamped output.
        Returns (weight_grads, bias_grads) matching parameter shapes.
        """
        acts = cache
        n = batch_size if batch_size is not None else acts[0].shape[0]
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        # clamp is identity inside the bound, flat outside
        delta = np.where(np.abs(acts[-1]) < self.output_clamp, dout, 0.0)
        for i in range(len(self.weights) - 1, -1, -1):
            w_grads[i] = delta.T @ acts[i] / n
            b_grads[i] = delta.sum(axis=0) / n
            if i > 0:
                delta = (delta @ self.weights[i]) * (acts[i] > 0)
        return w_grads, b_grads


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out, _ = net.forward_batch(x[None, :])
    return out[0]


def param_gradient(net: DenseNet, batch):
    """Exact mean-batch gradient w.r.t. all parameters.

    Each batch entry is (input, target, loss_kind) with loss_kind either
    "squared-error" (target is the regression target, loss sum((f-t)^2))
    or "grad" (target is the downstream loss gradient at the outputs).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    n = len(batch)
    w_tot = [np.zeros_like(w) for w in net.weights]
    b_tot = [np.zeros_like(b) for b in net.biases]
    for x, target, kind in batch:
        out, cache = net.forward_batch(np.atleast_1d(np.asarray(x, float))[None, :])
        target = np.atleast_1d(np.asarray(target, dtype=float))
        if kind == "squared-error":
            dout = 2.0 * (out - target[None, :])
        elif kind == "grad":
            dout = target[None, :]
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
        wg, bg = net.backward_batch(cache, dout, batch_size=1)
        for acc, g in zip(w_tot, wg):
            acc += g
        for acc, g in zip(b_tot, bg):
            acc += g
    return [g / n for g in w_tot], [g / n for g in b_tot]


@dataclass
class Adam:
    """Standard Adam with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _mse(net, x, y):
    out, _ = net.forward_batch(x)
    return float(np.mean(np.sum((out - y) ** 2, axis=1)))


def train(net: DenseNet, dataset, config: TrainConfig):
    """Fit `net` on (X, y) by Adam-minimized mean squared error.

    Returns (trained_net, loss_trace) where loss_trace is a list of
    (train_loss, val_loss) per epoch (val_loss None without validation).
    When early stopping is active the returned net is the one with the
    best validation loss.
    """
    x, y = dataset
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise ValueError("dataset must be non-empty")

    rng = stream(config.seed, 0x545241494E)
    n = x.shape[0]
    n_val = int(round(config.validation_fraction * n))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xt, yt = x[tr_idx], y[tr_idx]
    xv, yv = x[val_idx], y[val_idx]

    net = net.copy()
    net.output_clamp = config.output_clamp
    opt = Adam(lr=config.learning_rate)
    params = net.parameters()

    best_loss = np.inf
    best_params = None
    since_best = 0
    trace = []
    use_val = n_val > 0 and config.early_stop_patience > 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(xt))
        for start in range(0, len(xt), config.batch_size):
            idx = order[start : start + config.batch_size]
            out, cache = net.forward_batch(xt[idx])
            dout = 2.0 * (out - yt[idx])
            wg, bg = net.backward_batch(cache, dout)
            opt.step(params, wg + bg)
        tr_loss = _mse(net, xt, yt)
        if not np.isfinite(tr_loss):
            raise TrainingDivergenceError(epoch)
        val_loss = _mse(net, xv, yv) if n_val > 0 else None
        trace.append((tr_loss, val_loss))
        if use_val:
            if val_loss < best_loss - 1e-12:
                best_loss = val_loss
                best_params = [p.copy() for p in params]
                since_best = 0
            else:
                since_best += 1
                if since_best > config.early_stop_patience:
                    break

    if use_val and best_params is not None:
        for p, bp in zip(params, best_params):
            p[...] = bp
    return net, trace


def save(net: DenseNet, path):
    """Write the plain-text v1 model format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(net))


def serialize(net: DenseNet) -> str:
    lines = ["densenet v1"]
    lines.append(" ".join(str(w) for w in net.layer_widths))
    lines.append(f"{net.output_clamp!r}")
    for w, b in zip(net.weights, net.biases):
        lines.append(" ".join(repr(float(v)) for v in w.ravel()))
        lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> DenseNet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0].strip() != "densenet v1":
        raise ValueError("not a densenet v1 file")
    widths = [int(v) for v in lines[1].split()]
    net = DenseNet.__new__(DenseNet)
    net.layer_widths = widths
    net.output_clamp = float(lines[2])
    net.weights = []
    net.biases = []
    row = 3
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.array([float(v) for v in lines[row].split()]).reshape(fan_out, fan_in)
        b = np.array([float(v) for v in lines[row + 1].split()])
        net.weights.append(w)
        net.biases.append(b)
        row += 2
    return net


def load(path) -> DenseNet:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())
