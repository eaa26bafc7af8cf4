"""Feed-forward torque policy regressed from optimal state-action pairs.

The network maps ``[q | qd | q_goal]`` (3J inputs) through two 128-unit ReLU
layers to J torques.  Inputs and outputs are standardised with statistics
taken from the training set; they travel with the net, so :func:`predict`
works in raw units (rad, rad/s, N·m).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PolicyError",
    "DimensionMismatch",
    "TrainingDiverged",
    "FormatError",
    "PolicyNet",
    "TrainConfig",
    "TrainResult",
    "init",
    "predict",
    "predict_batch",
    "forward",
    "pairs_from_trajectories",
    "train",
    "save",
    "to_dict",
    "from_dict",
    "load",
    "HIDDEN",
    "FORMAT_VERSION",
]

log = logging.getLogger(__name__)

HIDDEN = 128
FORMAT_NAME = "gradgap-policy"
FORMAT_VERSION = 1


class PolicyError(Exception):
    pass


class DimensionMismatch(PolicyError, ValueError):
    pass


class TrainingDiverged(PolicyError):
    pass


class FormatError(PolicyError):
    pass


@dataclass
class PolicyNet:
    """Weights are stored as ``(fan_in, fan_out)`` matrices."""

    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @property
    def J(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def copy(self) -> "PolicyNet":
        return PolicyNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.in_mean.copy(),
            self.in_std.copy(),
            self.out_mean.copy(),
            self.out_std.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    net: PolicyNet
    loss_curve: list = field(default_factory=list)  # raw-space MSE per epoch
    val_curve: list = field(default_factory=list)
    final_loss: float = math.nan


def init(J: int, seed: int = 0, hidden: int = HIDDEN) -> PolicyNet:
    """He-initialised net with identity standardisation and zero biases."""
    if J < 1:
        raise ValueError("J must be at least 1")
    rng = np.random.default_rng(seed)
    sizes = [3 * J, hidden, hidden, J]
    weights = [rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return PolicyNet(weights, biases, np.zeros(3 * J), np.ones(3 * J), np.zeros(J), np.ones(J))


def forward(net: PolicyNet, X: np.ndarray, hidden: bool = False):
    """Standardised-space forward pass on raw inputs ``X`` (B, 3J).

    Returns the standardised outputs, plus the list of pre-activations when
    ``hidden`` is set.
    """
    h = (X - net.in_mean) / net.in_std
    pre = []
    n = len(net.weights)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n - 1 else z
    return (h, pre) if hidden else h


def predict_batch(net: PolicyNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3 * net.J:
        raise DimensionMismatch(f"expected inputs of width {3 * net.J}")
    return forward(net, X) * net.out_std + net.out_mean


def predict(net: PolicyNet, state, goal) -> np.ndarray:
    """Torques for one state; ``state`` is a JointState or a ``(q, qd)`` pair."""
    q, qd = (state.q, state.qd) if hasattr(state, "qd") else state
    x = np.concatenate([np.asarray(q, float), np.asarray(qd, float), np.asarray(goal, float)])
    if x.shape != (3 * net.J,):
        raise DimensionMismatch(f"expected {net.J} joints")
    return predict_batch(net, x[None])[0]


def pairs_from_trajectories(dataset) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``([q, qd, goal], u)`` for every control tick of every trajectory."""
    if not dataset:
        raise ValueError("empty dataset")
    J = dataset[0].u.shape[1]
    X, Y = [], []
    for tr in dataset:
        if tr.u.shape[1] != J or tr.q.shape[1] != J:
            raise DimensionMismatch("trajectories disagree on the joint count")
        if tr.goal is None or len(tr.goal) != J:
            raise DimensionMismatch("every trajectory needs a goal of J joints")
        n = len(tr.u)
        X.append(np.hstack([tr.q[:n], tr.qd[:n], np.tile(tr.goal, (n, 1))]))
        Y.append(tr.u)
    return np.vstack(X), np.vstack(Y)


def _stats(A):
    mean = A.mean(axis=0)
    std = A.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def train(net: PolicyNet, dataset, config: TrainConfig = TrainConfig(), pairs=None) -> TrainResult:
    """Minibatch Adam on the mean squared torque error.

    ``dataset`` is a list of trajectories with goals; alternatively pass
    ``pairs=(X, Y)`` directly.  Standardisation statistics are fitted on the
    training split and stored in the returned net.  Loss values are
    raw-space MSE (N·m squared, averaged over joints and samples).
    """
    X, Y = pairs if pairs is not None else pairs_from_trajectories(dataset)
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    J = net.J
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != 3 * J or Y.shape[1] != J or len(X) != len(Y):
        raise DimensionMismatch(f"net expects {3 * J} inputs and {J} outputs")
    if len(X) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(X))
    n_val = int(round(config.val_fraction * len(X))) if len(X) > 1 else 0
    val, tr = order[:n_val], order[n_val:]
    Xt, Yt = X[tr], Y[tr]

    net = net.copy()
    net.in_mean, net.in_std = _stats(Xt)
    net.out_mean, net.out_std = _stats(Yt)
    Ys = (Yt - net.out_mean) / net.out_std
    w2 = net.out_std**2

    params = [*net.weights, *net.biases]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    nL = len(net.weights)
    curve, vcurve = [], []
    # overflow is caught by the finiteness checks
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            perm = rng.permutation(len(Xt))
            total = 0.0
            for s in range(0, len(perm), config.batch_size):
                bi = perm[s : s + config.batch_size]
                out, pre = forward(net, Xt[bi], hidden=True)
                err = out - Ys[bi]
                B = len(bi)
                total += float(np.sum(err**2 * w2))
                # gradient of the standardised-space mean squared error
                g = 2.0 * err / (B * J)
                acts = [(Xt[bi] - net.in_mean) / net.in_std] + [np.maximum(z, 0.0) for z in pre[:-1]]
                gW, gb = [None] * nL, [None] * nL
                for i in range(nL - 1, -1, -1):
                    gW[i] = acts[i].T @ g
                    gb[i] = g.sum(axis=0)
                    if i:
                        g = (g @ net.weights[i].T) * (pre[i - 1] > 0)
                step += 1
                c1, c2 = 1 - b1**step, 1 - b2**step
                for p, gp, mp, vp in zip(params, gW + gb, m, v):
                    mp *= b1
                    mp += (1 - b1) * gp
                    vp *= b2
                    vp += (1 - b2) * gp * gp
                    p -= lr * (mp / c1) / (np.sqrt(vp / c2) + eps)
            loss = total / (len(Xt) * J)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}; lower the learning rate")
            curve.append(loss)
            if n_val:
                vcurve.append(float(np.mean((predict_batch(net, X[val]) - Y[val]) ** 2)))
            log.debug("epoch %d loss %.3e", epoch + 1, loss)
    final = float(np.mean((predict_batch(net, Xt) - Yt) ** 2))
    if not math.isfinite(final):
        raise TrainingDiverged("final loss is not finite")
    return TrainResult(net, curve, vcurve, final)


# ---------------------------------------------------------------------------
# serialisation: UTF-8 JSON, floats written with repr so they round-trip


def to_dict(net: PolicyNet) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "joints": net.J,
        "layers": [
            {"fan_in": W.shape[0], "fan_out": W.shape[1], "weights": W.tolist(), "biases": b.tolist()}
            for W, b in zip(net.weights, net.biases)
        ],
        "input_mean": net.in_mean.tolist(),
        "input_std": net.in_std.tolist(),
        "output_mean": net.out_mean.tolist(),
        "output_std": net.out_std.tolist(),
    }


def from_dict(d: dict) -> PolicyNet:
    try:
        if d["format"] != FORMAT_NAME:
            raise FormatError(f"not a policy file: format {d['format']!r}")
        if d["version"] != FORMAT_VERSION:
            raise FormatError(f"unsupported policy format version {d['version']}")
        weights, biases = [], []
        for layer in d["layers"]:
            W = np.array(layer["weights"], dtype=float).reshape(layer["fan_in"], layer["fan_out"])
            b = np.array(layer["biases"], dtype=float).reshape(layer["fan_out"])
            weights.append(W)
            biases.append(b)
        net = PolicyNet(
            weights,
            biases,
            np.array(d["input_mean"], dtype=float),
            np.array(d["input_std"], dtype=float),
            np.array(d["output_mean"], dtype=float),
            np.array(d["output_std"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed policy file: {exc}") from exc
    J = d["joints"]
    if net.J != J or weights[0].shape[0] != 3 * J or len(net.in_mean) != 3 * J or len(net.out_mean) != J:
        raise FormatError("layer shapes disagree with the joint count")
    for a, b in zip(weights[:-1], weights[1:]):
        if a.shape[1] != b.shape[0]:
            raise FormatError("consecutive layers do not chain")
    return net


def save(net: PolicyNet, path) -> None:
    Path(path).write_text(json.dumps(to_dict(net), indent=1) + "\n", encoding="utf-8")


def load(path) -> PolicyNet:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"policy file is not valid JSON: {exc}") from exc
    return from_dict(d)
