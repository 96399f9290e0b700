"""Fully-connected residual network h_{k+1} = h_k + delta_k * sigma(A_k h_k + b_k).

Two setups are supported: tanh with one shared, non-negative delta, and
ReLU with a trainable delta per layer. Gradients are computed by hand;
everything is batched over the leading axis.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
DELTA_MODES = ("shared", "per_layer")
CANONICAL = {("tanh", "shared"), ("relu", "per_layer")}

CKPT_MAGIC = b"RSLB"
CKPT_VERSION = 1


class NonFiniteStateError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"hidden state became non-finite at layer {layer}")
        self.layer = layer


class TrainingDivergedError(FloatingPointError):
    def __init__(self, update: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at update {update}")
        self.update = update


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    depth: int
    width: int
    activation: str = "tanh"
    delta_mode: str = "shared"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.delta_mode not in DELTA_MODES:
            raise ValueError(f"delta_mode must be one of {DELTA_MODES}")

    @property
    def canonical(self) -> bool:
        """True for the two setups studied: tanh/shared and relu/per_layer."""
        return (self.activation, self.delta_mode) in CANONICAL


@dataclass
class ResNet:
    arch: Architecture
    A: np.ndarray  # (L, d, d)
    b: np.ndarray  # (L, d)
    delta: np.ndarray  # () for shared, (L,) for per_layer
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        L, d = self.arch.depth, self.arch.width
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        want = () if self.arch.delta_mode == "shared" else (L,)
        if self.A.shape != (L, d, d) or self.b.shape != (L, d) or self.delta.shape != want:
            raise ValueError(
                f"parameter shapes A{self.A.shape} b{self.b.shape} delta{self.delta.shape} "
                f"do not match depth {L}, width {d}, delta mode {self.arch.delta_mode}"
            )
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.delta))):
            raise ValueError("network parameters must be finite")
        if self.arch.activation == "tanh" and self.arch.delta_mode == "shared" and self.delta < 0:
            raise ValueError("shared delta must be non-negative for tanh networks")

    @property
    def depth(self) -> int:
        return self.arch.depth

    @property
    def width(self) -> int:
        return self.arch.width

    def layer_deltas(self) -> np.ndarray:
        """delta_k for every layer, shape (L,)."""
        return np.broadcast_to(self.delta, (self.depth,)).astype(np.float64)

    def copy(self) -> "ResNet":
        return ResNet(self.arch, self.A.copy(), self.b.copy(), self.delta.copy(), dict(self.info))

    def replace(self, A=None, b=None, delta=None) -> "ResNet":
        return ResNet(
            self.arch,
            self.A.copy() if A is None else A,
            self.b.copy() if b is None else b,
            self.delta.copy() if delta is None else delta,
            dict(self.info),
        )

    def same_parameters(self, other: "ResNet") -> bool:
        """Bit-for-bit equality of architecture and parameters."""
        return (
            self.arch == other.arch
            and self.A.tobytes() == other.A.tobytes()
            and self.b.tobytes() == other.b.tobytes()
            and self.delta.tobytes() == other.delta.tobytes()
        )


def activation_fns(name: str):
    """Return (sigma, sigma') for an activation name."""
    if name == "tanh":
        def d_tanh(x):
            t = np.tanh(x)
            return 1.0 - t * t
        return np.tanh, d_tanh
    if name == "relu":
        # subgradient 0 at the kink
        return (lambda x: np.maximum(x, 0.0)), (lambda x: (x > 0).astype(np.float64))
    raise ValueError(f"unknown activation {name!r}")


def init_network(arch: Architecture, seed: int) -> ResNet:
    """Gaussian initialisation: A ~ N(0, 1/(L d^2)), b ~ N(0, 1/(L d)).

    Shared delta starts at L^{-1/2}; per-layer deltas are N(0, 1/L).
    """
    L, d = arch.depth, arch.width
    rng = RngStream(seed, 2)
    A = rng.child(0).normal((L, d, d), (L * d * d) ** -0.5)
    b = rng.child(1).normal((L, d), (L * d) ** -0.5)
    if arch.delta_mode == "shared":
        delta = np.array(L ** -0.5)
    else:
        delta = rng.child(2).normal((L,), L ** -0.5)
    return ResNet(arch, A, b, delta, {"seed": int(seed)})


def _forward_batch(net: ResNet, X: np.ndarray):
    """States (L+1, n, d) and pre-activations (L, n, d) for a batch."""
    sigma, _ = activation_fns(net.arch.activation)
    L = net.depth
    deltas = net.layer_deltas()
    H = np.empty((L + 1,) + X.shape)
    P = np.empty((L,) + X.shape)
    H[0] = X
    h = X
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(L):
            pre = h @ net.A[k].T + net.b[k]
            P[k] = pre
            h = h + deltas[k] * sigma(pre)
            H[k + 1] = h
    if not np.all(np.isfinite(H)):
        bad = np.flatnonzero(~np.all(np.isfinite(H.reshape(L + 1, -1)), axis=1))[0]
        raise NonFiniteStateError(int(bad))
    return H, P


def forward(net: ResNet, x: np.ndarray) -> np.ndarray:
    """Hidden states h_0..h_L for a single input (shape (L+1, d)) or a batch
    (shape (L+1, n, d))."""
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != net.width:
        raise ValueError(f"input dimension {X.shape[-1]} does not match width {net.width}")
    H, _ = _forward_batch(net, X)
    return H


def loss(net: ResNet, X: np.ndarray, Y: np.ndarray) -> float:
    """Mean over the batch and over coordinates of (h_L - y)^2."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape != Y.shape:
        raise ValueError(f"inputs {X.shape} and targets {Y.shape} differ in shape")
    H, _ = _forward_batch(net, X)
    r = H[-1] - Y
    return float(np.mean(r * r))


@dataclass
class Gradients:
    A: np.ndarray
    b: np.ndarray
    delta: np.ndarray  # scalar array for shared, (L,) otherwise
    layer_delta: np.ndarray  # always (L,): d loss / d delta_k treating each layer separately


def _backward_from_states(net: ResNet, H, P, Y) -> Gradients:
    sigma, dsigma = activation_fns(net.arch.activation)
    L, d = net.depth, net.width
    n = Y.shape[0]
    deltas = net.layer_deltas()
    g = 2.0 * (H[-1] - Y) / (n * d)
    dA = np.empty_like(net.A)
    db = np.empty_like(net.b)
    dd = np.empty(L)
    for k in range(L - 1, -1, -1):
        pre = P[k]
        dd[k] = np.sum(g * sigma(pre))
        u = g * deltas[k] * dsigma(pre)
        dA[k] = u.T @ H[k]
        db[k] = u.sum(axis=0)
        g = g + u @ net.A[k]
    ddelta = np.array(dd.sum()) if net.arch.delta_mode == "shared" else dd.copy()
    return Gradients(dA, db, ddelta, dd)


def backward(net: ResNet, X: np.ndarray, Y: np.ndarray) -> Gradients:
    """Exact gradient of :func:`loss` with respect to A, b and delta."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape != Y.shape or X.shape[0] == 0:
        raise ValueError("need a nonempty batch with matching input/target shapes")
    H, P = _forward_batch(net, X)
    return _backward_from_states(net, H, P, Y)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    early_stop: float = 0.01
    max_updates: int = 160
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.early_stop < 0:
            raise ValueError("early_stop must be >= 0")
        if self.max_updates < 1:
            raise ValueError("max_updates must be >= 1")


# defaults per dataset kind (fully-connected rows of the hyperparameter table)
TRAINING_DEFAULTS = {
    "synthetic": dict(n=1024, batch_size=32, learning_rate=0.01, early_stop=0.01,
                      max_updates=160, epochs=5, L_min=3, L_max=10321),
    "mnist": dict(n=60000, batch_size=50, learning_rate=0.01, early_stop=0.01,
                  max_updates=12000, epochs=10, L_min=3, L_max=942),
}


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    converged: bool = False
    max_hidden_norm: float = 0.0
    loss_convention: str = "mean over batch and coordinates"

    @property
    def updates(self) -> int:
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def sgd_train(net: ResNet, X: np.ndarray, Y: np.ndarray, config: TrainConfig) -> tuple[ResNet, TrainHistory]:
    """Plain minibatch SGD on the MSE loss.

    Each epoch draws a fresh permutation from its own sub-stream. The loss of
    each minibatch is recorded before its update; training stops after the
    first update whose minibatch loss is below ``early_stop``, or after
    ``max_updates`` updates. A shared tanh delta is clamped at 0.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != net.width:
        raise ValueError("dataset shape does not match the network width")
    net = net.copy()
    hist = TrainHistory()
    clamp = net.arch.delta_mode == "shared" and net.arch.activation == "tanh"
    rng = RngStream(config.seed, 3)
    n, B, eta = X.shape[0], config.batch_size, config.learning_rate
    epoch, order, pos = 0, None, n
    for t in range(config.max_updates):
        if pos >= n:
            order = rng.child(epoch).permutation(n)
            epoch += 1
            pos = 0
        idx = order[pos:pos + B]
        pos += B
        try:
            H, P = _forward_batch(net, X[idx])
        except NonFiniteStateError as exc:
            raise TrainingDivergedError(t, float("nan")) from exc
        r = H[-1] - Y[idx]
        value = float(np.mean(r * r))
        if not np.isfinite(value):
            raise TrainingDivergedError(t, value)
        hist.losses.append(value)
        hist.max_hidden_norm = max(hist.max_hidden_norm, float(np.max(np.linalg.norm(H, axis=-1))))
        grads = _backward_from_states(net, H, P, Y[idx])
        net.A -= eta * grads.A
        net.b -= eta * grads.b
        net.delta = net.delta - eta * grads.delta
        if clamp and net.delta < 0:
            net.delta = np.array(0.0)
        if value < config.early_stop:
            hist.converged = True
            break
    net.info.update(seed=config.seed, loss_final=hist.final_loss, converged=hist.converged)
    log.debug("trained L=%d for %d updates, final loss %.4g", net.depth, hist.updates, hist.final_loss)
    return net, hist


def _payload(net: ResNet) -> bytes:
    return (net.A.astype("<f8").tobytes() + net.b.astype("<f8").tobytes()
            + np.atleast_1d(net.delta).astype("<f8").tobytes())


def checkpoint_bytes(net: ResNet) -> bytes:
    """Serialise a network.

    Layout: ``RSLB``, version (u32 LE), header length (u32 LE), UTF-8
    ``key=value`` header lines, float64 LE payload (A_0..A_{L-1} row-major,
    b_0..b_{L-1}, then delta), and an 8-byte BLAKE2b digest of the payload.
    """
    info = net.info
    header = "\n".join([
        f"L={net.depth}",
        f"d={net.width}",
        f"activation={net.arch.activation}",
        f"delta_mode={net.arch.delta_mode}",
        f"seed={info.get('seed', '')}",
        f"loss_final={float(info['loss_final'])!r}" if "loss_final" in info else "loss_final=",
        f"converged={int(bool(info['converged']))}" if "converged" in info else "converged=",
    ]).encode("utf-8")
    payload = _payload(net)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + payload + digest


def save_checkpoint(net: ResNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def parse_checkpoint(raw: bytes) -> ResNet:
    if len(raw) < 12:
        raise CheckpointTruncatedError("file shorter than the fixed header")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointVersionError(f"bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointTruncatedError("file ends inside the text header")
    fields = dict(line.split("=", 1) for line in raw[12:12 + hlen].decode("utf-8").splitlines() if line)
    L, d = int(fields["L"]), int(fields["d"])
    arch = Architecture(L, d, fields["activation"], fields["delta_mode"])
    n_delta = 1 if arch.delta_mode == "shared" else L
    n_vals = L * d * d + L * d + n_delta
    start = 12 + hlen
    end = start + 8 * n_vals
    if len(raw) < end + 8:
        raise CheckpointTruncatedError(f"payload needs {8 * n_vals + 8} bytes, found {len(raw) - start}")
    if len(raw) > end + 8:
        raise CheckpointTruncatedError(f"{len(raw) - end - 8} unexpected trailing bytes")
    payload = raw[start:end]
    if hashlib.blake2b(payload, digest_size=8).digest() != raw[end:end + 8]:
        raise CheckpointChecksumError("payload checksum mismatch")
    vals = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    A = vals[:L * d * d].reshape(L, d, d)
    b = vals[L * d * d:L * d * d + L * d].reshape(L, d)
    delta = vals[L * d * d + L * d:]
    delta = np.array(delta[0]) if arch.delta_mode == "shared" else delta.copy()
    info = {}
    if fields.get("seed"):
        info["seed"] = int(fields["seed"])
    if fields.get("loss_final"):
        info["loss_final"] = float(fields["loss_final"])
    if fields.get("converged"):
        info["converged"] = fields["converged"] == "1"
    return ResNet(arch, A.copy(), b.copy(), delta, info)


def load_checkpoint(path) -> ResNet:
    return parse_checkpoint(Path(path).read_bytes())
