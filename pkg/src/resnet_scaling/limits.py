"""Deep-network limits of the residual recursion.

Weights are generated as increments of Itô processes

    dW^A = U^A dt + q^A : dB^A,    dW^b = U^b dt + q^b dB^b,

and fed to h_{k+1} = h_k + L^-alpha sigma(A_k h_k + b_k) with
A_k = L^-beta Abar(k/L) + dW^A_k. The limits it is compared with are the
linear ODE dH = (Abar H + bbar) dt (0 < alpha < 1, alpha + beta = 1) and,
for alpha = 0, beta >= 1, the SDE

    dH = dW^A H + dW^b + 1/2 sigma''(0) Q(t, H) dt + 1{beta=1} (Abar H + bbar) dt

simulated with Euler-Maruyama on the same Brownian increments.

Array layout: every simulated quantity carries a leading time axis and a
path axis, e.g. W^A has shape (L+1, M, d, d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import PowerLawFit, RngStream, loglog_fit


@dataclass(frozen=True)
class Activation:
    """Smooth activation with sigma(0) = 0 and sigma'(0) = 1."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    second_derivative_at_zero: float

    def __call__(self, x):
        return self.fn(x)


def tanh_activation() -> Activation:
    return Activation("tanh", np.tanh, 0.0)


def curved_activation(s: float) -> Activation:
    """sigma(x) = x + (s/2) x^2 exp(-x^2/2): sigma''(0) = s, bounded third derivative."""
    def fn(x):
        return x + 0.5 * s * x * x * np.exp(-0.5 * x * x)
    return Activation(f"curved({s!r})", fn, float(s))


def _const(value, shape):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).copy()
    return lambda t: arr


@dataclass
class ItoSpec:
    """Coefficients of the weight processes and of the trend.

    Coefficient functions map a time t in [0, 1] to arrays of shape
    Abar, U_A: (d, d); bbar, U_b: (d,); q_A: (d, d, d, d); q_b: (d, d).
    ``kappa`` is the declared Hölder exponent of the coefficients (metadata
    only).
    """

    d: int
    Abar: Callable[[float], np.ndarray]
    bbar: Callable[[float], np.ndarray]
    U_A: Callable[[float], np.ndarray]
    U_b: Callable[[float], np.ndarray]
    q_A: Callable[[float], np.ndarray]
    q_b: Callable[[float], np.ndarray]
    alpha: float = 0.0
    beta: float = 1.0
    activation: Activation = field(default_factory=tanh_activation)
    kappa: float = 1.0
    label: str = ""

    def __post_init__(self):
        if self.alpha < 0 or not 0 <= self.beta:
            raise ValueError("need alpha >= 0 and beta >= 0")

    @classmethod
    def constant(cls, d: int = 1, Abar=0.0, bbar=0.0, U_A=0.0, U_b=0.0, q_A=0.0, q_b=0.0, **kw) -> "ItoSpec":
        """Time-independent coefficients.

        Scalars for the matrix-valued ``Abar`` and ``U_A`` mean c * I_d; for
        the vectors ``bbar`` and ``U_b`` every entry is c. A scalar ``q_A``
        is c * identity on the d x d index pairs (each weight entry driven by
        its own Brownian motion with volatility c); a scalar ``q_b`` is c * I_d.
        """
        if np.ndim(Abar) == 0:
            Abar = float(Abar) * np.eye(d)
        if np.ndim(U_A) == 0:
            U_A = float(U_A) * np.eye(d)
        if np.ndim(q_A) == 0:
            q_A = float(q_A) * np.eye(d * d).reshape(d, d, d, d)
        if np.ndim(q_b) == 0:
            q_b = float(q_b) * np.eye(d)
        return cls(d, _const(Abar, (d, d)), _const(bbar, (d,)), _const(U_A, (d, d)), _const(U_b, (d,)),
                   _const(q_A, (d, d, d, d)), _const(q_b, (d, d)), **kw)

    def grid(self, L: int) -> dict:
        """All coefficients sampled at t_k = k/L, k = 0..L-1."""
        ts = np.arange(L) / L
        out = {name: np.stack([getattr(self, name)(t) for t in ts])
               for name in ("Abar", "bbar", "U_A", "U_b", "q_A", "q_b")}
        out["Sigma_A"] = np.einsum("tijkl,tmnkl->tijmn", out["q_A"], out["q_A"])
        out["Sigma_b"] = np.einsum("tik,tjk->tij", out["q_b"], out["q_b"])
        return out

    def is_noise_free(self, L: int = 16) -> bool:
        g = self.grid(L)
        return not (np.any(g["q_A"]) or np.any(g["q_b"]))


def sigma_tensors(q_A: np.ndarray, q_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigma^A_{ijmn} = sum_kl q^A_{ijkl} q^A_{mnkl} and Sigma^b = q^b q^b^T."""
    return np.einsum("ijkl,mnkl->ijmn", q_A, q_A), q_b @ q_b.T


def q_form(Sigma_A: np.ndarray, Sigma_b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Q_i(x) = sum_{j,k} x_j x_k Sigma^A_{ijik} + Sigma^b_{ii}; x may be batched (..., d)."""
    x = np.asarray(x, dtype=np.float64)
    quad = np.einsum("ijik,...j,...k->...i", Sigma_A, x, x)
    return quad + np.diagonal(Sigma_b)


@dataclass
class DrivingPath:
    """Cumulative Brownian motions and weight processes on the grid k/L.

    Shapes: B_A, W_A (L+1, M, d, d); B_b, W_b (L+1, M, d). Index 0 is zero.
    A freshly sampled path also keeps its increments exactly as drawn.
    """

    L: int
    B_A: np.ndarray
    B_b: np.ndarray
    W_A: np.ndarray
    W_b: np.ndarray
    sampled_increments: tuple | None = None

    @property
    def n_paths(self) -> int:
        return self.B_b.shape[1]

    def increments(self):
        """(dB_A, dB_b, dW_A, dW_b), each with leading length L."""
        if self.sampled_increments is not None:
            return self.sampled_increments
        return tuple(np.diff(a, axis=0) for a in (self.B_A, self.B_b, self.W_A, self.W_b))

    def coarsen(self, L: int) -> "DrivingPath":
        """The same paths observed on the coarser grid k/L (L must divide self.L).

        The cumulative processes are subsampled, so W_1 is kept bit-for-bit.
        """
        if L < 1 or self.L % L:
            raise ValueError(f"depth {L} does not divide {self.L}")
        m = self.L // L
        return DrivingPath(L, self.B_A[::m], self.B_b[::m], self.W_A[::m], self.W_b[::m])


def _weight_increments(g: dict, dB_A: np.ndarray, dB_b: np.ndarray, L: int):
    dW_A = g["U_A"][:, None] / L + np.einsum("tijkl,tmkl->tmij", g["q_A"], dB_A)
    dW_b = g["U_b"][:, None] / L + np.einsum("tik,tmk->tmi", g["q_b"], dB_b)
    return dW_A, dW_b


def _cumulative(inc: np.ndarray) -> np.ndarray:
    out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def sample_driving_path(spec: ItoSpec, L: int, rng: RngStream, n_paths: int = 1) -> DrivingPath:
    """Brownian increments N(0, 1/L) per coordinate; path p uses ``rng.child(p)``,
    so a path does not depend on how many others are drawn alongside it."""
    if L < 1:
        raise ValueError("L must be >= 1")
    d = spec.d
    dB_A = np.empty((L, n_paths, d, d))
    dB_b = np.empty((L, n_paths, d))
    sd = L ** -0.5
    for p in range(n_paths):
        r = rng.child(p)
        dB_A[:, p] = r.normal((L, d, d), sd)
        dB_b[:, p] = r.normal((L, d), sd)
    g = spec.grid(L)
    dW_A, dW_b = _weight_increments(g, dB_A, dB_b, L)
    return DrivingPath(L, _cumulative(dB_A), _cumulative(dB_b), _cumulative(dW_A), _cumulative(dW_b),
                       (dB_A, dB_b, dW_A, dW_b))


def _batched_start(x, M: int, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d:
        raise ValueError(f"initial state has dimension {x.shape[-1]}, expected {d}")
    return np.broadcast_to(x, (M, d)).copy()


def _check_finite(h: np.ndarray, k: int):
    if not np.all(np.isfinite(h)):
        raise FloatingPointError(f"state became non-finite at layer {k}")


def discrete_hidden_states(spec: ItoSpec, path: DrivingPath, x) -> np.ndarray:
    """h_0..h_L of the residual recursion driven by ``path``; shape (L+1, M, d)."""
    L, d = path.L, spec.d
    g = spec.grid(L)
    _, _, dW_A, dW_b = path.increments()
    A = L ** -spec.beta * g["Abar"][:, None] + dW_A
    b = L ** -spec.beta * g["bbar"][:, None] + dW_b
    step = L ** -spec.alpha
    sigma = spec.activation
    h = _batched_start(x, path.n_paths, d)
    out = np.empty((L + 1,) + h.shape)
    out[0] = h
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(L):
            pre = np.einsum("mij,mj->mi", A[k], h) + b[k]
            h = h + step * sigma(pre)
            out[k + 1] = h
    _check_finite(out, int(np.argmax(~np.all(np.isfinite(out.reshape(L + 1, -1)), axis=1))))
    return out


def euler_maruyama(spec: ItoSpec, path: DrivingPath, x, ito_correction: bool = True) -> np.ndarray:
    """Euler-Maruyama for the SDE limit on the Brownian increments of ``path``.

    h_{k+1} = h_k + mu(t_k, h_k)/L + dV^A_k h_k + dV^b_k with
    mu = U^A h + U^b + 1{beta=1}(Abar h + bbar) + 1/2 sigma''(0) Q(t, h).
    ``ito_correction=False`` drops the Q term. Shape (L+1, M, d).
    """
    L, d = path.L, spec.d
    g = spec.grid(L)
    dB_A, dB_b, _, _ = path.increments()
    dV_A = np.einsum("tijkl,tmkl->tmij", g["q_A"], dB_A)
    dV_b = np.einsum("tik,tmk->tmi", g["q_b"], dB_b)
    trend = 1.0 if spec.beta == 1 else 0.0
    drift_A = g["U_A"] + trend * g["Abar"]
    drift_b = g["U_b"] + trend * g["bbar"]
    c = 0.5 * spec.activation.second_derivative_at_zero if ito_correction else 0.0
    h = _batched_start(x, path.n_paths, d)
    out = np.empty((L + 1,) + h.shape)
    out[0] = h
    dt = 1.0 / L
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(L):
            mu = h @ drift_A[k].T + drift_b[k]
            if c:
                mu = mu + c * q_form(g["Sigma_A"][k], g["Sigma_b"][k], h)
            h = h + mu * dt + np.einsum("mij,mj->mi", dV_A[k], h) + dV_b[k]
            out[k + 1] = h
    _check_finite(out, int(np.argmax(~np.all(np.isfinite(out.reshape(L + 1, -1)), axis=1))))
    return out


def integrate_ode(Abar: Callable[[float], np.ndarray], bbar: Callable[[float], np.ndarray], x,
                  steps: int) -> np.ndarray:
    """Classic RK4 for dH/dt = Abar(t) H + bbar(t) on [0, 1]; shape (steps+1, ..., d)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = np.asarray(x, dtype=np.float64).copy()
    dt = 1.0 / steps

    def f(t, y):
        return y @ np.asarray(Abar(t)).T + np.asarray(bbar(t))

    out = np.empty((steps + 1,) + h.shape)
    out[0] = h
    for n in range(steps):
        t = n * dt
        k1 = f(t, h)
        k2 = f(t + dt / 2, h + dt / 2 * k1)
        k3 = f(t + dt / 2, h + dt / 2 * k2)
        k4 = f(t + dt, h + dt * k3)
        h = h + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = h
    return out


def limit_ode_coefficients(spec: ItoSpec):
    """Drift of the deterministic limit when the weights carry no noise."""
    if spec.alpha > 0:
        return spec.Abar, spec.bbar
    trend = 1.0 if spec.beta == 1 else 0.0
    return (lambda t: spec.U_A(t) + trend * spec.Abar(t)), (lambda t: spec.U_b(t) + trend * spec.bbar(t))


def ode_reference_on_grid(spec: ItoSpec, x, L: int, min_steps: int = 4096) -> np.ndarray:
    """RK4 solution of the limit ODE sampled at k/L (substeps keep the grid aligned)."""
    r = max(1, math.ceil(min_steps / L))
    A_fn, b_fn = limit_ode_coefficients(spec)
    return integrate_ode(A_fn, b_fn, np.asarray(x, dtype=np.float64), L * r)[::r]


@dataclass
class ConvergenceTable:
    mode: str
    depths: list[int]
    errors: list[float]  # RMS over paths of the grid sup-error
    stderrs: list[float]
    fit: PowerLawFit
    reference: str
    n_paths: int
    seed: int
    spec_label: str = ""

    @property
    def rate(self) -> float:
        return self.fit.slope

    def monotone_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.errors, self.errors[1:]))

    def to_csv(self) -> str:
        lines = ["L,error,stderr"]
        lines += [f"{L},{e!r},{s!r}" for L, e, s in zip(self.depths, self.errors, self.stderrs)]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"mode": self.mode, "rate": self.rate, "r_squared": self.fit.r_squared,
                "monotone": self.monotone_decreasing(), "reference": self.reference,
                "paths": self.n_paths, "seed": self.seed, "spec": self.spec_label,
                "depths": self.depths}


def _rms_with_stderr(sup_err: np.ndarray) -> tuple[float, float]:
    """sqrt(E[e^2]) over paths and its delta-method standard error."""
    sq = sup_err ** 2
    rms = float(np.sqrt(sq.mean()))
    if sq.size < 2 or rms == 0:
        return rms, 0.0
    return rms, float(sq.std(ddof=1) / math.sqrt(sq.size) / (2 * rms))


def _sup_error(h: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """max over grid points of the Euclidean distance, per path; h, ref (L+1, M, d)."""
    return np.sqrt(np.sum((h - ref) ** 2, axis=-1)).max(axis=0)


def strong_error_sweep(spec: ItoSpec, depths: Sequence[int], n_paths: int, x, mode: str = "sde",
                       seed: int = 0, L_ref: int | None = None, chunk: int = 50) -> ConvergenceTable:
    """Grid sup-error between the residual recursion and its limit, per depth.

    ``ode`` mode compares with RK4 on the limit ODE. ``sde`` mode draws one
    fine path per sample at ``L_ref`` (default 16 x max depth, a multiple of
    every depth), takes Euler-Maruyama on it as the reference and coarsens
    the same path for each depth. When the spec has no noise the sde
    reference falls back to the ODE solution, so both modes coincide.
    """
    depths = [int(L) for L in depths]
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError("depths must be strictly increasing")
    if n_paths < 1:
        raise ValueError("need at least one path")
    if mode not in ("ode", "sde"):
        raise ValueError("mode must be 'ode' or 'sde'")
    rng = RngStream(seed, 20)
    noise_free = spec.is_noise_free()
    errs = {L: [] for L in depths}
    if mode == "ode" or noise_free:
        reference = "RK4 on the limit ODE"
        for L in depths:
            path = sample_driving_path(spec, L, rng.child(L), n_paths)
            h = discrete_hidden_states(spec, path, x)
            ref = ode_reference_on_grid(spec, _batched_start(x, n_paths, spec.d), L)
            errs[L].append(_sup_error(h, ref))
    else:
        L_ref = L_ref or 16 * max(depths)
        if any(L_ref % L for L in depths):
            raise ValueError(f"reference depth {L_ref} must be a multiple of every depth")
        reference = f"Euler-Maruyama at L_ref={L_ref} on the shared fine path"
        fine_rng = rng.child(0)
        for start in range(0, n_paths, chunk):
            count = min(chunk, n_paths - start)
            fine = _sample_paths(spec, L_ref, fine_rng, start, count)
            ref = euler_maruyama(spec, fine, x)
            for L in depths:
                h = discrete_hidden_states(spec, fine.coarsen(L), x)
                errs[L].append(_sup_error(h, ref[:: L_ref // L]))
    rows = [_rms_with_stderr(np.concatenate(errs[L])) for L in depths]
    errors = [r[0] for r in rows]
    stderrs = [r[1] for r in rows]
    fit = loglog_fit(list(zip(depths, errors))) if len(depths) >= 2 and all(e > 0 for e in errors) else \
        PowerLawFit(float("nan"), float("nan"), 0.0, len(depths))
    return ConvergenceTable(mode, depths, errors, stderrs, fit, reference, n_paths, seed, spec.label)


def _sample_paths(spec: ItoSpec, L: int, rng: RngStream, start: int, count: int) -> DrivingPath:
    """Paths ``start .. start+count-1`` of the family drawn from ``rng``."""
    d = spec.d
    dB_A = np.empty((L, count, d, d))
    dB_b = np.empty((L, count, d))
    sd = L ** -0.5
    for j in range(count):
        r = rng.child(start + j)
        dB_A[:, j] = r.normal((L, d, d), sd)
        dB_b[:, j] = r.normal((L, d), sd)
    dW_A, dW_b = _weight_increments(spec.grid(L), dB_A, dB_b, L)
    return DrivingPath(L, _cumulative(dB_A), _cumulative(dB_b), _cumulative(dW_A), _cumulative(dW_b),
                       (dB_A, dB_b, dW_A, dW_b))


@dataclass
class ItoCheck:
    mean_discrete: np.ndarray
    mean_em: np.ndarray
    mean_em_without_correction: np.ndarray
    se_discrete: np.ndarray
    se_em: np.ndarray
    se_em_without_correction: np.ndarray
    L: int
    n_paths: int

    def z_corrected(self) -> float:
        """Largest |difference| / combined standard error, discrete vs corrected EM."""
        se = np.sqrt(self.se_discrete ** 2 + self.se_em ** 2)
        return float(np.max(np.abs(self.mean_discrete - self.mean_em) / se))

    def z_uncorrected(self) -> float:
        se = np.sqrt(self.se_discrete ** 2 + self.se_em_without_correction ** 2)
        return float(np.max(np.abs(self.mean_discrete - self.mean_em_without_correction) / se))


def ito_correction_check(spec: ItoSpec, L: int, n_paths: int, x, seed: int = 0, chunk: int = 500) -> ItoCheck:
    """Monte Carlo means of h_L under the recursion, EM with the Itô
    correction, and EM without it, all on shared Brownian increments."""
    rng = RngStream(seed, 21)
    finals = {"disc": [], "em": [], "raw": []}
    for start in range(0, n_paths, chunk):
        count = min(chunk, n_paths - start)
        path = _sample_paths(spec, L, rng, start, count)
        finals["disc"].append(discrete_hidden_states(spec, path, x)[-1])
        finals["em"].append(euler_maruyama(spec, path, x)[-1])
        finals["raw"].append(euler_maruyama(spec, path, x, ito_correction=False)[-1])
    stats = {}
    for key, vals in finals.items():
        v = np.concatenate(vals)
        stats[key] = (v.mean(axis=0), v.std(axis=0, ddof=1) / math.sqrt(v.shape[0]))
    return ItoCheck(stats["disc"][0], stats["em"][0], stats["raw"][0],
                    stats["disc"][1], stats["em"][1], stats["raw"][1], L, n_paths)
