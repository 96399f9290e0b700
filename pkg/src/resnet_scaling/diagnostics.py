"""Scaling diagnostics for depth-indexed weight tensors.

Given trained networks at several depths, estimate how delta and the
weights shrink with L, check whether the rescaled weights look like a
continuous function of the layer (H1) or like increments of a rough path
(H2), split the cumulative weights into trend and noise, and classify the
regime. Weights and biases go through the same pipeline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import PowerLawFit, loglog_fit, nearest_odd, smooth_series
from .resnet import ResNet, loss

KINDS = ("weights", "biases", "total_scaling")
REGIMES = ("H1", "H2", "sparse", "inconclusive")


@dataclass
class WeightTensor:
    entries: np.ndarray  # (L, d, d) or (L, d)
    kind: str = "weights"

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim not in (2, 3):
            raise ValueError(f"expected (L, d) or (L, d, d) entries, got shape {self.entries.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    @property
    def L(self) -> int:
        return self.entries.shape[0]

    def layer_norms(self) -> np.ndarray:
        flat = self.entries.reshape(self.L, -1)
        return np.sqrt(np.sum(flat * flat, axis=1))


@dataclass(frozen=True)
class Table1Norms:
    maximum_norm: float
    scaled_increment_norm: float
    cumulative_sum_norm: float
    root_sum_squares: float
    beta_used: float


def table1_norms(w: WeightTensor, beta: float) -> Table1Norms:
    """Maximum norm, beta-scaled increment norm, cumulative sum norm and
    root sum of squares of a tensor (Frobenius norms per layer)."""
    if w.L < 2:
        raise ValueError("increment norm needs at least 2 layers")
    norms = w.layer_norms()
    inc = np.diff(w.entries, axis=0).reshape(w.L - 1, -1)
    total = w.entries.sum(axis=0)
    return Table1Norms(
        maximum_norm=float(norms.max()),
        scaled_increment_norm=float(w.L ** beta * np.sqrt(np.sum(inc * inc, axis=1)).max()),
        cumulative_sum_norm=float(np.sqrt(np.sum(total * total))),
        root_sum_squares=float(np.sqrt(np.sum(norms * norms))),
        beta_used=float(beta),
    )


def _require_depths(points, need=3):
    pts = list(points)
    if len({float(L) for L, _ in pts}) < need:
        raise ValueError(f"need at least {need} distinct depths")
    return pts


def estimate_alpha(delta_max_norms: Sequence[tuple[float, float]]) -> PowerLawFit:
    """Log-log fit of max_k |delta_k| against L; alpha is ``-fit.slope``."""
    return loglog_fit(_require_depths(delta_max_norms))


def estimate_beta(cumsum_norms: Sequence[tuple[float, float]]) -> float:
    """beta = 1 - slope of the cumulative-sum norm, clamped to [0, 1]."""
    fit = loglog_fit(_require_depths(cumsum_norms))
    return float(min(1.0, max(0.0, 1.0 - fit.slope)))


def increment_slope(scaled_increment_norms: Sequence[tuple[float, float]]) -> float:
    """Log-log slope of the beta-scaled increment norm; ``-inf`` if it vanishes."""
    pts = _require_depths(scaled_increment_norms)
    if any(v == 0 for _, v in pts):
        return -math.inf
    return loglog_fit(pts).slope


@dataclass
class Decomposition:
    trend: np.ndarray  # (L, ...): A_k ~ L^-beta * trend_k + noise increment
    noise_path: np.ndarray  # (L+1, ...), noise_path[0] == 0
    beta: float
    window: int

    @property
    def L(self) -> int:
        return self.trend.shape[0]

    def noise_increments(self) -> np.ndarray:
        return np.diff(self.noise_path, axis=0)

    def denoised(self) -> np.ndarray:
        """L^-beta * trend_k, the weights with the noise removed."""
        return self.L ** -self.beta * self.trend

    def reconstruct(self) -> np.ndarray:
        return self.denoised() + self.noise_increments()

    def noise_fraction(self) -> float:
        """Root-sum-of-squares of the noise increments relative to the input's."""
        noise = np.sum(self.noise_increments() ** 2)
        total = np.sum(self.reconstruct() ** 2)
        return float(np.sqrt(noise / total)) if total > 0 else 0.0


def default_window(L: int) -> int:
    """Odd integer nearest sqrt(L), capped so it fits the L+1 partial sums."""
    w = nearest_odd(math.sqrt(L))
    cap = L + 1 if (L + 1) % 2 else L
    return min(w, cap)


def decompose(w: WeightTensor, beta: float, window: int | None = None) -> Decomposition:
    """Split the partial sums S_k = sum_{j<k} w_j into a smoothed trend and a
    residual noise path. Reconstruction of w is exact up to rounding."""
    L = w.L
    window = default_window(L) if window is None else window
    if window < 1 or window > L + 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and within [1, {L + 1}], got {window}")
    zero = np.zeros((1,) + w.entries.shape[1:])
    S = np.concatenate([zero, np.cumsum(w.entries, axis=0)])
    T = np.asarray(smooth_series(list(S), window)) if window > 1 else S
    if window == 1:
        trend = L ** beta * w.entries
        noise_inc = np.zeros_like(w.entries)
    else:
        trend = L ** beta * np.diff(T, axis=0)
        noise_inc = w.entries - L ** -beta * trend
    noise_path = np.concatenate([zero, np.cumsum(noise_inc, axis=0)])
    return Decomposition(trend, noise_path, float(beta), int(window))


def quadratic_variation(noise_path) -> float:
    """Hilbert-Schmidt norm of sum_k dW_k (x) dW_k^T over the whole path."""
    p = np.asarray(noise_path, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("path needs at least 2 points")
    inc = np.diff(p, axis=0).reshape(p.shape[0] - 1, -1)
    gram = inc.T @ inc
    return float(np.sqrt(np.sum(gram * gram)))


def total_scaling(delta, w: WeightTensor) -> WeightTensor:
    """|delta_k| * w_k, the effective weights of a degree-1 homogeneous activation."""
    delta = np.abs(np.asarray(delta, dtype=np.float64))
    if delta.shape != (w.L,):
        raise ValueError(f"{delta.size} deltas for a tensor of {w.L} layers")
    scale = delta.reshape((w.L,) + (1,) * (w.entries.ndim - 1))
    return WeightTensor(scale * w.entries, "total_scaling")


@dataclass(frozen=True)
class Thresholds:
    h1_increment_slope: float = -0.1
    h1_noise_fraction: float = 0.2
    h2_min_beta: float = 0.5
    bounded_rss_slope: float = 0.1
    sparse_max_slope: float = -0.05


@dataclass(frozen=True)
class RegimeInputs:
    beta: float
    increment_slope: float
    rss_slope: float
    max_slope: float
    noise_fraction: float


def classify_regime(x: RegimeInputs, th: Thresholds = Thresholds()) -> str:
    """H1, then sparse, then H2; anything else is inconclusive.

    Sparse is tested before H2 because a non-decaying sparse tensor also
    has bounded root sum of squares and a cumulative sum giving beta = 1.
    """
    if x.increment_slope <= th.h1_increment_slope and x.noise_fraction < th.h1_noise_fraction:
        return "H1"
    if x.max_slope >= th.sparse_max_slope and x.rss_slope <= th.bounded_rss_slope:
        return "sparse"
    if x.increment_slope > th.h1_increment_slope and x.beta >= th.h2_min_beta and x.rss_slope <= th.bounded_rss_slope:
        return "H2"
    return "inconclusive"


def network_tensors(net: ResNet) -> tuple[WeightTensor, WeightTensor]:
    """Tensors to diagnose: raw (A, b) for tanh, |delta|-scaled for ReLU."""
    if net.arch.activation == "relu":
        d = net.layer_deltas()
        return total_scaling(d, WeightTensor(net.A)), total_scaling(d, WeightTensor(net.b, "biases"))
    return WeightTensor(net.A, "weights"), WeightTensor(net.b, "biases")


def denoised_network(net: ResNet, dec_A: Decomposition, dec_b: Decomposition) -> ResNet:
    """Network rebuilt from the trend parts only.

    For ReLU the decompositions are of |delta| A and |delta| b, so the
    rebuilt layers use delta_k = sign(delta_k).
    """
    A_new, b_new = dec_A.denoised(), dec_b.denoised()
    if A_new.shape != net.A.shape or b_new.shape != net.b.shape:
        raise ValueError("decomposition shapes do not match the network")
    if net.arch.activation == "relu":
        return net.replace(A=A_new, b=b_new, delta=np.sign(net.delta))
    return net.replace(A=A_new, b=b_new)


def denoised_loss(net: ResNet, dec_A: Decomposition, dec_b: Decomposition, X, Y) -> tuple[float, float]:
    """(original loss, loss of the denoised network) on (X, Y)."""
    return loss(net, X, Y), loss(denoised_network(net, dec_A, dec_b), X, Y)


@dataclass
class FamilyReport:
    kind: str
    beta: float
    cumsum_fit: PowerLawFit
    max_fit: PowerLawFit
    increment_slope: float
    rss_slope: float
    noise_fraction: float
    regime: str
    rows: list[dict] = field(default_factory=list)  # per (L, seed): tensor norms and qv


@dataclass
class ScalingReport:
    alpha: PowerLawFit
    weights: FamilyReport
    biases: FamilyReport
    thresholds: Thresholds
    denoised: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def alpha_value(self) -> float:
        return -self.alpha.slope

    @property
    def regime(self) -> str:
        return self.weights.regime

    @property
    def denoised_loss_ratio(self) -> float | None:
        """Seed-averaged denoised/original loss ratio at the largest depth."""
        if not self.denoised:
            return None
        top = max(r["L"] for r in self.denoised)
        ratios = [r["denoised_loss"] / r["original_loss"] for r in self.denoised if r["L"] == top]
        return float(np.mean(ratios))

    def summary(self) -> dict:
        def fam(f: FamilyReport):
            return {
                "kind": f.kind, "beta": f.beta, "cumsum_slope": f.cumsum_fit.slope,
                "cumsum_r2": f.cumsum_fit.r_squared, "max_norm_slope": f.max_fit.slope,
                "increment_slope": f.increment_slope, "rss_slope": f.rss_slope,
                "noise_fraction": f.noise_fraction, "regime": f.regime,
            }
        return {
            "alpha": self.alpha_value,
            "alpha_r2": self.alpha.r_squared,
            "alpha_plus_beta": self.alpha_value + self.weights.beta,
            "weights": fam(self.weights),
            "biases": fam(self.biases),
            "regime": self.regime,
            "denoised_loss_ratio": self.denoised_loss_ratio,
            "thresholds": asdict(self.thresholds),
            "provenance": self.provenance,
        }


def diagnose_family(tensors: Sequence[WeightTensor], seeds: Sequence[int] | None = None,
                    thresholds: Thresholds = Thresholds(), window: int | None = None,
                    ) -> tuple[FamilyReport, dict]:
    """Run the procedure on one tensor family across depths (seeds pooled).

    Returns the report and the decomposition of every tensor, keyed by
    position in ``tensors``.
    """
    seeds = list(seeds) if seeds is not None else [0] * len(tensors)
    Ls = [t.L for t in tensors]
    beta = estimate_beta([(L, table1_norms(t, 0.0).cumulative_sum_norm) for L, t in zip(Ls, tensors)])
    norms = [table1_norms(t, beta) for t in tensors]
    cumsum_fit = loglog_fit([(L, n.cumulative_sum_norm) for L, n in zip(Ls, norms)])
    max_fit = loglog_fit([(L, n.maximum_norm) for L, n in zip(Ls, norms)])
    inc = increment_slope([(L, n.scaled_increment_norm) for L, n in zip(Ls, norms)])
    rss_slope = loglog_fit([(L, n.root_sum_squares) for L, n in zip(Ls, norms)]).slope
    decs = {}
    rows = []
    for i, (t, n) in enumerate(zip(tensors, norms)):
        dec = decompose(t, beta, window)
        decs[i] = dec
        row = {"L": t.L, "seed": seeds[i]}
        row.update(asdict(n))
        row["qv"] = quadratic_variation(dec.noise_path)
        row["noise_fraction"] = dec.noise_fraction()
        rows.append(row)
    top = max(Ls)
    frac = float(np.mean([r["noise_fraction"] for r in rows if r["L"] == top]))
    regime = classify_regime(RegimeInputs(beta, inc, rss_slope, max_fit.slope, frac), thresholds)
    report = FamilyReport(tensors[0].kind, beta, cumsum_fit, max_fit, inc, rss_slope, frac, regime, rows)
    return report, decs


def diagnose_networks(nets: Sequence[ResNet], X=None, Y=None, thresholds: Thresholds = Thresholds(),
                      window: int | None = None) -> ScalingReport:
    """Full procedure on a depth sweep of trained networks.

    All networks must share width, activation and delta mode, and cover at
    least three depths. If ``X, Y`` are given the denoised-weights
    experiment is run on every network.
    """
    if not nets:
        raise ValueError("no networks to diagnose")
    arch0 = nets[0].arch
    for n in nets:
        if (n.width, n.arch.activation, n.arch.delta_mode) != (arch0.width, arch0.activation, arch0.delta_mode):
            raise ValueError("mixed architectures: width, activation and delta mode must agree")
    if len({n.depth for n in nets}) < 3:
        raise ValueError("need networks at no fewer than 3 distinct depths")
    nets = sorted(nets, key=lambda n: (n.depth, n.info.get("seed", 0)))
    seeds = [n.info.get("seed", 0) for n in nets]
    alpha = estimate_alpha([(n.depth, float(np.max(np.abs(n.layer_deltas())))) for n in nets])
    pairs = [network_tensors(n) for n in nets]
    rep_A, dec_A = diagnose_family([p[0] for p in pairs], seeds, thresholds, window)
    rep_b, dec_b = diagnose_family([p[1] for p in pairs], seeds, thresholds, window)
    report = ScalingReport(alpha, rep_A, rep_b, thresholds)
    report.provenance = {"activation": arch0.activation, "delta_mode": arch0.delta_mode,
                         "width": arch0.width, "depths": sorted({n.depth for n in nets}),
                         "window": "nearest odd to sqrt(L)" if window is None else window}
    if X is not None:
        for i, net in enumerate(nets):
            orig, den = denoised_loss(net, dec_A[i], dec_b[i], X, Y)
            report.denoised.append({"L": net.depth, "seed": seeds[i], "original_loss": orig, "denoised_loss": den})
    return report


CSV_COLUMNS = ("L", "seed", "family", "maximum_norm", "scaled_increment_norm", "cumulative_sum_norm",
               "root_sum_squares", "beta_used", "qv", "noise_fraction", "original_loss", "denoised_loss")


def report_csv(report: ScalingReport) -> str:
    """One row per (depth, seed, tensor family)."""
    den = {(r["L"], r["seed"]): r for r in report.denoised}
    lines = [",".join(CSV_COLUMNS)]
    for fam in (report.weights, report.biases):
        name = "A" if fam is report.weights else "b"
        for row in fam.rows:
            extra = den.get((row["L"], row["seed"]), {})
            vals = [row["L"], row["seed"], name] + [row[c] for c in CSV_COLUMNS[3:10]] + [
                extra.get("original_loss", ""), extra.get("denoised_loss", "")]
            lines.append(",".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
