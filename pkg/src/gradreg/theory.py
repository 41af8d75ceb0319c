"""Variance of the inverse-root adaptive learning rate under decaying gradients.

Model: per-step gradients g_1..g_t are independent with g_k ~ N(0, v_k) and
exponentially decaying variance v_k = exp(-gamma * k) * sigma1 (gamma is the
decay coefficient; sigma1 parameterizes the *variance* of the first step).
The statistic of interest is

    psi = sqrt(t / sum_k g_k^2),

the standard approximation to the bias-corrected second-moment denominator
of adaptive optimizers.  A delta-method (first-order Taylor) treatment gives
the closed form

    Var(psi) = (t / (2 sigma1)) * (1 + e^{-gamma t}) (1 - e^{-gamma})^2
               / ((1 + e^{-gamma}) (1 - e^{-gamma t})^2),

which is strictly increasing in gamma wherever t * e^{-gamma (t-1)} <= 1:
faster-shrinking gradients make the adaptive learning rate noisier.  This
module provides the moment sums behind that formula, the closed form itself
(evaluated cancellation-free via expm1), an equivalent parameterization in
k = e^{-gamma}, the log-derivative used by the monotonicity argument, a
seeded Monte Carlo validator, and an exact oracle for the constant-variance
(gamma = 0) case built from inverse chi-square moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngState

__all__ = [
    "TheoryParams",
    "MomentPair",
    "McEstimate",
    "MonotonicityReport",
    "moment_sums",
    "taylor_variance",
    "var_psi_closed",
    "var_psi_gamma_zero_limit",
    "var_psi_k_form",
    "var_surface",
    "log_var_derivative",
    "monotonicity_condition",
    "monotonicity_scan",
    "mc_var_psi",
    "exact_var_constant_sigma",
    "write_surface_csv",
    "read_surface_csv",
]


@dataclass(frozen=True)
class TheoryParams:
    """Decay coefficient gamma, step count t, first-step variance sigma1.

    gamma = 0 (no decay) is admitted at the type level but rejected by the
    closed-form operations, which are 0/0 there; the Monte Carlo estimator
    and the constant-variance oracle handle that case.
    """

    gamma: float
    t: int
    sigma1: float

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if int(self.t) != self.t or self.t < 1:
            raise ValueError(f"t must be an integer >= 1, got {self.t}")
        if not np.isfinite(self.sigma1) or self.sigma1 <= 0:
            raise ValueError(f"sigma1 must be finite and > 0, got {self.sigma1}")
        object.__setattr__(self, "t", int(self.t))


@dataclass(frozen=True)
class MomentPair:
    """Mean and variance of t*Y = sum_k g_k^2."""

    mean_ty: float
    var_ty: float


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate of Var(psi), deterministic given (params, n, seed, mode)."""

    variance_hat: float
    mean_hat: float
    n_samples: int
    std_error: float
    mode: str
    seed: int
    n_resampled: int = 0


def _require_positive_gamma(gamma: float) -> None:
    if gamma <= 0:
        raise ValueError(
            f"gamma must be positive, got {gamma}; use the constant-variance "
            "oracle or the gamma->0 limit instead"
        )


def moment_sums(params: TheoryParams) -> MomentPair:
    """Geometric-series moments of the squared-gradient sum.

    E(tY)  = sigma1 (1 - e^{-gamma t}) / (1 - e^{-gamma})
    Var(tY) = 2 sigma1^2 (1 - e^{-2 gamma t}) / (1 - e^{-2 gamma})

    At t = 1 these reduce to sigma1 and 2 sigma1^2, the moments of a single
    squared Gaussian of variance sigma1.
    """
    _require_positive_gamma(params.gamma)
    g, t, s1 = params.gamma, params.t, params.sigma1
    mean_ty = s1 * (-np.expm1(-g * t)) / (-np.expm1(-g))
    var_ty = 2.0 * s1 * s1 * (-np.expm1(-2.0 * g * t)) / (-np.expm1(-2.0 * g))
    return MomentPair(float(mean_ty), float(var_ty))


def taylor_variance(mean_y: float, var_y: float) -> float:
    """Delta-method variance of 1/sqrt(Y): Var(Y) / (4 E(Y)^3)."""
    if mean_y <= 0:
        raise ValueError(f"mean_y must be positive, got {mean_y}")
    if var_y < 0:
        raise ValueError(f"var_y must be nonnegative, got {var_y}")
    return var_y / (4.0 * mean_y**3)


def _closed_form(gamma, t, sigma1):
    """Array-capable closed form; the 1 - e^{-x} factors go through expm1,
    so tiny gamma evaluates without catastrophic cancellation."""
    gamma = np.asarray(gamma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    one_minus_eg = -np.expm1(-gamma)
    one_minus_egt = -np.expm1(-gamma * t)
    num = (1.0 + np.exp(-gamma * t)) * one_minus_eg**2
    den = (1.0 + np.exp(-gamma)) * one_minus_egt**2
    return (t / (2.0 * sigma1)) * num / den


def var_psi_closed(params: TheoryParams) -> float:
    """Closed-form Var(psi) for gamma > 0 (see module docstring)."""
    _require_positive_gamma(params.gamma)
    return float(_closed_form(params.gamma, params.t, params.sigma1))


def var_psi_gamma_zero_limit(t: int, sigma1: float) -> float:
    """Analytic gamma -> 0 limit of the closed form: 1 / (2 sigma1 t)."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if sigma1 <= 0:
        raise ValueError(f"sigma1 must be positive, got {sigma1}")
    return 1.0 / (2.0 * sigma1 * t)


def var_psi_k_form(k: float, t: int) -> float:
    """The same variance parameterized by the per-step ratio k = e^{-gamma}:

        0.5 * (1 + k^t)(1 - k)^2 / ((1 + k)(1 - k^t)^2)

    Identity: var_psi_k_form(k, t) == var_psi_closed(gamma=-ln k, t, sigma1=t).
    """
    if not 0.0 < k < 1.0:
        raise ValueError(f"k must lie in (0, 1), got {k}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    log_k = math.log1p(k - 1.0)
    kt = math.exp(t * log_k)
    one_minus_kt = -math.expm1(t * log_k)
    return 0.5 * (1.0 + kt) * (1.0 - k) ** 2 / ((1.0 + k) * one_minus_kt**2)


def var_surface(gamma_grid, t_grid, sigma1: float) -> np.ndarray:
    """Matrix M[i, j] = Var(psi) at (gamma_grid[i], t_grid[j], sigma1)."""
    gammas = np.asarray(gamma_grid, dtype=np.float64)
    ts = np.asarray(t_grid, dtype=np.float64)
    if gammas.size == 0 or ts.size == 0:
        raise ValueError("grids must be nonempty")
    if not np.all(np.isfinite(gammas)) or np.any(gammas <= 0):
        raise ValueError("gamma grid entries must be finite and positive")
    if not np.all(np.isfinite(ts)) or np.any(ts < 1):
        raise ValueError("t grid entries must be finite and >= 1")
    if sigma1 <= 0:
        raise ValueError(f"sigma1 must be positive, got {sigma1}")
    return _closed_form(gammas[:, None], ts[None, :], sigma1)


def log_var_derivative(x: float, t: int) -> float:
    """d/dx of log Var(psi) expressed in x = e^{-gamma}:

        t x^{t-1} / (x^t + 1) + 2 t x^{t-1} / (1 - x^t)
        - 1 / (1 + x) - 2 / (1 - x)

    Negative throughout t x^{t-1} <= 1, which is how monotonicity in gamma
    is established (x decreases as gamma grows).  Identically zero at t = 1.
    """
    if not 0.0 < x < 1.0:
        raise ValueError(f"x must lie in (0, 1), got {x}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    log_x = math.log1p(x - 1.0)
    xt = math.exp(t * log_x)
    x_tm1 = math.exp((t - 1) * log_x)
    one_minus_xt = -math.expm1(t * log_x)
    return (
        t * x_tm1 / (xt + 1.0)
        + 2.0 * t * x_tm1 / one_minus_xt
        - 1.0 / (1.0 + x)
        - 2.0 / (1.0 - x)
    )


def monotonicity_condition(gamma: float, t: int) -> bool:
    """True where t * e^{-gamma (t - 1)} <= 1 (the monotone region)."""
    return t * math.exp(-gamma * (t - 1)) <= 1.0


@dataclass
class MonotonicityReport:
    """Adjacent-pair scan of Var(psi) along an ascending gamma grid."""

    t: int
    pairs_checked: int = 0
    increases: int = 0
    flat_pairs: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def monotonicity_scan(t: int, gamma_grid, sigma1: float) -> MonotonicityReport:
    """Check that Var(psi) strictly increases across adjacent grid gammas.

    Only pairs whose smaller gamma satisfies the monotone-region condition
    are checked.  Exactly equal values are reported as flat (the t = 1
    surface is constant in gamma), not as violations.
    """
    gammas = np.asarray(gamma_grid, dtype=np.float64)
    if np.any(gammas <= 0):
        raise ValueError("gamma grid entries must be positive")
    if np.any(np.diff(gammas) < 0):
        raise ValueError("gamma grid must be sorted ascending")
    report = MonotonicityReport(t=t)
    values = [var_psi_closed(TheoryParams(g, t, sigma1)) for g in gammas]
    for (g_lo, v_lo), (g_hi, v_hi) in zip(zip(gammas, values), zip(gammas[1:], values[1:])):
        if not monotonicity_condition(g_lo, t):
            continue
        report.pairs_checked += 1
        if v_hi > v_lo:
            report.increases += 1
        elif v_hi == v_lo:
            report.flat_pairs.append((float(g_lo), float(g_hi)))
        else:
            report.violations.append((float(g_lo), float(g_hi), v_lo, v_hi))
    return report


# ---------------------------------------------------------------------------
# Monte Carlo validation

_CHUNK_ELEMS = 1 << 22  # ~33 MB of float64 per chunk
_RESAMPLE_STREAM_BASE = 1 << 32

_MC_MODES = ("sqrt_approx", "adam_exact")


def _psi_from_squares(sq: np.ndarray, t: int, mode: str, beta2: float) -> np.ndarray:
    """Per-sequence statistic from squared gradients (rows = sequences)."""
    if mode == "sqrt_approx":
        sums = sq.sum(axis=1)
        with np.errstate(divide="ignore"):
            return np.sqrt(t / sums), sums
    weights = beta2 ** np.arange(t - 1, -1, -1, dtype=np.float64)
    sums = sq @ weights
    scale = -math.expm1(t * math.log(beta2)) / (1.0 - beta2)
    with np.errstate(divide="ignore"):
        return np.sqrt(scale / sums), sums


def mc_var_psi(
    params: TheoryParams,
    n: int,
    seed: int,
    mode: str = "sqrt_approx",
    beta2: float = 0.999,
) -> McEstimate:
    """Monte Carlo estimate of Var(psi) from n simulated gradient sequences.

    Sequences are drawn in fixed-size chunks, each from its own child
    stream of ``seed``, and reduced in chunk order, so the result does not
    depend on how the work is split.  The variance is computed two-pass
    (mean first, then squared deviations) and the reported standard error
    is the normal-theory value variance_hat * sqrt(2 / (n - 1)).

    ``sqrt_approx`` evaluates sqrt(t / sum g_k^2); ``adam_exact`` evaluates
    the beta2-weighted bias-corrected form
    sqrt((1 - beta2^t) / ((1 - beta2) sum beta2^{t-k} g_k^2)).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if mode not in _MC_MODES:
        raise ValueError(f"mode must be one of {_MC_MODES}, got {mode!r}")
    if not 0.0 < beta2 < 1.0:
        raise ValueError(f"beta2 must lie in (0, 1), got {beta2}")
    t = params.t
    # per-step standard deviations sqrt(e^{-gamma k} sigma1), k = 1..t
    scale = np.sqrt(params.sigma1 * np.exp(-params.gamma * np.arange(1, t + 1)))
    rows_per_chunk = max(1, _CHUNK_ELEMS // t)
    psis = np.empty(n)
    n_resampled = 0
    for chunk, start in enumerate(range(0, n, rows_per_chunk)):
        rows = min(rows_per_chunk, n - start)
        g = RngState(seed, chunk).standard_normals((rows, t)) * scale
        psi, sums = _psi_from_squares(g * g, t, mode, beta2)
        zero_rows = np.flatnonzero(sums == 0.0)
        if zero_rows.size:
            # probability-zero event; redraw offending rows deterministically
            redraw = RngState(seed, _RESAMPLE_STREAM_BASE + chunk)
            for i in zero_rows:
                while True:
                    n_resampled += 1
                    row = redraw.standard_normals(t) * scale
                    value, row_sum = _psi_from_squares(row[None, :] ** 2, t, mode, beta2)
                    if row_sum[0] > 0.0:
                        psi[i] = value[0]
                        break
        psis[start : start + rows] = psi
    mean_hat = float(psis.mean())
    variance_hat = float(((psis - mean_hat) ** 2).sum() / (n - 1))
    std_error = variance_hat * math.sqrt(2.0 / (n - 1))
    return McEstimate(
        variance_hat=variance_hat,
        mean_hat=mean_hat,
        n_samples=n,
        std_error=std_error,
        mode=mode,
        seed=seed,
        n_resampled=n_resampled,
    )


def exact_var_constant_sigma(t: int, sigma1: float) -> float:
    """Exact Var(sqrt(t / sum g_k^2)) when every g_k ~ N(0, sigma1).

    The squared-gradient sum is sigma1 times a chi-square with t degrees of
    freedom, so the inverse moments are available in closed form:

        Var = t * (1/(t-2) - (Gamma((t-1)/2) / (sqrt(2) Gamma(t/2)))^2) / sigma1

    The second inverse moment only exists for t > 2.
    """
    if t <= 2:
        raise ValueError(f"the inverse moment requires t > 2, got {t}")
    if sigma1 <= 0:
        raise ValueError(f"sigma1 must be positive, got {sigma1}")
    inv_mean = 1.0 / (t - 2.0)
    half_moment = math.exp(math.lgamma((t - 1) / 2.0) - math.lgamma(t / 2.0)) / math.sqrt(2.0)
    return t * (inv_mean - half_moment * half_moment) / sigma1


# ---------------------------------------------------------------------------
# Surface CSV export

def write_surface_csv(gamma_grid, t_grid, matrix, path) -> None:
    """Header row of t values, first column of gamma values, cells = variance."""
    matrix = np.asarray(matrix)
    lines = ["gamma," + ",".join(format(float(t), ".17g") for t in t_grid)]
    for gamma, row in zip(gamma_grid, matrix):
        cells = ",".join(format(float(v), ".17g") for v in row)
        lines.append(format(float(gamma), ".17g") + "," + cells)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_surface_csv(path):
    """Inverse of :func:`write_surface_csv`; returns (gammas, ts, matrix)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        ts = np.array([float(v) for v in header[1:]])
        gammas, rows = [], []
        for line in fh:
            parts = line.strip().split(",")
            gammas.append(float(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return np.array(gammas), ts, np.array(rows)
