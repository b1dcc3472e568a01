"""Spectral data and function-class certification.

The linear part of every system here is A = -diag(lambda_i) on a
truncated eigenbasis, with eigenvalues 0 < lambda_1 <= lambda_2 <= ...
declared through a closed-form power law so that trace and tail
criteria have analytic form.  Drift moduli phi (increasing, phi^2
concave, integral of phi(s)/s over (0,1] finite) and smoothing weights
a (either the integral-envelope class or the easier monotone subclass)
are certified on sampled grids plus the declared tail law; the verdict
is an honest surrogate for the analytic property, never a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError
from .quadrature import CONVERGED, DIVERGENT, halfline_windowed, panel_integral

DINI = "dini"
GENERIC = "generic"
CLASS_A = "A"
CLASS_A_PRIME = "Aprime"
CLASS_DOMINATED = "dominated"

PASS = "pass"
FAIL = "fail"
INDETERMINATE = "indeterminate"
EMPIRICAL = "empirical"

# Concavity / monotonicity are probed on this geometric grid.
_SAMPLE_GRID = np.geomspace(1e-8, 1.0, 200)
_CONCAVITY_TOL = 1e-10


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of -A plus the growth law used for tail estimates.

    The stored eigenvalues are the simulated modes; growth_coeff and
    growth_power declare lambda_i = growth_coeff * i**growth_power for
    every i, which lets the class checks reason about the unstored tail.
    """

    eigenvalues: np.ndarray
    trace_exponent: float
    growth_coeff: float | None = None
    growth_power: float | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        object.__setattr__(self, "eigenvalues", lam)
        if lam.ndim != 1 or lam.size == 0:
            raise InputError("spectrum requires a non-empty 1-d eigenvalue array")
        if not np.all(lam > 0.0):
            raise InputError("eigenvalues must be strictly positive")
        if np.any(np.diff(lam) < 0.0):
            raise InputError("eigenvalues must be non-decreasing")
        if not 0.0 < self.trace_exponent < 1.0:
            raise InputError("trace_exponent must lie in (0, 1)")
        if self.has_growth_law:
            declared = self.growth_coeff * np.arange(1.0, lam.size + 1.0) ** self.growth_power
            if not np.allclose(declared, lam, rtol=1e-9, atol=0.0):
                raise InputError("stored eigenvalues disagree with the declared growth law")

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def has_growth_law(self) -> bool:
        return self.growth_coeff is not None and self.growth_power is not None

    def growth_eigenvalue(self, index):
        """lambda_i from the growth law for (possibly unstored) index >= 1."""
        if not self.has_growth_law:
            raise InputError("spectrum has no growth law")
        return self.growth_coeff * np.asarray(index, dtype=float) ** self.growth_power

    @classmethod
    def power_law(cls, n_modes: int, coeff: float = 1.0, power: float = 2.0,
                  trace_exponent: float = 0.4) -> "Spectrum":
        """Power-law spectrum; the default coeff=1, power=2 is the 1-d Dirichlet Laplacian."""
        lam = coeff * np.arange(1.0, n_modes + 1.0) ** power
        return cls(lam, trace_exponent, coeff, power)


@dataclass(frozen=True)
class ModulusFunction:
    """Continuity modulus phi with its declared class."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    declared_class: str = DINI
    name: str = "phi"

    def __call__(self, s):
        return self.evaluator(np.asarray(s, dtype=float))


@dataclass(frozen=True)
class WeightFunction:
    """Smoothing weight a on (0, inf) with its declared class.

    declared_class "dominated" means membership is claimed through
    a >= dominating on a tail, with dominating in the monotone subclass.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    declared_class: str = CLASS_A_PRIME
    name: str = "a"
    dominating: "WeightFunction | None" = None

    def __call__(self, x):
        return self.evaluator(np.asarray(x, dtype=float))


@dataclass
class ClassReport:
    """Outcome of a membership or inequality check."""

    check: str
    verdict: str
    integral_value: float
    tail_bound: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict == PASS and not np.isfinite(self.integral_value):
            raise InputError("a passing report must carry a finite integral value")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS


def _safe_eval(fn, x, what: str) -> np.ndarray:
    try:
        out = np.asarray(fn(np.asarray(x, dtype=float)), dtype=float)
    except Exception as exc:  # noqa: BLE001 - reported as an input error
        raise InputError(f"{what} not evaluable: {exc}") from exc
    if np.any(np.isnan(out)):
        raise InputError(f"{what} returned NaN on the sample grid")
    return out


def dini_check(phi: ModulusFunction, tol: float = 1e-10) -> ClassReport:
    """Certify membership of phi in the Dini modulus class.

    The integral of phi(s)/s over (0, 1] is computed after the
    substitution s = exp(-u), which turns it into the half-line integral
    of phi(exp(-u)); windowed quadrature then decides convergence.
    Monotonicity and concavity of phi^2 are checked on a geometric grid
    with midpoint tests.
    """
    vals = _safe_eval(phi.evaluator, _SAMPLE_GRID, f"modulus {phi.name}")
    monotone = bool(np.all(vals >= -1e-15) and np.all(np.diff(vals) >= -1e-12))

    mid = 0.5 * (_SAMPLE_GRID[:-1] + _SAMPLE_GRID[1:])
    sq_mid = _safe_eval(phi.evaluator, mid, f"modulus {phi.name}") ** 2
    concave = bool(np.all(sq_mid >= 0.5 * (vals[:-1] ** 2 + vals[1:] ** 2) - _CONCAVITY_TOL))

    def integrand(u):
        with np.errstate(over="ignore", under="ignore"):
            return _safe_eval(phi.evaluator, np.exp(-u), f"modulus {phi.name}")

    value, status, windows = halfline_windowed(integrand, rel_tol=tol)
    if status == DIVERGENT:
        verdict = FAIL
        integral = float("inf")
    elif status == CONVERGED:
        verdict = PASS if (monotone and concave) else FAIL
        integral = value
    else:
        verdict = INDETERMINATE
        integral = value
    return ClassReport(
        check="dini",
        verdict=verdict,
        integral_value=integral,
        tail_bound=windows[-1] if windows else 0.0,
        diagnostics={
            "monotone": monotone,
            "square_concave": concave,
            "windows": len(windows),
            "status": status,
            "grid": (float(_SAMPLE_GRID[0]), float(_SAMPLE_GRID[-1]), int(_SAMPLE_GRID.size)),
        },
    )


def _candidate_eigenvalues(spec: Spectrum, lam_max: float, max_candidates: int = 256):
    """Eigenvalue candidates up to lam_max plus one beyond.

    Stored modes are used as far as they reach; the declared growth law
    supplies log-spaced virtual modes for the tail.  Returns None when
    the spectrum is too short and no growth law is available.
    """
    stored = spec.eigenvalues[spec.eigenvalues <= lam_max]
    beyond = spec.eigenvalues[spec.eigenvalues > lam_max]
    cands = [stored]
    if beyond.size:
        cands.append(beyond[:1])
        return np.concatenate(cands)
    if not spec.has_growth_law:
        return None
    # virtual indices are log-spaced floats: only the eigenvalue scale matters
    with np.errstate(over="ignore"):
        i_max = (lam_max / spec.growth_coeff) ** (1.0 / spec.growth_power)
    i_hi = float(np.clip(i_max, spec.n_modes + 1, 1e120)) * 2.0
    idx = np.geomspace(spec.n_modes + 1, i_hi, max_candidates)
    cands.append(spec.growth_eigenvalue(idx))
    return np.concatenate(cands)


def spectral_envelope(spec: Spectrum, numerator, s: float, scan_factor: float = 10.0):
    """sup over modes of numerator(lambda_i) * exp(-lambda_i * s).

    The envelope peaks near lambda ~ 1/s, so the scan covers modes up to
    lambda_i > scan_factor / s plus one beyond.  Returns None when the
    scan cannot be completed (short spectrum, no growth law).
    """
    lam = _candidate_eigenvalues(spec, scan_factor / s)
    if lam is None:
        return None
    with np.errstate(over="ignore", under="ignore"):
        vals = numerator(lam) * np.exp(-lam * s)
    return float(np.max(vals))


def weight_class_check(a: WeightFunction, spec: Spectrum, tol: float = 1e-10,
                       as_class: str | None = None) -> ClassReport:
    """Certify a smoothing weight against its declared class.

    The monotone subclass is checked through its defining monotonicity
    plus convergence of the integral of 1/(s*a(s)) over [1, inf); full
    membership is checked through the integral over (0, 1] of the
    spectral envelope sup_i lambda_i exp(-lambda_i s) / a(lambda_i).
    """
    declared = as_class or a.declared_class
    if declared == CLASS_DOMINATED:
        return _dominated_check(a, spec, tol)
    if declared == CLASS_A_PRIME:
        return _a_prime_check(a, tol)
    if declared == CLASS_A:
        return _a_check(a, spec, tol)
    raise InputError(f"unknown weight class {declared!r}")


def _a_prime_check(a: WeightFunction, tol: float) -> ClassReport:
    grid = np.geomspace(1.0, 1e8, 200)
    av = _safe_eval(a.evaluator, grid, f"weight {a.name}")
    if np.any(av <= 0.0):
        raise InputError(f"weight {a.name} must be strictly positive")
    a_monotone = bool(np.all(np.diff(av) >= -1e-12 * np.abs(av[:-1])))
    ratio = grid / av
    ratio_monotone = bool(np.all(np.diff(ratio) >= -1e-12 * np.abs(ratio[:-1])))

    def integrand(u):
        # substitution s = exp(u) in the integral of 1/(s a(s)) over [1, inf)
        with np.errstate(over="ignore"):
            return 1.0 / _safe_eval(a.evaluator, np.exp(u), f"weight {a.name}")

    value, status, windows = halfline_windowed(integrand, rel_tol=tol)
    if status == DIVERGENT:
        verdict, integral = FAIL, float("inf")
    elif status == CONVERGED:
        verdict = PASS if (a_monotone and ratio_monotone) else FAIL
        integral = value
    else:
        verdict, integral = INDETERMINATE, value
    return ClassReport(
        check="weight_Aprime",
        verdict=verdict,
        integral_value=integral,
        tail_bound=windows[-1] if windows else 0.0,
        diagnostics={
            "a_monotone": a_monotone,
            "x_over_a_monotone": ratio_monotone,
            "status": status,
            "windows": len(windows),
        },
    )


def _a_check(a: WeightFunction, spec: Spectrum, tol: float) -> ClassReport:
    short_spectrum = False

    def numerator(lam):
        return lam / _safe_eval(a.evaluator, lam, f"weight {a.name}")

    def integrand(u):
        # substitution s = exp(-u) in the integral over (0, 1]
        nonlocal short_spectrum
        u = np.atleast_1d(u)
        out = np.empty_like(u)
        for k, uk in enumerate(u):
            s = math.exp(-uk)
            env = spectral_envelope(spec, numerator, s)
            if env is None:
                short_spectrum = True
                env = 0.0
            out[k] = env * s
        return out

    value, status, windows = halfline_windowed(integrand, rel_tol=tol, domain_limit=700.0)
    if short_spectrum:
        verdict, integral = INDETERMINATE, value
    elif status == DIVERGENT:
        verdict, integral = FAIL, float("inf")
    elif status == CONVERGED:
        verdict, integral = PASS, value
    else:
        verdict, integral = INDETERMINATE, value
    return ClassReport(
        check="weight_A",
        verdict=verdict,
        integral_value=integral,
        tail_bound=windows[-1] if windows else 0.0,
        diagnostics={
            "status": status,
            "windows": len(windows),
            "short_spectrum": short_spectrum,
            "growth_law": spec.has_growth_law,
        },
    )


def _dominated_check(a: WeightFunction, spec: Spectrum, tol: float) -> ClassReport:
    if a.dominating is None:
        raise InputError(f"weight {a.name} declared dominated but names no dominating weight")
    grid = np.geomspace(1.0, 1e8, 200)
    av = _safe_eval(a.evaluator, grid, f"weight {a.name}")
    dv = _safe_eval(a.dominating.evaluator, grid, f"weight {a.dominating.name}")
    ok = av >= dv * (1.0 - 1e-12)
    if np.all(ok):
        threshold = float(grid[0])
        dominated = True
    else:
        last_bad = int(np.max(np.nonzero(~ok)))
        # domination must hold on a genuine tail, not just the last grid points
        dominated = last_bad < grid.size - 50
        threshold = float(grid[last_bad + 1]) if last_bad + 1 < grid.size else float("inf")
    base = weight_class_check(a.dominating, spec, tol)
    verdict = PASS if (dominated and base.passed) else FAIL
    if verdict == FAIL and base.verdict == INDETERMINATE:
        verdict = INDETERMINATE
    return ClassReport(
        check="weight_dominated",
        verdict=verdict,
        integral_value=base.integral_value,
        tail_bound=base.tail_bound,
        diagnostics={
            "dominated_from": threshold,
            "dominating": a.dominating.name,
            "dominating_verdict": base.verdict,
        },
    )


def trace_class_check(spec: Spectrum, s_horizon: float = 1.0) -> ClassReport:
    """Check summability of lambda_i**(eps-1) and the singular HS integral.

    With a power law lambda_i = c i^gamma the analytic criterion is
    gamma * (1 - eps) > 1.  The report also carries the partial sum over
    stored modes, the integral over (0, s_horizon] of
    t^(-2 alpha) * sum_i exp(-2 lambda_i t) for alpha = eps/2, and its
    closed-form bound sum_i lambda_i^(2 alpha - 1) * Gamma(1-2 alpha) * 2^(2 alpha - 1).
    """
    eps = spec.trace_exponent
    alpha = 0.5 * eps
    lam = spec.eigenvalues
    partial = float(np.sum(lam ** (eps - 1.0)))

    # integral of t^(-2a) sum_i exp(-2 lambda_i t): substitute t = v^(1/(1-2a))
    p = 1.0 / (1.0 - 2.0 * alpha)

    def integrand(v):
        t = v**p
        return p * np.sum(np.exp(-2.0 * np.outer(lam, t)), axis=0)

    hs_integral = panel_integral(integrand, 0.0, s_horizon ** (1.0 / p), order=128)
    hs_bound = float(np.sum(lam ** (2.0 * alpha - 1.0)) * math.gamma(1.0 - 2.0 * alpha)
                     * 2.0 ** (2.0 * alpha - 1.0))

    if spec.has_growth_law:
        exponent = spec.growth_power * (1.0 - eps)
        summable = exponent > 1.0
        if summable:
            n = spec.n_modes
            tail = (spec.growth_coeff ** (eps - 1.0)) * n ** (1.0 - exponent) / (exponent - 1.0)
        else:
            tail = float("inf")
        verdict = PASS if summable else FAIL
        integral = partial + tail if summable else float("inf")
    else:
        verdict = EMPIRICAL
        tail = float("nan")
        integral = partial
    return ClassReport(
        check="trace_class",
        verdict=verdict,
        integral_value=integral,
        tail_bound=tail,
        diagnostics={
            "partial_sum": partial,
            "hs_integral": hs_integral,
            "hs_integral_bound": hs_bound,
            "criterion_exponent": spec.growth_power * (1.0 - eps) if spec.has_growth_law else None,
        },
    )


def semigroup_apply(spec: Spectrum, t: float, x: np.ndarray) -> np.ndarray:
    """Apply exp(At) = diag(exp(-lambda_i t)) to a mode vector."""
    if t < 0.0:
        raise InputError("semigroup time must be non-negative")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] > spec.n_modes:
        raise InputError("mode vector longer than the stored spectrum")
    return np.exp(-spec.eigenvalues[: x.shape[-1]] * t) * x


def galerkin_project(x: np.ndarray, n: int) -> np.ndarray:
    """Zero every mode with index > n (1-based count of retained modes)."""
    if n < 0:
        raise InputError("projection level must be non-negative")
    out = np.array(x, dtype=float, copy=True)
    if n < out.shape[-1]:
        out[..., n:] = 0.0
    return out


# ---------------------------------------------------------------------------
# Built-in library of moduli and weights used throughout the experiments.

def sqrt_modulus() -> ModulusFunction:
    return ModulusFunction(lambda s: np.sqrt(np.maximum(s, 0.0)), DINI, "sqrt")


def log_dini_modulus(scale: float = 1.0, delta: float = 1.0, shift: float = math.e**2) -> ModulusFunction:
    """phi(s) = scale / log(shift + 1/s)**(1+delta); shift around e^2 keeps phi^2 concave."""

    def phi(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            inv = np.where(s > 0.0, 1.0 / np.maximum(s, 1e-300), np.inf)
            out = scale / np.log(shift + inv) ** (1.0 + delta)
        return np.where(s > 0.0, out, 0.0)

    return ModulusFunction(phi, DINI, f"log_dini(K={scale},delta={delta})")


def divergent_log_modulus() -> ModulusFunction:
    """phi(s) = 1/log(e + 1/s); increasing but not a Dini modulus."""

    def phi(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            inv = np.where(s > 0.0, 1.0 / np.maximum(s, 1e-300), np.inf)
            out = 1.0 / np.log(math.e + inv)
        return np.where(s > 0.0, out, 0.0)

    return ModulusFunction(phi, DINI, "inv_log")


def power_weight(delta: float = 1.0) -> WeightFunction:
    return WeightFunction(lambda x: x**delta, CLASS_A_PRIME, f"x^{delta}")


def log_weight(delta: float = 1.0, shift: float = math.e**2) -> WeightFunction:
    return WeightFunction(lambda x: np.log(shift + x) ** (1.0 + delta),
                          CLASS_A_PRIME, f"log^{1 + delta}({shift:.3g}+x)")


def x_over_log_weight(shift: float = math.e**2) -> WeightFunction:
    return WeightFunction(lambda x: x / np.log(shift + x), CLASS_A_PRIME,
                          f"x/log({shift:.3g}+x)")


def oscillating_power_weight(delta: float = 0.5) -> WeightFunction:
    """a(x) = x^delta (sin x + 2); in the envelope class by domination."""
    return WeightFunction(lambda x: x**delta * (np.sin(x) + 2.0), CLASS_DOMINATED,
                          f"x^{delta}(sinx+2)", dominating=power_weight(delta))


def sqrt_weight() -> WeightFunction:
    return power_weight(0.5)


def builtin_weight_library() -> list[WeightFunction]:
    return [
        power_weight(0.5),
        power_weight(1.0),
        log_weight(1.0),
        log_weight(0.5),
        x_over_log_weight(),
    ]
