"""Drift regularization by the resolvent fixed point.

The reference dynamics is the linear equation dZ = AZ dt + Q0 dW with a
constant diagonal Q0, whose transition kernel is an explicit Gaussian.
Its semigroup P0 is evaluated by tensor Gauss-Hermite quadrature, and
spatial derivatives come from differentiating that Gaussian kernel
(Stein factors), never from differencing the integrand.

The regularizer u solves

    u(s, x) = int_s^T exp(-lam (t-s)) P0_{s,t} (grad_b u(t,.) + b(t,.))(x) dt

by Picard iteration of the right-hand side, contractive for lam large
with factor O(1/sqrt(lam)).  theta(t, x) = x + u(t, x) is then a
diffeomorphism once |grad u| <= 1/8, and conjugating the original system
through theta yields Lipschitz coefficients whose constants K1..K4 are
measured on seeded state batteries.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .analysis import ClassReport, PASS, FAIL, Spectrum, WeightFunction, sqrt_weight
from .errors import CertificationError, InputError
from .quadrature import hermite_tensor, panel_integral
from .segment import SegmentPath, _steps
from .simulator import CoefficientSet

GH_DIM_CAP = 3


@dataclass(frozen=True)
class ReferenceSemigroup:
    """Gaussian transition data for the drift-free linear reference equation."""

    spec: Spectrum
    q_diag: np.ndarray
    quad_order: int = 7

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=float)
        object.__setattr__(self, "q_diag", q)
        if q.shape != (self.spec.n_modes,) or np.any(q <= 0.0):
            raise InputError("reference noise amplitudes must be positive, one per mode")

    def transition(self, s: float, t: float):
        """Mean decay and standard deviation of Z_t given Z_s, per mode."""
        if t <= s:
            raise InputError("transition requires t > s")
        lam = self.spec.eigenvalues
        gap = t - s
        decay = np.exp(-lam * gap)
        var = self.q_diag**2 * (1.0 - decay**2) / (2.0 * lam)
        return decay, np.sqrt(var)


def _quad_cloud(ref: ReferenceSemigroup, method: str, mc_samples: int, seed: int):
    n = ref.spec.n_modes
    if method == "auto":
        method = "gh" if n <= GH_DIM_CAP else "mc"
    if method == "gh":
        if n > GH_DIM_CAP:
            raise InputError(f"tensor quadrature supports at most {GH_DIM_CAP} modes; use method='mc'")
        return hermite_tensor(ref.quad_order, n)
    if method == "mc":
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(mc_samples, n))
        return z, np.full(mc_samples, 1.0 / mc_samples)
    raise InputError(f"unknown quadrature method {method!r}")


def ou_apply(ref: ReferenceSemigroup, f: Callable, s: float, t: float, x: np.ndarray,
             *, method: str = "auto", mc_samples: int = 4096, seed: int = 0) -> np.ndarray:
    """P0_{s,t} f(x) = E f(decay * x + sigma * Z); exact for polynomial f up to the rule degree."""
    decay, sigma = ref.transition(s, t)
    z, w = _quad_cloud(ref, method, mc_samples, seed)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    pts = decay * xb[:, None, :] + sigma * z[None, :, :]
    fv = np.asarray(f(pts.reshape(-1, xb.shape[-1])), dtype=float)
    fv = fv.reshape(pts.shape[0], pts.shape[1], -1) if fv.ndim > 1 else fv.reshape(pts.shape[:2])
    out = np.einsum("g,bg...->b...", w, fv)
    return out[0] if single else out


def ou_gradient(ref: ReferenceSemigroup, f: Callable, s: float, t: float, x: np.ndarray,
                order: int = 1, *, method: str = "auto", mc_samples: int = 4096,
                seed: int = 0) -> np.ndarray:
    """Spatial derivatives of P0_{s,t} f via kernel differentiation.

    order 1 returns f-shape x (n,); order 2 appends another (n,).  The
    weight commutation a(-A) grad P0 f = grad P0 (a(-A) f) holds exactly
    at the level of these quadrature sums.
    """
    if order not in (1, 2):
        raise InputError("derivative order must be 1 or 2")
    decay, sigma = ref.transition(s, t)
    z, w = _quad_cloud(ref, method, mc_samples, seed)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    n = xb.shape[-1]
    pts = decay * xb[:, None, :] + sigma * z[None, :, :]
    fv = np.asarray(f(pts.reshape(-1, n)), dtype=float)
    scalar = fv.ndim == 1
    fv = fv.reshape(pts.shape[0], pts.shape[1], -1)
    if order == 1:
        stein = z * (decay / sigma)[None, :]
        out = np.einsum("g,bgk,gj->bkj", w, fv, stein)
    else:
        pair = z[:, :, None] * z[:, None, :] - np.eye(n)[None]
        scale = (decay / sigma)[:, None] * (decay / sigma)[None, :]
        out = np.einsum("g,bgk,gij->bkij", w, fv, pair) * scale[None, None]
    if scalar:
        out = out[:, 0]
    return out[0] if single else out


@dataclass(frozen=True)
class ZvonkinGrid:
    """Space-time resolution for the fixed-point solve.

    The clustered layout refines geometrically toward the origin, where
    the built-in drifts put their non-differentiable point; derivative
    tables develop structure there at scale 1/sqrt(lam), which a uniform
    grid of affordable size cannot resolve.
    """

    time_steps: int = 16
    nodes_per_dim: int = 11
    halfwidth: float = 3.0
    layout: str = "clustered"
    min_spacing: float = 0.02
    quad_panels: int = 8
    quad_ratio: float = 6.0
    quad_order: int = 6

    def axis(self) -> np.ndarray:
        if self.layout == "uniform":
            return np.linspace(-self.halfwidth, self.halfwidth, self.nodes_per_dim)
        if self.layout != "clustered":
            raise InputError(f"unknown grid layout {self.layout!r}")
        half = (self.nodes_per_dim - 1) // 2
        levels = np.geomspace(self.min_spacing, self.halfwidth, half)
        ax = np.concatenate([-levels[::-1], [0.0], levels])
        if self.nodes_per_dim % 2 == 0:
            ax = np.concatenate([ax, [self.halfwidth * (1.0 + 2.0 / self.nodes_per_dim)]])
        return ax

    def axes(self, n_dims: int):
        ax = self.axis()
        return tuple(ax for _ in range(n_dims))


def _warped_time_rule(lam: float, gap: float, grid: ZvonkinGrid):
    """Nodes/weights for int_s^T exp(-lam (t-s)) F(t) dt, clustered at t = s.

    Substituting tau = exp(-lam (t-s)) flattens the exponential; panels
    refine geometrically toward tau = 1 where the derivative kernels of
    P0 have their boundary layer.
    """
    tau_min = math.exp(-lam * gap)
    depth = 1.0 - tau_min
    edges = [tau_min]
    for k in range(1, grid.quad_panels):
        edges.append(1.0 - depth * grid.quad_ratio ** (-k))
    edges.append(1.0)
    nodes, weights = np.polynomial.legendre.leggauss(grid.quad_order)
    taus, wts = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        taus.append(0.5 * (hi - lo) * nodes + 0.5 * (hi + lo))
        wts.append(0.5 * (hi - lo) * weights / lam)
    tau = np.concatenate(taus)
    wt = np.concatenate(wts)
    offsets = -np.log(tau) / lam
    return offsets, wt


def _bilinear_norm(tensors: np.ndarray) -> np.ndarray:
    """Operator norm of bilinear maps given as (..., n, n, n) tensors.

    Estimated as max over unit directions eta' of the spectral norm of
    T[:, :, :] @ eta'; the direction sphere is sampled densely, which is
    exact up to the sampling resolution in dimension <= 3.
    """
    n = tensors.shape[-1]
    if n == 1:
        return np.abs(tensors[..., 0, 0, 0])
    if n == 2:
        ang = np.linspace(0.0, math.pi, 181)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        k = np.arange(400)
        phi = math.pi * (3.0 - math.sqrt(5.0)) * k
        zc = 1.0 - 2.0 * (k + 0.5) / 400
        rc = np.sqrt(1.0 - zc**2)
        dirs = np.stack([rc * np.cos(phi), rc * np.sin(phi), zc], axis=-1)
    slices = np.einsum("...kij,dj->...dki", tensors, dirs)
    svals = np.linalg.svd(slices, compute_uv=False)[..., 0]
    return svals.max(axis=-1)


@dataclass
class RegularizingField:
    """Tabulated solution of the resolvent equation with certified bounds."""

    lam: float
    horizon: float
    spec: Spectrum
    q_diag: np.ndarray
    times: np.ndarray
    axes: tuple
    u: np.ndarray          # (n_t+1, *spatial, n)
    grad: np.ndarray       # (n_t+1, *spatial, n, n)
    hess: np.ndarray       # (n_t+1, *spatial, n, n, n)
    contraction_factor: float
    iterations: int
    converged: bool
    weight_name: str
    norms: dict
    _interp_cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def n_modes(self) -> int:
        return self.spec.n_modes

    @property
    def halfwidth(self) -> float:
        return float(self.axes[0][-1])

    @property
    def trivial(self) -> bool:
        return float(np.max(np.abs(self.u))) == 0.0

    @property
    def certified(self) -> bool:
        lam1 = float(self.spec.eigenvalues[0])
        return (self.norms["hess"] <= 1.0 / 8.0 + 1e-12
                and self.norms["sqrtA_grad"] <= math.sqrt(lam1) / 8.0 + 1e-12)

    def _interp(self, kind: str, j: int) -> RegularGridInterpolator:
        key = (kind, j)
        if key not in self._interp_cache:
            table = getattr(self, kind)[j]
            shape = table.shape[: len(self.axes)]
            vals = table.reshape(shape + (-1,))
            self._interp_cache[key] = RegularGridInterpolator(
                self.axes, vals, method="cubic", bounds_error=False, fill_value=None)
        return self._interp_cache[key]

    def _eval(self, kind: str, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.clip(x[None] if single else x, -self.halfwidth, self.halfwidth)
        t = min(max(t, 0.0), self.horizon)
        lo = int(np.searchsorted(self.times, t, side="right")) - 1
        lo = min(max(lo, 0), self.times.size - 2)
        frac = (t - self.times[lo]) / (self.times[lo + 1] - self.times[lo])
        out = (1.0 - frac) * self._interp(kind, lo)(xb)
        if frac > 0.0:
            out += frac * self._interp(kind, lo + 1)(xb)
        n = self.n_modes
        trailing = {"u": (n,), "grad": (n, n), "hess": (n, n, n)}[kind]
        out = out.reshape(xb.shape[:-1] + trailing)
        return out[0] if single else out

    def u_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """u(t, x); t is clamped to [0, T] (frozen extension on [-r, 0])."""
        return self._eval("u", t, x)

    def grad_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return self._eval("grad", t, x)

    def hess_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return self._eval("hess", t, x)

    def theta(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) + self.u_at(t, x)

    def grad_theta(self, t: float, x: np.ndarray) -> np.ndarray:
        g = self.grad_at(t, x)
        return g + np.eye(self.n_modes)

    def invert_theta(self, t: float, y: np.ndarray, tol: float = 1e-10,
                     max_iter: int = 200) -> np.ndarray:
        """Solve x + u(t, x) = y by the contraction x <- y - u(t, x)."""
        y = np.asarray(y, dtype=float)
        x = np.array(y, copy=True)
        for _ in range(max_iter):
            nxt = y - self.u_at(t, x)
            gap = float(np.max(np.abs(nxt - x)))
            x = nxt
            if gap <= tol:
                return x
        raise CertificationError(
            f"theta inversion did not converge in {max_iter} iterations; field not certified")

    def theta_segment(self, t: float, xi: SegmentPath) -> SegmentPath:
        vals = np.stack([self.theta(t + s, v) for s, v in zip(xi.times(), xi.values)])
        return SegmentPath(xi.delay, xi.grid_step, vals, xi.weighted)

    def theta_segment_inverse(self, t: float, xi: SegmentPath) -> SegmentPath:
        vals = np.stack([self.invert_theta(t + s, v) for s, v in zip(xi.times(), xi.values)])
        return SegmentPath(xi.delay, xi.grid_step, vals, xi.weighted)

    def spectrum_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.eigenvalues.tobytes())
        h.update(self.q_diag.tobytes())
        return h.hexdigest()

    def save(self, path_base: str) -> None:
        """Persist the grid tables (.npz) with a JSON sidecar of the metadata."""
        np.savez(
            f"{path_base}.npz",
            u=self.u, grad=self.grad, hess=self.hess, times=self.times,
            axes=np.stack(self.axes), eigenvalues=self.spec.eigenvalues,
            q_diag=self.q_diag)
        sidecar = {
            "lam": self.lam,
            "horizon": self.horizon,
            "trace_exponent": self.spec.trace_exponent,
            "growth_coeff": self.spec.growth_coeff,
            "growth_power": self.spec.growth_power,
            "contraction_factor": self.contraction_factor,
            "iterations": self.iterations,
            "converged": self.converged,
            "weight_name": self.weight_name,
            "norms": self.norms,
            "certified": self.certified,
            "spectrum_hash": self.spectrum_hash(),
            "grid": {"time_steps": int(self.times.size - 1),
                     "nodes_per_dim": int(self.axes[0].size),
                     "halfwidth": self.halfwidth},
        }
        with open(f"{path_base}.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_base: str) -> "RegularizingField":
        data = np.load(f"{path_base}.npz")
        with open(f"{path_base}.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        spec = Spectrum(data["eigenvalues"], meta["trace_exponent"],
                        meta["growth_coeff"], meta["growth_power"])
        field = cls(
            lam=meta["lam"], horizon=meta["horizon"], spec=spec, q_diag=data["q_diag"],
            times=data["times"], axes=tuple(data["axes"]), u=data["u"],
            grad=data["grad"], hess=data["hess"],
            contraction_factor=meta["contraction_factor"],
            iterations=meta["iterations"], converged=meta["converged"],
            weight_name=meta["weight_name"], norms=meta["norms"])
        if field.spectrum_hash() != meta["spectrum_hash"]:
            raise InputError("field file is inconsistent with its sidecar spectrum hash")
        return field


def _field_norms(spec: Spectrum, weight: WeightFunction, u, grad, hess) -> dict:
    aw = np.asarray(weight(spec.eigenvalues), dtype=float)
    sq = np.sqrt(spec.eigenvalues)
    u_a = float(np.max(np.linalg.norm(u * aw, axis=-1))) if u.size else 0.0
    flat_grad = grad.reshape(-1, spec.n_modes, spec.n_modes)
    svals = np.linalg.svd(flat_grad, compute_uv=False)[..., 0]
    svals_a = np.linalg.svd(flat_grad * aw[None, :, None], compute_uv=False)[..., 0]
    svals_sq = np.linalg.svd(flat_grad * sq[None, :, None], compute_uv=False)[..., 0]
    hess_norm = float(np.max(_bilinear_norm(hess.reshape(-1, *hess.shape[-3:]))))
    return {
        "u_a": u_a,
        "grad_a": float(np.max(svals_a)),
        "grad": float(np.max(svals)),
        "sqrtA_grad": float(np.max(svals_sq)),
        "hess": hess_norm,
    }


def dissipation_kernel_integral(spec: Spectrum, weight: WeightFunction, horizon: float) -> float:
    """int_0^T max_i (lambda_i / a(lambda_i)) exp(-lambda_i s) ds over the stored modes."""
    lam = spec.eigenvalues
    ratio = lam / np.asarray(weight(lam), dtype=float)

    def integrand(v):
        s = v**2
        return 2.0 * v * np.max(ratio[:, None] * np.exp(-np.outer(lam, s)), axis=0)

    return panel_integral(integrand, 0.0, math.sqrt(horizon), order=96)


def composite_smallness(field: RegularizingField, weight: WeightFunction,
                        moment: float = 2.0) -> float:
    """The smallness functional whose value must stay below 1/5.

    5^(4p-1)/2^(2p+1) (|a(-A) grad u| * J)^(2p) + |grad u| with p = moment,
    where J is the dissipation kernel integral of the spectrum.
    """
    p = moment
    j_int = dissipation_kernel_integral(field.spec, weight, field.horizon)
    lead = 5.0 ** (4.0 * p - 1.0) / 2.0 ** (2.0 * p + 1.0)
    return lead * (field.norms["grad_a"] * j_int) ** (2.0 * p) + field.norms["grad"]


def solve_u(ref: ReferenceSemigroup, drift: Callable, lam: float, horizon: float,
            grid: ZvonkinGrid = ZvonkinGrid(), *, weight: WeightFunction | None = None,
            tol: float = 1e-8, max_iter: int = 100, method: str = "auto",
            mc_samples: int = 512, seed: int = 0) -> RegularizingField:
    """Picard-iterate the resolvent map until the tabulated fix point settles.

    The contraction factor is measured as the ratio of successive
    differences in the norm |u|_a + |grad u|_a; a ratio at or above one
    means lam sits below the contraction threshold.
    """
    if lam <= 0.0:
        raise InputError("resolvent parameter lam must be positive")
    weight = weight or sqrt_weight()
    spec = ref.spec
    n = spec.n_modes
    if n > GH_DIM_CAP:
        raise InputError(
            f"tabulated fields resolve at most {GH_DIM_CAP} active modes; project the "
            "system first (ou_apply offers a Monte Carlo route for pointwise values)")
    lamvec = spec.eigenvalues
    aw = np.asarray(weight(lamvec), dtype=float)

    axes = grid.axes(n)
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    nodes = np.stack([m.ravel() for m in mesh], axis=-1)  # (M, n)
    m_nodes = nodes.shape[0]

    z, w = _quad_cloud(ref, method, mc_samples, seed)
    pair = z[:, :, None] * z[:, None, :] - np.eye(n)[None]

    # uniform slices plus a geometric refinement into the terminal layer,
    # where u rises from u(T) = 0 on the 1/lam time scale
    uniform = np.linspace(0.0, horizon, grid.time_steps + 1)
    gap = horizon / grid.time_steps
    layer_lo = min(0.1 / lam, 0.25 * gap)
    layer = horizon - np.geomspace(layer_lo, gap, 6)
    times = np.unique(np.concatenate([uniform, layer[layer > 0.0]]))
    n_t = times.size - 1
    u_tab = np.zeros((n_t + 1, m_nodes, n))
    g_tab = np.zeros((n_t + 1, m_nodes, n, n))

    rules = [_warped_time_rule(lam, horizon - s, grid) if s < horizon else (None, None)
             for s in times[:-1]] + [(None, None)]

    def time_interp(tab, t):
        lo = int(np.searchsorted(times, t, side="right")) - 1
        lo = min(max(lo, 0), n_t - 1)
        frac = (t - times[lo]) / (times[lo + 1] - times[lo])
        return (1.0 - frac) * tab[lo] + frac * tab[lo + 1]

    def sweep(u_in, g_in, with_hess=False):
        u_out = np.zeros_like(u_in)
        g_out = np.zeros_like(g_in)
        h_out = np.zeros((n_t + 1, m_nodes, n, n, n)) if with_hess else None
        for j in range(n_t):
            s = times[j]
            offsets, wts = rules[j]
            for off, wq in zip(offsets, wts):
                t_q = s + off
                decay, sigma = ref.transition(s, t_q)
                u_t = time_interp(u_in, t_q)
                g_t = time_interp(g_in, t_q)
                table = np.concatenate(
                    [u_t.reshape(*shape, n), g_t.reshape(*shape, n * n)], axis=-1)
                # linear between nodes inside the sweep: the tables carry
                # kernel-differentiated values, cubic is reserved for the
                # public field evaluators
                itp = RegularGridInterpolator(axes, table, method="linear",
                                              bounds_error=False, fill_value=None)
                pts = decay * nodes[:, None, :] + sigma * z[None, :, :]
                flat = np.clip(pts.reshape(-1, n), -grid.halfwidth, grid.halfwidth)
                vals = itp(flat)
                u_y = vals[:, :n].reshape(m_nodes, -1, n)
                g_y = vals[:, n:].reshape(m_nodes, -1, n, n)
                b_y = np.asarray(drift(t_q, flat), dtype=float).reshape(m_nodes, -1, n)
                gvec = np.einsum("mgij,mgj->mgi", g_y, b_y) + b_y
                u_out[j] += wq * np.einsum("g,mgi->mi", w, gvec)
                stein = decay / sigma
                g_out[j] += wq * np.einsum("g,mgi,gj->mij", w, gvec, z) * stein[None, None, :]
                if with_hess:
                    scale = stein[:, None] * stein[None, :]
                    h_out[j] += wq * np.einsum("g,mgi,gjk->mijk", w, gvec, pair) \
                        * scale[None, None]
        return u_out, g_out, h_out

    def joint_norm(du, dg):
        val = float(np.max(np.linalg.norm(du * aw, axis=-1))) if du.size else 0.0
        sv = np.linalg.svd(dg.reshape(-1, n, n) * aw[None, :, None], compute_uv=False)[..., 0]
        return val + float(np.max(sv))

    diffs = []
    converged = False
    iterations = 0
    for it in range(max_iter):
        u_new, g_new, _ = sweep(u_tab, g_tab)
        delta = joint_norm(u_new - u_tab, g_new - g_tab)
        u_tab, g_tab = u_new, g_new
        iterations = it + 1
        diffs.append(delta)
        if len(diffs) >= 2 and diffs[-2] > 0.0 and diffs[-1] / diffs[-2] >= 1.0:
            raise CertificationError(
                f"fixed-point map is not contracting at lam={lam} "
                f"(ratio {diffs[-1] / diffs[-2]:.3f}); increase lam")
        if delta < tol:
            converged = True
            break

    # first successive-difference ratio: the one-step contraction observed on
    # the rough seed u0 = 0, whose lam-scaling reproduces the proof rate;
    # later ratios mix in re-smoothed components and are only guarded < 1
    if len(diffs) >= 2 and diffs[0] > 0.0:
        contraction = diffs[1] / diffs[0]
    else:
        contraction = 0.0

    u_fin, g_fin, h_fin = sweep(u_tab, g_tab, with_hess=True)
    u_grid = u_fin.reshape((n_t + 1,) + shape + (n,))
    g_grid = g_fin.reshape((n_t + 1,) + shape + (n, n))
    h_grid = h_fin.reshape((n_t + 1,) + shape + (n, n, n))
    norms = _field_norms(spec, weight, u_grid, g_grid, h_grid)

    return RegularizingField(
        lam=lam, horizon=horizon, spec=spec, q_diag=ref.q_diag, times=times,
        axes=axes, u=u_grid, grad=g_grid, hess=h_grid,
        contraction_factor=contraction, iterations=iterations, converged=converged,
        weight_name=weight.name, norms=norms)


def lambda_threshold(fields: list[RegularizingField], horizon: float,
                     weight: WeightFunction | None = None,
                     smallness_cap: float = 0.2) -> RegularizingField:
    """Smallest-lam field meeting the derivative caps and the smallness functional."""
    weight = weight or sqrt_weight()
    failures = {}
    for field in sorted(fields, key=lambda f: f.lam):
        lam1 = float(field.spec.eigenvalues[0])
        checks = {
            "hess<=1/8": field.norms["hess"] <= 1.0 / 8.0,
            "sqrtA_grad<=sqrt(lam1)/8": field.norms["sqrtA_grad"] <= math.sqrt(lam1) / 8.0,
            f"smallness<={smallness_cap}": composite_smallness(field, weight) <= smallness_cap,
        }
        if all(checks.values()):
            return field
        failures[field.lam] = [name for name, ok in checks.items() if not ok]
    raise CertificationError(f"no lam on the grid certifies the field; failures: {failures}")


def theta_invert(system, t: float, y: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Invert theta(t, .) at y; accepts a field or a transformed system."""
    field = getattr(system, "field", system)
    if not field.certified:
        raise CertificationError("theta inversion requires a certified field")
    return field.invert_theta(t, y, tol=tol)


class _InvertedSegmentView:
    """Lazy theta^{-1} image of a segment window."""

    def __init__(self, view, field: RegularizingField, t: float):
        self._view = view
        self._field = field
        self._t = t

    def value_at(self, s: float) -> np.ndarray:
        return self._field.invert_theta(self._t + s, self._view.value_at(s))

    def sup_norm(self):
        window = self._view.window if hasattr(self._view, "window") else self._view.values
        step = self._view.grid_step
        delay = self._view.delay
        lags = window.shape[0] - 1
        best = None
        for k in range(lags + 1):
            s = -delay + k * step
            inv = self._field.invert_theta(self._t + s, window[k])
            mag = np.linalg.norm(inv, axis=-1)
            best = mag if best is None else np.maximum(best, mag)
        return best


@dataclass
class TransformedSystem:
    """Conjugated coefficients with their measured Lipschitz budget."""

    field: RegularizingField
    base: CoefficientSet
    bounds: dict
    trivial: bool

    @property
    def lam(self) -> float:
        return self.field.lam

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        z = self.field.invert_theta(t, x)
        return (self.lam + self.field.spec.eigenvalues) * self.field.u_at(t, z)

    def diffusion(self, t, x):
        x = np.asarray(x, dtype=float)
        z = self.field.invert_theta(t, x)
        jac = self.field.grad_theta(t, z)
        q = self.base.diffusion_matrix(t, z)
        if q.ndim == 2 and x.ndim > 1:
            q = np.broadcast_to(q, x.shape[:-1] + q.shape)
        return np.einsum("...ij,...jm->...im", jac, q)

    def delay_drift(self, t, view):
        head = np.asarray(view.value_at(0.0), dtype=float)
        z0 = self.field.invert_theta(t, head)
        jac = self.field.grad_theta(t, z0)
        inner = np.asarray(self.base.delay_drift(t, _InvertedSegmentView(view, self.field, t)),
                           dtype=float)
        return np.einsum("...ij,...j->...i", jac, inner)

    def coefficient_set(self) -> CoefficientSet:
        if self.trivial:
            return self.base
        return replace(self.base, drift=self.drift, delay_drift=self.delay_drift,
                       diffusion=self.diffusion, diag_noise=None)


def _control_gain(sys_q: np.ndarray) -> np.ndarray:
    """Q*(QQ*)^{-1} for a batch of (n, m) matrices."""
    qq = np.einsum("...nm,...km->...nk", sys_q, sys_q)
    sol = np.linalg.solve(qq, sys_q)
    return np.swapaxes(sol, -1, -2)


def _battery_segments(rng, n, delay, grid_step, halfwidth, count):
    lags = _steps(delay, grid_step)
    s = -delay + grid_step * np.arange(lags + 1)
    base = rng.uniform(-0.4 * halfwidth, 0.4 * halfwidth, size=(count, 1, n))
    amp = rng.uniform(-0.2 * halfwidth, 0.2 * halfwidth, size=(count, 1, n))
    freq = rng.uniform(0.5, 3.0, size=(count, 1, n))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(count, 1, n))
    return base + amp * np.sin(freq * s[None, :, None] + phase)


def transform_coeffs(field: RegularizingField, coeffs: CoefficientSet, *,
                     delay: float = 0.25, grid_step: float = 1.0 / 32.0,
                     battery: int = 256, seed: int = 2024) -> TransformedSystem:
    """Conjugate (b, B, Q) through theta and measure the constants K1..K4.

    K1 bounds the controlled delay-drift increments, K2 the operator-norm
    modulus of the new diffusion, K3 the control gain, K4 the one-sided
    dissipativity of the new drift; each is the max ratio over a seeded
    battery of states, times and segment pairs.
    """
    if not field.certified:
        raise CertificationError("coefficient transform requires a certified field")
    sys = TransformedSystem(field, coeffs, bounds={}, trivial=field.trivial)
    rng = np.random.default_rng(seed)
    n = field.n_modes
    hw = field.halfwidth

    k2 = 0.0
    k3 = 0.0
    k4 = -math.inf
    lamvec = field.spec.eigenvalues
    # pairs at log-spaced separations so the fitted maxima sit near the sup,
    # with extra mass near the origin where the drift is roughest
    for t in np.linspace(0.0, field.horizon, 9):
        uniform = rng.uniform(-0.8 * hw, 0.8 * hw, size=(battery, n))
        radii = rng.choice(np.geomspace(1e-3, 0.8 * hw, 24), size=(battery, 1))
        dirs = rng.normal(size=(battery, n))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        xs = np.concatenate([uniform, radii * dirs])
        eps = rng.choice(np.geomspace(1e-3, 2.0, 24), size=(2 * battery, 1))
        steps_dir = rng.normal(size=(2 * battery, n))
        steps_dir /= np.linalg.norm(steps_dir, axis=-1, keepdims=True)
        ys = np.clip(xs + eps * steps_dir, -0.8 * hw, 0.8 * hw)
        qx = sys.diffusion(t, xs)
        qy = sys.diffusion(t, ys)
        gaps = xs - ys
        dists = np.linalg.norm(gaps, axis=-1)
        keep = dists > 1e-12
        dq_op = np.linalg.svd(qx - qy, compute_uv=False)[..., 0]
        k2 = max(k2, float(np.max(dq_op[keep] / np.minimum(1.0, dists[keep]))))
        gain_norms = np.linalg.svd(_control_gain(qx), compute_uv=False)[..., 0]
        k3 = max(k3, float(np.max(gain_norms)))
        db = sys.drift(t, xs) - sys.drift(t, ys)
        quad = 2.0 * np.einsum("pi,pi->p", gaps, -lamvec * gaps + db) \
            + np.sum((qx - qy) ** 2, axis=(-2, -1))
        k4 = max(k4, float(np.max(quad[keep] / dists[keep] ** 2)))

    seg_count = max(battery // 8, 8)
    segs_a = _battery_segments(rng, n, delay, grid_step, hw, seg_count)
    segs_b = _battery_segments(rng, n, delay, grid_step, hw, seg_count)
    seg_ts = rng.uniform(0.0, field.horizon, size=seg_count)
    k1 = 0.0
    for t, sa, sb in zip(seg_ts, segs_a, segs_b):
        xa = SegmentPath(delay, grid_step, sa)
        xb = SegmentPath(delay, grid_step, sb)
        ba = sys.delay_drift(t, xa)
        bb = sys.delay_drift(t, xb)
        qb = sys.diffusion(t, xb.value_at(0.0)[None])[0]
        gain = _control_gain(qb[None])[0]
        num = float(np.linalg.norm(gain @ (ba - bb)))
        den = float(np.max(np.linalg.norm(sa - sb, axis=-1)))
        k1 = max(k1, num / max(den, 1e-12))

    sys.bounds = {"K1": k1, "K2": k2, "K3": k3, "K4": k4,
                  "battery": battery, "seed": seed}
    return sys


def lipschitz_grad_check(field: RegularizingField, *, pairs: int = 1000,
                         seed: int = 7, holdout_margin: float = 1.1) -> ClassReport:
    """Fit the HS Lipschitz constant of grad u and validate it on held-out pairs.

    Pairs are drawn at log-spaced separations so the max ratio sees every
    scale, including the fine structure near the drift's rough point.
    """
    rng = np.random.default_rng(seed)
    n = field.n_modes
    hw = field.halfwidth

    def max_ratio(count):
        worst = 0.0
        for t in np.linspace(0.0, field.horizon, 9):
            uniform = rng.uniform(-0.8 * hw, 0.8 * hw, size=(count, n))
            radii = rng.choice(np.geomspace(1e-3, 0.8 * hw, 24), size=(count, 1))
            rdirs = rng.normal(size=(count, n))
            rdirs /= np.linalg.norm(rdirs, axis=-1, keepdims=True)
            xs = np.concatenate([uniform, radii * rdirs])
            eps = rng.choice(np.geomspace(1e-3, 1.0, 16), size=(2 * count, 1))
            dirs = rng.normal(size=(2 * count, n))
            dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
            ys = np.clip(xs + eps * dirs, -0.8 * hw, 0.8 * hw)
            dg = field.grad_at(t, xs) - field.grad_at(t, ys)
            num = np.linalg.norm(dg.reshape(xs.shape[0], -1), axis=-1)
            den = np.maximum(np.linalg.norm(xs - ys, axis=-1), 1e-12)
            worst = max(worst, float(np.max(num / den)))
        return worst

    fitted = max_ratio(pairs)
    held = max_ratio(pairs)
    ok = held <= holdout_margin * max(fitted, 1e-300) or (fitted == 0.0 and held == 0.0)
    return ClassReport(check="grad_lipschitz", verdict=PASS if ok else FAIL,
                       integral_value=fitted, tail_bound=held,
                       diagnostics={"pairs": pairs, "seed": seed,
                                    "holdout_margin": holdout_margin})


def representation_residual(field: RegularizingField, coeffs: CoefficientSet,
                            states: np.ndarray, noise, delay: float,
                            horizon: float) -> float:
    """RMS gap at time T between the transformed representation and the raw path.

    The representation rewrites X(T) through u: semigroup image of the
    shifted start, minus u(T, X(T)), plus resolvent, delay and noise
    integrals accumulated with the discrete semigroup factors.
    """
    dt = noise.grid_step
    steps = _steps(horizon, dt)
    lags = _steps(delay, dt)
    lamvec = field.spec.eigenvalues
    lam = field.lam
    from .simulator import SegmentView

    x0 = states[lags]
    acc = np.zeros_like(x0)
    for k in range(steps):
        t = k * dt
        x = states[lags + k]
        view = SegmentView(states[lags + k - lags: lags + k + 1], dt, delay)
        sem = np.exp(-lamvec * (horizon - t))
        u_k = field.u_at(t, x)
        g_k = field.grad_at(t, x)
        b_del = np.asarray(coeffs.delay_drift(t, view), dtype=float)
        jac_b = b_del + np.einsum("...ij,...j->...i", g_k, b_del)
        acc += sem * ((lam + lamvec) * u_k + jac_b) * dt
        qm = coeffs.diffusion_matrix(t, x)
        if qm.ndim == 2:
            qm = np.broadcast_to(qm, x.shape[:-1] + qm.shape)
        spread = np.einsum("...ij,...jm->...im", np.eye(lamvec.size) + g_k, qm)
        acc += sem * np.einsum("...im,...m->...i", spread,
                               noise.increments[k][:, : coeffs.noise_dim])
    x_T = states[lags + steps]
    rhs = np.exp(-lamvec * horizon) * (x0 + field.u_at(0.0, x0)) - field.u_at(horizon, x_T) + acc
    gaps = np.linalg.norm(rhs - x_T, axis=-1)
    return float(np.sqrt(np.mean(gaps**2)))
