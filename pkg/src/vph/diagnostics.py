"""Measurable counterparts of the decay and convergence estimates.

Late-time density diagnostics live on a fixed grid in the rescaled
coordinate utilde = x / e^t (equivalently e^-t u), where the dynamics is
asymptotically stationary.  They are built as mass-exact bilinear binnings
of the particle weights: point-sampling the deposited grid stops resolving
the rescaled profile once the expanding cells outgrow the collapsing
stable direction, while binned estimators stay well-defined at every time
and reduce to the same continuum object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import XV_PER_SU_VOLUME, ParticleEnsemble, SimConfig
from .integrator import SimState
from .poisson import (
    GridSpec,
    ScalarField2D,
    direct_sum_potential,
    interpolate_scalar,
    interpolate_vector,
)


def utilde_grid(sigma_u: float, extent_sigma: float = 4.0, n: int = 64) -> GridSpec:
    """Fixed grid in the rescaled unstable coordinate, centered at 0."""
    half = extent_sigma * sigma_u
    return GridSpec(origin=(-half, -half), h=2 * half / (n - 1), n=n)


def bin_cic(pos: np.ndarray, weights: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, float]:
    """Mass-exact bilinear binning onto grid nodes; out-of-range points are
    dropped (their total weight is returned separately)."""
    xi = (pos[:, 0] - spec.origin[0]) / spec.h
    yi = (pos[:, 1] - spec.origin[1]) / spec.h
    n = spec.n
    ok = (xi >= 0) & (xi <= n - 1) & (yi >= 0) & (yi <= n - 1)
    dropped = float(np.sum(weights[~ok]))
    xi, yi, w = xi[ok], yi[ok], weights[ok]
    ix = np.minimum(xi.astype(np.int64), n - 2)
    iy = np.minimum(yi.astype(np.int64), n - 2)
    fx, fy = xi - ix, yi - iy
    flat = np.zeros(n * n)
    base = ix * n + iy
    flat += np.bincount(base, weights=w * (1 - fx) * (1 - fy), minlength=n * n)
    flat += np.bincount(base + n, weights=w * fx * (1 - fy), minlength=n * n)
    flat += np.bincount(base + 1, weights=w * (1 - fx) * fy, minlength=n * n)
    flat += np.bincount(base + n + 1, weights=w * fx * fy, minlength=n * n)
    return flat.reshape(n, n), dropped


def stable_average(ensemble: ParticleEnsemble, t: float, grid: GridSpec) -> ScalarField2D:
    """Normalized stable average: mass per unstable leaf in (s, u) measure.

    Bins the particle weights (divided by the (x,v)/(s,u) volume ratio) by
    utilde = e^-t u and divides by the bin area; the result estimates
    e^2t integral f(t, s, e^t utilde) ds.  Empty bins are genuine zeros.
    """
    ut = ensemble.u * np.exp(-t)
    mass, _ = bin_cic(ut, ensemble.w / XV_PER_SU_VOLUME, grid)
    return ScalarField2D(spec=grid, values=mass / grid.h**2)


def density_profile_histogram(ensemble: ParticleEnsemble, t: float,
                              grid: GridSpec) -> ScalarField2D:
    """Rescaled spatial density e^2t rho(t, e^t utilde) as a mass-exact
    binning of x/e^t (equals the stable average times the measure ratio)."""
    ut = ensemble.x * np.exp(-t)
    mass, _ = bin_cic(ut, ensemble.w, grid)
    return ScalarField2D(spec=grid, values=mass / grid.h**2)


def density_profile_interp(state: SimState, grid: GridSpec) -> np.ndarray:
    """Point-interpolated e^2t rho(t, e^t utilde) from the deposited grid.

    Valid while the deposit resolves the continuum density (early times);
    samples falling outside the active grid are marked NaN, never
    extrapolated.
    """
    gx, gy = grid.node_mesh()
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1) * np.exp(state.t)
    spec = state.field.spec
    lo = np.array(spec.origin)
    hi = lo + (spec.n - 1) * spec.h
    ok = np.all((pts >= lo) & (pts <= hi), axis=1)
    out = np.full(pts.shape[0], np.nan)
    if np.any(ok):
        out[ok] = interpolate_scalar(state.field.rho, pts[ok]) * np.exp(2 * state.t)
    return out.reshape(grid.n, grid.n)


def force_profile(state: SimState, grid: GridSpec) -> np.ndarray:
    """Rescaled force e^t grad(phi)(t, e^t utilde) on the utilde grid, (n, n, 2).

    Out-of-grid samples are NaN (never extrapolated).
    """
    gx, gy = grid.node_mesh()
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1) * np.exp(state.t)
    spec = state.field.spec
    lo = np.array(spec.origin)
    hi = lo + (spec.n - 1) * spec.h
    ok = np.all((pts >= lo) & (pts <= hi), axis=1)
    out = np.full((pts.shape[0], 2), np.nan)
    if np.any(ok):
        out[ok] = interpolate_vector(state.field.E, pts[ok]) * np.exp(state.t)
    return out.reshape(grid.n, grid.n, 2)


def hamiltonian(state: SimState) -> float:
    """Conserved energy: (1/2) sum w (|v|^2 - |x|^2) - (mu/2) |grad phi|^2 term.

    The kinetic part uses the exact identity |v|^2 - |x|^2 = -4 u.s.  The
    field part is evaluated in its renormalized (interaction-energy) form
    -integral rho phi: on the plane with nonzero total mass the raw
    |grad phi|^2 integral diverges logarithmically with the domain, while
    integrating by parts and dropping the divergent boundary flux leaves
    -integral rho phi, which is domain-independent and is the combination
    the dynamics actually conserves.
    """
    ens = state.ensemble
    kinetic = -2.0 * float(np.sum(ens.w * np.sum(ens.u * ens.s, axis=1)))
    f = state.field
    field_term = float(np.sum(f.rho.values * f.phi.values)) * f.spec.h**2
    return kinetic + 0.5 * state.config.mu * field_term


def field_energy_pairwise(ensemble: ParticleEnsemble) -> float:
    """O(N^2) oracle for the interaction term: sum_i w_i phi(x_i) with the
    exact pairwise log kernel (self terms skipped)."""
    return float(ensemble.w @ direct_sum_potential(ensemble))


@dataclass
class DerivativeBounds:
    sup_sf: float
    sup_uf: float
    sup_sf_weighted: float
    sup_uf_weighted: float
    flagged: int


def derivative_bounds(state: SimState, det_floor: float = 1e-3) -> DerivativeBounds:
    """Sup norms of the stable/unstable derivatives of f along particles.

    The current-point gradient is the Liouville pullback J^-T grad f0 (in
    (s, u) components); then Sf = e^-t (df/ds), Uf = e^t (df/du) per axis.
    Particles with |det J| below ``det_floor`` are excluded and counted.
    The weighted variants multiply by the conserved modified-weight bracket
    (1 + |2 s0|^2 + |e^-t (x+v)|^2)^(M/2).
    """
    ens = state.ensemble
    g0 = np.empty((ens.n, 4))
    g0[:, 0:2] = ens.f0_grad[:, 0:2] - ens.f0_grad[:, 2:4]  # d/ds = dx - dv
    g0[:, 2:4] = ens.f0_grad[:, 0:2] + ens.f0_grad[:, 2:4]  # d/du = dx + dv

    dets = np.linalg.det(ens.J)
    good = np.abs(dets) >= det_floor
    flagged = int(np.sum(~good))
    if not np.any(good):
        return DerivativeBounds(0.0, 0.0, 0.0, 0.0, flagged)

    jt = np.swapaxes(ens.J[good], 1, 2)
    g = np.linalg.solve(jt, g0[good][:, :, None])[:, :, 0]
    emt = np.exp(-state.t)
    sf = np.abs(g[:, 0:2]) * emt
    uf = np.abs(g[:, 2:4]) / emt

    zmod = 2.0 * ens.s0[good]
    zminus = 2.0 * ens.u[good] * emt
    bracket = np.sqrt(
        1.0 + np.sum(zmod**2, axis=1) + np.sum(zminus**2, axis=1)
    ) ** state.config.norm_M

    return DerivativeBounds(
        sup_sf=float(sf.max()),
        sup_uf=float(uf.max()),
        sup_sf_weighted=float((sf.max(axis=1) * bracket).max()),
        sup_uf_weighted=float((uf.max(axis=1) * bracket).max()),
        flagged=flagged,
    )


def weak_functional(ensemble: ParticleEnsemble, t: float, test_fn,
                    u_shift: np.ndarray | None = None) -> float:
    """e^2t sum of (s, u)-measure weights times test_fn(s_p, u_p - e^t ubar).

    With a compactly supported test this realizes the pairing of e^2t fbar
    against it; the shifted variant probes the leaf u = ubar.
    """
    u = ensemble.u
    if u_shift is not None:
        u = u - np.exp(t) * np.asarray(u_shift, dtype=float)
    vals = test_fn(ensemble.s, u)
    return float(np.exp(2 * t) * np.sum(ensemble.w / XV_PER_SU_VOLUME * vals))


class TestBump:
    """Factored test function g_s(s) g_u(u) with closed-form u integral.

    ``u_integral`` is the integral of g_u over the plane (so the Dirac-mass
    prediction for the weak pairing is leaf-mass(0) times it), ``u_support``
    a radius beyond which g_u is zero or negligible.
    """

    def __init__(self, s_part, u_part, u_integral: float, u_support: float):
        self.s_part = s_part
        self.u_part = u_part
        self.u_integral = u_integral
        self.u_support = u_support

    def __call__(self, s, u):
        return self.s_part(s) * self.u_part(u)


def gaussian_bump(width_s: float, width_u: float) -> TestBump:
    """Smooth bump; super-exponential decay stands in for compact support."""

    def gs(s):
        return np.exp(-np.sum(s * s, axis=-1) / (2 * width_s**2))

    def gu(u):
        return np.exp(-np.sum(u * u, axis=-1) / (2 * width_u**2))

    return TestBump(gs, gu, 2 * np.pi * width_u**2, 7.0 * width_u)


def cosine_bump(radius_s: float, radius_u: float) -> TestBump:
    """Compactly supported cos^2 bump in |s| and |u|.

    The u integral is 2 pi R^2 (1/4 - 1/pi^2), verified against quadrature
    in the test suite.
    """

    def part(radius):
        def fn(z):
            r = np.sqrt(np.sum(z * z, axis=-1)) / radius
            return np.where(r < 1, np.cos(0.5 * np.pi * np.minimum(r, 1.0)) ** 2, 0.0)

        return fn

    return TestBump(part(radius_s), part(radius_u),
                    2 * np.pi * radius_u**2 * (0.25 - 1.0 / np.pi**2), radius_u)


def test_function_registry(config: SimConfig) -> dict:
    """Closed-form test functions used by the weak-convergence diagnostics."""
    return {
        "gauss": gaussian_bump(2.0 * config.sigma_s, 4.0 * config.sigma_u),
        "cosine": cosine_bump(5.0 * config.sigma_s, 8.0 * config.sigma_u),
    }


def leaf_density_evaluator(u_points: np.ndarray, weights_su: np.ndarray,
                           ensemble: ParticleEnsemble):
    """Interpolating evaluator for the leaf density in rescaled-u space.

    Each s-lattice point of the sampler carries a rigidly shifted regular u
    lattice, so the density it contributes is spline-interpolated over its
    own lattice (undone shift, plus the measured mean scattering drift of
    the group) and the groups are summed.  Point histograms on a fixed grid
    cannot see between lattice sites; this evaluator reaches the lattice
    interpolation order instead.

    ``u_points`` are the particles' rescaled unstable coordinates (e^-t u
    or u_inf), ``weights_su`` the quantity whose leaf density is wanted,
    in (s, u) measure.  Returns a callable mapping (M, 2) queries to values.
    """
    from scipy.interpolate import RectBivariateSpline

    n = ensemble.lattice_n
    if n <= 0:
        raise ValueError("ensemble does not carry a sampling lattice")
    meta = ensemble.meta
    nodes = meta["u_axis_nodes"]
    offsets = meta["group_offsets"]
    step = meta["lattice_step_u"]
    ns2 = n * n

    vals = (weights_su / step**2).reshape(ns2, ns2)
    upts = u_points.reshape(ns2, ns2, 2)
    wms = np.abs(ensemble.w).reshape(ns2, ns2)
    wsum = wms.sum(axis=1)
    base = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), axis=-1).reshape(ns2, 2)
    # per-group mean drift of the rescaled coordinate relative to its lattice
    disp = upts - (base[None, :, :] + offsets[:, None, :])
    num = (wms[:, :, None] * disp).sum(axis=1)
    mean_disp = np.where(
        wsum[:, None] > 0, num / np.maximum(wsum, 1e-300)[:, None], disp.mean(axis=1)
    )

    splines = [
        RectBivariateSpline(nodes, nodes, vals[k].reshape(n, n), kx=3, ky=3)
        for k in range(ns2)
    ]
    lo, hi = nodes[0], nodes[-1]

    def evaluate(queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        out = np.zeros(queries.shape[0])
        for k in range(ns2):
            q = queries - offsets[k] - mean_disp[k]
            ok = (
                (q[:, 0] >= lo) & (q[:, 0] <= hi)
                & (q[:, 1] >= lo) & (q[:, 1] <= hi)
            )
            if np.any(ok):
                out[ok] += splines[k].ev(q[ok, 0], q[ok, 1])
        return out

    return evaluate


def weak_functional_smoothed(ensemble: ParticleEnsemble, t: float, bump: TestBump,
                             u_shift: np.ndarray | None = None,
                             quad_n: int = 96) -> float:
    """Weak pairing evaluated through the sampling-lattice leaf structure.

    The direct particle sum stops resolving a fixed test once the expanded
    leaf spacing exceeds the u support; here the s sums ride per particle
    (always resolved), the leaf density is interpolated across the lattice,
    and the u integral is done by quadrature against the test.  Usable at
    every time, converging to the same limit as the direct sum.
    """
    w = (ensemble.w / XV_PER_SU_VOLUME) * bump.s_part(ensemble.s)
    evaluator = leaf_density_evaluator(ensemble.u * np.exp(-t), w, ensemble)

    R = bump.u_support
    q = ((np.arange(quad_n) + 0.5) / quad_n * 2 - 1.0) * R
    qx, qy = np.meshgrid(q, q, indexing="ij")
    pts = np.stack([qx.ravel(), qy.ravel()], axis=-1)
    ut_pts = pts * np.exp(-t)
    if u_shift is not None:
        ut_pts = ut_pts + np.asarray(u_shift, dtype=float)
    vals = evaluator(ut_pts)
    cell = (2 * R / quad_n) ** 2
    return float(np.sum(vals * bump.u_part(pts)) * cell)


@dataclass
class FitReport:
    power: float        # k in (1+t)^k
    rate: float         # lambda in e^(-lambda t)
    log_amplitude: float
    residual: float
    n_used: int
    n_excluded: int


def fit_rate(times, values, model: str = "poly-exp") -> FitReport:
    """Least squares of log(values) against log(1+t) and t.

    ``model="exp-only"`` pins the polynomial power to zero.  Non-positive
    values are excluded and counted; at least 5 usable samples required.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = values > 0
    n_excluded = int(np.sum(~ok))
    t, v = times[ok], values[ok]
    if t.size < 5:
        raise ValueError(f"need at least 5 positive samples, have {t.size}")
    logv = np.log(v)
    if model == "exp-only":
        A = np.stack([np.ones_like(t), -t], axis=1)
        coef, res, *_ = np.linalg.lstsq(A, logv, rcond=None)
        c, lam = coef
        k = 0.0
    elif model == "poly-exp":
        A = np.stack([np.ones_like(t), np.log1p(t), -t], axis=1)
        coef, res, *_ = np.linalg.lstsq(A, logv, rcond=None)
        c, k, lam = coef
    else:
        raise ValueError(f"unknown model {model!r}")
    resid = float(np.sqrt(np.mean((A @ coef - logv) ** 2)))
    return FitReport(power=float(k), rate=float(lam), log_amplitude=float(c),
                     residual=resid, n_used=int(t.size), n_excluded=n_excluded)


@dataclass
class DiagnosticsSeries:
    """Per-sample-time records of every measured quantity.

    All series share the ``times`` axis.
    """

    config: SimConfig
    profile_grid: GridSpec
    qhat_grid: GridSpec
    times: list = field(default_factory=list)
    sup_e2t_rho: list = field(default_factory=list)
    sup_e2t_rho_grid: list = field(default_factory=list)
    hamiltonian: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    q_profiles: list = field(default_factory=list)
    density_profiles: list = field(default_factory=list)
    force_profiles: list = field(default_factory=list)
    sup_sf: list = field(default_factory=list)
    sup_uf: list = field(default_factory=list)
    sup_sf_weighted: list = field(default_factory=list)
    sup_uf_weighted: list = field(default_factory=list)
    tangent_flagged: list = field(default_factory=list)
    weak: dict = field(default_factory=dict)
    drift_ratio: list = field(default_factory=list)
    z_minus_var: list = field(default_factory=list)
    det_j_dev: list = field(default_factory=list)
    regrid_count: list = field(default_factory=list)

    @classmethod
    def for_config(cls, config: SimConfig) -> "DiagnosticsSeries":
        return cls(
            config=config,
            profile_grid=utilde_grid(config.sigma_u, 4.0, 64),
            qhat_grid=utilde_grid(config.sigma_u, 4.0, 32),
        )

    def collect(self, state: SimState) -> None:
        from .integrator import det_j_deviation, z_minus_variation

        cfg = self.config
        ens = state.ensemble
        t = state.t
        self.times.append(t)
        prof = density_profile_histogram(ens, t, self.profile_grid)
        self.density_profiles.append(prof.values)
        self.sup_e2t_rho.append(float(prof.values.max()) if ens.n else 0.0)
        self.sup_e2t_rho_grid.append(
            float(state.field.rho.values.max() * np.exp(2 * t))
        )
        self.hamiltonian.append(hamiltonian(state))
        self.mass.append(ens.total_weight)
        self.q_profiles.append(stable_average(ens, t, self.qhat_grid).values)
        self.force_profiles.append(force_profile(state, self.profile_grid))
        d = derivative_bounds(state)
        self.sup_sf.append(d.sup_sf)
        self.sup_uf.append(d.sup_uf)
        self.sup_sf_weighted.append(d.sup_sf_weighted)
        self.sup_uf_weighted.append(d.sup_uf_weighted)
        self.tangent_flagged.append(d.flagged)
        for name, fn in test_function_registry(cfg).items():
            self.weak.setdefault(name, []).append(weak_functional(ens, t, fn))
        eps = cfg.epsilon
        if eps > 0:
            ratio = float(np.linalg.norm(ens.drift, axis=1).max() / (eps * (1 + t)))
        else:
            ratio = 0.0
        self.drift_ratio.append(ratio)
        self.z_minus_var.append(z_minus_variation(state))
        self.det_j_dev.append(det_j_deviation(state))
        self.regrid_count.append(state.regrid_count)
