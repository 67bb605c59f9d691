"""Extraction of the scattering data from late-time particle snapshots.

The per-leaf mass profile converges geometrically; its last iterate stands
in for the limit.  The asymptotic potential solves the Poisson equation on
the rescaled unstable plane with the limiting density profile as source
(the stable-average profile times the (x,v)/(s,u) volume ratio, which is
what e^2t rho(t, e^t utilde) actually converges to).  Each particle's
asymptotic coordinates invert the corrected stable characteristic
e^-t (s + (mu t / 2) grad phi_asymp(u)); the carried f value is its initial
one (transport along characteristics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import XV_PER_SU_VOLUME, ParticleEnsemble, SimConfig
from .diagnostics import bin_cic, stable_average
from .poisson import (
    GridSpec,
    ScalarField2D,
    VectorField2D,
    gradient,
    interpolate_vector,
    solve_free_space,
)


@dataclass
class ParticleSnapshot:
    """Hyperbolic particle coordinates at one sample time."""

    t: float
    s: np.ndarray
    u: np.ndarray


def take_snapshot(state) -> ParticleSnapshot:
    return ParticleSnapshot(t=state.t, s=state.ensemble.s.copy(),
                            u=state.ensemble.u.copy())


def scattering_grid(config: SimConfig, n: int = 64) -> GridSpec:
    """Rescaled-unstable-plane grid wide enough to cover the sampled leaves
    (so every particle resolves), solver-compatible."""
    half = 6.6 * config.sigma_u
    return GridSpec(origin=(-half, -half), h=2 * half / (n - 1), n=n)


def estimate_q_inf(qhats: dict[float, ScalarField2D], t1: float, t2: float):
    """Limit estimate of the stable-average profile with an error bound.

    Returns (q_inf, error, warnings): the profile at t2, the sup difference
    against t1 (geometric convergence makes the last iterate dominate), and
    a warning when successive differences over >= 3 stored times stop
    decreasing (resolution floor reached).
    """
    if t2 <= t1:
        raise ValueError("need t2 > t1")
    q2 = qhats[t2]
    q1 = qhats[t1]
    err = float(np.abs(q2.values - q1.values).max())
    warnings = []
    times = sorted(qhats)
    if len(times) >= 3:
        diffs = [
            float(np.abs(qhats[times[i + 1]].values - qhats[times[i]].values).max())
            for i in range(len(times) - 1)
        ]
        if any(d2 > d1 for d1, d2 in zip(diffs, diffs[1:])):
            warnings.append(
                "successive stable-average differences stopped decreasing: "
                f"{diffs} (resolution floor)"
            )
    return ScalarField2D(spec=q2.spec, values=q2.values.copy()), err, warnings


def solve_asymptotic_poisson(q_inf: ScalarField2D) -> tuple[ScalarField2D, VectorField2D]:
    """Poisson solve on the rescaled unstable plane with the given source.

    Identical solver path as the dynamic field solve; gradient by central
    differences.
    """
    phi = solve_free_space(q_inf)
    return phi, gradient(phi)


def asymptotic_force_field(q_inf: ScalarField2D) -> tuple[ScalarField2D, VectorField2D]:
    """Asymptotic potential with the physically normalized source.

    The rescaled spatial density converges to the stable average times the
    (x,v)/(s,u) volume ratio, so the force-profile limit (and the
    characteristic correction built from it) solves the Poisson equation
    with that density, not with the bare stable average.
    """
    src = ScalarField2D(spec=q_inf.spec, values=XV_PER_SU_VOLUME * q_inf.values)
    return solve_asymptotic_poisson(src)


def scattering_coords(snapshot: ParticleSnapshot,
                      grad_phi_asymp: VectorField2D | None,
                      mu: int):
    """Asymptotic coordinates inverting the modified stable characteristic.

    u_inf = e^-t u, s_inf = e^t s - (mu t / 2) grad_phi_asymp(u_inf); with
    ``grad_phi_asymp=None`` the correction is zeroed (control runs).
    Particles whose u_inf falls outside the field grid are flagged
    unresolved, left uncorrected, and excluded from reconstructions.
    """
    t = snapshot.t
    ep = np.exp(t)
    u_inf = snapshot.u / ep
    s_inf = snapshot.s * ep
    n = s_inf.shape[0]
    if grad_phi_asymp is None:
        return s_inf, u_inf, np.ones(n, dtype=bool)
    spec = grad_phi_asymp.spec
    lo = np.array(spec.origin)
    hi = lo + (spec.n - 1) * spec.h
    resolved = np.all((u_inf >= lo) & (u_inf <= hi), axis=1)
    corr = interpolate_vector(grad_phi_asymp, u_inf[resolved])
    s_inf[resolved] -= (0.5 * mu * t) * corr
    return s_inf, u_inf, resolved


@dataclass(frozen=True)
class GridSpec4D:
    """Uniform 4D cell grid over (s1, s2, u1, u2)."""

    origin: float
    h: float
    n: int

    @property
    def edges(self) -> np.ndarray:
        return self.origin + self.h * np.arange(self.n + 1)


def lattice_aligned_spec4(config: SimConfig, ensemble_meta: dict,
                          points_per_cell: int = 2) -> GridSpec4D:
    """4D cells whose boundaries sit between sampling-lattice points, each
    cell holding points_per_cell^4 initial lattice sites.

    Alignment makes the density estimate and the value average coincide
    exactly for the unperturbed lattice (the bilinear kernel sums telescope),
    so their disagreement measures only the scattering distortion.
    """
    step = ensemble_meta["lattice_step_u"]
    h = points_per_cell * step
    half = 6.0 * config.sigma_u
    n = int(round(2 * half / h))
    return GridSpec4D(origin=-half, h=h, n=n)


def _cic4(pts: np.ndarray, wts: np.ndarray, spec: GridSpec4D) -> np.ndarray:
    """Bilinear (tensor tent) binning in 4D onto cell centers."""
    n = spec.n
    xi = (pts - spec.origin) / spec.h - 0.5  # cell-center index space
    ok = np.all((xi >= 0) & (xi <= n - 1), axis=1)
    xi, wts = xi[ok], wts[ok]
    base = np.minimum(xi.astype(np.int64), n - 2)
    frac = xi - base
    flat = np.zeros(n**4)
    for corner in range(16):
        idx = np.zeros(len(xi), dtype=np.int64)
        wgt = wts.copy()
        for axis in range(4):
            bit = (corner >> axis) & 1
            idx = idx * n + (base[:, axis] + bit)
            wgt = wgt * (frac[:, axis] if bit else 1.0 - frac[:, axis])
        flat += np.bincount(idx, weights=wgt, minlength=n**4)
    return flat.reshape(n, n, n, n)


@dataclass
class FInfReconstruction:
    """Density and value-carried estimates of the scattering state."""

    su_marginal: ScalarField2D      # (s1, u1) marginal density, mass / area
    density4: np.ndarray            # (n, n, n, n) density estimate
    value4: np.ndarray              # kernel-averaged carried f values
    kernel_count4: np.ndarray       # effective samples per 4D cell
    spec4: GridSpec4D
    mass: float                     # (x, v)-measure mass of resolved particles
    unresolved: int
    unresolved_mass: float


def reconstruct_f_inf(s_inf: np.ndarray, u_inf: np.ndarray, resolved: np.ndarray,
                      ensemble: ParticleEnsemble, config: SimConfig,
                      marginal_n: int = 128) -> FInfReconstruction:
    """Grid the scattering state in (s, u).

    The 2D artifact is the (s1, u1) marginal on a +-5 sigma grid; the
    cross-validation pair lives on coarse lattice-aligned 4D cells: a
    deposition-based density estimate and an average of the carried f
    values, which must agree where the state is resolved.  Requires >= 90%
    of the particles resolved.
    """
    n_unres = int(np.sum(~resolved))
    frac = n_unres / max(len(resolved), 1)
    if frac > 0.10:
        raise ValueError(
            f"only {100 * (1 - frac):.1f}% of particles resolved; "
            "enlarge the rescaled-u grid"
        )
    w_su = ensemble.w[resolved] / XV_PER_SU_VOLUME
    si, ui = s_inf[resolved], u_inf[resolved]
    fv = ensemble.f0_val[resolved]

    half = 5.0 * max(config.sigma_s, config.sigma_u)
    spec2 = GridSpec(origin=(-half, -half), h=2 * half / (marginal_n - 1), n=marginal_n)
    m2, _ = bin_cic(np.stack([si[:, 0], ui[:, 0]], axis=-1), w_su, spec2)
    su_marginal = ScalarField2D(spec=spec2, values=m2 / spec2.h**2)

    spec4 = lattice_aligned_spec4(config, ensemble.meta)
    pts = np.concatenate([si, ui], axis=1)
    mass4 = _cic4(pts, w_su, spec4)
    count4 = _cic4(pts, np.ones_like(w_su), spec4)
    val4 = _cic4(pts, fv, spec4)
    with np.errstate(invalid="ignore", divide="ignore"):
        value4 = np.where(count4 > 0, val4 / np.maximum(count4, 1e-300), 0.0)

    return FInfReconstruction(
        su_marginal=su_marginal,
        density4=mass4 / spec4.h**4,
        value4=value4,
        kernel_count4=count4,
        spec4=spec4,
        mass=float(np.sum(ensemble.w[resolved])),
        unresolved=n_unres,
        unresolved_mass=float(np.sum(ensemble.w[~resolved])),
    )


def q_from_scattering(u_inf: np.ndarray, resolved: np.ndarray,
                      ensemble: ParticleEnsemble, grid: GridSpec) -> ScalarField2D:
    """Stable-average profile implied by the scattering state (the s
    marginal of the reconstructed f), on the given rescaled-u grid."""
    w_su = ensemble.w[resolved] / XV_PER_SU_VOLUME
    mass, _ = bin_cic(u_inf[resolved], w_su, grid)
    return ScalarField2D(spec=grid, values=mass / grid.h**2)


def stable_leaf_mass(u_inf: np.ndarray, ensemble: ParticleEnsemble,
                     u_bar) -> float:
    """Leaf mass integral f_inf(s, u_bar) ds by lattice interpolation.

    Interpolates the per-group leaf density of the scattering state across
    the sampling lattice at u_bar; accurate to the lattice interpolation
    order, which point histograms cannot reach between lattice sites.
    """
    from .diagnostics import leaf_density_evaluator

    evaluator = leaf_density_evaluator(u_inf, ensemble.w / XV_PER_SU_VOLUME, ensemble)
    return float(evaluator(np.atleast_2d(np.asarray(u_bar, dtype=float)))[0])


@dataclass
class ScatteringState:
    """Full scattering data extracted from a run."""

    config: SimConfig
    grid: GridSpec
    q_inf: ScalarField2D
    q_error: float
    phi_asymp: ScalarField2D
    grad_phi_asymp: VectorField2D
    s_inf: np.ndarray
    u_inf: np.ndarray
    f_val: np.ndarray
    weights: np.ndarray
    resolved: np.ndarray
    f_inf: FInfReconstruction
    t_extracted: float
    warnings: list = field(default_factory=list)


def build_scattering_state(ensemble: ParticleEnsemble, snapshots: list[ParticleSnapshot],
                           config: SimConfig, t1: float | None = None,
                           t2: float | None = None,
                           zero_correction: bool = False) -> ScatteringState:
    """Assemble the scattering state from late-time snapshots.

    Default extraction times are (t_final - 2, t_final); earlier profiles
    are polluted by transients.  With ``picard_refine`` set in the config,
    the asymptotic field is re-solved once from the reconstructed state's
    own leaf profile to confirm insensitivity.
    """
    if not snapshots:
        raise ValueError("no snapshots")
    times = sorted(s.t for s in snapshots)
    by_t = {s.t: s for s in snapshots}
    if t2 is None:
        t2 = times[-1]
    if t1 is None:
        candidates = [t for t in times if t <= t2 - 2.0] or [t for t in times if t < t2]
        if not candidates:
            raise ValueError("need at least two snapshot times")
        t1 = candidates[-1]

    grid = scattering_grid(config)
    qhats = {
        t: stable_average_snapshot(by_t[t], ensemble, grid) for t in times
    }
    q_inf, q_err, warns = estimate_q_inf(qhats, t1, t2)
    phi_a, grad_a = asymptotic_force_field(q_inf)

    snap = by_t[t2]
    grad_used = None if zero_correction else grad_a
    s_inf, u_inf, resolved = scattering_coords(snap, grad_used, config.mu)
    recon = reconstruct_f_inf(s_inf, u_inf, resolved, ensemble, config)

    state = ScatteringState(
        config=config, grid=grid, q_inf=q_inf, q_error=q_err,
        phi_asymp=phi_a, grad_phi_asymp=grad_a,
        s_inf=s_inf, u_inf=u_inf, f_val=ensemble.f0_val.copy(),
        weights=ensemble.w.copy(),
        resolved=resolved, f_inf=recon, t_extracted=t2, warnings=warns,
    )

    if config.picard_refine and not zero_correction:
        q_ref = q_from_scattering(u_inf, resolved, ensemble, grid)
        phi_r, grad_r = asymptotic_force_field(q_ref)
        s_r, u_r, res_r = scattering_coords(snap, grad_r, config.mu)
        delta = float(np.abs(s_r[res_r & resolved] - s_inf[res_r & resolved]).max())
        state.warnings.append(f"picard refinement moved s_inf by at most {delta:.3e}")
    return state


def stable_average_snapshot(snapshot: ParticleSnapshot, ensemble: ParticleEnsemble,
                            grid: GridSpec) -> ScalarField2D:
    """Stable-average profile from a snapshot's coordinates with the
    ensemble's weights."""
    ut = snapshot.u * np.exp(-snapshot.t)
    mass, _ = bin_cic(ut, ensemble.w / XV_PER_SU_VOLUME, grid)
    return ScalarField2D(spec=grid, values=mass / grid.h**2)


def coordinate_convergence(ensemble: ParticleEnsemble,
                           snapshots: list[ParticleSnapshot],
                           grad_phi_asymp: VectorField2D | None,
                           mu: int) -> dict:
    """Per-particle scattering-coordinate history and sup differences
    between consecutive snapshot times."""
    times = sorted(s.t for s in snapshots)
    by_t = {s.t: s for s in snapshots}
    coords = {}
    for t in times:
        s_inf, u_inf, res = scattering_coords(by_t[t], grad_phi_asymp, mu)
        coords[t] = (s_inf, u_inf, res)
    sup_diffs = []
    for ta, tb in zip(times, times[1:]):
        sa, ua, ra = coords[ta]
        sb, ub, rb = coords[tb]
        both = ra & rb
        d = max(
            float(np.abs(sb[both] - sa[both]).max()),
            float(np.abs(ub[both] - ua[both]).max()),
        )
        sup_diffs.append(((ta, tb), d))
    return {"times": times, "coords": coords, "sup_diffs": sup_diffs}


def asymptotic_conservation_check(state: ScatteringState,
                                  mass0: float, h0: float) -> dict:
    """Compare the scattering state's mass and energy with the run's t=0
    values.

    Kinetic part via |v|^2 - |x|^2 = -4 u.s summed over resolved particles;
    field part in the renormalized interaction form on the rescaled grid,
    +(mu/2) integral of (volume ratio times q_inf) phi_asymp, matching the
    renormalization used for the dynamic energy.
    """
    res = state.resolved
    w = state.weights
    mass_inf = state.f_inf.mass
    kinetic = -2.0 * float(
        np.sum(w[res] * np.sum(state.u_inf[res] * state.s_inf[res], axis=1))
    )
    rho_a = XV_PER_SU_VOLUME * state.q_inf.values
    field_term = float(np.sum(rho_a * state.phi_asymp.values)) * state.grid.h**2
    h_inf = kinetic + 0.5 * state.config.mu * field_term
    eps2 = max(abs(h0), state.config.epsilon**2)
    return {
        "mass_f_inf": mass_inf,
        "mass_initial": mass0,
        "mass_rel_error": abs(mass_inf - mass0) / mass0 if mass0 else 0.0,
        "kinetic_inf": kinetic,
        "field_inf": 0.5 * state.config.mu * field_term,
        "hamiltonian_inf": h_inf,
        "hamiltonian_initial": h0,
        "hamiltonian_rel_error": abs(h_inf - h0) / eps2,
        "unresolved": state.f_inf.unresolved,
        "unresolved_mass": state.f_inf.unresolved_mass,
    }
