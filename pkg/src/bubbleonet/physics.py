"""Governing equations for a single spherical gas bubble.

Everything downstream works on the non-dimensional problem: lengths scaled by
the initial radius ``a = R0``, times by the horizon ``tau = t_max``, pressures
by ``P_star = n_scale * rho * a**2 / tau**2``.  ``n_scale`` is chosen so that
``P_star`` equals the ambient pressure, which keeps all non-dimensional
pressures O(1-10).

Two models are provided: the incompressible-liquid radial equation (``rp_``)
and its first-order compressible extension (``km_``).  Both are reduced to the
first-order state form y = [R, Rdot] consumed by the Runge-Kutta machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DegenerateStateError, DomainError, SingularityError

#: default liquid: water at ~20 C (not a literature-pinned ground truth)
WATER = dict(rho=1000.0, mu=1.0e-3, S=0.0728, c=1500.0, P0=101325.0, k=1.4)


@dataclass(frozen=True)
class FluidParams:
    """Physical constants of the liquid/gas system (SI units).

    ``P_G0`` is the initial internal gas pressure; ``None`` means "use the
    mechanical-equilibrium value for the sample's R0" (see
    :func:`equilibrium_gas_pressure`).  ``mu`` and ``S`` may be zero (inviscid
    / zero-surface-tension limits) and ``c`` may be ``inf`` (incompressible
    limit).
    """

    rho: float = WATER["rho"]
    mu: float = WATER["mu"]
    S: float = WATER["S"]
    c: float = WATER["c"]
    P0: float = WATER["P0"]
    k: float = WATER["k"]
    P_G0: float | None = None

    def __post_init__(self):
        if not (self.rho > 0 and self.P0 > 0):
            raise DomainError("rho and P0 must be strictly positive")
        if self.mu < 0 or self.S < 0:
            raise DomainError("mu and S must be non-negative")
        if not self.c > 0:
            raise DomainError("c must be positive (inf allowed)")
        if self.k < 1:
            raise DomainError("polytropic exponent k must be >= 1")
        if self.P_G0 is not None and not self.P_G0 > 0:
            raise DomainError("P_G0 must be strictly positive when given")

    def gas_pressure_at_rest(self, R0: float) -> float:
        """Concrete P_G0: the explicit value if set, else the equilibrium one."""
        if self.P_G0 is not None:
            return self.P_G0
        return equilibrium_gas_pressure(self, R0)


@dataclass(frozen=True)
class Scales:
    """Characteristic scales: length a = R0, time tau = t_max, pressure P_star."""

    a: float
    tau: float
    P_star: float
    n_scale: float

    # round-trip helpers (dimensional <-> non-dimensional)
    def nondim_time(self, t):
        return np.asarray(t) / self.tau

    def dim_time(self, t_bar):
        return np.asarray(t_bar) * self.tau

    def nondim_radius(self, R):
        return np.asarray(R) / self.a

    def dim_radius(self, r_bar):
        return np.asarray(r_bar) * self.a

    def nondim_velocity(self, Rdot):
        return np.asarray(Rdot) * (self.tau / self.a)

    def dim_velocity(self, rdot_bar):
        return np.asarray(rdot_bar) * (self.a / self.tau)

    def nondim_pressure(self, P):
        return np.asarray(P) / self.P_star

    def dim_pressure(self, p_bar):
        return np.asarray(p_bar) * self.P_star


@dataclass(frozen=True)
class DimensionlessGroups:
    """Dimensionless numbers of the non-dimensional state form.

    Re = rho a^2 / (mu tau), We = rho a^3 / (S tau^2), M = a / (tau c);
    ``pg0_ratio`` is n_scale * P_G0 / P_star, ``n_scale`` multiplies every
    non-dimensional pressure in the equations.  ``mu = 0`` / ``S = 0`` give
    Re = inf / We = inf, whose reciprocal coefficients vanish cleanly.
    """

    Re: float
    We: float
    M: float
    pg0_ratio: float
    n_scale: float
    k: float

    def __post_init__(self):
        if not self.M < 1:
            raise DomainError(f"wall Mach scale M={self.M} must be < 1")

    # coefficients as they appear in the state form
    @property
    def visc(self) -> float:  # 4/Re
        return 4.0 / self.Re

    @property
    def surf(self) -> float:  # 2/We
        return 2.0 / self.We


class BubbleState(NamedTuple):
    """Non-dimensional state (radius, wall velocity)."""

    r_bar: float
    rdot_bar: float


@dataclass(frozen=True)
class PressureProfile:
    """Sampled non-dimensional far-field forcing on a uniform time grid."""

    t_grid: np.ndarray
    p_bar: np.ndarray
    dp_bar: np.ndarray
    amp: float
    freq: float
    n_points: int

    def __post_init__(self):
        if not (len(self.t_grid) == len(self.p_bar) == len(self.dp_bar) == self.n_points):
            raise DomainError("profile arrays must all have length n_points")


def make_scales(R0: float, t_max: float, fluid: FluidParams) -> Scales:
    """Characteristic scales for a bubble of rest radius R0 over horizon t_max.

    n_scale is fixed by requiring P_star = P0.
    """
    if not (R0 > 0 and t_max > 0):
        raise DomainError("R0 and t_max must be strictly positive")
    n_scale = fluid.P0 * t_max**2 / (fluid.rho * R0**2)
    return Scales(a=R0, tau=t_max, P_star=fluid.P0, n_scale=n_scale)


def dimensionless_groups(fluid: FluidParams, scales: Scales) -> DimensionlessGroups:
    """Re, We, M and the gas-pressure ratio for the given fluid and scales."""
    a, tau = scales.a, scales.tau
    Re = fluid.rho * a**2 / (fluid.mu * tau) if fluid.mu > 0 else math.inf
    We = fluid.rho * a**3 / (fluid.S * tau**2) if fluid.S > 0 else math.inf
    M = a / (tau * fluid.c) if math.isfinite(fluid.c) else 0.0
    pg0 = fluid.gas_pressure_at_rest(scales.a)
    return DimensionlessGroups(
        Re=Re,
        We=We,
        M=M,
        pg0_ratio=scales.n_scale * pg0 / scales.P_star,
        n_scale=scales.n_scale,
        k=fluid.k,
    )


def equilibrium_gas_pressure(fluid: FluidParams, R0: float) -> float:
    """Gas pressure that balances ambient pressure plus surface tension at R0.

    With this P_G0 the unforced bubble sits exactly at the fixed point
    (r_bar, rdot_bar) = (1, 0).
    """
    if not R0 > 0:
        raise DomainError("R0 must be strictly positive")
    return fluid.P0 + 2.0 * fluid.S / R0


def gas_pressure(r_bar, groups: DimensionlessGroups):
    """Polytropic internal gas pressure term pg0_ratio * r_bar**(-3k)."""
    r = np.asarray(r_bar, dtype=float)
    if np.any(r <= 0):
        raise DomainError("gas_pressure requires r_bar > 0")
    out = groups.pg0_ratio * r ** (-3.0 * groups.k)
    return float(out) if np.isscalar(r_bar) else out


def rp_rhs(state, p_bar: float, groups: DimensionlessGroups) -> np.ndarray:
    """State derivative [rdot, rddot] of the incompressible radial equation.

    rddot = (1/r) [ pg0_ratio r^-3k - n p_bar - (4/Re) rdot/r - (2/We)/r
                    - (3/2) rdot^2 ].
    """
    r, v = float(state[0]), float(state[1])
    if r <= 0:
        raise SingularityError(f"bubble radius collapsed to r_bar={r}")
    inv_r = 1.0 / r
    bracket = (
        groups.pg0_ratio * r ** (-3.0 * groups.k)
        - groups.n_scale * p_bar
        - groups.visc * (v * inv_r)
        - groups.surf * inv_r
    )
    acc = (bracket - 1.5 * (v * v)) / r
    return np.array([v, acc])


def km_rhs(state, p_bar: float, dp_bar: float, groups: DimensionlessGroups) -> np.ndarray:
    """State derivative [rdot, rddot] of the compressible (finite sound speed)
    radial equation in first-order form.

    The acceleration is the appendix state form: pressure bracket scaled by
    (1 + M rdot), the M-proportional bracket with the gas-pressure-rate and
    forcing-rate terms, minus the (3/2)(1 - M rdot/3) rdot^2 kinetic term, all
    over (1 - M rdot) r + 4M/Re.  At M = 0 this reduces bit-exactly to
    :func:`rp_rhs` (term order is shared).
    """
    r, v = float(state[0]), float(state[1])
    if r <= 0:
        raise SingularityError(f"bubble radius collapsed to r_bar={r}")
    M = groups.M
    inv_r = 1.0 / r
    u = r ** (-3.0 * groups.k)
    b1 = (
        groups.pg0_ratio * u
        - groups.n_scale * p_bar
        - groups.visc * (v * inv_r)
        - groups.surf * inv_r
    )
    b2 = (
        -3.0 * groups.k * groups.pg0_ratio * u * v
        + groups.surf * (v * inv_r)
        + groups.visc * (v * v * inv_r)
        - groups.n_scale * (r * dp_bar)
    )
    kinetic = 1.5 * (v * v) * (1.0 - (M / 3.0) * v)
    numer = (1.0 + M * v) * b1 + M * b2 - kinetic
    denom = (1.0 - M * v) * r + M * groups.visc  # + 4M/Re
    if abs(denom) < 1e-12:
        raise DegenerateStateError(
            f"(1 - M rdot) r + 4M/Re = {denom} vanishes at state ({r}, {v})"
        )
    return np.array([v, numer / denom])


def rp_rhs_jacobian(state, p_bar: float, groups: DimensionlessGroups) -> np.ndarray:
    """2x2 Jacobian d(rhs)/d(state) of :func:`rp_rhs` (used by the discrete
    adjoint of the residual operator)."""
    r, v = float(state[0]), float(state[1])
    if r <= 0:
        raise SingularityError(f"bubble radius collapsed to r_bar={r}")
    inv_r = 1.0 / r
    u = r ** (-3.0 * groups.k)
    bracket = (
        groups.pg0_ratio * u
        - groups.n_scale * p_bar
        - groups.visc * (v * inv_r)
        - groups.surf * inv_r
    )
    acc = (bracket - 1.5 * (v * v)) / r
    d_bracket_dr = (
        -3.0 * groups.k * groups.pg0_ratio * u * inv_r
        + groups.visc * v * inv_r * inv_r
        + groups.surf * inv_r * inv_r
    )
    da_dr = d_bracket_dr * inv_r - acc * inv_r
    da_dv = (-groups.visc * inv_r - 3.0 * v) * inv_r
    return np.array([[0.0, 1.0], [da_dr, da_dv]])


def km_rhs_jacobian(state, p_bar: float, dp_bar: float, groups: DimensionlessGroups) -> np.ndarray:
    """2x2 Jacobian d(rhs)/d(state) of :func:`km_rhs`."""
    r, v = float(state[0]), float(state[1])
    if r <= 0:
        raise SingularityError(f"bubble radius collapsed to r_bar={r}")
    M = groups.M
    inv_r = 1.0 / r
    u = r ** (-3.0 * groups.k)
    threek = 3.0 * groups.k
    b1 = (
        groups.pg0_ratio * u
        - groups.n_scale * p_bar
        - groups.visc * (v * inv_r)
        - groups.surf * inv_r
    )
    b2 = (
        -threek * groups.pg0_ratio * u * v
        + groups.surf * (v * inv_r)
        + groups.visc * (v * v * inv_r)
        - groups.n_scale * (r * dp_bar)
    )
    kinetic = 1.5 * (v * v) * (1.0 - (M / 3.0) * v)
    numer = (1.0 + M * v) * b1 + M * b2 - kinetic
    denom = (1.0 - M * v) * r + M * groups.visc  # + 4M/Re
    if abs(denom) < 1e-12:
        raise DegenerateStateError(
            f"(1 - M rdot) r + 4M/Re = {denom} vanishes at state ({r}, {v})"
        )
    acc = numer / denom

    db1_dr = (
        -threek * groups.pg0_ratio * u * inv_r
        + groups.visc * v * inv_r * inv_r
        + groups.surf * inv_r * inv_r
    )
    db1_dv = -groups.visc * inv_r
    db2_dr = (
        threek * threek * groups.pg0_ratio * u * v * inv_r
        - groups.surf * v * inv_r * inv_r
        - groups.visc * v * v * inv_r * inv_r
        - groups.n_scale * dp_bar
    )
    db2_dv = -threek * groups.pg0_ratio * u + groups.surf * inv_r + 2.0 * groups.visc * v * inv_r
    dkin_dv = 3.0 * v - 1.5 * M * (v * v)
    dn_dr = (1.0 + M * v) * db1_dr + M * db2_dr
    dn_dv = M * b1 + (1.0 + M * v) * db1_dv + M * db2_dv - dkin_dv
    dd_dr = 1.0 - M * v
    dd_dv = -M * r
    da_dr = (dn_dr - acc * dd_dr) / denom
    da_dv = (dn_dv - acc * dd_dv) / denom
    return np.array([[0.0, 1.0], [da_dr, da_dv]])


def pressure_closures(amp: float, freq: float, fluid: FluidParams, scales: Scales):
    """Analytic non-dimensional forcing (p_bar(t_bar), dp_bar(t_bar)).

    P_inf(t) = P0 + amp sin(2 pi freq t); both closures accept scalars or
    arrays of non-dimensional time.
    """
    if amp < 0:
        raise DomainError("amp must be non-negative")
    if not freq > 0:
        raise DomainError("freq must be strictly positive")
    omega_bar = 2.0 * math.pi * freq * scales.tau
    p0_bar = fluid.P0 / scales.P_star
    amp_bar = amp / scales.P_star

    def p_bar(t_bar):
        return p0_bar + amp_bar * np.sin(omega_bar * np.asarray(t_bar))

    def dp_bar(t_bar):
        return amp_bar * omega_bar * np.cos(omega_bar * np.asarray(t_bar))

    return p_bar, dp_bar


def sinusoidal_pressure(
    amp: float, freq: float, fluid: FluidParams, scales: Scales, n_points: int
) -> PressureProfile:
    """Sample the sinusoidal forcing on the uniform non-dimensional grid
    [0, 1] (n_points nodes, both endpoints included)."""
    if n_points < 2:
        raise DomainError("n_points must be >= 2")
    p_fn, dp_fn = pressure_closures(amp, freq, fluid, scales)
    t_grid = np.linspace(0.0, 1.0, n_points)
    return PressureProfile(
        t_grid=t_grid,
        p_bar=p_fn(t_grid),
        dp_bar=dp_fn(t_grid),
        amp=amp,
        freq=freq,
        n_points=n_points,
    )


def groups_with_mach(groups: DimensionlessGroups, M: float) -> DimensionlessGroups:
    """Copy of ``groups`` with the Mach number replaced (limit studies)."""
    return replace(groups, M=M)
