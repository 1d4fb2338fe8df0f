"""Dormand-Prince RK5(4)7M integration and the discrete residual operator.

One hard-coded tableau: 7 stages, 5th-order propagation with an embedded
4th-order error estimate, FSAL (the 7th stage of an accepted step is the first
stage of the next).  The same b5 weights define the one-step residual operator
used by the physics loss; the embedded b4 weights serve adaptive step control
and convergence diagnostics only.

``integrate_adaptive`` accepts either a plain callable f(t, y) (pure-Python
loop, used for generic problems and as a cross-check) or a :class:`BubbleODE`
(dispatched to a compiled kernel; see kernels.py).  Both paths run the same
controller: scaled RMS error norm, safety 0.9, growth factor clipped to
[0.2, 5.0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, SingularityError, StiffnessError
from .physics import DimensionlessGroups, FluidParams, Scales, km_rhs, pressure_closures

# RK5(4)7M tableau (exact rationals)
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = np.zeros((7, 7))
A[1, 0] = 1 / 5
A[2, :2] = (3 / 40, 9 / 40)
A[3, :3] = (44 / 45, -56 / 15, 32 / 9)
A[4, :4] = (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729)
A[5, :5] = (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656)
A[6, :6] = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)

# 4th-order continuous extension (Shampine interpolant):
# y(t + theta*h) = y + h * sum_i k_i * sum_j P[i, j] * theta**(j+1)
P_DENSE = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
UNDERFLOW_FRACTION = 1e-14  # dt below this fraction of the span -> stiffness error


def _validate_tableau():
    row_sums = A.sum(axis=1)
    if not np.allclose(row_sums, C, rtol=0.0, atol=1e-15):
        raise AssertionError("tableau row sums do not match the stage nodes")
    for total in (B5.sum(), B4.sum()):
        if abs(total - 1.0) > 1e-15:
            raise AssertionError("tableau weights do not sum to 1")
    if not np.allclose(A[6, :6], B5[:6], rtol=0.0, atol=0.0):
        raise AssertionError("FSAL: last stage row must equal the b5 weights")


_validate_tableau()


@dataclass
class BubbleTrajectory:
    """Solved (radius, velocity) history on a uniform non-dimensional grid."""

    t_grid: np.ndarray
    r_bar: np.ndarray
    rdot_bar: np.ndarray
    meta: dict = field(default_factory=dict)


class BubbleODE:
    """Bubble state-derivative packaged with its analytic forcing.

    Callable as f(t_bar, y); also exposes the flat coefficient vector consumed
    by the compiled fast path.  The incompressible model is the M = 0 instance
    of the compressible state form (bit-exact reduction).
    """

    def __init__(
        self,
        model: str,
        groups: DimensionlessGroups,
        amp: float,
        freq: float,
        fluid: FluidParams,
        scales: Scales,
    ):
        if model not in ("RP", "KM"):
            raise DomainError(f"unknown bubble model {model!r}")
        self.model = model
        self.groups = groups if model == "KM" else DimensionlessGroups(
            Re=groups.Re,
            We=groups.We,
            M=0.0,
            pg0_ratio=groups.pg0_ratio,
            n_scale=groups.n_scale,
            k=groups.k,
        )
        self.amp = amp
        self.freq = freq
        self.p0_bar = fluid.P0 / scales.P_star
        self.amp_bar = amp / scales.P_star
        self.omega_bar = 2.0 * math.pi * freq * scales.tau
        self.p_fn, self.dp_fn = pressure_closures(amp, freq, fluid, scales)

    def __call__(self, t, y):
        return km_rhs(y, float(self.p_fn(t)), float(self.dp_fn(t)), self.groups)

    def coefficients(self) -> np.ndarray:
        """[three_k, pg0_ratio, n_scale, visc, surf, M, p0_bar, amp_bar, omega_bar]"""
        g = self.groups
        return np.array(
            [
                3.0 * g.k,
                g.pg0_ratio,
                g.n_scale,
                g.visc,
                g.surf,
                g.M,
                self.p0_bar,
                self.amp_bar,
                self.omega_bar,
            ]
        )


def rk_step(f: Callable, y: np.ndarray, t: float, dt: float, k1: np.ndarray | None = None):
    """One RK5(4)7M step from (t, y).

    Returns (y5, y4, K) where K has shape (7, len(y)).  Pass the previous
    step's K[6] as ``k1`` to exploit FSAL (saves one derivative evaluation).
    """
    if not dt > 0:
        raise DomainError("dt must be strictly positive")
    y = np.asarray(y, dtype=float)
    K = np.empty((7, y.size))
    K[0] = k1 if k1 is not None else f(t, y)
    for j in range(1, 7):
        yj = y + dt * (A[j, :j] @ K[:j])
        K[j] = f(t + C[j] * dt, yj)
    y5 = y + dt * (B5 @ K)
    y4 = y + dt * (B4 @ K)
    return y5, y4, K


def integrate_fixed(f: Callable, y0, t_grid: np.ndarray) -> np.ndarray:
    """March the 5th-order step over a uniform increasing grid.

    Returns the (n, dim) state history.  A singularity raised by ``f`` aborts
    with the failing node index attached.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    _require_uniform(t_grid)
    y = np.asarray(y0, dtype=float).copy()
    out = np.empty((t_grid.size, y.size))
    out[0] = y
    dt = t_grid[1] - t_grid[0]
    k1 = None
    for i in range(t_grid.size - 1):
        try:
            y, _, K = rk_step(f, y, t_grid[i], dt, k1=k1)
        except SingularityError as exc:
            raise SingularityError(str(exc), t_index=i) from None
        k1 = K[6]  # FSAL
        out[i + 1] = y
    return out


def residual_operator(y_n, y_n1, f: Callable, t_n: float, dt: float) -> np.ndarray:
    """One-step defect G = y_{n+1} - (y_n + dt * sum_j b5_j k_j).

    Zero (to roundoff) exactly when y_{n+1} is the 5th-order prediction from
    y_n; affine in y_{n+1}.
    """
    y5, _, _ = rk_step(f, np.asarray(y_n, dtype=float), t_n, dt)
    return np.asarray(y_n1, dtype=float) - y5


def _require_uniform(t_grid: np.ndarray):
    if t_grid.ndim != 1 or t_grid.size < 2:
        raise DomainError("t_grid must be a 1-D array with at least 2 nodes")
    dts = np.diff(t_grid)
    if np.any(dts <= 0):
        raise DomainError("t_grid must be strictly increasing")
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0.0):
        raise DomainError("t_grid must be uniform")


def _error_norm(err, y_old, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return math.sqrt(float(np.mean((err / scale) ** 2)))


def dense_eval(y_old: np.ndarray, K: np.ndarray, dt: float, theta) -> np.ndarray:
    """Evaluate the 4th-order interpolant at fraction(s) theta of the step."""
    theta = np.asarray(theta, dtype=float)
    powers = np.stack([theta, theta**2, theta**3, theta**4])  # (4, m)
    interp = (K.T @ P_DENSE) @ powers  # (dim, m)
    return y_old[:, None] + dt * interp


def integrate_adaptive(
    f,
    y0,
    t_span: tuple[float, float],
    rtol: float,
    atol: float,
    t_eval: np.ndarray | None = None,
    max_step: float = math.inf,
    first_step: float | None = None,
):
    """Embedded-error adaptive integration over t_span.

    Returns (t_eval, y_eval) with y_eval of shape (len(t_eval), dim), sampled
    from the 4th-order continuous extension; with ``t_eval=None`` only the
    endpoint state is returned as a length-1 grid.  ``f`` may be a
    :class:`BubbleODE` (compiled fast path) or any callable f(t, y).
    """
    if not (rtol > 0 and atol > 0):
        raise DomainError("rtol and atol must be strictly positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise DomainError("t_span must be increasing")
    if t_eval is None:
        t_eval = np.array([t1])
    else:
        t_eval = np.asarray(t_eval, dtype=float)
        if np.any(t_eval < t0) or np.any(t_eval > t1) or np.any(np.diff(t_eval) <= 0):
            raise DomainError("t_eval must be increasing and inside t_span")

    if isinstance(f, BubbleODE):
        from . import kernels

        return t_eval, kernels.integrate_bubble_adaptive(
            f, np.asarray(y0, dtype=float), t0, t1, rtol, atol, t_eval, max_step, first_step
        )
    return t_eval, _integrate_adaptive_python(
        f, np.asarray(y0, dtype=float), t0, t1, rtol, atol, t_eval, max_step, first_step
    )


def _integrate_adaptive_python(f, y0, t0, t1, rtol, atol, t_eval, max_step, first_step):
    span = t1 - t0
    dt = min(span, max_step) if first_step is None else min(first_step, span, max_step)
    t, y = t0, y0.copy()
    out = np.empty((t_eval.size, y0.size))
    n_filled = 0
    if t_eval.size and t_eval[0] == t0:
        out[0] = y
        n_filled = 1
    k1 = None
    while t < t1:
        if dt < UNDERFLOW_FRACTION * span:
            raise StiffnessError(f"step size underflow at t={t}")
        h = min(dt, t1 - t)  # executed step; dt stays the controller's proposal
        last = h >= t1 - t
        try:
            y5, y4, K = rk_step(f, y, t, h, k1=k1)
            bad = not (np.all(np.isfinite(y5)) and np.all(np.isfinite(y4)))
        except SingularityError:
            bad = True
        if bad:
            dt = h * MIN_FACTOR  # k1 stays valid: (t, y) unchanged
            continue
        err = _error_norm(y5 - y4, y, y5, rtol, atol)
        if err <= 1.0:
            # fill dense output inside (t, t + h]
            t_next = t1 if last else t + h
            while n_filled < t_eval.size and t_eval[n_filled] <= t_next:
                theta = (t_eval[n_filled] - t) / h
                out[n_filled] = dense_eval(y, K, h, np.array([theta]))[:, 0]
                n_filled += 1
            t = t_next
            y = y5
            k1 = K[6]
            factor = MAX_FACTOR if err == 0.0 else min(MAX_FACTOR, SAFETY * err**-0.2)
        else:
            factor = max(MIN_FACTOR, SAFETY * err**-0.2)
        dt = min(h * factor, max_step)
    return out
