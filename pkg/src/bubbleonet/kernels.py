"""Compiled hot loops (numba).

Three kernels live here:

* the adaptive bubble integration core (same controller as the pure-Python
  path in integrate.py, specialized to the 2-state bubble models with the
  sinusoidal forcing inlined);
* the batched one-step residual operator and its hand-derived discrete
  adjoint, used by the physics loss (only stages 1-6 are evaluated: the 7th
  stage has zero 5th-order weight and feeds nothing else);
* a table-driven CRC32C (Castagnoli) for dataset payload integrity.

All kernels are sequential and allocation-free in their inner loops, so
results are bit-reproducible run to run.  Non-finite intermediates (e.g. a
stage radius driven through zero by a wild network prediction) propagate as
NaN inside the residual kernels by design; the training loop treats a
non-finite loss as a hard abort.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import StiffnessError
from . import integrate as _int

_A = _int.A
_B5 = _int.B5
_B4 = _int.B4
_C = _int.C
_P = _int.P_DENSE

# per-sample coefficient row layout for the residual kernels
#   [three_k, pg0_ratio, n_scale, visc(=4/Re), surf(=2/We), M, fourMRe(=4M/Re)]
N_COEF = 7


@njit(cache=True, inline="always")
def _rhs_acc(r, v, p, dp, three_k, pg, nsc, visc, surf, M, fourMRe):
    """Acceleration of the compressible state form.  The M == 0 branch is the
    incompressible model and produces bit-identical values to the general
    expression evaluated at M = 0 (multiplications by 1.0 and additions of 0.0
    are exact), it just skips the dead compressible bracket."""
    inv_r = 1.0 / r
    u = math.exp(-three_k * math.log(r)) if r > 0.0 else r ** (-three_k)
    b1 = pg * u - nsc * p - visc * (v * inv_r) - surf * inv_r
    if M == 0.0:
        return (b1 - 1.5 * (v * v)) / r, u
    b2 = (
        -three_k * pg * u * v
        + surf * (v * inv_r)
        + visc * (v * v * inv_r)
        - nsc * (r * dp)
    )
    kin = 1.5 * (v * v) * (1.0 - (M / 3.0) * v)
    numer = (1.0 + M * v) * b1 + M * b2 - kin
    denom = (1.0 - M * v) * r + fourMRe
    return numer / denom, u


@njit(cache=True, inline="always")
def _rhs_jac(r, v, p, dp, u, three_k, pg, nsc, visc, surf, M, fourMRe):
    """(d acc/d r, d acc/d v) at a stage state; ``u = r**(-3k)`` is reused
    from the forward sweep."""
    inv_r = 1.0 / r
    b1 = pg * u - nsc * p - visc * (v * inv_r) - surf * inv_r
    db1_dr = -three_k * pg * u * inv_r + visc * v * inv_r * inv_r + surf * inv_r * inv_r
    db1_dv = -visc * inv_r
    if M == 0.0:
        acc = (b1 - 1.5 * (v * v)) / r
        j21 = db1_dr * inv_r - acc * inv_r
        j22 = (db1_dv - 3.0 * v) * inv_r
        return j21, j22
    b2 = (
        -three_k * pg * u * v
        + surf * (v * inv_r)
        + visc * (v * v * inv_r)
        - nsc * (r * dp)
    )
    kin = 1.5 * (v * v) * (1.0 - (M / 3.0) * v)
    numer = (1.0 + M * v) * b1 + M * b2 - kin
    denom = (1.0 - M * v) * r + fourMRe
    acc = numer / denom
    db2_dr = (
        three_k * three_k * pg * u * v * inv_r
        - surf * v * inv_r * inv_r
        - visc * v * v * inv_r * inv_r
        - nsc * dp
    )
    db2_dv = -three_k * pg * u + surf * inv_r + 2.0 * visc * v * inv_r
    dkin_dv = 3.0 * v - 1.5 * M * (v * v)
    dn_dr = (1.0 + M * v) * db1_dr + M * db2_dr
    dn_dv = M * b1 + (1.0 + M * v) * db1_dv + M * db2_dv - dkin_dv
    dd_dr = 1.0 - M * v
    dd_dv = -M * r
    j21 = (dn_dr - acc * dd_dr) / denom
    j22 = (dn_dv - acc * dd_dv) / denom
    return j21, j22


# ---------------------------------------------------------------------------
# adaptive integration fast path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _adaptive_core(y0, t0, t1, rtol, atol, t_eval, max_step, first_step, coef, out):
    three_k = coef[0]
    pg = coef[1]
    nsc = coef[2]
    visc = coef[3]
    surf = coef[4]
    M = coef[5]
    fourMRe = coef[6]
    p0_bar = coef[7]
    amp_bar = coef[8]
    omega = coef[9]

    span = t1 - t0
    dt = min(span, max_step)
    if first_step > 0.0:
        dt = min(first_step, dt)
    t = t0
    r = y0[0]
    v = y0[1]
    kr = np.empty(7)
    kv = np.empty(7)
    n_filled = 0
    if t_eval.shape[0] > 0 and t_eval[0] == t0:
        out[0, 0] = r
        out[0, 1] = v
        n_filled = 1
    have_k1 = False
    n_eval = t_eval.shape[0]
    while t < t1:
        if dt < 1e-14 * span:
            return 1, t  # stiffness: step underflow
        h = dt if dt < t1 - t else t1 - t
        last = h >= t1 - t
        # stages
        if not have_k1:
            p = p0_bar + amp_bar * np.sin(omega * t)
            dp = amp_bar * omega * np.cos(omega * t)
            acc, _ = _rhs_acc(r, v, p, dp, three_k, pg, nsc, visc, surf, M, fourMRe)
            kr[0] = v
            kv[0] = acc
        bad = False
        for j in range(1, 7):
            rj = r
            vj = v
            for l in range(j):
                rj += h * _A[j, l] * kr[l]
                vj += h * _A[j, l] * kv[l]
            tj = t + _C[j] * h
            p = p0_bar + amp_bar * np.sin(omega * tj)
            dp = amp_bar * omega * np.cos(omega * tj)
            acc, _ = _rhs_acc(rj, vj, p, dp, three_k, pg, nsc, visc, surf, M, fourMRe)
            kr[j] = vj
            kv[j] = acc
            if not (np.isfinite(acc) and np.isfinite(vj)):
                bad = True
                break
        if not bad:
            s5r = 0.0
            s5v = 0.0
            s4r = 0.0
            s4v = 0.0
            for j in range(7):
                s5r += _B5[j] * kr[j]
                s5v += _B5[j] * kv[j]
                s4r += _B4[j] * kr[j]
                s4v += _B4[j] * kv[j]
            y5r = r + h * s5r
            y5v = v + h * s5v
            y4r = r + h * s4r
            y4v = v + h * s4v
            bad = not (np.isfinite(y5r) and np.isfinite(y5v) and np.isfinite(y4r) and np.isfinite(y4v))
        if bad:
            dt = h * 0.2
            continue
        sc_r = atol + rtol * max(abs(r), abs(y5r))
        sc_v = atol + rtol * max(abs(v), abs(y5v))
        er = (y5r - y4r) / sc_r
        ev = (y5v - y4v) / sc_v
        err = np.sqrt((er * er + ev * ev) / 2.0)
        if err <= 1.0:
            t_next = t1 if last else t + h
            while n_filled < n_eval and t_eval[n_filled] <= t_next:
                theta = (t_eval[n_filled] - t) / h
                th2 = theta * theta
                th3 = th2 * theta
                th4 = th3 * theta
                sr = 0.0
                sv = 0.0
                for j in range(7):
                    w = _P[j, 0] * theta + _P[j, 1] * th2 + _P[j, 2] * th3 + _P[j, 3] * th4
                    sr += kr[j] * w
                    sv += kv[j] * w
                out[n_filled, 0] = r + h * sr
                out[n_filled, 1] = v + h * sv
                n_filled += 1
            t = t_next
            r = y5r
            v = y5v
            kr[0] = kr[6]
            kv[0] = kv[6]
            have_k1 = True
            if err == 0.0:
                factor = 5.0
            else:
                factor = 0.9 * err ** -0.2
                if factor > 5.0:
                    factor = 5.0
        else:
            factor = 0.9 * err ** -0.2
            if factor < 0.2:
                factor = 0.2
        dt = h * factor
        if dt > max_step:
            dt = max_step
    return 0, t1


def integrate_bubble_adaptive(ode, y0, t0, t1, rtol, atol, t_eval, max_step, first_step):
    """Driver for the compiled adaptive core; raises on step underflow."""
    coef10 = ode.coefficients()
    g = ode.groups
    coef = np.array(
        [
            coef10[0],  # three_k
            coef10[1],  # pg0_ratio
            coef10[2],  # n_scale
            coef10[3],  # visc
            coef10[4],  # surf
            coef10[5],  # M
            coef10[5] * coef10[3],  # 4M/Re
            coef10[6],  # p0_bar
            coef10[7],  # amp_bar
            coef10[8],  # omega_bar
        ]
    )
    out = np.empty((t_eval.size, 2))
    status, t_fail = _adaptive_core(
        np.asarray(y0, dtype=float),
        float(t0),
        float(t1),
        float(rtol),
        float(atol),
        np.asarray(t_eval, dtype=float),
        float(max_step),
        -1.0 if first_step is None else float(first_step),
        coef,
        out,
    )
    if status == 1:
        raise StiffnessError(f"step size underflow at t={t_fail}")
    return out


# ---------------------------------------------------------------------------
# batched residual operator + adjoint
# ---------------------------------------------------------------------------


@njit(cache=True)
def _residual_fwd(R, V, p_st, dp_st, coefs, dt, res, k_r, k_v, u_s):
    B, n = R.shape
    nw = n - 1
    adt = dt * _A
    bdt = dt * _B5
    for b in range(B):
        three_k = coefs[b, 0]
        pg = coefs[b, 1]
        nsc = coefs[b, 2]
        visc = coefs[b, 3]
        surf = coefs[b, 4]
        M = coefs[b, 5]
        fourMRe = coefs[b, 6]
        for i in range(nw):
            r0 = R[b, i]
            v0 = V[b, i]
            sr = 0.0
            sv = 0.0
            for j in range(6):
                rj = r0
                vj = v0
                for l in range(j):
                    a = adt[j, l]
                    rj += a * k_r[b, i, l]
                    vj += a * k_v[b, i, l]
                acc, u = _rhs_acc(
                    rj, vj, p_st[b, i, j], dp_st[b, i, j],
                    three_k, pg, nsc, visc, surf, M, fourMRe,
                )
                k_r[b, i, j] = vj
                k_v[b, i, j] = acc
                u_s[b, i, j] = u
                sr += bdt[j] * vj
                sv += bdt[j] * acc
            res[b, 0, i] = R[b, i + 1] - (r0 + sr)
            res[b, 1, i] = V[b, i + 1] - (v0 + sv)


@njit(cache=True)
def _residual_bwd(gres, R, V, p_st, dp_st, coefs, dt, k_r, k_v, u_s, gR, gV):
    B, n = R.shape
    nw = n - 1
    adt = dt * _A
    bdt = dt * _B5
    cr = np.empty(6)
    cv = np.empty(6)
    for b in range(B):
        three_k = coefs[b, 0]
        pg = coefs[b, 1]
        nsc = coefs[b, 2]
        visc = coefs[b, 3]
        surf = coefs[b, 4]
        M = coefs[b, 5]
        fourMRe = coefs[b, 6]
        for i in range(nw):
            gr = gres[b, 0, i]
            gv = gres[b, 1, i]
            gR[b, i + 1] += gr
            gV[b, i + 1] += gv
            g0r = -gr
            g0v = -gv
            for j in range(6):
                cr[j] = -bdt[j] * gr
                cv[j] = -bdt[j] * gv
            r0 = R[b, i]
            v0 = V[b, i]
            for j in range(5, -1, -1):
                rj = r0
                vj = v0
                for l in range(j):
                    a = adt[j, l]
                    rj += a * k_r[b, i, l]
                    vj += a * k_v[b, i, l]
                j21, j22 = _rhs_jac(
                    rj, vj, p_st[b, i, j], dp_st[b, i, j], u_s[b, i, j],
                    three_k, pg, nsc, visc, surf, M, fourMRe,
                )
                wr = j21 * cv[j]
                wv = cr[j] + j22 * cv[j]
                g0r += wr
                g0v += wv
                for l in range(j):
                    a = adt[j, l]
                    cr[l] += a * wr
                    cv[l] += a * wv
            gR[b, i] += g0r
            gV[b, i] += g0v


class ResidualWorkspace:
    """Reusable buffers for the residual kernels (allocate once per shape;
    re-allocating tens of MB per training step costs more than the math)."""

    def __init__(self, B, n):
        nw = n - 1
        self.B = B
        self.n = n
        self.k_r = np.empty((B, nw, 6))
        self.k_v = np.empty((B, nw, 6))
        self.u = np.empty((B, nw, 6))
        self.res = np.empty((B, 2, nw))
        self.gR = np.empty((B, n))
        self.gV = np.empty((B, n))


def residual_batch(R, V, p_stage, dp_stage, coef_rows, dt, ws=None):
    """Batched one-step defect on every grid window.

    R, V: (B, n) predicted radius / wall velocity; p_stage, dp_stage:
    (B, n-1, 6) forcing at the stage times; coef_rows: (B, N_COEF).
    Returns (res, workspace) with res of shape (B, 2, n-1); ``res`` is owned
    by the workspace and overwritten by the next call that reuses it.
    """
    B, n = R.shape
    if ws is None or ws.B != B or ws.n != n:
        ws = ResidualWorkspace(B, n)
    _residual_fwd(R, V, p_stage, dp_stage, coef_rows, dt, ws.res, ws.k_r, ws.k_v, ws.u)
    return ws.res, ws


def residual_batch_vjp(gres, R, V, p_stage, dp_stage, coef_rows, dt, ws):
    """Adjoint of :func:`residual_batch`: gradients w.r.t. R and V (owned by
    the workspace, overwritten on the next call)."""
    ws.gR[:] = 0.0
    ws.gV[:] = 0.0
    _residual_bwd(
        gres, R, V, p_stage, dp_stage, coef_rows, dt, ws.k_r, ws.k_v, ws.u, ws.gR, ws.gV
    )
    return ws.gR, ws.gV


def stage_times(t_grid):
    """Stage evaluation times for every window: shape (n-1, 6)."""
    t_grid = np.asarray(t_grid, dtype=float)
    dt = t_grid[1] - t_grid[0]
    return t_grid[:-1, None] + _C[None, :6] * dt


# ---------------------------------------------------------------------------
# CRC32C (Castagnoli), table-driven
# ---------------------------------------------------------------------------


def _make_crc32c_table():
    poly = 0x82F63B78
    tbl = np.empty(256, dtype=np.uint32)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if (c & 1) else c >> 1
        tbl[i] = c
    return tbl


_CRC32C_TABLE = _make_crc32c_table()


@njit(cache=True)
def _crc32c_loop(buf, tbl):
    crc = np.uint32(0xFFFFFFFF)
    for i in range(buf.shape[0]):
        crc = tbl[(crc ^ buf[i]) & np.uint32(0xFF)] ^ (crc >> np.uint32(8))
    return crc ^ np.uint32(0xFFFFFFFF)


def crc32c(data: bytes | bytearray | memoryview | np.ndarray) -> int:
    """CRC32C checksum (check vector: crc32c(b"123456789") == 0xE3069283)."""
    buf = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data.view(np.uint8)
    return int(_crc32c_loop(buf, _CRC32C_TABLE))
