"""Loss assembly and training loops.

The total objective is

    w_data * L_data + w_ode * L_ode (+ w_ic * L_ic in multi-radius mode)

where L_data sums squared radius error over time and averages over samples,
L_ode is the mean squared one-step defect of the predicted state trajectory
[R, dR/dt] under the 5th-order discrete operator (collocation grid = data
grid), and L_ic pins R(t=0) to 1 for every (sample, radius) pair.

Two training procedures are provided: plain end-to-end optimization of both
subnets, and the two-phase variant where the trunk is first fitted jointly
with free per-sample coefficients, its basis is orthonormalized by a thin
SVD, and the branch is then regressed onto the projected coefficients.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import kernels
from . import network as nw
from .autodiff import Tensor
from .datagen import DatasetManifest, DatasetReader
from .errors import (
    BasisDegeneracyError,
    ConfigError,
    ShapeError,
    TrainingDivergedError,
)
from .integrate import BubbleODE
from .physics import Scales, dimensionless_groups

SVD_RANK_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_data: float = 1.0
    w_ode: float = 100.0
    w_ic: float = 0.0

    def __post_init__(self):
        if self.w_data < 0 or self.w_ode < 0 or self.w_ic < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 200
    epochs: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    collocation: str = "data-grid"
    mode: str = "single-step"  # "single-step" | "two-step"
    k_fold: int | None = None
    auto_balance_ode: bool = False
    ode_loss_in_step1: bool = False
    step2_epochs: int | None = None
    step2_lr: float | None = None
    validate_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.collocation != "data-grid":
            raise ConfigError("only the data-grid collocation scheme is implemented")
        if self.mode not in ("single-step", "two-step"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class TrunkBasis:
    """Orthonormalized trunk snapshot from the two-phase procedure."""

    T_star: np.ndarray  # (n_grid, d) raw trunk latents on the full grid
    U: np.ndarray  # (n_grid, d) left singular vectors
    Sigma: np.ndarray  # (d,)
    V: np.ndarray  # (d, d)
    A_star: np.ndarray  # (n_train, d) fitted per-sample coefficients


def multi_radius_assemble(r0_values, t_grid):
    """Trunk input for k rest radii: row (j*n + i) = (t_i, r0_j), radius-major.

    Returns (X, (k, n)); a model output of shape (m, k*n) reshapes to
    (m, k, n) with the same row convention.
    """
    r0_values = np.asarray(r0_values, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    k, n = r0_values.size, t_grid.size
    X = np.empty((n * k, 2))
    X[:, 0] = np.tile(t_grid, k)
    X[:, 1] = np.repeat(r0_values, n)
    return X, (k, n)


# -- loss terms ----------------------------------------------------------------


def data_loss(pred, truth):
    """Mean over samples of the squared L2 norm over the remaining axes."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = np.asarray(truth, dtype=float)
    if p.data.shape != t.shape:
        raise ShapeError(f"data_loss shapes differ: {p.data.shape} vs {t.shape}")
    d = p - t
    return (d * d).sum() * (1.0 / t.shape[0])


def ic_loss(pred_t0, targets=1.0):
    """MSE of the t=0 prediction against the rest radius (non-dim 1)."""
    p = pred_t0 if isinstance(pred_t0, Tensor) else Tensor(pred_t0)
    d = p - targets
    return (d * d).mean()


@dataclass
class StageContext:
    """Per-batch constants of the physics loss: forcing at the window stage
    times, per-row model coefficients, grid step, reusable kernel buffers."""

    stage_p: np.ndarray  # (rows, n-1, 6)
    stage_dp: np.ndarray
    coef_rows: np.ndarray  # (rows, 7)
    dt: float
    ws: object | None = None


def rk_residual(R: Tensor, V: Tensor, ctx: StageContext) -> Tensor:
    """Tape node for the batched one-step defect (B, 2, n-1)."""

    res, ctx.ws = kernels.residual_batch(
        R.data, V.data, ctx.stage_p, ctx.stage_dp, ctx.coef_rows, ctx.dt, ctx.ws
    )

    def vjp(g):
        return kernels.residual_batch_vjp(
            np.ascontiguousarray(g), R.data, V.data,
            ctx.stage_p, ctx.stage_dp, ctx.coef_rows, ctx.dt, ctx.ws,
        )

    return ad.custom_op(res, (R, V), vjp)


def ode_loss(R, V, ctx: StageContext):
    """Mean over samples and windows of the squared residual norm."""
    R = R if isinstance(R, Tensor) else Tensor(R)
    V = V if isinstance(V, Tensor) else Tensor(V)
    res = rk_residual(R, V, ctx)
    rows, _, n_w = res.data.shape
    return (res * res).sum() * (1.0 / (rows * n_w))


def total_loss(parts: dict, weights: LossWeights):
    """w_data * L_data + w_ode * L_ode + w_ic * L_ic (missing parts count 0)."""
    total = None
    for key, w in (("data", weights.w_data), ("ode", weights.w_ode), ("ic", weights.w_ic)):
        term = parts.get(key)
        if term is None:
            continue
        term = term * w
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("total_loss needs at least one loss part")
    return total


# -- training data -----------------------------------------------------------------


@dataclass
class TrainingData:
    """Corpus organized for training: one row per forcing profile, carrying
    k radius curves (k = 1 in single-radius mode)."""

    model: str
    t_grid: np.ndarray  # (n,)
    r0_values: np.ndarray  # (k,)
    pressure: np.ndarray  # (N, n)
    radius: np.ndarray  # (N, k, n)
    rdot: np.ndarray  # (N, k, n)
    radius_coefs: np.ndarray  # (k, 7) residual-kernel coefficient rows
    stage_p: np.ndarray  # (N, n-1, 6)
    stage_dp: np.ndarray  # (N, n-1, 6)
    train_rows: np.ndarray
    val_rows: np.ndarray
    profile_ids: np.ndarray  # (N, k) source sample ids

    @property
    def k(self) -> int:
        return self.r0_values.size

    @property
    def n(self) -> int:
        return self.t_grid.size

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @classmethod
    def from_dataset(cls, manifest: DatasetManifest, reader: DatasetReader) -> "TrainingData":
        doe = manifest.doe
        fluid = manifest.fluid
        k = len(doe.r0_values)
        ok = [m for m in manifest.samples if m.status == "ok"]
        if not ok:
            raise ConfigError("dataset has no usable samples")
        # group by forcing profile (amp, freq); levels are exact linspace values
        profiles: dict[tuple, dict] = {}
        for m in ok:
            profiles.setdefault((m.amp, m.freq), {})[m.R0] = m
        keys = [key for key, d in profiles.items() if len(d) == k]
        if not keys:
            raise ConfigError("no forcing profile has all its radius curves")
        keys.sort(key=lambda key: (key[0], key[1]))
        r0s = sorted(doe.r0_values)
        n = doe.n_points
        N = len(keys)
        pressure = np.empty((N, n))
        radius = np.empty((N, k, n))
        rdot = np.empty((N, k, n))
        ids = np.empty((N, k), dtype=np.int64)
        t_grid = np.linspace(0.0, 1.0, n)
        for i, key in enumerate(keys):
            for j, r0 in enumerate(r0s):
                meta = profiles[key][r0]
                s = reader[meta.id]
                radius[i, j] = s.radius
                rdot[i, j] = s.rdot
                ids[i, j] = meta.id
                if j == 0:
                    pressure[i] = s.pressure.p_bar
        # per-radius coefficient rows (forcing-independent)
        radius_coefs = np.empty((k, kernels.N_COEF))
        for j, r0 in enumerate(r0s):
            meta = profiles[keys[0]][r0]
            scales = Scales(**meta.scales)
            ode = BubbleODE(
                doe.model, dimensionless_groups(fluid, scales), meta.amp, meta.freq,
                fluid, scales,
            )
            g = ode.groups
            radius_coefs[j] = (3 * g.k, g.pg0_ratio, g.n_scale, g.visc, g.surf, g.M, g.M * g.visc)
        # stage forcing (radius-independent: P_star = P0 for every radius)
        ts = kernels.stage_times(t_grid)
        stage_p = np.empty((N, n - 1, 6))
        stage_dp = np.empty((N, n - 1, 6))
        for i, key in enumerate(keys):
            meta = profiles[key][r0s[0]]
            scales = Scales(**meta.scales)
            ode = BubbleODE(
                doe.model, dimensionless_groups(fluid, scales), meta.amp, meta.freq,
                fluid, scales,
            )
            stage_p[i] = ode.p_fn(ts)
            stage_dp[i] = ode.dp_fn(ts)
        train_rows, val_rows = _rows_from_split(manifest, ids)
        return cls(
            model=doe.model,
            t_grid=t_grid,
            r0_values=np.asarray(r0s, dtype=float),
            pressure=pressure,
            radius=radius,
            rdot=rdot,
            radius_coefs=radius_coefs,
            stage_p=stage_p,
            stage_dp=stage_dp,
            train_rows=train_rows,
            val_rows=val_rows,
            profile_ids=ids,
        )


def _rows_from_split(manifest: DatasetManifest, ids: np.ndarray):
    if manifest.split is None:
        n = ids.shape[0]
        cut = max(1, int(np.floor(n * 0.2)))
        return np.arange(0, n - cut), np.arange(n - cut, n)
    train_ids = set(manifest.split["train"])
    val_ids = set(manifest.split["val"])
    train_rows, val_rows = [], []
    for i in range(ids.shape[0]):
        row = set(int(x) for x in ids[i])
        if row <= train_ids:
            train_rows.append(i)
        elif row <= val_ids:
            val_rows.append(i)
        else:
            raise ConfigError(
                "split mixes radii of one forcing profile across train/val; "
                "regenerate the dataset with a profile-consistent split"
            )
    return np.array(train_rows, dtype=np.int64), np.array(val_rows, dtype=np.int64)


def split_profiles(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Profile-level split: all radius curves of one forcing stay together.

    Equivalent to :func:`datagen.split` when there is a single rest radius.
    """
    from .errors import DomainError

    if not 0.0 < ratio < 1.0:
        raise DomainError("split ratio must be in (0, 1)")
    groups: dict[tuple, list[int]] = {}
    for m in manifest.samples:
        if m.status == "ok":
            groups.setdefault((m.amp, m.freq), []).append(m.id)
    keys = sorted(groups.keys())
    n = len(keys)
    if n < 2:
        raise DomainError("need at least 2 forcing profiles to split")
    n_val = max(1, n - int(np.floor(n * ratio)))
    perm = np.random.default_rng(seed).permutation(n)
    val_keys = {keys[i] for i in perm[n - n_val :]}
    train, val = [], []
    for key, ids in groups.items():
        (val if key in val_keys else train).extend(ids)
    manifest.split = {"ratio": ratio, "seed": seed, "train": sorted(train), "val": sorted(val)}
    return manifest


# -- shared helpers ---------------------------------------------------------------


def _trunk_input(data: TrainingData, arch: nw.NetworkArch) -> np.ndarray:
    if arch.trunk_input_dim == 1:
        if data.k != 1:
            raise ConfigError("multi-radius data needs a 2-column trunk input")
        return data.t_grid[:, None].copy()
    X, _ = multi_radius_assemble(data.r0_values / arch.r0_scale, data.t_grid)
    return X


def _batch_context(data: TrainingData, rows: np.ndarray, ctx_ws) -> StageContext:
    k = data.k
    sp = np.ascontiguousarray(data.stage_p[rows])
    sdp = np.ascontiguousarray(data.stage_dp[rows])
    if k > 1:
        sp = np.repeat(sp, k, axis=0)
        sdp = np.repeat(sdp, k, axis=0)
    coefs = np.ascontiguousarray(np.tile(data.radius_coefs, (rows.size, 1)))
    return StageContext(stage_p=sp, stage_dp=sdp, coef_rows=coefs, dt=data.dt, ws=ctx_ws)


def _predict(params, pressure_rows, trunk_in, k, n, need_derivative):
    R, V = nw.forward(params, pressure_rows, trunk_in, need_derivative)
    if k > 1:
        R3 = R.reshape(-1, k, n)
        V3 = V.reshape(-1, k, n) if V is not None else None
        return R3, V3, R3.reshape(-1, n), V3.reshape(-1, n) if V3 is not None else None
    return R, V, R, V


def validation_mse(params, data: TrainingData, trunk_in, rows=None) -> float:
    """Mean squared pointwise radius error over the validation rows."""
    rows = data.val_rows if rows is None else rows
    if rows.size == 0:
        return float("nan")
    R, _ = nw.forward(params, data.pressure[rows], trunk_in, need_derivative=False)
    pred = R.data.reshape(rows.size, data.k, data.n)
    return float(np.mean((pred - data.radius[rows]) ** 2))


def write_history(path: str, rows: list[dict]):
    cols = ["epoch", "L_data", "L_ode", "L_ic", "val_mse"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])


@dataclass
class TrainResult:
    params: nw.NetworkParams
    history: list
    best_val: float
    best_epoch: int
    best_state: list  # parameter arrays at the best-validation epoch
    meta: dict = field(default_factory=dict)

    def restore_best(self):
        for t, arr in zip(self.params.parameters(), self.best_state):
            t.data = arr.copy()
        return self.params


def _snapshot(params: nw.NetworkParams) -> list:
    return [t.data.copy() for t in params.parameters()]


def _loss_parts_finite(parts, epoch, rows):
    vals = {k: float(v.data) for k, v in parts.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise TrainingDivergedError(
            f"non-finite loss at epoch {epoch}",
            snapshot={"epoch": epoch, "batch_rows": rows.tolist(), **vals},
        )
    return vals


# -- single-step training -----------------------------------------------------------


def train_single(
    config: TrainConfig,
    arch: nw.NetworkArch,
    data: TrainingData,
    out_dir: str | None = None,
    log=None,
) -> TrainResult:
    """End-to-end optimization of branch + trunk under the combined loss."""
    params = nw.init_network(arch, seed=config.seed)
    return _fit(config, params, data, out_dir, log)


def _fit(config, params, data, out_dir, log) -> TrainResult:
    arch = params.arch
    weights = config.weights
    trunk_in = _trunk_input(data, arch)
    rng = np.random.default_rng(config.seed)
    tensors = params.parameters()
    opt = nw.AdamState.for_params(tensors, lr=config.lr)
    history: list[dict] = []
    best_val, best_epoch = np.inf, -1
    best_state = _snapshot(params)
    ctx_ws = None
    cadence = max(1, config.epochs // 100)
    n_train = data.train_rows.size
    if config.epochs > 0 and config.batch_size > n_train:
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds training-set size {n_train}"
        )
    use_ic = weights.w_ic > 0 and data.k > 1
    w_ode = weights.w_ode
    # batch membership comes from the shuffle; row order inside a batch is
    # canonicalized so the full-batch stage tables can be gathered once
    full_batch = config.batch_size >= n_train
    full_ctx = _batch_context(data, np.sort(data.train_rows), None) if full_batch else None
    for epoch in range(config.epochs):
        perm = data.train_rows[rng.permutation(n_train)]
        sums = {"data": 0.0, "ode": 0.0, "ic": 0.0}
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            rows = np.sort(perm[start : start + config.batch_size])
            ctx = full_ctx if full_batch else _batch_context(data, rows, ctx_ws)
            R3, V3, R2, V2 = _predict(
                params, data.pressure[rows], trunk_in, data.k, data.n, w_ode > 0
            )
            parts = {"data": data_loss(R3, data.radius[rows].reshape(R3.data.shape))}
            if w_ode > 0:
                parts["ode"] = ode_loss(R2, V2, ctx)
                ctx_ws = ctx.ws
            if use_ic:
                parts["ic"] = ic_loss(R3[:, :, 0])
            vals = _loss_parts_finite(parts, epoch, rows)
            if config.auto_balance_ode and epoch == 0 and n_batches == 0 and "ode" in parts:
                if vals["ode"] > 0:
                    w_ode = weights.w_data * vals["data"] / vals["ode"]
            loss = total_loss(parts, replace(weights, w_ode=w_ode))
            grads = nw.backward(loss, params)
            nw.adam_step(opt, tensors, grads)
            for key, v in vals.items():
                sums[key] += v
            n_batches += 1
        row = {
            "epoch": epoch,
            "L_data": sums["data"] / n_batches,
            "L_ode": sums["ode"] / n_batches,
            "L_ic": sums["ic"] / n_batches,
        }
        if epoch % config.validate_every == 0 or epoch == config.epochs - 1:
            row["val_mse"] = validation_mse(params, data, trunk_in)
            if row["val_mse"] < best_val:
                best_val, best_epoch = row["val_mse"], epoch
                best_state = _snapshot(params)
        history.append(row)
        if log is not None and (epoch % cadence == 0 or epoch == config.epochs - 1):
            log(
                f"epoch {epoch}: L_data={row['L_data']:.4e} L_ode={row['L_ode']:.4e}"
                + (f" val_mse={row['val_mse']:.4e}" if "val_mse" in row else "")
            )
        if out_dir is not None and epoch % cadence == 0:
            nw.save_checkpoint(params, os.path.join(out_dir, "model_periodic"))
    result = TrainResult(
        params=params,
        history=history,
        best_val=best_val,
        best_epoch=best_epoch,
        best_state=best_state,
        meta={"effective_w_ode": w_ode},
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        nw.save_checkpoint(params, os.path.join(out_dir, "model_final"))
        final_state = _snapshot(params)
        result.restore_best()
        nw.save_checkpoint(params, os.path.join(out_dir, "model_best"))
        for t, arr in zip(params.parameters(), final_state):
            t.data = arr
        write_history(os.path.join(out_dir, "history.csv"), history)
    return result


# -- two-step training ------------------------------------------------------------


def train_two_step(
    config: TrainConfig,
    arch: nw.NetworkArch,
    data: TrainingData,
    out_dir: str | None = None,
    log=None,
):
    """Trunk-then-branch training with an SVD-orthonormalized basis.

    Phase 1 jointly fits the trunk and one free coefficient row per training
    sample (prediction softplus(A_i T^T)); phase 2 computes the thin SVD
    T* = U S V^T of the trunk snapshot, sets branch targets c_i = A_i V S,
    and regresses the branch onto them.  At inference the trunk latents are
    mapped through V S^{-1}, so branch(P) (T V S^{-1})^T equals A T^T on the
    training grid when the branch hits its targets exactly.
    """
    if arch.trunk_K < 2:
        raise ConfigError("two-step mode expects a rowdy trunk (trunk_K >= 2)")
    params = nw.init_network(arch, seed=config.seed)
    trunk_in = _trunk_input(data, arch)
    d = arch.latent_dim
    rng = np.random.default_rng(config.seed)
    n_train = data.train_rows.size
    if config.epochs > 0 and config.batch_size > n_train:
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds training-set size {n_train}"
        )
    A = Tensor(rng.normal(0.0, d**-0.5, size=(n_train, d)), requires_grad=True)
    trunk_tensors = [
        t for name, t in params.named_parameters() if name.startswith("trunk.")
    ]
    opt_trunk = nw.AdamState.for_params(trunk_tensors, lr=config.lr)
    opt_A = nw.RowAdamState(A.data.shape, lr=config.lr)
    weights = config.weights
    need_ode = config.ode_loss_in_step1 and weights.w_ode > 0
    ctx_ws = None
    history1: list[dict] = []
    row_of = {int(r): i for i, r in enumerate(data.train_rows)}
    truth_flat = data.radius.reshape(data.radius.shape[0], -1)  # (N, k*n)
    for epoch in range(config.epochs):
        perm = data.train_rows[rng.permutation(n_train)]
        sums = {"data": 0.0, "ode": 0.0}
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            rows = perm[start : start + config.batch_size]
            arows = np.array([row_of[int(r)] for r in rows])
            A_b = A[arows]
            T, Td = nw.trunk_latents(params, Tensor(trunk_in), need_tangent=need_ode)
            raw = A_b @ T.T
            R = nw.output_gate(raw)
            parts = {"data": data_loss(R, truth_flat[rows])}
            if need_ode:
                V = ad.sigmoid(raw) * (A_b @ Td.T)
                ctx = _batch_context(data, rows, ctx_ws)
                parts["ode"] = ode_loss(
                    R.reshape(-1, data.n), V.reshape(-1, data.n), ctx
                )
                ctx_ws = ctx.ws
            vals = _loss_parts_finite(parts, epoch, rows)
            loss = total_loss(parts, weights)
            loss.backward()
            g_trunk = []
            for t in trunk_tensors:
                g_trunk.append(t.grad if t.grad is not None else np.zeros_like(t.data))
                t.grad = None
            gA = A.grad if A.grad is not None else np.zeros_like(A.data)
            A.grad = None
            nw.adam_step(opt_trunk, trunk_tensors, g_trunk)
            opt_A.step_rows(A.data, gA[arows], arows)
            for key, v in vals.items():
                sums[key] += v
            n_batches += 1
        history1.append(
            {
                "epoch": epoch,
                "L_data": sums["data"] / n_batches,
                "L_ode": sums["ode"] / n_batches,
                "L_ic": 0.0,
            }
        )
        if log is not None and epoch % max(1, config.epochs // 20) == 0:
            log(f"[step1] epoch {epoch}: L_data={history1[-1]['L_data']:.4e}")

    # phase 2: orthonormalize the trunk snapshot, regress the branch
    T_star = nw.trunk_latents(params, Tensor(trunk_in), need_tangent=False)[0].data.copy()
    U, S, Vt = np.linalg.svd(T_star, full_matrices=False)
    if S[0] <= 0 or S[-1] / S[0] < SVD_RANK_FLOOR:
        raise BasisDegeneracyError(
            f"trunk basis is rank deficient (sigma_min/sigma_max = {S[-1] / S[0]:.2e}); "
            "reduce latent_dim"
        )
    V = Vt.T
    basis = TrunkBasis(T_star=T_star, U=U, Sigma=S.copy(), V=V, A_star=A.data.copy())
    targets = (A.data @ V) * S[None, :]
    params.basis_V = V
    params.basis_sigma = S.copy()

    branch_tensors = [
        t for name, t in params.named_parameters() if name.startswith("branch.")
    ]
    epochs2 = config.step2_epochs if config.step2_epochs is not None else config.epochs
    opt_branch = nw.AdamState.for_params(
        branch_tensors, lr=config.step2_lr if config.step2_lr is not None else config.lr
    )
    history2: list[dict] = []
    best_val, best_epoch = np.inf, -1
    best_state = _snapshot(params)
    rng2 = np.random.default_rng(config.seed + 1)
    for epoch in range(epochs2):
        perm = data.train_rows[rng2.permutation(n_train)]
        total = 0.0
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            rows = perm[start : start + config.batch_size]
            arows = np.array([row_of[int(r)] for r in rows])
            pred = nw.branch_latents(params, Tensor(data.pressure[rows]))
            loss = data_loss(pred, targets[arows])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite branch loss at epoch {epoch}",
                    snapshot={"epoch": epoch, "batch_rows": rows.tolist()},
                )
            loss.backward()
            g = []
            for t in branch_tensors:
                g.append(t.grad if t.grad is not None else np.zeros_like(t.data))
                t.grad = None
            nw.adam_step(opt_branch, branch_tensors, g)
            total += float(loss.data)
            n_batches += 1
        row = {"epoch": epoch, "L_data": total / n_batches, "L_ode": 0.0, "L_ic": 0.0}
        if epoch % config.validate_every == 0 or epoch == epochs2 - 1:
            row["val_mse"] = validation_mse(params, data, trunk_in)
            if row["val_mse"] < best_val:
                best_val, best_epoch = row["val_mse"], epoch
                best_state = _snapshot(params)
        history2.append(row)
        if log is not None and epoch % max(1, epochs2 // 20) == 0:
            log(
                f"[step2] epoch {epoch}: branch_mse={row['L_data']:.4e}"
                + (f" val_mse={row['val_mse']:.4e}" if "val_mse" in row else "")
            )
    result = TrainResult(
        params=params,
        history=history1 + history2,
        best_val=best_val,
        best_epoch=best_epoch,
        best_state=best_state,
        meta={"sigma_max": float(S[0]), "sigma_min": float(S[-1])},
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        nw.save_checkpoint(params, os.path.join(out_dir, "model_final"))
        final_state = _snapshot(params)
        result.restore_best()
        nw.save_checkpoint(params, os.path.join(out_dir, "model_best"))
        for t, arr in zip(params.parameters(), final_state):
            t.data = arr
        write_history(os.path.join(out_dir, "history_step1.csv"), history1)
        write_history(os.path.join(out_dir, "history_step2.csv"), history2)
    return result, basis


# -- cross-validation ----------------------------------------------------------------


def kfold_train(
    config: TrainConfig,
    arch: nw.NetworkArch,
    data: TrainingData,
    k: int,
    out_dir: str | None = None,
    log=None,
):
    """k-fold cross-validation over all profiles (seeded shuffle; the last
    fold absorbs the remainder).  Returns (best result, per-fold metrics)."""
    if k < 2:
        raise ConfigError("k_fold must be >= 2")
    rows = np.concatenate([data.train_rows, data.val_rows])
    rows = rows[np.argsort(rows)]
    perm = np.random.default_rng(config.seed).permutation(rows)
    fold_size = rows.size // k
    folds = [
        perm[i * fold_size : (i + 1) * fold_size] if i < k - 1 else perm[(k - 1) * fold_size :]
        for i in range(k)
    ]
    metrics = []
    best = None
    for i, fold in enumerate(folds):
        train_rows = np.sort(np.setdiff1d(perm, fold))
        fold_data = replace(data, train_rows=train_rows, val_rows=np.sort(fold))
        fold_dir = os.path.join(out_dir, f"fold_{i}") if out_dir is not None else None
        result = train_single(config, arch, fold_data, out_dir=fold_dir, log=log)
        metrics.append(
            {
                "fold": i,
                "n_train": int(train_rows.size),
                "n_val": int(fold.size),
                "best_val_mse": result.best_val,
                "best_epoch": result.best_epoch,
            }
        )
        if log is not None:
            log(f"[fold {i}] best val MSE {result.best_val:.4e}")
        if best is None or result.best_val < best.best_val:
            best = result
    return best, metrics
