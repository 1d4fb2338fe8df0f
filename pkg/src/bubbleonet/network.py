"""Operator-network layers, forward evaluation, Adam, and checkpoints.

The surrogate maps a sampled forcing signal (branch input) and query
coordinates (trunk input: time, optionally rest radius) to radii:

    radius = softplus( branch(P) @ trunk(t[, R0]).T )

Hidden branch layers use the sinusoid-augmented ("rowdy") activation

    y = relu(n a0 h) + sum_i n a_i sin(n F_i h + c_i),   n = 10,

with a0 = 0.1 and a_i = c_i = 0 at initialization so the stack starts as a
plain ReLU network; F_i start on the integer ladder i and are learnable.
Hidden trunk layers are ReLU in single-step mode and rowdy in two-step mode.
Final layers of both subnets are linear projections onto the latent space.

The time derivative of the gated output (needed by the physics loss) is
propagated forward through the trunk analytically, as tape operations, so
reverse mode differentiates through it exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SchemaVersionError, ShapeError, TruncatedBlobError

CHECKPOINT_FORMAT_VERSION = 1
ROWDY_NOISE_SCALE = 10.0


@dataclass
class DenseLayer:
    W: Tensor  # (out, in)
    b: Tensor  # (out,)


@dataclass
class RowdyLayer:
    base: DenseLayer
    a: Tensor  # (K,) amplitudes, a[0] scales the relu branch
    F: Tensor  # (K-1,) sinusoid frequencies
    c: Tensor  # (K-1,) sinusoid phases
    n_scale_act: float = ROWDY_NOISE_SCALE

    @property
    def K(self) -> int:
        return self.a.data.size


#: gain on the final projection layers; keeps initial raw outputs near zero so
#: the gas-pressure power law r**(-3k) stays finite at the first physics-loss
#: evaluation (full-gain output layers can start radii below 0.03 R0, where
#: the first RK stage overflows)
OUT_LAYER_GAIN = 0.1


def glorot_dense(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> DenseLayer:
    limit = gain * np.sqrt(6.0 / (n_in + n_out))
    W = Tensor(rng.uniform(-limit, limit, size=(n_out, n_in)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return DenseLayer(W, b)


def init_rowdy(rng: np.random.Generator, n_in: int, n_out: int, K: int) -> RowdyLayer:
    if K < 1:
        raise ConfigError("rowdy term count K must be >= 1")
    a = np.zeros(K)
    a[0] = 0.1
    return RowdyLayer(
        base=glorot_dense(rng, n_in, n_out),
        a=Tensor(a, requires_grad=True),
        F=Tensor(np.arange(1, K, dtype=float), requires_grad=True),
        c=Tensor(np.zeros(max(K - 1, 0)), requires_grad=True),
    )


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """Pre-activation h = x @ W.T + b (batch along the leading axis)."""
    return ad.linear(x, layer.W, layer.b)


def rowdy_activate(layer: RowdyLayer, h: Tensor) -> Tensor:
    """Elementwise relu(n a0 h) + sum_i n a_i sin(n F_i h + c_i).

    The relu scale is computed as (a0 * n) first so that the §-free identity
    10 * 0.1 == 1.0 holds exactly and the initialized layer reproduces
    relu(h) bit for bit.
    """
    n = layer.n_scale_act
    y = ad.relu((layer.a[0] * n) * h)
    for i in range(1, layer.K):
        y = y + (layer.a[i] * n) * ad.sin((layer.F[i - 1] * n) * h + layer.c[i - 1])
    return y


def rowdy_activate_with_tangent(layer: RowdyLayer, h: Tensor, h_dot: Tensor):
    """(y, y_dot) where y_dot is the tangent of y along h_dot.

    d/dh relu(s h) = s * 1[s h > 0]; d/dh n a_i sin(n F_i h + c_i)
    = n a_i * n F_i * cos(n F_i h + c_i).  All factors stay on the tape so
    reverse mode reaches a, F, c through the derivative channel too.
    """
    n = layer.n_scale_act
    s0 = layer.a[0] * n
    y = ad.relu(s0 * h)
    grad = s0 * ad.heaviside(s0 * h)
    for i in range(1, layer.K):
        amp = layer.a[i] * n
        freq = layer.F[i - 1] * n
        arg = freq * h + layer.c[i - 1]
        y = y + amp * ad.sin(arg)
        grad = grad + (amp * freq) * ad.cos(arg)
    return y, grad * h_dot


def combine(B_lat: Tensor, T_lat: Tensor) -> Tensor:
    """Latent contraction raw = B @ T.T: (m, d) x (n, d) -> (m, n)."""
    if B_lat.data.shape[-1] != T_lat.data.shape[-1]:
        raise ShapeError("branch and trunk latent widths differ")
    return B_lat @ T_lat.T


def output_gate(raw: Tensor) -> Tensor:
    """Softplus positivity gate on the raw combined field."""
    return ad.softplus(raw)


@dataclass
class NetworkArch:
    """Static architecture description (serialized into checkpoints)."""

    branch_widths: list[int]
    trunk_widths: list[int]
    branch_K: int = 5
    trunk_K: int = 1  # 1 = plain ReLU trunk; >= 2 enables rowdy trunk layers
    r0_scale: float = 1.0e-4  # divisor applied to the trunk R0 column (maps tens of um into [0, 1])

    def __post_init__(self):
        if len(self.branch_widths) < 2 or len(self.trunk_widths) < 2:
            raise ConfigError("branch and trunk need at least input and output widths")
        if self.branch_widths[-1] != self.trunk_widths[-1]:
            raise ConfigError(
                f"latent widths differ: branch {self.branch_widths[-1]} "
                f"vs trunk {self.trunk_widths[-1]}"
            )
        if self.trunk_widths[0] not in (1, 2):
            raise ConfigError("trunk input dim must be 1 (time) or 2 (time, R0)")

    @property
    def latent_dim(self) -> int:
        return self.branch_widths[-1]

    @property
    def trunk_input_dim(self) -> int:
        return self.trunk_widths[0]


@dataclass
class NetworkParams:
    arch: NetworkArch
    branch_hidden: list[RowdyLayer]
    branch_out: DenseLayer
    trunk_hidden: list  # DenseLayer (ReLU) or RowdyLayer per arch.trunk_K
    trunk_out: DenseLayer
    # two-step inference basis: trunk latents are mapped through V diag(1/sigma)
    basis_V: np.ndarray | None = None
    basis_sigma: np.ndarray | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Learnable tensors in declaration order (checkpoint order)."""
        out = []
        for i, lay in enumerate(self.branch_hidden):
            out += [
                (f"branch.{i}.W", lay.base.W),
                (f"branch.{i}.b", lay.base.b),
                (f"branch.{i}.a", lay.a),
                (f"branch.{i}.F", lay.F),
                (f"branch.{i}.c", lay.c),
            ]
        out += [("branch.out.W", self.branch_out.W), ("branch.out.b", self.branch_out.b)]
        for i, lay in enumerate(self.trunk_hidden):
            if isinstance(lay, RowdyLayer):
                out += [
                    (f"trunk.{i}.W", lay.base.W),
                    (f"trunk.{i}.b", lay.base.b),
                    (f"trunk.{i}.a", lay.a),
                    (f"trunk.{i}.F", lay.F),
                    (f"trunk.{i}.c", lay.c),
                ]
            else:
                out += [(f"trunk.{i}.W", lay.W), (f"trunk.{i}.b", lay.b)]
        out += [("trunk.out.W", self.trunk_out.W), ("trunk.out.b", self.trunk_out.b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _spread_first_layer_kinks(dense: DenseLayer, rng: np.random.Generator):
    """Anchor-based bias init for the first trunk layer: b_j = -w_j . x_j with
    x_j uniform in the unit input box, putting one kink per unit inside the
    query domain.  With zero biases and the nonnegative time input, every
    first-layer unit is relu(w t) — a multiple of t — and the trunk basis
    starts rank deficient."""
    anchors = rng.uniform(0.0, 1.0, size=(dense.W.data.shape[0], dense.W.data.shape[1]))
    dense.b.data = -(dense.W.data * anchors).sum(axis=1)


def init_network(arch: NetworkArch, seed: int) -> NetworkParams:
    rng = np.random.default_rng(seed)
    bw, tw = arch.branch_widths, arch.trunk_widths
    branch_hidden = [
        init_rowdy(rng, bw[i], bw[i + 1], arch.branch_K) for i in range(len(bw) - 2)
    ]
    branch_out = glorot_dense(rng, bw[-2], bw[-1], gain=OUT_LAYER_GAIN)
    if arch.trunk_K >= 2:
        trunk_hidden = [
            init_rowdy(rng, tw[i], tw[i + 1], arch.trunk_K) for i in range(len(tw) - 2)
        ]
    else:
        trunk_hidden = [glorot_dense(rng, tw[i], tw[i + 1]) for i in range(len(tw) - 2)]
    if trunk_hidden:
        first = trunk_hidden[0]
        _spread_first_layer_kinks(first.base if isinstance(first, RowdyLayer) else first, rng)
    trunk_out = glorot_dense(rng, tw[-2], tw[-1], gain=OUT_LAYER_GAIN)
    return NetworkParams(arch, branch_hidden, branch_out, trunk_hidden, trunk_out)


def branch_latents(params: NetworkParams, pressure: Tensor) -> Tensor:
    x = pressure if isinstance(pressure, Tensor) else Tensor(pressure)
    if x.data.ndim != 2 or x.data.shape[1] != params.arch.branch_widths[0]:
        raise ShapeError(
            f"branch input must be (batch, {params.arch.branch_widths[0]}), "
            f"got {x.data.shape}"
        )
    for lay in params.branch_hidden:
        x = rowdy_activate(lay, dense_forward(lay.base, x))
    return dense_forward(params.branch_out, x)


def trunk_latents(params: NetworkParams, trunk_in: Tensor, need_tangent: bool):
    """Trunk latents T (n, d) and, when requested, their time tangent dT/dt.

    The tangent seed is 1 for the time column and 0 for any other column.
    """
    x = trunk_in if isinstance(trunk_in, Tensor) else Tensor(trunk_in)
    if x.data.ndim != 2 or x.data.shape[1] != params.arch.trunk_input_dim:
        raise ShapeError(
            f"trunk input must be (n, {params.arch.trunk_input_dim}), got {x.data.shape}"
        )
    xd = None
    if need_tangent:
        seed = np.zeros_like(x.data)
        seed[:, 0] = 1.0
        xd = Tensor(seed)
    for lay in params.trunk_hidden:
        if isinstance(lay, RowdyLayer):
            h = dense_forward(lay.base, x)
            if need_tangent:
                hd = ad.linear(xd, lay.base.W)
                x, xd = rowdy_activate_with_tangent(lay, h, hd)
            else:
                x = rowdy_activate(lay, h)
        else:
            h = dense_forward(lay, x)
            if need_tangent:
                hd = ad.linear(xd, lay.W)
                mask = ad.heaviside(h)
                x = ad.relu(h)
                xd = hd * mask
            else:
                x = ad.relu(h)
    T = dense_forward(params.trunk_out, x)
    Td = ad.linear(xd, params.trunk_out.W) if need_tangent else None
    if params.basis_V is not None:
        VSinv = Tensor(params.basis_V / params.basis_sigma[None, :])
        T = T @ VSinv
        if need_tangent:
            Td = Td @ VSinv
    return T, Td


def forward(params: NetworkParams, pressure, trunk_in, need_derivative: bool = False):
    """Predicted radii (m, n), and when requested their exact time derivative.

    d softplus(raw)/dt = logistic(raw) * d raw/dt with d raw/dt propagated
    through the trunk in forward mode.
    """
    B_lat = branch_latents(params, pressure)
    T, Td = trunk_latents(params, trunk_in, need_derivative)
    raw = combine(B_lat, T)
    radii = output_gate(raw)
    if not need_derivative:
        return radii, None
    raw_dot = combine(B_lat, Td)
    return radii, ad.sigmoid(raw) * raw_dot


def backward(loss: Tensor, params: NetworkParams) -> list[np.ndarray]:
    """Reverse sweep; returns gradients aligned with ``params.parameters()``
    (zeros for parameters the loss does not reach)."""
    loss.backward()
    grads = []
    for p in params.parameters():
        grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        p.grad = None
    return grads


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, tensors: list[Tensor], lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(t.data) for t in tensors]
        st.v = [np.zeros_like(t.data) for t in tensors]
        return st


def adam_step(state: AdamState, tensors: list[Tensor], grads: list[np.ndarray]):
    """Standard bias-corrected Adam update, in place."""
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ShapeError("adam_step: parameter/gradient/state lengths differ")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class RowAdamState:
    """Adam over a (N, d) coefficient matrix where a step touches only the
    rows present in the mini-batch; bias correction is tracked per row."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step_rows(self, data: np.ndarray, grad_rows: np.ndarray, rows: np.ndarray):
        self.t[rows] += 1
        t = self.t[rows][:, None].astype(float)
        m = self.m[rows]
        v = self.v[rows]
        m = self.beta1 * m + (1.0 - self.beta1) * grad_rows
        v = self.beta2 * v + (1.0 - self.beta2) * grad_rows**2
        self.m[rows] = m
        self.v[rows] = v
        mhat = m / (1.0 - self.beta1**t)
        vhat = v / (1.0 - self.beta2**t)
        data[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint I/O ----------------------------------------------------------------


def _tensor_manifest(named, extra_consts):
    entries = []
    offset = 0
    for name, arr in named + extra_consts:
        nbytes = arr.size * 8
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    return entries, offset


def save_checkpoint(params: NetworkParams, path: str, meta: dict | None = None):
    """model.json + model.bin under ``path`` (a directory).

    All tensors are little-endian float64 in declaration order; the JSON
    carries shapes and byte offsets, so the round trip is bit-exact.
    """
    os.makedirs(path, exist_ok=True)
    named = [(n, t.data) for n, t in params.named_parameters()]
    consts = []
    if params.basis_V is not None:
        consts = [("basis.V", params.basis_V), ("basis.sigma", params.basis_sigma)]
    entries, total = _tensor_manifest(named, consts)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": {
            "branch_widths": params.arch.branch_widths,
            "trunk_widths": params.arch.trunk_widths,
            "branch_K": params.arch.branch_K,
            "trunk_K": params.arch.trunk_K,
            "r0_scale": params.arch.r0_scale,
            "latent_dim": params.arch.latent_dim,
            "has_basis": params.basis_V is not None,
        },
        "meta": meta or {},
        "tensors": entries,
        "total_bytes": total,
    }
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    with open(os.path.join(path, "model.bin"), "wb") as fh:
        for _, arr in named + consts:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[NetworkParams, dict]:
    """Rebuild NetworkParams from a checkpoint directory; returns (params, meta)."""
    with open(os.path.join(path, "model.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise SchemaVersionError(
            f"checkpoint format_version {doc.get('format_version')} not supported"
        )
    a = doc["architecture"]
    arch = NetworkArch(
        branch_widths=list(a["branch_widths"]),
        trunk_widths=list(a["trunk_widths"]),
        branch_K=a["branch_K"],
        trunk_K=a["trunk_K"],
        r0_scale=a["r0_scale"],
    )
    params = init_network(arch, seed=0)
    blob = open(os.path.join(path, "model.bin"), "rb").read()
    if len(blob) != doc["total_bytes"]:
        raise TruncatedBlobError(
            f"model.bin has {len(blob)} bytes, manifest says {doc['total_bytes']}"
        )
    tensors = dict(params.named_parameters())
    loaded_consts = {}
    for ent in doc["tensors"]:
        raw = np.frombuffer(
            blob, dtype="<f8", count=ent["nbytes"] // 8, offset=ent["offset"]
        ).reshape(ent["shape"])
        if ent["name"] in tensors:
            tensors[ent["name"]].data = raw.astype(np.float64)
        else:
            loaded_consts[ent["name"]] = raw.astype(np.float64)
    if a.get("has_basis"):
        params.basis_V = loaded_consts["basis.V"]
        params.basis_sigma = loaded_consts["basis.sigma"]
    return params, doc.get("meta", {})
