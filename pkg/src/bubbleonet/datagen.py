"""Corpus generation: parameter sweeps, reference solving, storage.

A design-of-experiments spec enumerates (R0, amp, freq) levels on uniform
inclusive grids.  Each point is solved with the adaptive integrator at tight
tolerance and resampled onto the training grid through the 4th-order dense
output, so residual-based checks downstream are not circular with the
fixed-step operator.

On-disk layout (one directory per dataset):

    manifest.json   UTF-8 JSON: doe, fluid constants, split, per-sample meta
                    (scales, solver tolerances, byte offsets, CRC32C)
    samples.bin     per sample, three contiguous little-endian float64 arrays:
                    pressure, radius, rdot

The round trip is bit-exact; payloads are verified against their checksum on
every read.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import (
    ChecksumError,
    ConfigError,
    DomainError,
    NumericsError,
    SchemaVersionError,
    TruncatedBlobError,
)
from .integrate import BubbleODE, integrate_adaptive
from .kernels import crc32c
from .physics import (
    FluidParams,
    PressureProfile,
    Scales,
    dimensionless_groups,
    make_scales,
    sinusoidal_pressure,
)

DATASET_FORMAT_VERSION = 1
DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12


@dataclass(frozen=True)
class DoeSpec:
    """Sweep definition: uniform inclusive levels per parameter."""

    r0_values: tuple
    amp_range: tuple
    amp_count: int
    freq_range: tuple
    freq_count: int
    t_max: float
    n_points: int
    model: str  # "RP" | "KM"

    def __post_init__(self):
        if self.amp_count < 1 or self.freq_count < 1 or len(self.r0_values) < 1:
            raise ConfigError("level counts must be >= 1")
        if self.amp_range[0] > self.amp_range[1] or self.freq_range[0] > self.freq_range[1]:
            raise ConfigError("ranges must be ordered (lo, hi)")
        if self.n_points < 2:
            raise ConfigError("n_points must be >= 2")
        if self.model not in ("RP", "KM"):
            raise ConfigError(f"unknown model {self.model!r}")

    @property
    def size(self) -> int:
        return len(self.r0_values) * self.amp_count * self.freq_count


@dataclass
class SampleMeta:
    id: int
    R0: float
    amp: float
    freq: float
    model: str
    status: str = "ok"  # "ok" | "failed"
    reason: str | None = None
    scales: dict = field(default_factory=dict)
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    generator_version: str = __version__
    offset: int | None = None
    nbytes: int | None = None
    crc32c: int | None = None


@dataclass
class DatasetSample:
    pressure: PressureProfile
    radius: np.ndarray
    rdot: np.ndarray
    meta: SampleMeta


@dataclass
class DatasetManifest:
    doe: DoeSpec
    fluid: FluidParams
    samples: list
    split: dict | None = None
    format_version: int = DATASET_FORMAT_VERSION

    def ok_ids(self) -> list[int]:
        return [s.id for s in self.samples if s.status == "ok"]


def _levels(lo: float, hi: float, count: int) -> np.ndarray:
    return np.linspace(lo, hi, count) if count > 1 else np.array([lo])


def build_doe(spec: DoeSpec) -> list[tuple[float, float, float]]:
    """Cartesian product of the level grids, ordered radius-major, then
    amplitude, then frequency."""
    amps = _levels(*spec.amp_range, spec.amp_count)
    freqs = _levels(*spec.freq_range, spec.freq_count)
    return [
        (float(r0), float(a), float(f))
        for r0 in spec.r0_values
        for a in amps
        for f in freqs
    ]


def generate_sample(
    point: tuple[float, float, float],
    spec: DoeSpec,
    fluid: FluidParams,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    sample_id: int = 0,
) -> DatasetSample:
    """Solve one sweep point on the training grid.

    Raises on integration failure; the corpus driver turns that into a
    ``status="failed"`` manifest row.
    """
    R0, amp, freq = point
    scales = make_scales(R0, spec.t_max, fluid)
    groups = dimensionless_groups(fluid, scales)
    profile = sinusoidal_pressure(amp, freq, fluid, scales, spec.n_points)
    ode = BubbleODE(spec.model, groups, amp, freq, fluid, scales)
    _, states = integrate_adaptive(
        ode, [1.0, 0.0], (0.0, 1.0), rtol, atol, t_eval=profile.t_grid
    )
    meta = SampleMeta(
        id=sample_id,
        R0=R0,
        amp=amp,
        freq=freq,
        model=spec.model,
        scales={
            "a": scales.a,
            "tau": scales.tau,
            "P_star": scales.P_star,
            "n_scale": scales.n_scale,
        },
        rtol=rtol,
        atol=atol,
    )
    return DatasetSample(
        pressure=profile,
        radius=states[:, 0].copy(),
        rdot=states[:, 1].copy(),
        meta=meta,
    )


def generate_corpus(
    spec: DoeSpec,
    fluid: FluidParams,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    progress=None,
) -> tuple[DatasetManifest, dict]:
    """All sweep points; failures are kept in the manifest, never dropped."""
    manifest = DatasetManifest(doe=spec, fluid=fluid, samples=[])
    samples: dict[int, DatasetSample] = {}
    for sid, point in enumerate(build_doe(spec)):
        try:
            sample = generate_sample(point, spec, fluid, rtol, atol, sample_id=sid)
            manifest.samples.append(sample.meta)
            samples[sid] = sample
        except NumericsError as exc:
            manifest.samples.append(
                SampleMeta(
                    id=sid,
                    R0=point[0],
                    amp=point[1],
                    freq=point[2],
                    model=spec.model,
                    status="failed",
                    reason=f"{type(exc).__name__}: {exc}",
                    rtol=rtol,
                    atol=atol,
                )
            )
        if progress is not None:
            progress(sid, spec.size)
    return manifest, samples


def split(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Seeded shuffle of the non-failed ids into train/validation.

    ``ratio`` is the training fraction; the validation side gets
    max(1, floor(n * (1 - ratio))) samples.
    """
    if not 0.0 < ratio < 1.0:
        raise DomainError("split ratio must be in (0, 1)")
    ids = np.array(manifest.ok_ids())
    if ids.size < 2:
        raise DomainError("need at least 2 samples to split")
    n_val = max(1, ids.size - int(np.floor(ids.size * ratio)))
    perm = np.random.default_rng(seed).permutation(ids)
    manifest.split = {
        "ratio": ratio,
        "seed": seed,
        "train": sorted(int(i) for i in perm[: ids.size - n_val]),
        "val": sorted(int(i) for i in perm[ids.size - n_val :]),
    }
    return manifest


# -- storage ------------------------------------------------------------------


def _doe_to_json(spec: DoeSpec) -> dict:
    d = asdict(spec)
    d["r0_values"] = list(spec.r0_values)
    d["amp_range"] = list(spec.amp_range)
    d["freq_range"] = list(spec.freq_range)
    return d


def _doe_from_json(d: dict) -> DoeSpec:
    return DoeSpec(
        r0_values=tuple(d["r0_values"]),
        amp_range=tuple(d["amp_range"]),
        amp_count=d["amp_count"],
        freq_range=tuple(d["freq_range"]),
        freq_count=d["freq_count"],
        t_max=d["t_max"],
        n_points=d["n_points"],
        model=d["model"],
    )


def write_dataset(manifest: DatasetManifest, samples: dict, directory: str):
    """Serialize manifest + payloads; byte-exact round trip with read_dataset."""
    os.makedirs(directory, exist_ok=True)
    offset = 0
    with open(os.path.join(directory, "samples.bin"), "wb") as fh:
        for meta in manifest.samples:
            if meta.status != "ok":
                continue
            s = samples[meta.id]
            blob = (
                np.ascontiguousarray(s.pressure.p_bar, dtype="<f8").tobytes()
                + np.ascontiguousarray(s.radius, dtype="<f8").tobytes()
                + np.ascontiguousarray(s.rdot, dtype="<f8").tobytes()
            )
            meta.offset = offset
            meta.nbytes = len(blob)
            meta.crc32c = crc32c(blob)
            fh.write(blob)
            offset += len(blob)
    doc = {
        "format_version": manifest.format_version,
        "doe": _doe_to_json(manifest.doe),
        "fluid": asdict(manifest.fluid),
        "split": manifest.split,
        "samples": [asdict(m) for m in manifest.samples],
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


class DatasetReader:
    """Lazy, checksum-verifying access to stored samples by id."""

    def __init__(self, directory: str, manifest: DatasetManifest):
        self.directory = directory
        self.manifest = manifest
        self._by_id = {m.id: m for m in manifest.samples}
        self._t_grid = np.linspace(0.0, 1.0, manifest.doe.n_points)

    def __len__(self):
        return len(self.manifest.ok_ids())

    def __getitem__(self, sample_id: int) -> DatasetSample:
        meta = self._by_id[sample_id]
        if meta.status != "ok":
            raise KeyError(f"sample {sample_id} is marked failed: {meta.reason}")
        n = self.manifest.doe.n_points
        expected = 3 * n * 8
        with open(os.path.join(self.directory, "samples.bin"), "rb") as fh:
            fh.seek(meta.offset)
            blob = fh.read(meta.nbytes)
        if len(blob) < meta.nbytes or meta.nbytes != expected:
            raise TruncatedBlobError(
                f"sample {sample_id}: expected {expected} bytes, got {len(blob)}"
            )
        if crc32c(blob) != meta.crc32c:
            raise ChecksumError(f"sample {sample_id}: CRC32C mismatch")
        arr = np.frombuffer(blob, dtype="<f8").astype(np.float64)
        p_bar, radius, rdot = arr[:n], arr[n : 2 * n], arr[2 * n :]
        scales = Scales(**meta.scales)
        fluid = self.manifest.fluid
        profile = PressureProfile(
            t_grid=self._t_grid,
            p_bar=p_bar,
            dp_bar=_analytic_dp(meta, fluid, scales, self._t_grid),
            amp=meta.amp,
            freq=meta.freq,
            n_points=n,
        )
        return DatasetSample(pressure=profile, radius=radius, rdot=rdot, meta=meta)


def _analytic_dp(meta: SampleMeta, fluid: FluidParams, scales: Scales, t_grid):
    from .physics import pressure_closures

    _, dp_fn = pressure_closures(meta.amp, meta.freq, fluid, scales)
    return dp_fn(t_grid)


def read_dataset(directory: str) -> tuple[DatasetManifest, DatasetReader]:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise SchemaVersionError(
            f"dataset format_version {doc.get('format_version')} not supported"
        )
    fluid = FluidParams(**doc["fluid"])
    manifest = DatasetManifest(
        doe=_doe_from_json(doc["doe"]),
        fluid=fluid,
        samples=[SampleMeta(**m) for m in doc["samples"]],
        split=doc.get("split"),
        format_version=doc["format_version"],
    )
    return manifest, DatasetReader(directory, manifest)


def residual_check(sample: DatasetSample, fluid: FluidParams) -> float:
    """Mean squared one-step defect of a stored trajectory (solver
    self-consistency; the corpus comes from the adaptive path, the defect from
    the fixed-step operator)."""
    from . import kernels

    scales = Scales(**sample.meta.scales)
    groups = dimensionless_groups(fluid, scales)
    ode = BubbleODE(sample.meta.model, groups, sample.meta.amp, sample.meta.freq, fluid, scales)
    g = ode.groups
    t_grid = sample.pressure.t_grid
    dt = t_grid[1] - t_grid[0]
    ts = kernels.stage_times(t_grid)
    p_st = np.ascontiguousarray(ode.p_fn(ts))[None]
    dp_st = np.ascontiguousarray(ode.dp_fn(ts))[None]
    coefs = np.array(
        [[3 * g.k, g.pg0_ratio, g.n_scale, g.visc, g.surf, g.M, g.M * g.visc]]
    )
    res, _ = kernels.residual_batch(
        sample.radius[None, :], sample.rdot[None, :], p_st, dp_st, coefs, dt
    )
    return float(np.mean(np.sum(res**2, axis=1)))
