"""Error metrics, FFT spectra, peak detection, and the sweep-study harness.

Driven bubble trajectories typically show two spectral peaks: one near the
natural (resonant) frequency of the bubble and one at the driving frequency
of the imposed far-field pressure.  The detector takes the driving frequency
as a hint, claims the strongest local maximum within +-2 bins of it, and
reports the strongest local maximum outside that window as the natural peak;
when the two windows collide the result is flagged merged (resonance).

Spectra are rectangular-windowed magnitudes of the mean-removed real FFT; the
bin width 1/(n dt) is coarse at short horizons (~18 kHz for 2000 points over
55 us) and is reported alongside the peaks.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .physics import FluidParams

PEAK_WINDOW_BINS = 2


@dataclass
class SpectrumReport:
    freqs: np.ndarray  # Hz, 0 .. Nyquist
    mags: np.ndarray
    resolution: float  # bin width, Hz
    natural_peak: tuple | None = None  # (freq, magnitude)
    driving_peak: tuple | None = None
    merged: bool = False


@dataclass
class StudyCase:
    amp: float
    freq: float
    status: str = "ok"
    mse: float = math.nan
    max_abs_err: float = math.nan  # non-dimensional radius units
    max_abs_err_um: float = math.nan  # same envelope in microns
    driving_peak_found: bool = False
    in_distribution: bool = False
    reason: str | None = None


@dataclass
class StudyReport:
    cases: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)


def mse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def abs_error(pred, truth) -> np.ndarray:
    """Signed pointwise error, prediction minus ground truth."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"abs_error shapes differ: {pred.shape} vs {truth.shape}")
    return pred - truth


def relative_l2(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


def fft_spectrum(signal, dt: float, t_grid=None) -> SpectrumReport:
    """Mean-removed real-FFT magnitude spectrum of a uniformly sampled signal."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < 8:
        raise DomainError("fft_spectrum needs a 1-D signal with at least 8 samples")
    if t_grid is not None:
        t_grid = np.asarray(t_grid, dtype=float)
        dts = np.diff(t_grid)
        if np.any(dts <= 0) or not np.allclose(dts, dts[0], rtol=1e-9, atol=0.0):
            raise DomainError("fft_spectrum requires a uniform sampling grid")
    n = x.size
    mags = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(n, d=dt)
    return SpectrumReport(freqs=freqs, mags=mags, resolution=1.0 / (n * dt))


def parseval_gap(report: SpectrumReport, signal) -> float:
    """Relative gap between spectral energy and mean-removed signal energy."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    n = x.size
    m2 = report.mags**2
    # rfft halves the spectrum: double every bin that has a conjugate twin
    full = 2.0 * m2.sum() - m2[0] - (m2[-1] if n % 2 == 0 else 0.0)
    energy = n * float(np.sum(x * x))
    return abs(full - energy) / energy


def _local_maxima(mags: np.ndarray) -> np.ndarray:
    """Interior local maxima, DC bin excluded."""
    idx = np.nonzero((mags[1:-1] > mags[:-2]) & (mags[1:-1] >= mags[2:]))[0] + 1
    return idx[idx >= 1]


def detect_peaks(report: SpectrumReport, driving_freq_hint: float):
    """(natural_peak, driving_peak) as (freq, magnitude) tuples (None when
    absent); fills the report fields in place and flags merged windows."""
    mags = report.mags
    peaks = _local_maxima(mags)
    if peaks.size == 0:
        raise DomainError("spectrum has no interior local maxima")
    hint_bin = int(round(driving_freq_hint / report.resolution))
    in_window = peaks[np.abs(peaks - hint_bin) <= PEAK_WINDOW_BINS]
    driving = None
    if in_window.size:
        b = int(in_window[np.argmax(mags[in_window])])
        driving = (float(report.freqs[b]), float(mags[b]))
    outside = peaks[np.abs(peaks - hint_bin) > PEAK_WINDOW_BINS]
    natural = None
    merged = False
    if outside.size:
        b = int(outside[np.argmax(mags[outside])])
        natural = (float(report.freqs[b]), float(mags[b]))
        merged = abs(b - hint_bin) <= 2 * PEAK_WINDOW_BINS
    report.natural_peak = natural
    report.driving_peak = driving
    report.merged = merged
    return natural, driving


def minnaert_frequency(fluid: FluidParams, R0: float) -> float:
    """Small-oscillation resonance estimate sqrt(3 k P0 / rho) / (2 pi R0)
    (surface tension and viscosity neglected)."""
    return math.sqrt(3.0 * fluid.k * fluid.P0 / fluid.rho) / (2.0 * math.pi * R0)


# -- study harness ------------------------------------------------------------------


def run_study(
    predict,
    study_manifest,
    reader,
    train_amp_range: tuple,
    train_freq_range: tuple,
    out_dir: str | None = None,
    render=None,
) -> StudyReport:
    """Per-case evaluation of a model against a ground-truth study corpus.

    ``predict(pressure_batch) -> radii (m, n)`` is any callable (a trained
    model, or an oracle stub in tests).  Writes report.csv plus per-case
    spectrum_/plotdata_ CSVs when ``out_dir`` is given; ``render(case_id,
    plotdata, spec_truth, spec_pred, out_dir)`` may emit figures.
    """
    report = StudyReport()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for meta in sorted(study_manifest.samples, key=lambda m: (m.amp, m.freq)):
        case = StudyCase(
            amp=meta.amp,
            freq=meta.freq,
            in_distribution=(
                train_amp_range[0] <= meta.amp <= train_amp_range[1]
                and train_freq_range[0] <= meta.freq <= train_freq_range[1]
            ),
        )
        if meta.status != "ok":
            case.status = "missing-ground-truth"
            case.reason = meta.reason
            report.cases.append(case)
            continue
        sample = reader[meta.id]
        pred = np.asarray(predict(sample.pressure.p_bar[None, :]))[0]
        truth = sample.radius
        err = abs_error(pred, truth)
        case.mse = mse(pred, truth)
        case.max_abs_err = float(np.abs(err).max())
        case.max_abs_err_um = case.max_abs_err * meta.scales["a"] * 1e6
        dt_s = meta.scales["tau"] / (truth.size - 1)
        spec_truth = fft_spectrum(truth, dt_s)
        spec_pred = fft_spectrum(pred, dt_s)
        # a degenerate (e.g. constant) signal has no peaks; that is a finding,
        # not a reason to abort the sweep
        try:
            detect_peaks(spec_truth, meta.freq)
        except DomainError:
            pass
        try:
            _, driving = detect_peaks(spec_pred, meta.freq)
        except DomainError:
            driving = None
        case.driving_peak_found = driving is not None
        report.cases.append(case)
        if out_dir is not None:
            cid = case_id(meta.amp, meta.freq)
            t_s = sample.pressure.t_grid * meta.scales["tau"]
            _write_csv(
                os.path.join(out_dir, f"plotdata_{cid}.csv"),
                ["t", "truth", "pred", "abs_err"],
                np.column_stack([t_s, truth, pred, err]),
            )
            _write_csv(
                os.path.join(out_dir, f"spectrum_{cid}.csv"),
                ["freq", "mag_truth", "mag_pred"],
                np.column_stack([spec_truth.freqs, spec_truth.mags, spec_pred.mags]),
            )
            if render is not None:
                render(cid, t_s, truth, pred, spec_truth, spec_pred, out_dir)
    ok_cases = [c for c in report.cases if c.status == "ok"]
    for label, flag in (("in_distribution", True), ("extrapolation", False)):
        vals = [c.mse for c in ok_cases if c.in_distribution is flag]
        report.aggregates[f"mean_mse_{label}"] = float(np.mean(vals)) if vals else math.nan
    report.aggregates["n_cases"] = len(report.cases)
    report.aggregates["n_ok"] = len(ok_cases)
    if out_dir is not None:
        _write_report_csv(os.path.join(out_dir, "report.csv"), report)
    return report


def case_id(amp: float, freq: float) -> str:
    return f"amp{amp:.6g}_f{freq:.6g}".replace("+", "").replace(".", "p")


def _write_csv(path: str, header: list, rows: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def _write_report_csv(path: str, report: StudyReport):
    cols = [
        "amp", "freq", "status", "mse", "max_abs_err", "max_abs_err_um",
        "driving_peak_found", "in_distribution", "reason",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for c in report.cases:
            w.writerow([getattr(c, col) for col in cols])
