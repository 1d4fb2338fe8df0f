"""Diagnostic figure rendering (PNG files next to the delimited output).

Kept deliberately plain: a time-domain overlay with the signed error, a
log-magnitude spectrum with the detected peaks, and the training convergence
history.  The CSVs written by the study harness and the trainer carry the
same data for external plotting.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_case(case_id, t_s, truth, pred, spec_truth, spec_pred, out_dir):
    """Two-panel case figure: radius history + spectrum."""
    fig, (ax_t, ax_f) = plt.subplots(2, 1, figsize=(8, 6))
    t_us = np.asarray(t_s) * 1e6
    ax_t.plot(t_us, truth, label="ground truth", lw=1.0)
    ax_t.plot(t_us, pred, label="prediction", lw=1.0, ls="--")
    ax_t.set_xlabel("t [us]")
    ax_t.set_ylabel("R / R0")
    ax_t.legend(loc="best", fontsize=8)
    err = np.asarray(pred) - np.asarray(truth)
    ax_e = ax_t.twinx()
    ax_e.plot(t_us, err, color="0.6", lw=0.6, alpha=0.7)
    ax_e.set_ylabel("error", color="0.5")
    ax_f.semilogy(spec_truth.freqs / 1e3, np.maximum(spec_truth.mags, 1e-16), label="truth")
    ax_f.semilogy(spec_pred.freqs / 1e3, np.maximum(spec_pred.mags, 1e-16), label="pred", ls="--")
    for peak, marker in ((spec_truth.natural_peak, "o"), (spec_truth.driving_peak, "s")):
        if peak is not None:
            ax_f.plot(peak[0] / 1e3, peak[1], marker, color="k", ms=5, mfc="none")
    ax_f.set_xlabel("f [kHz]")
    ax_f.set_ylabel("|FFT|")
    ax_f.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, f"case_{case_id}.png"), dpi=120)
    plt.close(fig)


def render_history(history_rows, out_path):
    """Loss convergence curves from trainer history rows."""
    if not history_rows:
        return
    epochs = [r["epoch"] for r in history_rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in (("L_data", "data loss"), ("L_ode", "ode loss"), ("val_mse", "val MSE")):
        vals = np.array([r.get(key, np.nan) for r in history_rows], dtype=float)
        if np.all(~np.isfinite(vals)) or np.nanmax(np.abs(vals)) == 0:
            continue
        ax.semilogy(epochs, np.maximum(vals, 1e-300), label=label, lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_spectrum(report, out_path, title=None):
    """Standalone spectrum figure for the spectrum command."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(report.freqs / 1e3, np.maximum(report.mags, 1e-16), lw=0.9)
    for peak, marker, label in (
        (report.natural_peak, "o", "natural"),
        (report.driving_peak, "s", "driving"),
    ):
        if peak is not None:
            ax.plot(peak[0] / 1e3, peak[1], marker, color="k", ms=6, mfc="none", label=label)
    ax.set_xlabel("f [kHz]")
    ax.set_ylabel("|FFT|")
    if title:
        ax.set_title(title, fontsize=9)
    if report.natural_peak or report.driving_peak:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
