"""Figures for the experiment tables (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_waveforms(traces, summary, path) -> Path:
    """One panel per band count: theory traces against the master-equation trace."""
    n = len(traces)
    cols = min(3, n)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.0 * rows), squeeze=False)
    errs = dict(zip(summary.column("n_bands").astype(int), summary.column("rel_rms_quasi_static_vs_rk4")))
    for ax, tab in zip(axes.flat, traces):
        t = tab.column("t_s") * 1e6
        if "rk4_w" in tab.columns:
            ax.plot(t, tab.column("rk4_w") * 1e6, color="k", lw=1.2, label="master equation")
        ax.plot(t, tab.column("quasi_static_w") * 1e6, "--", color="tab:red", lw=1.0, label="quasi-static")
        ax.plot(t, tab.column("linearized_w") * 1e6, ":", color="tab:blue", lw=1.0, label="linearized")
        n_bands = int(tab.name.split("N")[-1])
        err = errs.get(n_bands, np.nan)
        ax.set_title(f"N = {n_bands}" + ("" if np.isnan(err) else f"  (rel. RMS {100 * err:.2f}%)"), fontsize=9)
        ax.set_xlabel("t (us)")
        ax.set_ylabel("probe power (uW)")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    return _save(fig, path)


def plot_attention(table, path) -> Path:
    a = table.column("alpha")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for k, color in ((1, "tab:blue"), (2, "tab:orange")):
        ax1.plot(a, table.column(f"se_band{k}_bps_hz"), color=color, label=f"band {k}")
        ax1.axhline(table.column(f"classic_se_band{k}_bps_hz")[0], color=color, ls=":", lw=0.9,
                    label=f"classic {k} (approx.)")
        nc = table.column(f"ncrlb_band{k}_db")
        ax2.plot(a, np.where(np.isfinite(nc), nc, np.nan), color=color, label=f"band {k}")
        ax2.axhline(table.column(f"classic_ncrlb_band{k}_db")[0], color=color, ls=":", lw=0.9)
    ax1.set_xlabel("Rabi attention alpha (band 1)")
    ax1.set_ylabel("SE (bps/Hz)")
    ax2.set_xlabel("Rabi attention alpha (band 1)")
    ax2.set_ylabel("NCRLB (dB)")
    ax1.legend(fontsize=7)
    ax2.legend(fontsize=7)
    return _save(fig, path)


def plot_sumsquare(table, path) -> Path:
    x = table.column("sqrt_sum_square_mhz_over_2pi")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.semilogx(x, table.column("se_optimal_alpha_bps_hz"), label="optimal alpha")
    ax1.semilogx(x, table.column("se_random_alpha_bps_hz"), "--", label="random alpha")
    ax1.axhline(table.column("classic_se_bps_hz")[0], color="gray", ls=":", label="classic (approx.)")
    ax2.semilogx(x, table.column("ncrlb_optimal_alpha_db"), label="optimal alpha")
    ax2.semilogx(x, table.column("ncrlb_random_alpha_db"), "--", label="random alpha")
    ax2.axhline(table.column("classic_ncrlb_db")[0], color="gray", ls=":", label="classic (approx.)")
    for ax in (ax1, ax2):
        ax.set_xlabel("sqrt(A) / 2pi (MHz)")
        ax.legend(fontsize=7)
    ax1.set_ylabel("mean SE (bps/Hz)")
    ax2.set_ylabel("mean NCRLB (dB)")
    return _save(fig, path)


def plot_power(table, path) -> Path:
    x = table.column("pt_dbm")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for suffix, style, label in (("optimal_alpha", "-o", "optimal alpha"), ("random_alpha", "--s", "random alpha")):
        ax1.plot(x, table.column(f"se_{suffix}_bps_hz"), style, ms=3, label=label)
        ax2.plot(x, table.column(f"ncrlb_{suffix}_db"), style, ms=3, label=label)
    ax1.plot(x, table.column("classic_se_bps_hz"), ":", color="gray", label="classic (approx.)")
    ax2.plot(x, table.column("classic_ncrlb_db"), ":", color="gray", label="classic (approx.)")
    for ax in (ax1, ax2):
        ax.set_xlabel("transmit power (dBm)")
        ax.legend(fontsize=7)
    ax1.set_ylabel("mean SE (bps/Hz)")
    ax2.set_ylabel("mean NCRLB (dB)")
    return _save(fig, path)
