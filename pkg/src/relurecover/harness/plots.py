"""Figures written next to the CSV summaries (Agg backend, PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def recovery_errors(match, path):
    """Stacked per-unit errors |w - ξw̃|, |b - ξb̃|, |a - ã| of a match report dict."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{i}→{j}" for i, j in match["pairs"]]
        x = np.arange(len(labels))
        bottom = np.zeros(len(labels))
        for key, name in (("w_err", "direction"), ("b_err", "bias"), ("a_err", "output weight")):
            vals = np.asarray(match[key], dtype=float)
            ax.bar(x, vals, bottom=bottom, label=name, width=0.6)
            bottom += vals
        ax.set_xticks(x, labels)
        ax.set_xlabel("true unit → recovered unit")
        ax.set_ylabel("error")
        ax.set_title("Per-unit recovery error")
        ax.legend()
        return _save(fig, path)


def estimate_noise(rows, path):
    """Standard error (and error against the exact value, when known) per order k."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        k = [r["k"] for r in rows]
        ax.semilogy(k, [max(r["stderr_frobenius"], 1e-300) for r in rows], "o-", label="standard error")
        exact = [r.get("frobenius_error_vs_exact") for r in rows]
        if all(e is not None for e in exact):
            ax.semilogy(k, [max(e, 1e-300) for e in exact], "s--", label="error vs exact")
        ax.set_xlabel("order k")
        ax.set_ylabel("Frobenius norm")
        ax.set_title("Coefficient estimation noise")
        ax.legend()
        return _save(fig, path)


def singular_spectra(spectra, thresholds, path):
    """Singular values of the rank-detection matricizations with their thresholds."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (name, s), eta, marker in zip(spectra.items(), thresholds, "os^v"):
            s = np.maximum(np.asarray(s, dtype=float), 1e-300)
            line, = ax.semilogy(np.arange(1, s.size + 1), s, marker + "-", label=name)
            ax.axhline(eta, color=line.get_color(), ls=":", lw=1)
        ax.set_xlabel("index r")
        ax.set_ylabel("s_r")
        ax.set_title("Spectra and rank thresholds")
        ax.legend()
        return _save(fig, path)


def convergence(curves, path):
    """Median error against N on log-log axes, with an N^(-1/2) guide."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, curve in curves.items():
            N = np.array([c[0] for c in curve], dtype=float)
            e = np.array([c[1] for c in curve], dtype=float)
            line, = ax.loglog(N, e, "o-", label=f"k = {k}")
            ax.loglog(N, e[0] * np.sqrt(N[0] / N), color=line.get_color(), ls=":", lw=1)
        ax.set_xlabel("N")
        ax.set_ylabel("median Frobenius error")
        ax.set_title("Estimator convergence (dotted: slope -1/2)")
        ax.legend()
        return _save(fig, path)


def lemma_margins(report, path):
    """Worst margin per degree for each grid suite."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for check in report["checks"]:
            if not check["per_k"]:
                continue
            ks = sorted(int(k) for k in check["per_k"])
            vals = [check["per_k"][str(k)] for k in ks]
            ax.plot(ks, vals, "o-", label=check["name"])
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_xlabel("degree k")
        ax.set_ylabel("worst margin")
        ax.set_title("Inequality margins on the grid")
        ax.legend()
        return _save(fig, path)
