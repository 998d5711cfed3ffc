"""SVG line and density plots of verification reports (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so repeated runs give byte-identical files
matplotlib.rcParams["svg.hashsalt"] = "fraccahn"
matplotlib.rcParams["svg.fonttype"] = "none"

_LOG_AXES = {"delta", "eps"}


def plot_report(report, path) -> Path | None:
    xs = np.asarray(report.xs, dtype=float)
    ys = np.asarray(report.values, dtype=float)
    if xs.size == 0:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if report.abscissa in _LOG_AXES and np.all(ys > 0):
        ax.loglog(xs, ys, "o-", label="measured")
        if report.stderr is not None:
            ax.errorbar(xs, ys, yerr=3 * np.asarray(report.stderr), fmt="none", ecolor="gray")
        if report.slope is not None:
            fit = np.exp(report.intercept) * xs ** report.slope
            ax.loglog(xs, fit, "--", label=f"fit slope {report.slope:.3f}")
        for name, col in report.extra.items():
            col = np.asarray(col, dtype=float)
            if np.all(col > 0) and name not in ("within_3se",):
                ax.loglog(xs, col, ":", label=name)
    elif report.abscissa == "u":
        ax.plot(xs, ys, "-", label="KDE")
        ax.set_ylabel("density")
    else:
        ax.plot(xs, ys, "o-", label="value")
        if report.abscissa == "k" and np.all(ys > 0):
            ax.set_yscale("log")
    ax.set_xlabel(report.abscissa)
    ax.set_title(f"{report.name}: {'pass' if report.passed else 'FAIL'}", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
