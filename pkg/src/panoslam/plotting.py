"""Static figures for runs and ablations (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DatasetError  # noqa: E402


def _save(fig, path):
    try:
        fig.savefig(path, dpi=120)
    except OSError as exc:
        raise DatasetError(path, f"cannot write figure: {exc.strerror}") from exc
    finally:
        plt.close(fig)
    return Path(path)


def plot_trajectory(path, gt, est=None, title=None):
    """Top-down (x, y) view of ground truth and, optionally, an aligned estimate.

    ``gt`` and ``est`` are ``(n, 3)`` position arrays in the same world
    frame (z up).
    """
    gt = np.asarray(gt, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt[:, 0], gt[:, 1], "-", color="0.4", lw=1.5, label="ground truth")
    if est is not None:
        est = np.asarray(est, dtype=float)
        ax.plot(est[:, 0], est[:, 1], "-", color="tab:red", lw=1.0, label="estimate")
        ax.plot(est[0, 0], est[0, 1], "o", color="tab:red", ms=4)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, lw=0.3)
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(path, rows, title="ATE by association threshold"):
    """Grouped bar chart of ATE per (method, theta) with baselines as dashed lines.

    ``rows`` are :class:`~panoslam.cli.AblationRow`-like objects with
    ``method``, ``theta`` (``None`` for a baseline) and ``ate``.
    """
    methods = list(dict.fromkeys(r.method for r in rows))
    thetas = sorted({r.theta for r in rows if r.theta is not None})
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(thetas))
    for m, method in enumerate(methods):
        vals = {r.theta: r.ate for r in rows if r.method == method and r.theta is not None}
        heights = [vals.get(th, np.nan) for th in thetas]
        ax.bar(x + (m - (len(methods) - 1) / 2) * width, heights, width, color=colors[m % len(colors)],
               label=method)
        for r in rows:
            if r.method == method and r.theta is None and np.isfinite(r.ate):
                ax.axhline(r.ate, ls="--", lw=1.0, color=colors[m % len(colors)],
                           label=f"{method}, no association")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{th:g}" for th in thetas])
    ax.set_xlabel("theta [m]")
    ax.set_ylabel("ATE [m]")
    ax.set_title(title)
    ax.legend(loc="best", frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
