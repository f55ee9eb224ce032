"""Headless figure rendering for the CSV artifacts the report path writes.

Each function takes a CSV produced elsewhere in the package and renders a
PNG next to it (or at an explicit path). Rendering is strictly optional
sugar over the delimited output — nothing here is read back by the
package itself.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _png_path(csv_path, png_path):
    return png_path if png_path is not None else os.path.splitext(csv_path)[0] + ".png"


def _read_rows(csv_path):
    with open(csv_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def plot_metrics(csv_path, png_path=None):
    """Episode return plus loss curves from a training metrics file."""
    header, rows = _read_rows(csv_path)
    out = _png_path(csv_path, png_path)
    fig, (ax_ret, ax_loss) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    if rows:
        col = {name: i for i, name in enumerate(header)}
        steps = np.array([float(r[col["step"]]) for r in rows])
        ax_ret.plot(steps, [float(r[col["return"]]) for r in rows], lw=0.9)
        for name in ("loss_sac", "loss_cst", "loss_m"):
            ax_loss.plot(steps, [float(r[col[name]]) for r in rows],
                         lw=0.9, label=name)
        ax_loss.legend(fontsize=8)
        ax_loss.set_yscale("symlog", linthresh=1e-6)
    ax_ret.set_ylabel("episode return")
    ax_loss.set_ylabel("mean loss")
    ax_loss.set_xlabel("environment step")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_stability(csv_path, png_path=None):
    """Open- and closed-loop poles on the complex plane with the unit circle."""
    header, rows = _read_rows(csv_path)
    out = _png_path(csv_path, png_path)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    theta = np.linspace(0, 2 * np.pi, 256)
    ax.plot(np.cos(theta), np.sin(theta), "k--", lw=0.7, alpha=0.6)
    styles = {"open": dict(c="tab:blue", marker="o", label="open loop"),
              "closed": dict(c="tab:red", marker="x", label="closed loop")}
    for kind, style in styles.items():
        pts = [(float(r[2]), float(r[3])) for r in rows if r[0] == kind]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=28, **style)
    ax.axhline(0, color="k", lw=0.4)
    ax.axvline(0, color="k", lw=0.4)
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_learned_costs(csv_path, png_path=None):
    """Bar chart of the effective Q and R diagonals."""
    header, rows = _read_rows(csv_path)
    out = _png_path(csv_path, png_path)
    q = [float(r[2]) for r in rows if r[0] == "Q"]
    r_diag = [float(r[2]) for r in rows if r[0] == "R"]
    fig, (ax_q, ax_r) = plt.subplots(
        1, 2, figsize=(8, 3.2),
        gridspec_kw={"width_ratios": [max(len(q), 1), max(len(r_diag), 1)]})
    ax_q.bar(range(len(q)), q, color="tab:blue")
    ax_q.set_title("learned Q diagonal", fontsize=9)
    ax_q.set_xlabel("latent index")
    ax_r.bar(range(len(r_diag)), r_diag, color="tab:orange")
    ax_r.set_title("learned R diagonal", fontsize=9)
    ax_r.set_xlabel("control index")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_model_error(csv_path, png_path=None):
    """Per-step one-step prediction error along a rollout."""
    header, rows = _read_rows(csv_path)
    out = _png_path(csv_path, png_path)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    if rows:
        ax.plot([int(r[0]) for r in rows], [float(r[1]) for r in rows], lw=0.9)
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("squared prediction error")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_latents(csv_path, png_path=None, dims=(0, 1)):
    """True vs one-step-predicted latent trajectories in two chosen dims."""
    header, rows = _read_rows(csv_path)
    out = _png_path(csv_path, png_path)
    i, j = dims
    fig, ax = plt.subplots(figsize=(5.5, 5))
    plotted = False
    for kind, color in (("true", "tab:blue"), ("pred", "tab:red")):
        pts = [(float(r[2 + i]), float(r[2 + j])) for r in rows if r[1] == kind]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, lw=0.7, alpha=0.8, color=color, label=kind)
            plotted = True
    ax.set_xlabel(f"z_{i}")
    ax.set_ylabel(f"z_{j}")
    if plotted:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


RENDERERS = {
    "metrics.csv": plot_metrics,
    "stability.csv": plot_stability,
    "learned_q.csv": plot_learned_costs,
    "model_error.csv": plot_model_error,
    "latents.csv": plot_latents,
}


def render_all(run_dir):
    """Render a PNG beside every known CSV present in a run directory."""
    written = []
    for name, renderer in RENDERERS.items():
        csv_path = os.path.join(run_dir, name)
        if os.path.exists(csv_path):
            written.append(renderer(csv_path))
    return written
