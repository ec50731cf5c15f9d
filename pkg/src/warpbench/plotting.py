"""Matplotlib figures for a finished run directory (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402
import numpy as np  # noqa: E402

from .warp import WarpField, identity_coords, warp_image  # noqa: E402

DPI = 110


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path.name


def plot_history(history: List[Dict[str, float]], path: Path) -> Optional[str]:
    evaluated = [r for r in history if "clean" in r]
    if not history:
        return None
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot([r["epoch"] for r in history], [r["loss"] for r in history], color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    for key, style in (("clean", "-o"), ("attack", "-s"), ("noise", "-^")):
        pts = [(r["epoch"], r[key]) for r in evaluated if key in r]
        if pts:
            ax_acc.plot(*zip(*pts), style, ms=3, label=key)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy (%)")
    if evaluated:
        ax_acc.legend(loc="lower right")
    return _save(fig, path)


def plot_neural_cleanse(summary: dict, path: Path) -> str:
    norms = summary["l1_norms"]
    idx = summary["anomaly_indices"]
    fig, (ax_n, ax_a) = plt.subplots(1, 2, figsize=(9, 3.2))
    colors = ["tab:red" if not ok else "tab:blue" for ok in summary["converged"]]
    ax_n.bar(range(len(norms)), norms, color=colors)
    ax_n.legend(handles=[Patch(color="tab:blue", label="converged"), Patch(color="tab:red", label="not converged")],
                fontsize=8, loc="lower right")
    ax_n.set_xlabel("target class")
    ax_n.set_ylabel("mask L1 norm")
    ax_a.bar(range(len(idx)), idx, color="tab:gray")
    ax_a.axhline(2.0, color="tab:red", ls="--", lw=1)
    ax_a.set_xlabel("target class")
    ax_a.set_ylabel("anomaly index")
    return _save(fig, path)


def plot_pruning(summary: dict, path: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(summary["num_pruned"], summary["clean_acc"], label="clean")
    ax.plot(summary["num_pruned"], summary["attack_acc"], label="attack")
    ax.set_xlabel("conv3 channels pruned")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 101)
    ax.legend()
    return _save(fig, path)


def _two_histograms(clean: np.ndarray, backdoor: np.ndarray, xlabel: str, path: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    both = np.concatenate([clean, backdoor])
    bins = np.linspace(both.min(), both.max() + 1e-12, 40)
    ax.hist(clean, bins=bins, alpha=0.6, label="clean")
    ax.hist(backdoor, bins=bins, alpha=0.6, label="backdoor")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend()
    return _save(fig, path)


def _read_population_csv(path: Path):
    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    pop = np.atleast_1d(rows["population"])
    value = np.atleast_1d(rows[rows.dtype.names[1]]).astype(float)
    return value[pop == "clean"], value[pop == "backdoor"]


def plot_population_csv(csv_path: Path, xlabel: str, path: Path) -> str:
    clean, backdoor = _read_population_csv(csv_path)
    return _two_histograms(clean, backdoor, xlabel, path)


def plot_warp_preview(images: np.ndarray, m: WarpField, path: Path, magnify: float = 2.0) -> str:
    """Rows of original / warped / magnified residual, plus the displacement field."""
    warped = warp_image(images, m)
    n = len(images)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        residual = np.clip(np.abs(warped[i] - images[i]) * magnify, 0, 1)
        for ax, img, title in zip(axes[i], (images[i], warped[i], residual),
                                  ("input", "warped", f"|residual| x{magnify:g}")):
            ax.imshow(np.moveaxis(img, 0, -1).squeeze(), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_field(m: WarpField, path: Path) -> str:
    base = identity_coords(m.h, m.w)
    rows, cols = base[..., 0], base[..., 1]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.quiver(cols, rows, m.offsets[..., 1], -m.offsets[..., 0], angles="xy")
    ax.set_xlim(-1, m.w)
    ax.set_ylim(m.h, -1)
    ax.set_aspect("equal")
    ax.set_title("displacement (pixels)", fontsize=9)
    return _save(fig, path)


def render_report_figures(run_dir: Path, report: dict) -> Dict[str, str]:
    """Render every figure the report has data for; returns name -> file."""
    run_dir = Path(run_dir)
    out: Dict[str, str] = {}
    history = report.get("metrics", {}).get("history")
    if history:
        name = plot_history(history, run_dir / "fig_training.png")
        if name:
            out["training"] = name
    defenses = report.get("defenses", {})
    if "neural_cleanse" in defenses:
        out["neural_cleanse"] = plot_neural_cleanse(defenses["neural_cleanse"], run_dir / "fig_neural_cleanse.png")
    if "fine_pruning" in defenses:
        out["fine_pruning"] = plot_pruning(defenses["fine_pruning"], run_dir / "fig_fine_pruning.png")
    if "strip" in defenses:
        out["strip"] = plot_population_csv(run_dir / defenses["strip"]["csv"], "mean entropy (nats)",
                                           run_dir / "fig_strip.png")
    if "spectral" in defenses:
        out["spectral"] = plot_population_csv(run_dir / defenses["spectral"]["csv"], "|correlation|",
                                              run_dir / "fig_spectral.png")
    field_name = report.get("artifacts", {}).get("warp_field")
    if field_name and (run_dir / field_name).exists():
        out["warp_field"] = plot_field(WarpField.load(run_dir / field_name), run_dir / "fig_warp_field.png")
    return out
