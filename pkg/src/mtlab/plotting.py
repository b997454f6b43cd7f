"""Matplotlib figures for benchmark reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .benchmark import sweep_name  # noqa: E402


def map_bars(result, path: Path) -> None:
    methods = [m for m in dict.fromkeys(c.method for c in result.cells) if "@" not in m]
    means = [result.mean_map(m) for m in methods]
    stds = [float(np.std(result.maps(m), ddof=1)) if result.maps(m).size > 1 else 0.0
            for m in methods]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(methods)), [100 * v for v in means], yerr=[100 * s for s in stds],
           capsize=3, color="tab:blue")
    ax.set_xticks(range(len(methods)), methods, rotation=30, ha="right")
    ax.set_ylabel("target mAP50 (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def flatness_curves(result, risk: str, path: Path) -> None:
    gammas = list(result.config.gammas)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    seen = set()
    for c in result.cells:
        if c.method in seen or "@" in c.method:
            continue
        seen.add(c.method)
        for net, style in (("teacher", "-"), ("student", "--")):
            if (net, risk) not in c.flat:
                continue
            ys = [result.mean_flat(c.method, net, risk, g) for g in gammas]
            label = c.method if net == "teacher" else f"{c.method} (student)"
            ax.plot(gammas, ys, style, marker="o", ms=3, label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("gamma")
    ax.set_ylabel(f"F^gamma ({risk} risk)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def beta_sweep(result, path: Path) -> None:
    betas = list(result.config.betas)
    names = [sweep_name(b) for b in betas]
    present = {c.method for c in result.cells}
    if not betas or not all(n in present for n in names):
        return
    means = np.array([result.mean_map(n) for n in names])
    stds = np.array([float(np.std(result.maps(n), ddof=1)) if result.maps(n).size > 1 else 0.0
                     for n in names])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(betas, 100 * means, yerr=100 * stds, marker="o", capsize=3)
    ax.set_xlabel("beta")
    ax.set_ylabel("target mAP50 (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_figures(result, out: Path) -> list[Path]:
    out = Path(out)
    paths = [out / "map50.png", out / "flatness_target.png", out / "flatness_empirical.png",
             out / "beta_sweep.png"]
    map_bars(result, paths[0])
    flatness_curves(result, "target", paths[1])
    flatness_curves(result, "empirical", paths[2])
    beta_sweep(result, paths[3])
    return [p for p in paths if p.exists()]
