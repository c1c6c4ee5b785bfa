"""PNG figures rendered next to the CSV outputs (Agg backend, no display)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import EvalReport  # noqa: E402


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(epoch_csv, path) -> Path:
    head, rows = _read_csv(epoch_csv)
    data = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(head))
    epoch = data[:, head.index("epoch")] + 1
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("dfa", "dfacc", "cmc", "dcpc", "kl", "total"):
        col = data[:, head.index(name)]
        if np.any(col != 0):
            a1.plot(epoch, col, label=name, lw=2 if name == "total" else 1)
    a1.set_xlabel("epoch")
    a1.set_ylabel("mean loss")
    a1.legend(fontsize=8)
    a2.plot(epoch, data[:, head.index("val_seen_acc")], marker="o", ms=3)
    a2.set_ylim(0, 1.02)
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation seen ACC")
    return _save(fig, Path(path))


def confusion(rep: EvalReport, theta: float, path) -> Path:
    m = np.array(rep.at(theta).confusion, dtype=float)
    norm = m / np.maximum(m.sum(axis=1, keepdims=True), 1)
    labels = rep.seen_families + ["unseen"]
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    for i in range(len(labels)):
        for j in range(len(labels)):
            if m[i, j]:
                ax.text(j, i, int(m[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xlabel("decision")
    ax.set_ylabel("true class")
    ax.set_title(f"theta = {theta}")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, Path(path))


def robustness(rows: list[dict], path) -> Path:
    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in kinds:
        mine = sorted((r for r in rows if r["kind"] == kind), key=lambda r: r["severity"])
        ax.plot([r["severity"] for r in mine], [r["seen_acc"] for r in mine], marker="o", ms=3, label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("seen ACC")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def embedding(coords: np.ndarray, families: list[str], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    fams = np.asarray(families)
    for name in dict.fromkeys(families):
        m = fams == name
        ax.scatter(coords[m, 0], coords[m, 1], s=6, label=name, alpha=0.7)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7, markerscale=2)
    return _save(fig, Path(path))


def eval_figures(rep: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = [confusion(rep, m.theta, out / f"confusion_{m.theta}.png") for m in rep.thresholds]
    if rep.robustness:
        paths.append(robustness(rep.robustness, out / "robustness.png"))
    return paths
