"""Open-set attribution decisions, metrics, robustness sweeps and embedding export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import Batch, PVLM
from .preprocess import CORRUPTION_KINDS, CorruptionSpec, corrupt

UNSEEN = -1
DEFAULT_THETAS = (0.7, 0.9)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decide(logits: np.ndarray, theta: float) -> np.ndarray:
    """Vectorised max-softmax rule: generator index, or ``UNSEEN`` when the
    top probability is below ``theta``.  Ties go to the smallest index."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    p = softmax(np.atleast_2d(logits))
    return np.where(p.max(axis=-1) < theta, UNSEEN, p.argmax(axis=-1))


def thresholded_attribution(logits, theta: float) -> int:
    return int(decide(np.asarray(logits, dtype=np.float64).reshape(1, -1), theta)[0])


@dataclass
class ThresholdMetrics:
    theta: float
    unseen_acc: float
    seen_acc_thresholded: float
    confusion: list[list[int]]


@dataclass
class EvalReport:
    seen_families: list[str]
    unseen_families: list[str]
    seen_acc: float
    thresholds: list[ThresholdMetrics]
    per_family: list[dict]
    robustness: list[dict] = field(default_factory=list)

    def at(self, theta: float) -> ThresholdMetrics:
        for m in self.thresholds:
            if m.theta == theta:
                return m
        raise KeyError(theta)

    def unseen_acc(self, theta: float) -> float:
        return self.at(theta).unseen_acc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["thresholds"] = [ThresholdMetrics(**m) for m in d["thresholds"]]
        return cls(**d)


def metrics_from_logits(logits: np.ndarray, families: list[str], seen: list[str], unseen: list[str],
                        thetas=DEFAULT_THETAS) -> EvalReport:
    """All report numbers from a fixed logit matrix (pure function).

    Confusion rows are true classes (seen families in label order, then one
    row for all unseen families); columns are decisions with the last one
    meaning UNSEEN.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ConfigError("evaluation needs a non-empty test set")
    if len(families) != len(logits):
        raise ConfigError("one family name per logit row required")
    x = len(seen)
    if logits.shape[1] != x:
        raise ConfigError(f"logits have {logits.shape[1]} columns for {x} seen families")
    fam = np.asarray(families)
    truth = np.array([seen.index(f) if f in seen else x for f in families])
    is_seen = truth < x
    argmax = logits.argmax(axis=1)
    seen_acc = float(np.mean(argmax[is_seen] == truth[is_seen])) if is_seen.any() else float("nan")
    ths, decisions = [], {}
    for theta in thetas:
        d = decide(logits, theta)
        decisions[theta] = d
        col = np.where(d == UNSEEN, x, d)
        conf = np.zeros((x + 1, x + 1), dtype=np.int64)
        np.add.at(conf, (truth, col), 1)
        unseen_acc = float(np.mean(d[~is_seen] == UNSEEN)) if (~is_seen).any() else float("nan")
        seen_thr = float(np.mean(d[is_seen] == truth[is_seen])) if is_seen.any() else float("nan")
        ths.append(ThresholdMetrics(float(theta), unseen_acc, seen_thr, conf.tolist()))
    rows = []
    for name in list(seen) + list(unseen):
        m = fam == name
        if not m.any():
            continue
        row = {"family": name, "kind": "seen" if name in seen else "unseen", "n": int(m.sum())}
        if name in seen:
            lbl = seen.index(name)
            row["acc_argmax"] = float(np.mean(argmax[m] == lbl))
            for theta in thetas:
                row[f"acc@{theta}"] = float(np.mean(decisions[theta][m] == lbl))
        else:
            row["acc_argmax"] = None
            for theta in thetas:
                row[f"acc@{theta}"] = float(np.mean(decisions[theta][m] == UNSEEN))
        rows.append(row)
    return EvalReport(list(seen), list(unseen), seen_acc, ths, rows)


def infer_logits(model: PVLM, batch: Batch, chunk: int = 64) -> np.ndarray:
    batch = batch.astype(model.dtype)
    out = []
    with T.no_grad():
        for i in range(0, len(batch), chunk):
            out.append(model.forward_infer(batch.take(slice(i, i + chunk))).data)
    return np.concatenate(out).astype(np.float64)


def infer_embeddings(model: PVLM, batch: Batch, chunk: int = 64) -> np.ndarray:
    batch = batch.astype(model.dtype)
    out = []
    with T.no_grad():
        for i in range(0, len(batch), chunk):
            out.append(model.visual(batch.take(slice(i, i + chunk))).data)
    return np.concatenate(out).astype(np.float64)


def evaluate(model: PVLM, batch: Batch, families: list[str], seen: list[str], unseen: list[str],
             thetas=DEFAULT_THETAS) -> EvalReport:
    if len(batch) == 0:
        raise ConfigError("evaluation needs a non-empty test set")
    return metrics_from_logits(infer_logits(model, batch), families, seen, unseen, thetas)


def corruption_seed(seed: int, kind: str, severity: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), CORRUPTION_KINDS.index(kind), severity, index])
    return int(ss.generate_state(1, np.uint32)[0])


def robustness_sweep(model: PVLM, samples, seen: list[str], unseen: list[str], kinds=CORRUPTION_KINDS,
                     severities=range(6), seed: int = 0, thetas=DEFAULT_THETAS, tables=None) -> list[dict]:
    """Re-run preprocessing and inference on corrupted copies of the test set.

    One row per (kind, severity) with seen ACC and unseen ACC per theta.
    """
    from .train import batch_from_samples

    families = [s.family for s in samples]
    rows = []
    for kind in kinds:
        for sev in severities:
            spec = CorruptionSpec(kind, sev)
            batch = batch_from_samples(
                samples, model.cfg.patch,
                lambda i, s: corrupt(s.image, spec, corruption_seed(seed, kind, sev, i), tables))
            rep = metrics_from_logits(infer_logits(model, batch), families, seen, unseen, thetas)
            row = {"kind": kind, "severity": sev, "seen_acc": rep.seen_acc}
            for m in rep.thresholds:
                row[f"unseen_acc@{m.theta}"] = m.unseen_acc
            rows.append(row)
    return rows


def pca_2d(emb: np.ndarray) -> np.ndarray:
    """Projection onto the top two principal axes (sign fixed so the largest
    loading of each axis is positive)."""
    centred = emb - emb.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    return centred @ (axes * signs[:, None]).T


# -- writers -----------------------------------------------------------------------
def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_report(rep: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "eval_report.json", out / "eval_summary.csv", out / "per_family.csv"]
    paths[0].write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    _write_csv(paths[1], ["theta", "seen_acc", "seen_acc_thresholded", "unseen_acc"],
               [[m.theta, rep.seen_acc, m.seen_acc_thresholded, m.unseen_acc] for m in rep.thresholds])
    keys = list(rep.per_family[0]) if rep.per_family else ["family"]
    _write_csv(paths[2], keys, [[r[k] if r[k] is not None else "" for k in keys] for r in rep.per_family])
    labels = rep.seen_families + ["unseen"]
    for m in rep.thresholds:
        p = out / f"confusion_{m.theta}.csv"
        _write_csv(p, ["true\\decision"] + labels, [[labels[i]] + row for i, row in enumerate(m.confusion)])
        paths.append(p)
    if rep.robustness:
        p = out / "robustness.csv"
        keys = list(rep.robustness[0])
        _write_csv(p, keys, [[r[k] for k in keys] for r in rep.robustness])
        paths.append(p)
    return paths


def write_embedding(coords: np.ndarray, families: list[str], path) -> Path:
    path = Path(path)
    _write_csv(path, ["x", "y", "family"], [[repr(float(a)), repr(float(b)), f]
                                          for (a, b), f in zip(coords, families)])
    return path
