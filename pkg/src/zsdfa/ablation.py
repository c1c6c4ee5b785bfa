"""Experiment grids over encoder subsets, loss subsets, lambda and margin."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError
from .evaluate import DEFAULT_THETAS, evaluate
from .losses import LOSS_TERMS, LossConfig
from .model import Batch, EncoderConfig, ModuleFlags, PVLM
from .train import LossFlags, TrainConfig, train

VISUAL_ROWS = [  # ae, ne, ee, pe, le
    (1, 0, 0, 0, 0), (0, 0, 1, 0, 0), (0, 1, 0, 0, 0), (1, 1, 0, 0, 0), (1, 1, 0, 0, 1),
    (1, 1, 0, 1, 1), (1, 0, 1, 0, 0), (1, 1, 1, 0, 0), (1, 1, 1, 1, 0), (1, 1, 1, 0, 1),
    (1, 1, 1, 1, 1),
]
LOSS_ROWS = [LOSS_TERMS[:k] for k in range(1, len(LOSS_TERMS) + 1)]
LAMBDA_GRID = (0.0, 0.3, 0.5, 0.7)
MARGIN_GRID = (0.5, 0.7, 0.9)
GRIDS = ("modules", "losses", "lambda", "margin", "mmi")


@dataclass
class AblationRow:
    name: str
    modules: ModuleFlags = field(default_factory=ModuleFlags)
    losses: LossFlags = field(default_factory=LossFlags)
    lam: float = 0.5
    margin: float = 0.7

    def validate(self) -> None:
        self.modules.validate()
        try:
            self.losses.check_against(self.modules)
        except ConfigError as e:
            raise ConfigError(f"row {self.name!r}: {e}") from None
        LossConfig(self.lam, self.margin).validate()

    def to_dict(self) -> dict:
        return {"name": self.name, "modules": asdict(self.modules), "losses": asdict(self.losses),
                "lam": self.lam, "margin": self.margin}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        d = dict(d)
        if "name" not in d:
            raise ConfigError("every ablation row needs a name")
        modules = ModuleFlags.from_dict(d.pop("modules", {}))
        # unspecified loss flags follow the enabled encoders
        losses = asdict(LossFlags.for_modules(modules))
        losses.update(d.pop("losses", {}))
        unknown = set(d) - {"name", "lam", "margin"}
        if unknown:
            raise ConfigError(f"unknown ablation row keys {sorted(unknown)}")
        return cls(modules=modules, losses=LossFlags(**losses), **d)


def _module_row(bits) -> AblationRow:
    mods = ModuleFlags(**dict(zip(("ae", "ne", "ee", "pe", "le"), map(bool, bits))))
    name = "+".join(k.upper() for k, on in zip(("ae", "ne", "ee", "pe", "le"), bits) if on)
    return AblationRow(name, mods, LossFlags.for_modules(mods))


def grid_rows(grid: str) -> list[AblationRow]:
    if grid == "modules":
        return [_module_row(b) for b in VISUAL_ROWS]
    if grid == "losses":
        return [AblationRow("+".join(r), losses=LossFlags.only(*r)) for r in LOSS_ROWS]
    if grid == "lambda":
        return [AblationRow(f"lambda={v}", lam=v) for v in LAMBDA_GRID]
    if grid == "margin":
        return [AblationRow(f"m={v}", margin=v) for v in MARGIN_GRID]
    if grid == "mmi":
        return [AblationRow("without MMI", ModuleFlags(mmi=False)), AblationRow("with MMI")]
    raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")


def resolve_rows(grid: str | None = None, rows: list[dict] | None = None) -> list[AblationRow]:
    out = grid_rows(grid) if grid else []
    out += [AblationRow.from_dict(r) for r in rows or []]
    if not out:
        raise ConfigError("ablation grid is empty")
    names = [r.name for r in out]
    if len(set(names)) != len(names):
        raise ConfigError("ablation row names must be unique")
    for r in out:
        r.validate()
    return out


RESULT_FIELDS = ("config", "seed", "seen_acc") + tuple(f"unseen_acc@{t}" for t in DEFAULT_THETAS)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def run_ablation(rows: list[AblationRow], seeds: list[int], enc: EncoderConfig, base: TrainConfig,
                 train_batch: Batch, test_batch: Batch, families: list[str], seen: list[str],
                 unseen: list[str], out_dir, val_idx: np.ndarray | None = None,
                 log: Callable[[str], None] | None = None, data_key: str | None = None) -> list[dict]:
    """Train and evaluate every (row, seed); each run gets its own directory.

    A run whose ``result.json`` matches the requested row, seed, settings and
    ``data_key`` (typically the dataset hash) is reused.
    Returns per-seed rows followed by one median row per config.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(out_dir)
    results = []
    val = test_batch.take(val_idx) if val_idx is not None else None
    for row in rows:
        for seed in seeds:
            run_dir = out / _slug(row.name) / f"seed{seed}"
            key = {"row": row.to_dict(), "seed": seed, "train": base.to_dict(), "model": enc.to_dict(),
                   "data": data_key}
            cached = run_dir / "result.json"
            if cached.exists():
                prev = json.loads(cached.read_text())
                if prev.get("key") == key:
                    results.append(prev["result"])
                    continue
            cfg = TrainConfig.from_dict(dict(base.to_dict(), seed=seed))
            cfg.losses = row.losses
            cfg.loss = LossConfig(row.lam, row.margin, base.loss.kl_temperature)
            model = PVLM(enc, seed=seed, flags=row.modules)
            if log:
                log(f"[{row.name} seed {seed}] training")
            t0 = time.perf_counter()
            train(model, train_batch, cfg, run_dir, val)
            seconds = time.perf_counter() - t0
            rep = evaluate(model, test_batch, families, seen, unseen, DEFAULT_THETAS)
            res = {"config": row.name, "seed": seed, "seen_acc": rep.seen_acc}
            for t in DEFAULT_THETAS:
                res[f"unseen_acc@{t}"] = rep.unseen_acc(t)
            cached.write_text(json.dumps({"key": key, "result": res, "train_seconds": seconds}, indent=1,
                                         sort_keys=True))
            results.append(res)
    return results + median_rows(results, [r.name for r in rows])


def median_rows(results: list[dict], order: list[str]) -> list[dict]:
    meds = []
    for name in order:
        mine = [r for r in results if r["config"] == name and r["seed"] != "median"]
        if not mine:
            continue
        med = {"config": name, "seed": "median"}
        for k in RESULT_FIELDS[2:]:
            med[k] = statistics.median(r[k] for r in mine)
        meds.append(med)
    return meds


def write_results(results: list[dict], rows: list[AblationRow], out_dir, grid: str | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out / "ablation.csv", out / "ablation.md"
    order = {r.name: i for i, r in enumerate(rows)}
    ordered = sorted(results, key=lambda r: (order[r["config"]], r["seed"] == "median",
                                                  r["seed"] if r["seed"] != "median" else 0))
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for r in ordered:
            w.writerow([r[k] if isinstance(r[k], str) else repr(r[k]) for k in RESULT_FIELDS])
    md_path.write_text(markdown_table(results, rows, grid))
    return [csv_path, md_path]


def markdown_table(results: list[dict], rows: list[AblationRow], grid: str | None = None) -> str:
    """Median rows as a markdown table (ACC in percent)."""
    meds = {r["config"]: r for r in results if r["seed"] == "median"}
    theta = max(DEFAULT_THETAS)
    if grid == "modules":
        head = ["AE", "NE", "EE", "PE", "LE", "Seen ACC", f"Unseen ACC ({theta})"]
    else:
        head = ["Config", "Seen ACC", f"Unseen ACC ({theta})"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        m = meds.get(r.name)
        if m is None:
            continue
        vals = [f"{100 * m['seen_acc']:.2f}", f"{100 * m[f'unseen_acc@{theta}']:.2f}"]
        if grid == "modules":
            marks = ["✓" if getattr(r.modules, k) else "" for k in ("ae", "ne", "ee", "pe", "le")]
            cells = marks + vals
        else:
            cells = [r.name] + vals
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"

