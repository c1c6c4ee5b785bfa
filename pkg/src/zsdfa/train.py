"""Training loop: view precomputation, loss composition, Adam, logging."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ConfigError, NumericError
from .model import Batch, ModuleFlags, PVLM, save_checkpoint
from .preprocess import views

LOSS_DEPENDS = {"cmc": "le", "kl": "le", "dcpc": "pe"}


@dataclass
class LossFlags:
    dfa: bool = True
    dfacc: bool = True
    cmc: bool = True
    dcpc: bool = True
    kl: bool = True

    def enabled(self) -> list[str]:
        return [n for n in L.LOSS_TERMS if getattr(self, n)]

    def check_against(self, modules: ModuleFlags) -> None:
        """Reject loss terms whose encoder is switched off."""
        if not self.enabled():
            raise ConfigError("at least one loss term must be enabled")
        for term, mod in LOSS_DEPENDS.items():
            if getattr(self, term) and not getattr(modules, mod):
                raise ConfigError(f"loss {term!r} needs module {mod!r}, which is disabled")

    @classmethod
    def only(cls, *names: str) -> "LossFlags":
        unknown = set(names) - set(L.LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        return cls(**{n: n in names for n in L.LOSS_TERMS})

    @classmethod
    def for_modules(cls, modules: ModuleFlags) -> "LossFlags":
        return cls(**{n: not (n in LOSS_DEPENDS and not getattr(modules, LOSS_DEPENDS[n]))
                      for n in L.LOSS_TERMS})


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-3
    lr_drop_every: int = 15
    lr_drop_factor: float = 10.0
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_per_family: int = 16
    losses: LossFlags = field(default_factory=LossFlags)
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def validate(self, modules: ModuleFlags | None = None, b_max: int | None = None) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if b_max is not None and self.batch_size > b_max:
            raise ConfigError(f"batch_size {self.batch_size} exceeds gate size b_max={b_max}")
        if self.lr_drop_every < 1 or self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_every must be >= 1 and lr_drop_factor > 0")
        self.loss.validate()
        self.losses.check_against(modules or ModuleFlags())

    def lr_at(self, epoch: int) -> float:
        return self.lr / self.lr_drop_factor ** (epoch // self.lr_drop_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        losses = LossFlags(**d.pop("losses", {}))
        loss = L.LossConfig(**d.pop("loss", {}))
        known = {f for f in cls.__dataclass_fields__} - {"losses", "loss"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(losses=losses, loss=loss, **d)


def batch_from_samples(samples, patch: int, image_fn: Callable | None = None) -> Batch:
    """Run preprocessing for every sample and stack the results.

    ``image_fn(index, sample)`` can substitute the raw image (corruption sweeps).
    """
    if not samples:
        raise ConfigError("no samples to batch")
    app, edge, noise = [], [], []
    for i, s in enumerate(samples):
        img = s.image if image_fn is None else image_fn(i, s)
        a, e, n = views(img, patch)
        app.append(a)
        edge.append(e)
        noise.append(n)
    return Batch(np.stack(app), np.stack(edge), np.stack(noise),
                 np.stack([s.parsing for s in samples]),
                 np.stack([s.prompt_tokens for s in samples]),
                 np.array([s.label for s in samples], dtype=np.int64))


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.wd * p.data if self.wd else p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def compute_losses(model: PVLM, batch: Batch, flags: LossFlags, cfg: L.LossConfig,
                   step: int = -1):
    """Forward pass plus the enabled loss terms.  Returns ``(total, report)``."""
    out = model.forward_train(batch)
    x = model.cfg.x
    parts: dict = {}
    intra = inter = None
    if flags.dfa:
        onehot = np.eye(x)[batch.labels]
        parts["dfa"] = L.dfa_loss(T.softmax_rows(out.logits), onehot)
    if flags.dfacc:
        parts["dfacc"], intra, inter = L.dfacc_loss(out.logits, batch.labels, model.centers,
                                                    cfg.lam, cfg.margin)
    if flags.cmc:
        parts["cmc"] = L.cmc_loss(out.I_v, out.T_l, T.exp(model.log_tau_cmc))
    if flags.dcpc:
        parts["dcpc"] = L.dcpc_loss(out.I_v, out.P_g, model.gate, T.exp(model.log_tau))
    if flags.kl:
        parts["kl"] = L.kl_align_loss(out.T_l_pre, out.T_l, cfg.kl_temperature)
    for name, t in parts.items():
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite {name} loss at step {step}", step=step, term=name)
    return L.total_loss(parts, intra, inter)


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), epoch])).permutation(n)


def batches(order: np.ndarray, b: int):
    """Index chunks of size ``b``; a trailing chunk shorter than 2 is dropped."""
    for i in range(0, len(order), b):
        chunk = order[i:i + b]
        if len(chunk) >= 2:
            yield chunk


def seen_accuracy(model: PVLM, batch: Batch, chunk: int = 64) -> float:
    from .evaluate import infer_logits
    logits = infer_logits(model, batch, chunk)
    return float(np.mean(np.argmax(logits, axis=1) == batch.labels))


EPOCH_FIELDS = ("epoch", "lr") + L.LossReport.CSV_FIELDS[1:] + ("val_seen_acc", "gate_abs_mean")


@dataclass
class TrainResult:
    model: PVLM
    step_csv: Path
    epoch_csv: Path
    final_ckpt: Path
    best_ckpt: Path
    best_epoch: int
    best_val_acc: float
    steps: int
    epoch_seconds: list[float] = field(default_factory=list)


def _fmt(v: float) -> str:
    return repr(float(v))


def train(model: PVLM, train_batch: Batch, cfg: TrainConfig, out_dir, val_batch: Batch | None = None,
          log: Callable[[str], None] | None = None, extra_meta: dict | None = None) -> TrainResult:
    """Fixed-budget training.

    Writes ``losses_step.csv``, ``losses_epoch.csv``, ``final.ckpt`` and
    ``best.ckpt`` (highest seen accuracy on ``val_batch``; ties keep the
    earlier epoch) into ``out_dir``.  Nothing written depends on wall-clock
    time; per-epoch durations are returned instead.
    """
    cfg.validate(model.flags, model.cfg.b_max)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_batch = train_batch.astype(model.dtype)
    if val_batch is not None:
        val_batch = val_batch.astype(model.dtype)
    opt = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    step_path, epoch_path = out / "losses_step.csv", out / "losses_epoch.csv"
    final_path, best_path = out / "final.ckpt", out / "best.ckpt"
    best_acc, best_epoch = -1.0, -1
    step = 0
    epoch_seconds: list[float] = []
    meta = dict(extra_meta or {}, train=cfg.to_dict())
    with open(step_path, "w", newline="") as fs, open(epoch_path, "w", newline="") as fe:
        ws, we = csv.writer(fs), csv.writer(fe)
        ws.writerow(L.LossReport.CSV_FIELDS)
        we.writerow(EPOCH_FIELDS)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            opt.lr = cfg.lr_at(epoch)
            sums = np.zeros(len(L.LossReport.CSV_FIELDS) - 1)
            n_steps = 0
            for idx in batches(shuffle_order(len(train_batch), cfg.seed, epoch), cfg.batch_size):
                model.zero_grad()
                total, rep = compute_losses(model, train_batch.take(idx), cfg.losses, cfg.loss, step)
                T.backward(total)
                opt.step()
                row = rep.row(step)
                ws.writerow(row)
                sums += [float(v) for v in row[1:]]
                n_steps += 1
                step += 1
            acc = seen_accuracy(model, val_batch) if val_batch is not None else math.nan
            means = sums / max(n_steps, 1)
            gate_abs = float(np.abs(model.gate.data).mean())
            we.writerow([epoch, _fmt(opt.lr)] + [_fmt(v) for v in means] + [_fmt(acc), _fmt(gate_abs)])
            epoch_seconds.append(time.perf_counter() - t0)
            fe.flush()
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {means[-1]:.4f} val_seen_acc {acc:.4f}")
            if val_batch is not None and acc > best_acc:
                best_acc, best_epoch = acc, epoch
                save_checkpoint(model, best_path, dict(meta, epoch=epoch, val_seen_acc=acc))
    save_checkpoint(model, final_path, dict(meta, epoch=cfg.epochs - 1))
    if val_batch is None:
        best_epoch, best_acc = cfg.epochs - 1, math.nan
        save_checkpoint(model, best_path, dict(meta, epoch=best_epoch))
    return TrainResult(model, step_path, epoch_path, final_path, best_path, best_epoch, best_acc, step, epoch_seconds)
