"""Training objectives: attribution CE, contrastive-center, vision-parsing and
vision-language contrastive terms, KL alignment, and their unweighted sum."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

LOG_FLOOR = 1e-12
LOSS_TERMS = ("dfa", "dfacc", "cmc", "dcpc", "kl")


@dataclass
class LossConfig:
    lam: float = 0.5
    margin: float = 0.7
    kl_temperature: float = 1.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.kl_temperature <= 0:
            raise ConfigError("kl_temperature must be > 0")


@dataclass
class LossReport:
    dfa: float = 0.0
    intra: float = 0.0
    inter: float = 0.0
    dfacc: float = 0.0
    cmc: float = 0.0
    dcpc: float = 0.0
    kl: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("step", "dfa", "intra", "inter", "dfacc", "cmc", "dcpc", "kl", "total")

    def row(self, step: int) -> list[str]:
        return [str(step)] + [repr(float(getattr(self, f))) for f in self.CSV_FIELDS[1:]]

    def as_dict(self) -> dict:
        return asdict(self)


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def dfa_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax outputs against one-hot labels (``b×x``)."""
    sums = probs.data.sum(axis=-1)
    if np.any(np.abs(sums - 1) > 1e-4):
        raise ContractError("dfa_loss expects rows of probabilities summing to 1")
    onehot = _const(labels, probs)
    b = probs.shape[0]
    return -(T.log(probs, floor=LOG_FLOOR) * onehot).sum() * (1.0 / b)


def dfacc_loss(vecs: Tensor, labels: np.ndarray, centers: Tensor, lam: float = 0.5,
               margin: float = 0.7) -> tuple[Tensor, Tensor, Tensor]:
    """Contrastive-center loss over prediction vectors.

    Returns ``(intra + lam * inter, intra, inter)``.  The branch between the
    margin hinge and the repulsion term is chosen from detached center
    distances; gradients flow through the chosen pairwise distance.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b = vecs.shape[0]
    if b < 2:
        raise ContractError("dfacc_loss needs a batch of at least 2")
    intra = T.norm_rows(vecs - centers[labels]).mean()
    iu, iv = np.triu_indices(b, k=1)
    differ = labels[iu] != labels[iv]
    iu, iv = iu[differ], iv[differ]
    if iu.size == 0:
        inter = _const(0.0, vecs)
    else:
        dist = T.norm_rows(vecs[iu] - vecs[iv])
        c = centers.data
        cdist = np.linalg.norm(c[labels[iu]] - c[labels[iv]], axis=-1)
        near = cdist < margin
        pair = T.where(near, T.relu(dist - margin), -dist)
        inter = pair.sum() * (2.0 / (b * (b - 1)))
    return intra + inter * lam, intra, inter


def dcpc_loss(I_v: Tensor, P_g: Tensor, A: Tensor, tau) -> Tensor:
    """Gated vision-parsing contrastive loss, both directions averaged.

    ``S = softmax(I P^T / tau) * sigmoid(A)`` element-wise, rows left
    un-renormalised; the target of row ``u`` is column ``u``.
    """
    tau_v = tau.data if isinstance(tau, Tensor) else tau
    if np.any(np.asarray(tau_v) <= 0):
        raise ContractError("dcpc temperature must be > 0")
    b = I_v.shape[0]
    A = A[:b, :b]
    diag = (np.arange(b), np.arange(b))
    # log(softmax_uu * sigmoid(A_uu)) split into two stable logs
    log_gate = T.log_sigmoid(A[diag])

    def direction(q: Tensor, k: Tensor) -> Tensor:
        logp = T.log_softmax_rows((q @ k.T) / tau)[diag]
        return -(logp + log_gate).mean()

    return (direction(I_v, P_g) + direction(P_g, I_v)) * 0.5


def l2_normalize(x: Tensor) -> Tensor:
    n = x.data.reshape(x.shape[0], -1)
    if np.any(np.linalg.norm(n, axis=-1) == 0):
        raise ContractError("cannot normalise a zero-norm embedding")
    return x / T.norm_rows(x).reshape(x.shape[0], 1)


def cmc_loss(I_v: Tensor, T_l: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE on cosine similarity with temperature ``tau``."""
    tau_v = tau.data if isinstance(tau, Tensor) else tau
    if np.any(np.asarray(tau_v) <= 0):
        raise ContractError("cmc temperature must be > 0")
    b = I_v.shape[0]
    logits = (l2_normalize(I_v) @ l2_normalize(T_l).T) / tau
    diag = (np.arange(b), np.arange(b))
    i2t = -T.log_softmax_rows(logits)[diag].mean()
    t2i = -T.log_softmax_rows(logits.T)[diag].mean()
    return (i2t + t2i) * 0.5


def kl_align_loss(T_l_pre: Tensor, T_l: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean KL(softmax(T_l/temp) || softmax(T_l_pre/temp)); target detached."""
    if temperature <= 0:
        raise ContractError("kl temperature must be > 0")
    t = T_l.data / temperature
    t = t - t.max(axis=-1, keepdims=True)
    log_p = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    log_q = T.log_softmax_rows(T_l_pre * (1.0 / temperature))
    per = (_const(p * log_p, T_l_pre) - _const(p, T_l_pre) * log_q).sum(axis=-1)
    return per.mean()


def total_loss(parts: dict[str, Tensor | None], intra: Tensor | None = None,
               inter: Tensor | None = None) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the enabled terms plus a per-term report.

    Missing (ablated) terms count as 0 in the report.
    """
    total = None
    for name in LOSS_TERMS:
        t = parts.get(name)
        if t is not None:
            total = t if total is None else total + t
    rep = LossReport(**{n: (parts[n].item() if parts.get(n) is not None else 0.0) for n in LOSS_TERMS})
    rep.intra = intra.item() if intra is not None else 0.0
    rep.inter = inter.item() if inter is not None else 0.0
    rep.total = math.fsum(getattr(rep, n) for n in LOSS_TERMS)
    return total, rep


def report_from_values(**values: float) -> LossReport:
    known = {f.name for f in fields(LossReport)}
    rep = LossReport(**{k: v for k, v in values.items() if k in known})
    rep.total = math.fsum(getattr(rep, n) for n in LOSS_TERMS)
    return rep
