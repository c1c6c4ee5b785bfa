"""Parsing-aware vision-language attribution network.

Three visual views (appearance, Sobel edges, SRM noise) each pass through
a convolutional backbone and a transformer encoder that yields a class
token and a mean-pooled patch token.  The appearance class token queries
the noise and edge token pairs with multi-head cross-attention; the two
fused results are summed into the visual embedding ``I_v``.  A parsing
encoder and a language encoder supply the contrastive targets used only
at training time; inference touches the visual path alone.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, ContractError, DataError
from .nn import (MLP, Conv, LayerNorm, Linear, Module, TransformerBlock, attention,
                 key_padding_mask, merge_heads, param, split_heads)
from .preprocess import parsing_onehot
from .tensor import Tensor

VIEWS = ("appearance", "edge", "noise")
VIEW_CHANNELS = {"appearance": 3, "edge": 1, "noise": 3}
MODULE_FLAGS = ("ae", "ne", "ee", "pe", "le", "mmi")


@dataclass
class EncoderConfig:
    size: int = 64
    patch: int = 32
    d: int = 64
    heads: int = 4
    blocks_ae: int = 2
    blocks_ee: int = 1
    blocks_ne: int = 1
    blocks_pe: int = 1
    blocks_le: int = 1
    channels: tuple = (32, 64, 64)  # last entry is c
    conv_kernel: int = 3
    mlp_ratio: float = 2.0
    vocab: int = 64
    t: int = 308
    x: int = 6
    n_labels: int = 7
    b_max: int = 16
    tau_dcpc_init: float = 8.0
    tau_cmc_init: float = 0.07

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.patch > self.size:
            raise ConfigError("noise patch larger than image")
        for view in ("appearance", "noise"):
            if self.spatial(view) < 1:
                raise ConfigError(f"backbone collapses the {view} view; use a larger input")

    @property
    def d_f(self) -> int:
        return self.d // self.heads

    @property
    def c(self) -> int:
        return self.channels[-1]

    def spatial(self, view: str = "appearance") -> int:
        s = self.patch if view == "noise" else self.size
        for _ in self.channels:
            s = (s - self.conv_kernel) // 2 + 1
        return s

    def tokens(self, view: str = "appearance") -> int:
        return self.spatial(view) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, x: int = 10) -> "EncoderConfig":
        """Full-scale geometry (224 input, d=512)."""
        return cls(size=224, patch=112, d=512, heads=8, blocks_ae=6, blocks_ee=3, blocks_ne=3,
                   blocks_pe=6, blocks_le=6, channels=(64, 128, 256, 512, 512), conv_kernel=2,
                   mlp_ratio=4.0, vocab=49408, t=308, x=x, b_max=32)


@dataclass
class ModuleFlags:
    """Which encoders take part (rows of the module ablation table)."""

    ae: bool = True
    ne: bool = True
    ee: bool = True
    pe: bool = True
    le: bool = True
    mmi: bool = True

    def validate(self) -> None:
        if not (self.ae or self.ne or self.ee):
            raise ConfigError("at least one visual encoder (ae, ne, ee) must be enabled")

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleFlags":
        unknown = set(d) - set(MODULE_FLAGS)
        if unknown:
            raise ConfigError(f"unknown module flags: {sorted(unknown)}")
        return cls(**d)


class Backbone(Module):
    def __init__(self, rng, c_in: int, cfg: EncoderConfig):
        self.convs = []
        for c_out in cfg.channels:
            self.convs.append(Conv(rng, c_in, c_out, cfg.conv_kernel, 2))
            c_in = c_out

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return x


class TokenEncoder(Module):
    """Backbone -> spatial tokens -> projection -> class token -> positions
    -> transformer blocks -> final layer norm."""

    def __init__(self, rng, c_in: int, n_tokens: int, blocks: int, cfg: EncoderConfig):
        self.backbone = Backbone(rng, c_in, cfg)
        self.proj = Linear(rng, cfg.c, cfg.d)
        self.cls = param(rng.normal(0, 0.02, (1, 1, cfg.d)))
        self.pos = param(rng.normal(0, 0.02, (n_tokens + 1, cfg.d)))
        self.blocks = [TransformerBlock(rng, cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(blocks)]
        self.norm = LayerNorm(cfg.d)

    def tokens(self, x: Tensor) -> Tensor:
        fmap = self.backbone(x)  # b, c, h, w
        b, c, h, w = fmap.shape
        tok = self.proj(T.transpose(fmap.reshape(b, c, h * w), (0, 2, 1)))
        cls = T.concat([self.cls] * b, axis=0) if b > 1 else self.cls
        seq = T.concat([cls, tok], axis=1) + self.pos
        for blk in self.blocks:
            seq = blk(seq)
        return self.norm(seq)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        seq = self.tokens(x)
        return seq[:, 0, :], seq[:, 1:, :].mean(axis=1)


class MHCA(Module):
    """Multi-head cross-attention from a query token onto a 2-token context,
    projected once after head concatenation and added to the query."""

    def __init__(self, rng, d: int, heads: int):
        self.heads = heads
        self.w_q = Linear(rng, d, d, bias=False)
        self.w_k = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, d, d, bias=False)
        self.out = Linear(rng, d, d)
        self.last_weights: np.ndarray | None = None

    def attend(self, query: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
        """Pre-projection attention output ``(b, 1, d)`` and weights ``(b, f, 1, n)``."""
        f = self.heads
        q = split_heads(self.w_q(query), f)
        k = split_heads(self.w_k(context), f)
        v = split_heads(self.w_v(context), f)
        y, w = attention(q, k, v)
        return merge_heads(y), w

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        """``query`` is ``(b, d)``, ``context`` is ``(b, 2, d)``; returns ``(b, d)``."""
        b, d = query.shape
        q3 = query.reshape(b, 1, d)
        y, w = self.attend(q3, context)
        self.last_weights = w.data
        return self.out(y).reshape(b, d) + query


def mmi_fuse(cls_a: Tensor, g_n: Tensor, g_e: Tensor, mhca_n: MHCA, mhca_e: MHCA) -> Tensor:
    """``I_v`` as the element-wise sum of the noise- and edge-fused class tokens."""
    return mhca_n(cls_a, g_n) + mhca_e(cls_a, g_e)


class LanguageEncoder(Module):
    def __init__(self, rng, cfg: EncoderConfig):
        self.vocab = cfg.vocab
        self.embed = param(rng.normal(0, 0.02, (cfg.vocab, cfg.d)))
        self.pos = param(rng.normal(0, 0.02, (cfg.t, cfg.d)))
        self.cls = param(rng.normal(0, 0.02, (1, 1, cfg.d)))
        self.blocks = [TransformerBlock(rng, cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks_le)]
        self.norm = LayerNorm(cfg.d)

    def __call__(self, tokens: np.ndarray, truncate: bool = True) -> Tensor:
        """Class-token embedding for each prompt in ``tokens`` (``b×t`` ids).

        Padding (id 0) is masked out as attention keys.  Because masked keys
        contribute exactly nothing, positions past the longest prompt in the
        batch are dropped when ``truncate`` is set.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise DataError(f"token ids must lie in [0, {self.vocab})")
        b, t = tokens.shape
        if t != self.pos.shape[0]:
            raise ContractError(f"prompt length {t} does not match t={self.pos.shape[0]}")
        valid = tokens != 0
        if truncate:
            t = max(1, int(valid.any(axis=0).nonzero()[0].max(initial=0)) + 1)
            tokens, valid = tokens[:, :t], valid[:, :t]
        emb = self.embed[tokens] + self.pos[:t]
        cls = T.concat([self.cls] * b, axis=0) if b > 1 else self.cls
        seq = T.concat([cls, emb], axis=1)
        mask = key_padding_mask(np.concatenate([np.ones((b, 1), bool), valid], axis=1), seq.dtype)
        for blk in self.blocks:
            seq = blk(seq, mask)
        return self.norm(seq[:, 0, :])


@dataclass
class Batch:
    """Preprocessed model inputs for ``b`` samples."""

    appearance: np.ndarray  # b,3,H,W float
    edge: np.ndarray  # b,1,H,W
    noise: np.ndarray  # b,3,p,p
    parsing: np.ndarray  # b,H,W integer labels
    tokens: np.ndarray  # b,t
    labels: np.ndarray  # b

    def __len__(self) -> int:
        return len(self.labels)

    def astype(self, dtype) -> "Batch":
        return Batch(self.appearance.astype(dtype), self.edge.astype(dtype), self.noise.astype(dtype),
                     self.parsing, self.tokens, self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.appearance[idx], self.edge[idx], self.noise[idx], self.parsing[idx],
                     self.tokens[idx], self.labels[idx])


@dataclass
class TrainOutputs:
    I_v: Tensor
    P_g: Tensor | None
    T_l: Tensor | None
    T_l_pre: Tensor | None
    logits: Tensor


class PVLM(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0, flags: ModuleFlags | None = None):
        self.cfg = cfg
        self.flags = flags or ModuleFlags()
        self.flags.validate()
        rng = np.random.default_rng(seed)
        self.ae = TokenEncoder(rng, 3, cfg.tokens("appearance"), cfg.blocks_ae, cfg)
        self.ee = TokenEncoder(rng, 1, cfg.tokens("edge"), cfg.blocks_ee, cfg)
        self.ne = TokenEncoder(rng, 3, cfg.tokens("noise"), cfg.blocks_ne, cfg)
        self.mhca_n = MHCA(rng, cfg.d, cfg.heads)
        self.mhca_e = MHCA(rng, cfg.d, cfg.heads)
        self.pe = TokenEncoder(rng, cfg.n_labels, cfg.tokens("appearance"), cfg.blocks_pe, cfg)
        self.le = LanguageEncoder(rng, cfg)
        self.head = MLP(rng, cfg.d, cfg.d, cfg.x)
        self.predictor = MLP(rng, cfg.d, cfg.d, cfg.d)
        # loss-side trainables
        self.centers = param(np.zeros((cfg.x, cfg.x)))
        self.gate = param(np.zeros((cfg.b_max, cfg.b_max)))
        self.log_tau = param(np.log([cfg.tau_dcpc_init]).reshape(()))
        self.log_tau_cmc = param(np.log([cfg.tau_cmc_init]).reshape(()))

    @property
    def dtype(self):
        return self.centers.dtype

    # -- encoders ----------------------------------------------------------
    def _input(self, arr: np.ndarray) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def encode_view(self, image_view, view: str) -> tuple[Tensor, Tensor]:
        """Class and pooled patch tokens, each ``(b, d)``, for one view."""
        enc = {"appearance": self.ae, "edge": self.ee, "noise": self.ne}[view]
        x = image_view if isinstance(image_view, Tensor) else self._input(image_view)
        expect = (VIEW_CHANNELS[view],) + (self.cfg.patch if view == "noise" else self.cfg.size,) * 2
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != expect:
            raise ContractError(f"{view} view must be {expect}, got {x.shape[1:]}")
        return enc(x)

    def visual(self, batch: Batch) -> Tensor:
        """Visual embedding ``I_v`` of shape ``(b, d)``."""
        fl = self.flags
        pairs = {}
        if fl.ae:
            pairs["appearance"] = self.encode_view(batch.appearance, "appearance")
        if fl.ne:
            pairs["noise"] = self.encode_view(batch.noise, "noise")
        if fl.ee:
            pairs["edge"] = self.encode_view(batch.edge, "edge")
        if not fl.ae or not fl.mmi:
            out = None
            for cls, _ in pairs.values():
                out = cls if out is None else out + cls
            return out
        cls_a = pairs["appearance"][0]
        branches = []
        for view, mhca in (("noise", self.mhca_n), ("edge", self.mhca_e)):
            if view in pairs:
                g = T.stack(list(pairs[view]), axis=1)  # b,2,d
                branches.append(mhca(cls_a, g))
        if not branches:
            return cls_a
        return branches[0] if len(branches) == 1 else branches[0] + branches[1]

    def encode_parsing(self, parsing: np.ndarray) -> Tensor:
        parsing = np.asarray(parsing)
        if parsing.ndim == 2:
            parsing = parsing[None]
        onehot = np.stack([parsing_onehot(p, self.cfg.n_labels) for p in parsing])
        cls, _ = self.pe(self._input(onehot))
        return cls

    def encode_language(self, tokens: np.ndarray) -> Tensor:
        """Embeds each distinct prompt once and gathers rows per sample."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        uniq, inverse = np.unique(tokens, axis=0, return_inverse=True)
        out = self.le(uniq)
        return out[inverse.reshape(-1)]

    # -- paths ---------------------------------------------------------------
    def forward_train(self, batch: Batch) -> TrainOutputs:
        if len(batch) < 2:
            raise ConfigError("training batches need at least 2 samples")
        I_v = self.visual(batch)
        P_g = self.encode_parsing(batch.parsing) if self.flags.pe else None
        T_l = self.encode_language(batch.tokens) if self.flags.le else None
        T_l_pre = self.predictor(I_v) if self.flags.le else None
        return TrainOutputs(I_v, P_g, T_l, T_l_pre, self.head(I_v))

    def forward_infer(self, batch: Batch) -> Tensor:
        """Logits ``(b, x)`` from the visual path only."""
        return self.head(self.visual(batch))

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def expected_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count of :class:`PVLM` for ``cfg``."""
    d, k = cfg.d, cfg.conv_kernel
    hidden = int(d * cfg.mlp_ratio)
    block = 2 * 2 * d + 4 * d * d + 3 * d + (d * hidden + hidden) + (hidden * d + d)

    def backbone(c_in):
        n = 0
        for c in cfg.channels:
            n += c * c_in * k * k + c
            c_in = c
        return n

    def token_encoder(c_in, n_tok, blocks):
        return backbone(c_in) + cfg.c * d + d + d + (n_tok + 1) * d + blocks * block + 2 * d

    n = token_encoder(3, cfg.tokens("appearance"), cfg.blocks_ae)
    n += token_encoder(1, cfg.tokens("edge"), cfg.blocks_ee)
    n += token_encoder(3, cfg.tokens("noise"), cfg.blocks_ne)
    n += 2 * (3 * d * d + d * d + d)  # two MHCA
    n += token_encoder(cfg.n_labels, cfg.tokens("appearance"), cfg.blocks_pe)
    n += cfg.vocab * d + cfg.t * d + d + cfg.blocks_le * block + 2 * d
    n += (d * d + d) + (d * cfg.x + cfg.x)  # head
    n += 2 * (d * d + d)  # predictor
    n += cfg.x * cfg.x + cfg.b_max * cfg.b_max + 2
    return n


# -- checkpoints -----------------------------------------------------------------
MAGIC = b"ZSDFACK1"


def save_checkpoint(model: PVLM, path, extra: dict | None = None) -> None:
    """Binary container: magic, u32 header length, JSON header, raw LE tensors."""
    index, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data).astype(p.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": str(p.dtype), "shape": list(p.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": 1, "config": model.cfg.to_dict(), "flags": asdict(model.flags),
                         "tensors": index, "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    return json.loads(raw[12:12 + n])


def load_checkpoint(path, expect: EncoderConfig | None = None) -> PVLM:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    cfg = EncoderConfig.from_dict(header["config"])
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise CompatibilityError(f"checkpoint config {cfg.to_dict()} does not match expected {expect.to_dict()}")
    model = PVLM(cfg, flags=ModuleFlags(**header["flags"]))
    params = dict(model.named_parameters())
    base = 12 + n
    for entry in header["tensors"]:
        p = params.get(entry["name"])
        if p is None or list(p.shape) != entry["shape"]:
            raise CompatibilityError(f"checkpoint tensor {entry['name']} does not fit the model")
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        data = np.frombuffer(raw, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)),
                             offset=base + entry["offset"])
        p.data = data.reshape(entry["shape"]).astype(entry["dtype"])
    return model
