"""JSON run configuration: schema validation and resolution into typed objects."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .bench import PROMPT_TOKENS, VOCAB_SIZE, DatasetSplit
from .errors import ConfigError
from .evaluate import DEFAULT_THETAS
from .model import EncoderConfig, ModuleFlags
from .preprocess import CORRUPTION_KINDS, DEFAULT_SEVERITY_TABLES
from .train import TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_pos_int = {"type": "integer", "minimum": 1}
_strs = {"type": "array", "items": {"type": "string"}}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


_family = _obj({
    "name": {"type": "string"}, "manipulation_type": {"type": "string"}, "sub_type": {"type": "string"},
    "injector": {"type": "string"}, "params": {"type": "object"},
    "parsing_degradation": {"type": "number", "minimum": 0, "maximum": 1},
}, required=("name", "manipulation_type", "sub_type", "injector"))

SCHEMA = _obj({
    "data": _obj({
        "seed": _int,
        "protocol": {"enum": [1, 2]},
        "prompt_tokens": _pos_int,
        "vocab_size": _pos_int,
        "split": _obj({
            "seen_families": _strs, "unseen_families": _strs,
            "train_count": _pos_int, "test_count": _pos_int,
            "include_real": _bool, "size": {"type": "integer", "minimum": 32},
            "families": {"type": "object", "additionalProperties": _family},
        }),
    }),
    "model": _obj({
        "size": _pos_int, "patch": _pos_int, "d": _pos_int, "heads": _pos_int,
        "blocks_ae": _pos_int, "blocks_ee": _pos_int, "blocks_ne": _pos_int,
        "blocks_pe": _pos_int, "blocks_le": _pos_int,
        "channels": {"type": "array", "items": _pos_int, "minItems": 1},
        "conv_kernel": _pos_int, "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
        "vocab": _pos_int, "t": _pos_int, "x": _pos_int, "n_labels": _pos_int, "b_max": _pos_int,
        "tau_dcpc_init": {"type": "number", "exclusiveMinimum": 0},
        "tau_cmc_init": {"type": "number", "exclusiveMinimum": 0},
    }),
    "modules": _obj({k: _bool for k in ("ae", "ne", "ee", "pe", "le", "mmi")}),
    "train": _obj({
        "epochs": _pos_int, "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0}, "lr_drop_every": _pos_int,
        "lr_drop_factor": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 2}, "seed": _int,
        "beta1": _num, "beta2": _num, "adam_eps": _num, "val_per_family": {"type": "integer", "minimum": 0},
        "losses": _obj({k: _bool for k in ("dfa", "dfacc", "cmc", "dcpc", "kl")}),
        "loss": _obj({"lam": {"type": "number", "minimum": 0}, "margin": {"type": "number", "exclusiveMinimum": 0},
                      "kl_temperature": {"type": "number", "exclusiveMinimum": 0}}),
    }),
    "eval": _obj({
        "thetas": {"type": "array", "minItems": 1,
                   "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "robustness": _bool,
        "kinds": {"type": "array", "items": {"enum": list(CORRUPTION_KINDS)}, "minItems": 1},
        "severities": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 5}, "minItems": 1},
        # per-kind level for severities 0..5; kinds left out keep their defaults
        "severity_tables": {"type": "object", "propertyNames": {"enum": list(CORRUPTION_KINDS)},
                            "additionalProperties": {"type": "array", "items": _num,
                                                     "minItems": 6, "maxItems": 6}},
        "embed": _bool,
        "checkpoint": {"enum": ["best", "final"]},
    }),
    "ablate": _obj({
        "grid": {"enum": ["modules", "losses", "lambda", "margin", "mmi"]},
        "seeds": {"type": "array", "items": _int},
        "rows": {"type": "array", "items": {"type": "object"}},
    }),
    "figures": _bool,
})


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(raw: dict) -> None:
    """Raise ConfigError naming the JSON pointer of the first violation."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw),
                    key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(f"config {_pointer(e.absolute_path)}: {e.message}")


@dataclass
class EvalSettings:
    thetas: list[float] = field(default_factory=lambda: list(DEFAULT_THETAS))
    robustness: bool = False
    kinds: list[str] = field(default_factory=lambda: list(CORRUPTION_KINDS))
    severities: list[int] = field(default_factory=lambda: list(range(6)))
    embed: bool = False
    checkpoint: str = "best"
    severity_tables: dict = field(default_factory=dict)

    def tables(self) -> dict[str, list[float]]:
        return dict(DEFAULT_SEVERITY_TABLES, **self.severity_tables)


@dataclass
class RunConfig:
    data_seed: int = 0
    protocol: int = 1
    prompt_tokens: int = PROMPT_TOKENS
    vocab_size: int = VOCAB_SIZE
    split: DatasetSplit = field(default_factory=DatasetSplit)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    modules: ModuleFlags = field(default_factory=ModuleFlags)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablate: dict = field(default_factory=dict)
    figures: bool = True
    raw: dict = field(default_factory=dict)

    def data_dict(self) -> dict:
        return {"seed": self.data_seed, "protocol": self.protocol, "prompt_tokens": self.prompt_tokens,
                "vocab_size": self.vocab_size, "split": self.split.to_dict()}

    def to_dict(self) -> dict:
        return {"data": self.data_dict(), "model": self.model.to_dict(), "modules": asdict(self.modules),
                "train": self.train.to_dict(), "eval": asdict(self.eval), "ablate": self.ablate,
                "figures": self.figures}

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def resolve(raw: dict | None = None) -> RunConfig:
    """Validate ``raw`` and fill defaults.

    Protocol 2 adds REAL to the seen families.  The model's class count and
    token geometry follow the data section unless set explicitly.
    """
    raw = copy.deepcopy(raw or {})
    validate(raw)
    data = raw.get("data", {})
    split_d = dict(data.get("split", {}))
    if data.get("protocol", 1) == 2:
        split_d["include_real"] = True
    try:
        split = DatasetSplit.from_dict(split_d)
        split.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config /data/split: {e}") from None
    model_d = dict(raw.get("model", {}))
    model_d.setdefault("x", len(split.effective_seen()))
    model_d.setdefault("size", split.size)
    model_d.setdefault("t", data.get("prompt_tokens", PROMPT_TOKENS))
    model_d.setdefault("vocab", data.get("vocab_size", VOCAB_SIZE))
    if "channels" in model_d:
        model_d["channels"] = tuple(model_d["channels"])
    try:
        model = EncoderConfig.from_dict(model_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config /model: {e}") from None
    modules = ModuleFlags.from_dict(raw.get("modules", {}))
    modules.validate()
    train = TrainConfig.from_dict(raw.get("train", {}))
    ev = EvalSettings(**raw.get("eval", {}))
    cfg = RunConfig(data.get("seed", 0), data.get("protocol", 1), data.get("prompt_tokens", PROMPT_TOKENS),
                    data.get("vocab_size", VOCAB_SIZE), split, model, modules, train, ev,
                    raw.get("ablate", {}), raw.get("figures", True), raw)
    check_geometry(cfg)
    return cfg


def check_geometry(cfg: RunConfig) -> None:
    m, s = cfg.model, cfg.split
    if m.size != s.size:
        raise ConfigError(f"model size {m.size} differs from data size {s.size}")
    if m.x != len(s.effective_seen()):
        raise ConfigError(f"model has x={m.x} classes but the split has {len(s.effective_seen())} seen families")
    if m.t != cfg.prompt_tokens or m.vocab != cfg.vocab_size:
        raise ConfigError("model t/vocab must match data prompt_tokens/vocab_size")


def read_raw(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config / : expected a JSON object")
    return raw


def load(path: str | Path | None) -> RunConfig:
    return resolve({} if path is None else read_raw(path))
