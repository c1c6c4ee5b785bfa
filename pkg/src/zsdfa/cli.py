"""``zsdfa`` command line: build-data, train, eval, ablate, verify.

Exit codes: 0 ok, 2 configuration, 3 I/O or data, 4 numeric, 5 compatibility.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .bench import build_protocol, read_dataset, verify_dataset, write_dataset
from .errors import CompatibilityError, ConfigError, DataError, ZSDFAError
from .manifest import MANIFEST_NAME, RunManifest, sha256_file, verify_outputs

log = logging.getLogger("zsdfa")
DETERMINISTIC_ENV = "ZSDFA_DETERMINISTIC"


def deterministic() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def _thread_limit(n: int | None):
    if deterministic():
        n = 1
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _new_manifest(args, command: str, cfg: C.RunConfig, seeds: dict, dataset_hash=None) -> RunManifest:
    return RunManifest(command, cfg.hash(), seeds, dataset_hash, deterministic=deterministic(),
                       threads=1 if deterministic() else args.threads)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- dataset -----------------------------------------------------------------------
def _canon(d: dict) -> dict:
    """JSON round trip, so tuples and lists compare equal."""
    return json.loads(json.dumps(d, sort_keys=True))


def _data_section(manifest: dict) -> dict:
    return {"seed": manifest["seed"], "protocol": manifest.get("protocol", 1),
            "prompt_tokens": manifest.get("prompt_tokens"), "vocab_size": manifest.get("vocab_size"),
            "split": manifest["split"]}


def cmd_build_data(args) -> int:
    cfg = C.load(args.config)
    seed = cfg.data_seed if args.seed is None else args.seed
    out = Path(args.out or "data")
    want = _canon(dict(cfg.data_dict(), seed=seed))
    if (out / "manifest.json").exists():
        have = _data_section(json.loads((out / "manifest.json").read_text()))
        if have != want:
            raise ConfigError(f"{out} already holds a different dataset; choose another --out")
        bad = verify_dataset(out)
        if bad:
            raise DataError(f"{len(bad)} dataset files fail their checksum, first: {bad[0]}")
        print(f"verified {out}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    m = _new_manifest(args, "build-data", cfg, {"data": seed})
    with m.phase("generate"):
        train, test = build_protocol(cfg.split, seed, cfg.prompt_tokens, cfg.vocab_size)
    with m.phase("write"):
        meta = {"protocol": cfg.protocol, "prompt_tokens": cfg.prompt_tokens, "vocab_size": cfg.vocab_size}
        write_dataset(out, cfg.split, seed, train, test, meta)
    m.dataset_hash = sha256_file(out / "manifest.json")
    m.add_outputs(out, [out / "manifest.json"])
    m.write(out)
    seen, unseen = cfg.split.effective_seen(), cfg.split.unseen_families
    print(f"built {out}: {len(seen)} train families, {len(seen) + len(unseen)} test families, "
          f"{len(train)} train / {len(test)} test samples")
    return 0


def _load_data(path):
    if path is None:
        raise ConfigError("--data DIR is required")
    manifest, train, test = read_dataset(path)
    return manifest, train, test, sha256_file(Path(path) / "manifest.json")


def _config_for_data(args, manifest: dict) -> C.RunConfig:
    """Resolve the run config with the dataset's own data section.

    An explicit, different data section in the config is a compatibility error.
    """
    raw = C.read_raw(args.config) if args.config else {}
    C.validate(raw)
    data = _data_section(manifest)
    if "data" in raw:
        mine = _canon(C.resolve({"data": raw["data"]}).data_dict())
        if mine != data:
            raise CompatibilityError(f"config data section {mine} does not match dataset {data}")
    raw = dict(raw, data=data)
    return C.resolve(raw)


# -- training ----------------------------------------------------------------------
def _apply_ablate(cfg: C.RunConfig, spec: str | None) -> None:
    from .losses import LOSS_TERMS
    from .train import LossFlags

    if not spec:
        return
    if spec.endswith("_only") and spec[:-5] in LOSS_TERMS:
        cfg.train.losses = LossFlags.only(spec[:-5])
    elif spec.startswith("no_") and spec[3:] in LOSS_TERMS:
        setattr(cfg.train.losses, spec[3:], False)
    else:
        cfg.train.losses = LossFlags.only(*spec.split("+"))


def _val_indices(test, per_family: int) -> np.ndarray:
    return np.array([i for i, s in enumerate(test) if s.label >= 0 and s.index < per_family], dtype=np.int64)


def cmd_train(args) -> int:
    from .model import PVLM
    from .train import batch_from_samples, train

    manifest, train_s, test_s, dhash = _load_data(args.data)
    cfg = _config_for_data(args, manifest)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    _apply_ablate(cfg, args.ablate)
    cfg.train.validate(cfg.modules, cfg.model.b_max)
    out = _out_dir(args, "run")
    m = _new_manifest(args, "train", cfg, {"data": cfg.data_seed, "train": cfg.train.seed}, dhash)
    with m.phase("preprocess"):
        trb = batch_from_samples(train_s, cfg.model.patch)
        val_idx = _val_indices(test_s, cfg.train.val_per_family)
        val = batch_from_samples([test_s[i] for i in val_idx], cfg.model.patch) if len(val_idx) else None
    model = PVLM(cfg.model, seed=cfg.train.seed, flags=cfg.modules)
    extra = {"run": cfg.to_dict(), "dataset_hash": dhash}
    with m.phase("train"):
        res = train(model, trb, cfg.train, out, val, log=log.info, extra_meta=extra)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    outputs = [res.step_csv, res.epoch_csv, res.final_ckpt, res.best_ckpt, out / "config.json"]
    if cfg.figures and not args.no_figures:
        from .report import loss_curves
        with m.phase("figures"):
            outputs.append(loss_curves(res.epoch_csv, out / "loss_curves.png"))
    m.phases["epochs"] = res.epoch_seconds
    m.add_outputs(out, outputs)
    m.write(out)
    print(f"trained {res.steps} steps; best epoch {res.best_epoch + 1} "
          f"(val seen ACC {res.best_val_acc:.4f}); outputs in {out}")
    return 0


# -- evaluation --------------------------------------------------------------------
def _checkpoint_path(args, cfg: C.RunConfig | None = None) -> Path:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint PATH is required")
    p = Path(args.checkpoint)
    if p.is_dir():
        p = p / f"{(cfg.eval.checkpoint if cfg else 'best')}.ckpt"
    if not p.exists():
        raise ConfigError(f"checkpoint {p} not found")
    return p


def cmd_eval(args) -> int:
    from .evaluate import (evaluate, infer_embeddings, pca_2d, robustness_sweep, write_embedding,
                           write_report)
    from .model import load_checkpoint, read_checkpoint_header
    from .train import batch_from_samples

    cfg_eval = C.load(args.config) if args.config else C.resolve({})
    ckpt = _checkpoint_path(args, cfg_eval)
    header = read_checkpoint_header(ckpt)
    manifest, _, test_s, dhash = _load_data(args.data)
    data = _data_section(manifest)
    ck = header["config"]
    geom = {"size": data["split"]["size"], "x": len(manifest["seen"]),
            "t": data["prompt_tokens"], "vocab": data["vocab_size"]}
    ck_geom = {k: ck[k] for k in geom}
    if ck_geom != geom:
        raise CompatibilityError(f"checkpoint config {ck_geom} does not match dataset config {geom}")
    trained_on = header.get("extra", {}).get("run", {}).get("data")
    if trained_on is not None and trained_on["split"].get("seen_families") is not None:
        ck_seen = C.resolve({"data": trained_on}).split.effective_seen()
        if ck_seen != manifest["seen"]:
            raise CompatibilityError(f"checkpoint classes {ck_seen} differ from dataset classes {manifest['seen']}")
    thetas = args.theta or cfg_eval.eval.thetas
    out = _out_dir(args, "eval")
    m = _new_manifest(args, "eval", cfg_eval, {"data": data["seed"], "robustness": args.seed or 0}, dhash)
    m.config_hash = C.config_hash({"eval": cfg_eval.to_dict()["eval"], "checkpoint": sha256_file(ckpt),
                                   "thetas": list(thetas)})
    model = load_checkpoint(ckpt)
    seen, unseen = manifest["seen"], manifest["unseen"]
    families = [s.family for s in test_s]
    with m.phase("preprocess"):
        teb = batch_from_samples(test_s, model.cfg.patch)
    with m.phase("evaluate"):
        rep = evaluate(model, teb, families, seen, unseen, thetas)
    if args.robustness or cfg_eval.eval.robustness:
        with m.phase("robustness"):
            rep.robustness = robustness_sweep(model, test_s, seen, unseen, cfg_eval.eval.kinds,
                                              cfg_eval.eval.severities, args.seed or 0, thetas,
                                              cfg_eval.eval.tables())
    outputs = write_report(rep, out)
    coords = None
    if args.embed or cfg_eval.eval.embed:
        with m.phase("embed"):
            coords = pca_2d(infer_embeddings(model, teb))
            outputs.append(write_embedding(coords, families, out / "embedding.csv"))
    if cfg_eval.figures and not args.no_figures:
        from . import report
        with m.phase("figures"):
            outputs += report.eval_figures(rep, out)
            if coords is not None:
                outputs.append(report.embedding(coords, families, out / "embedding.png"))
    m.add_outputs(out, outputs)
    m.write(out)
    print(f"seen ACC {rep.seen_acc:.4f}; " +
          "; ".join(f"unseen ACC({t.theta}) {t.unseen_acc:.4f}" for t in rep.thresholds))
    return 0


# -- ablation ----------------------------------------------------------------------
def cmd_ablate(args) -> int:
    from .ablation import resolve_rows, run_ablation, write_results
    from .train import batch_from_samples

    manifest, train_s, test_s, dhash = _load_data(args.data)
    cfg = _config_for_data(args, manifest)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    grid = args.grid or cfg.ablate.get("grid")
    rows = resolve_rows(grid, cfg.ablate.get("rows"))
    seeds = args.seeds or cfg.ablate.get("seeds") or [0, 1, 2]
    out = _out_dir(args, "ablation")
    m = _new_manifest(args, "ablate", cfg, {"data": cfg.data_seed, "train": list(seeds)}, dhash)
    with m.phase("preprocess"):
        trb = batch_from_samples(train_s, cfg.model.patch)
        teb = batch_from_samples(test_s, cfg.model.patch)
    val_idx = _val_indices(test_s, cfg.train.val_per_family)
    with m.phase("runs"):
        results = run_ablation(rows, list(seeds), cfg.model, cfg.train, trb, teb, [s.family for s in test_s],
                               manifest["seen"], manifest["unseen"], out,
                               val_idx if len(val_idx) else None, log=log.info, data_key=dhash)
    paths = write_results(results, rows, out, grid)
    m.add_outputs(out, paths)
    m.write(out)
    print(paths[1].read_text(), end="")
    return 0


# -- verification ------------------------------------------------------------------
def cmd_verify(args) -> int:
    root = Path(args.target or args.out or ".")
    bad = verify_outputs(root)
    if (root / "manifest.json").exists() and (root / MANIFEST_NAME).exists():
        bad += verify_dataset(root)
    if bad:
        raise DataError(f"{len(bad)} files fail verification: {', '.join(bad[:5])}")
    print(f"verified {root}")
    return 0


COMMANDS = {"build-data": cmd_build_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "verify": cmd_verify}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", metavar="PATH", help="JSON run configuration", **kw)
    c.add_argument("--seed", type=int, metavar="N", help="override the relevant seed", **kw)
    c.add_argument("--out", metavar="DIR", help="output directory", **kw)
    c.add_argument("--threads", type=int, metavar="N", help="BLAS thread cap", **kw)
    c.add_argument("--verify", action="store_true",
                   help="re-check the checksums recorded in --out instead of running", **kw)
    c.add_argument("--no-figures", action="store_true", help="skip PNG figures", **kw)
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    p = argparse.ArgumentParser(prog="zsdfa", description=__doc__.splitlines()[0],
                                parents=[_common(suppress=False)])
    p.add_argument("--version", action="version", version=f"zsdfa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("build-data", parents=[common], help="generate the synthetic benchmark")
    t = sub.add_parser("train", parents=[common], help="train a model on a built dataset")
    t.add_argument("--data", metavar="DIR")
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablate", metavar="SPEC", help="loss subset: dfa_only, no_kl, dfa+dfacc, ...")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", metavar="PATH", help="checkpoint file or training run directory")
    e.add_argument("--data", metavar="DIR")
    e.add_argument("--theta", type=float, nargs="+")
    e.add_argument("--robustness", action="store_true")
    e.add_argument("--embed", action="store_true", help="export 2-D PCA coordinates of I_v")
    a = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    a.add_argument("--data", metavar="DIR")
    a.add_argument("--grid", choices=["modules", "losses", "lambda", "margin", "mmi"])
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--epochs", type=int)
    v = sub.add_parser("verify", parents=[common], help="re-check recorded output checksums")
    v.add_argument("target", nargs="?", metavar="DIR")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            if args.verify:
                return cmd_verify(argparse.Namespace(target=None, out=args.out))
            return COMMANDS[args.command](args)
    except ZSDFAError as e:
        extra = ""
        if getattr(e, "step", None) is not None:
            extra = f" (step {e.step}, term {e.term})"
        print(f"zsdfa: error: {e}{extra}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"zsdfa: I/O error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
