"""Umbrella command line: data, permutation sets, diversification, training and evaluation.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure (divergence, corrupt checkpoint, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ndt
from .diversifier import DiversifierConfig, DomainPool, diversify_batch, write_decision_log
from .evaluation import attention_maps, evaluate, jigsaw_accuracy, mask_contrast, write_attention, write_reports
from .jigsaw import PermutationSet, decompose, generate_permutation_set, min_pairwise_hamming, recompose
from .model import ModelSpec, gradcheck_model
from .synthdata import DatasetSplit, RecordSet, SynthConfig, build_dataset, make_domain_pool, object_masks
from .trainer import ConfigError, TrainConfig, load_checkpoint, parse_key_values, train

log = logging.getLogger("shapejig")

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    """Validation failure reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _read_config(path: str | None, sets: list[str], allowed: dict[str, object]) -> dict:
    """Merge config file and --set overrides over ``allowed`` defaults.

    Keys of the training config are accepted and ignored by other commands,
    so one file can drive a whole pipeline.
    """
    values: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} does not exist")
        values.update(parse_key_values(p.read_text()))
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    out = dict(allowed)
    for k, v in values.items():
        if k in allowed:
            out[k] = _coerce(k, v, allowed[k])
        elif k not in TRAIN_KEYS:
            raise UsageError(f"unknown config key {k!r}")
        elif k in ("dataset", "permset", "pool"):
            out.setdefault("_" + k, v)
    return out


def _coerce(key, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def _need(cfg: dict, key: str) -> str:
    value = cfg.get(key) or cfg.get("_" + key)
    if not value:
        raise UsageError(f"missing required config key {key!r}")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing_dir(path: str, key: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"config key {key!r}: directory {p} does not exist")
    return p


def _checkpoint(args, cfg) -> Path:
    p = Path(args.checkpoint or _need(cfg, "checkpoint"))
    if not p.is_file():
        raise UsageError(f"checkpoint {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config, args.set, {"n_per_class": 100, "source_domains": (0, 1), "target_domain": 3,
                                               "n_classes": 6, "texture_bias": 0.6, "val_fraction": 0.1,
                                               "n_cue_conflict": 300, "size": 48, "pool_per_kind": 20,
                                               "pool_size": 16})
    seed = args.seed if args.seed is not None else 0
    synth = SynthConfig(cfg["n_per_class"], cfg["source_domains"], cfg["target_domain"], cfg["n_classes"],
                        cfg["texture_bias"], cfg["val_fraction"], cfg["n_cue_conflict"], cfg["size"])
    try:
        data = build_dataset(synth, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    data.save(out)
    make_domain_pool(cfg["pool_per_kind"], seed, cfg["pool_size"]).save(out / "pool")
    print(f"wrote dataset to {out}: train {len(data.train)}, val {len(data.val)}, target {len(data.target)}, "
          f"cue-conflict {len(data.cue_conflict)}")
    return 0


def cmd_gen_permset(args) -> int:
    cfg = _read_config(args.config, args.set, {"grid_n": 3, "n_perms": 30})
    seed = args.seed if args.seed is not None else 0
    try:
        ps = generate_permutation_set(cfg["grid_n"], cfg["n_perms"], seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    ps.save(out / "permset.txt")
    print(f"wrote {ps.P} permutations of a {ps.grid_n}x{ps.grid_n} grid to {out / 'permset.txt'}; "
          f"min pairwise Hamming distance {min_pairwise_hamming(ps.perms)}")
    return 0


def cmd_diversify(args) -> int:
    cfg = _read_config(args.config, args.set, {"input": "", "rho": 0.5, "gamma_min": 0.75, "gamma_max": 1.0,
                                               "grid_n": 3, "limit": 0})
    src = cfg["input"] or str(Path(_need(cfg, "dataset")) / "train")
    records = RecordSet.load(_existing_dir(src, "input"))
    pool_dir = cfg.get("_pool") or str(Path(src).parent / "pool")
    pool = DomainPool.load(_existing_dir(pool_dir, "pool"))
    if cfg["limit"] > 0:
        records = records[: cfg["limit"]]
    try:
        dcfg = DiversifierConfig(cfg["rho"], cfg["gamma_min"], cfg["gamma_max"], pool=pool)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = args.seed if args.seed is not None else 0
    grids = [decompose(img, cfg["grid_n"]) for img in records.images]
    out_grids, decisions = diversify_batch(grids, dcfg, seed)
    out = _out_dir(args)
    diversified = RecordSet(np.stack([recompose(g) for g in out_grids]), records.shape_labels, records.domain_ids,
                            records.texture_labels, records.seeds)
    diversified.save(out / "images")
    write_decision_log(out / "decisions.txt", decisions)
    hits = sum(d.hit for d in decisions)
    print(f"diversified {hits} of {len(decisions)} images (rho={cfg['rho']}); output in {out}")
    return 0


def cmd_train(args) -> int:
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file {p} does not exist")
        values.update(parse_key_values(p.read_text()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = TrainConfig.from_mapping(values)
    out = _out_dir(args)
    resume = args.resume
    if resume and not Path(resume).is_file():
        raise UsageError(f"resume checkpoint {resume} does not exist")
    result = train(cfg, out_dir=out, resume=resume, keep_checkpoints=args.keep_checkpoints)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"trained {last['epoch']} epochs: val acc {last['val_accuracy']:.3f}, target acc "
              f"{last['target_accuracy']:.3f}, jigsaw acc {last['jigsaw_accuracy']:.3f}, "
              f"shape bias {last['shape_bias']:.3f}")
    print(f"metrics in {out / 'metrics.csv'}, checkpoint {out / 'last.ckpt'}")
    return 0


def _load_model(args, cfg):
    state = load_checkpoint(_checkpoint(args, cfg))
    if state.spec is None:
        raise UsageError("checkpoint carries no model spec")
    return state


def _dataset(cfg) -> DatasetSplit:
    return DatasetSplit.load(_existing_dir(_need(cfg, "dataset"), "dataset"))


def cmd_eval(args) -> int:
    cfg = _read_config(args.config, args.set, {"checkpoint": "", "dataset": "", "splits": "val,target,cue_conflict"})
    state = _load_model(args, cfg)
    data = _dataset(cfg)
    reports = []
    for split in (s.strip() for s in cfg["splits"].split(",") if s.strip()):
        if split not in DatasetSplit.SPLITS:
            raise UsageError(f"unknown split {split!r}")
        records = getattr(data, split)
        if records is None:
            raise UsageError(f"dataset has no {split!r} split")
        try:
            rep = evaluate(state.params, state.spec, records, split)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        reports.append(rep)
        sb = "" if rep.shape_bias is None else f", shape bias {rep.shape_bias:.3f}"
        print(f"{split}: accuracy {rep.accuracy:.4f} over {rep.n} images{sb}")
    permset_path = cfg.get("_permset")
    if permset_path and data.val is not None:
        ps = PermutationSet.load(permset_path)
        acc = jigsaw_accuracy(state.params, state.spec, ps, data.val, seed=args.seed or 0)
        reports[0].extra["jigsaw_accuracy"] = acc
        print(f"jigsaw accuracy on shuffled val images: {acc:.4f} (chance {1 / ps.P:.4f})")
    write_reports(_out_dir(args), reports)
    return 0


def cmd_shape_bias(args) -> int:
    cfg = _read_config(args.config, args.set, {"checkpoint": "", "dataset": ""})
    state = _load_model(args, cfg)
    data = _dataset(cfg)
    if data.cue_conflict is None:
        raise UsageError("dataset has no cue_conflict split")
    rep = evaluate(state.params, state.spec, data.cue_conflict, "cue_conflict")
    out = _out_dir(args)
    payload = {"shape_bias": None if np.isnan(rep.shape_bias) else rep.shape_bias, "shape_fraction": rep.shape_fraction,
               "texture_fraction": rep.texture_fraction, "n": rep.n}
    (out / "shape_bias.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    score = "undefined (no prediction matched either cue)" if payload["shape_bias"] is None else f"{rep.shape_bias:.3f}"
    print(f"shape bias {score}; shape-match {rep.shape_fraction:.3f}, texture-match {rep.texture_fraction:.3f} "
          f"over {rep.n} images")
    return 0


def cmd_attention(args) -> int:
    cfg = _read_config(args.config, args.set, {"checkpoint": "", "dataset": "", "split": "target", "limit": 100})
    state = _load_model(args, cfg)
    data = _dataset(cfg)
    records = getattr(data, cfg["split"], None)
    if records is None:
        raise UsageError(f"dataset has no {cfg['split']!r} split")
    if cfg["limit"] > 0:
        records = records[: cfg["limit"]]
    if records.images.shape[1:] != (state.spec.in_channels, state.spec.image_size, state.spec.image_size):
        raise UsageError("images do not match the model input size")
    maps, zero = attention_maps(state.params, state.spec, records.images.astype(state.params["c.w"].dtype))
    out = _out_dir(args)
    write_attention(out, maps, zero)
    contrast = mask_contrast(maps, object_masks(records))
    valid = ~np.isnan(contrast)
    frac = float((contrast[valid] > 0).mean()) if valid.any() else float("nan")
    (out / "mask_contrast.csv").write_text(
        "index,inside_minus_outside\n" + "".join(f"{i},{c!r}\n" for i, c in enumerate(contrast)))
    print(f"wrote {len(maps)} {maps.shape[1]}x{maps.shape[2]} attention maps to {out}; "
          f"{int(zero.sum())} all-zero; inside-mask > outside on {frac:.1%} of images")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _read_config(args.config, args.set, {"n_images": 4, "max_entries": 100, "tolerance": 1e-4, "h": 1e-5,
                                               "alpha": 0.7, "image_size": 48, "conv_channels": (16, 32, 64),
                                               "n_classes": 6, "n_perms": 30})
    spec = ModelSpec(n_classes=cfg["n_classes"], n_perms=cfg["n_perms"], image_size=cfg["image_size"],
                     conv_channels=cfg["conv_channels"])
    seed = args.seed if args.seed is not None else 0
    rows = gradcheck_model(spec, seed, cfg["n_images"], cfg["alpha"], cfg["max_entries"] or None,
                           cfg["tolerance"], cfg["h"])
    lines = ["parameter,shape,checked,max_rel_error,max_abs_error,passed"]
    print(f"{'parameter':<12} {'shape':<18} {'checked':>7} {'max rel err':>12}  ok")
    for r in rows:
        shape = "x".join(map(str, r.shape))
        lines.append(f"{r.name},{shape},{r.checked},{r.max_rel_error!r},{r.max_abs_error!r},{int(r.passed)}")
        print(f"{r.name:<12} {shape:<18} {r.checked:>7} {r.max_rel_error:>12.3e}  {'yes' if r.passed else 'NO'}")
    if args.out:
        (_out_dir(args) / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    ok = all(r.passed for r in rows)
    print("all parameter tensors within tolerance" if ok else "gradient check FAILED")
    return 0 if ok else 2


COMMANDS: dict[str, tuple[Callable, str]] = {
    "gen-data": (cmd_gen_data, "render the synthetic shape/texture dataset and style pool"),
    "gen-permset": (cmd_gen_permset, "select a maximal-Hamming permutation set"),
    "diversify": (cmd_diversify, "apply the tile diversifier to a split and log decisions"),
    "train": (cmd_train, "run joint classification + jigsaw training"),
    "eval": (cmd_eval, "accuracy report for one or more splits"),
    "shape-bias": (cmd_shape_bias, "cue-conflict shape-bias score"),
    "attention": (cmd_attention, "dump final-layer attention maps as CSV"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every model gradient"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shapejig", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out", required=name != "gradcheck", help="output directory (overwritten)")
        if name in ("eval", "shape-bias", "attention"):
            p.add_argument("--checkpoint", help="model checkpoint (or config key 'checkpoint')")
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint")
            p.add_argument("--keep-checkpoints", action="store_true", help="also keep one checkpoint per epoch")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
