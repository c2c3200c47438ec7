"""Batch composition and the seeded training loop with checkpointing."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import OptState, ParamSet, Tape, backward, sgd_step
from .autodiff import ndt
from .autodiff.tensor import NonFiniteError
from .diversifier import CoderPair, Decision, DiversifierConfig, DomainPool, diversify_batch, train_decoder
from .evaluation import evaluate, jigsaw_accuracy, shape_bias_score
from .jigsaw import PermutationSet, decompose, generate_permutation_set, recompose, shuffle_tiles
from .model import Batch, ModelSpec, init_params, joint_loss
from .synthdata import DatasetSplit, RecordSet, make_domain_pool

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "shapejig-checkpoint"
CHECKPOINT_VERSION = 1

METRIC_COLUMNS = (
    "epoch",
    "train_class_loss",
    "train_jigsaw_loss",
    "val_accuracy",
    "target_accuracy",
    "jigsaw_accuracy",
    "shape_bias",
    "shape_fraction",
    "texture_fraction",
    "n_shuffled",
    "n_diversified",
)


class ConfigError(ValueError):
    """Invalid or incomplete training configuration."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


class CheckpointError(ValueError):
    """Checkpoint is corrupt, truncated or from an incompatible version."""


@dataclass
class TrainConfig:
    """Every knob of a run; together with ``seed`` it fixes the result."""

    alpha: float = 0.7
    beta: float = 0.6  # fraction of each batch left ordered
    rho: float = 0.5
    gamma_min: float = 0.75
    gamma_max: float = 1.0
    mode: str = "pixel"
    batch_size: int = 128
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 30
    seed: int = 0
    grid_n: int = 3
    n_perms: int = 30
    permset: str = ""
    dataset: str = ""
    pool: str = ""
    dtype: str = "float64"
    n_classes: int = 0  # 0 infers the class count from the training labels
    conv_channels: tuple[int, ...] = (16, 32, 64)
    lr_decay_every: int = 0  # 0 keeps the learning rate constant
    lr_decay_factor: float = 0.1
    explore_decay: bool = False  # linearly shrink rho and gamma toward explore_final
    explore_final: float = 0.0
    decoder_epochs: int = 5
    decoder_lambda: float = 0.1
    decoder_tau: float = 0.01
    decoder_lr: float = 1e-3

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.alpha >= 0, "alpha must be non-negative"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]"),
            (0.0 <= self.gamma_min <= self.gamma_max <= 1.0, "need 0 <= gamma_min <= gamma_max <= 1"),
            (self.mode in ("pixel", "learned"), "mode must be pixel or learned"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (min(self.lr, self.momentum, self.weight_decay) >= 0, "optimizer hyperparameters must be non-negative"),
            (self.epochs >= 0, "epochs must be non-negative"),
            (self.n_classes == 0 or self.n_classes >= 2, "n_classes must be 0 (infer) or at least 2"),
            (self.dtype in ("float64", "float32"), "dtype must be float64 or float32"),
            (0.0 <= self.explore_final <= 1.0, "explore_final must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def diversifier(self, epoch: int = 0, pool: DomainPool | None = None, coder: CoderPair | None = None) -> DiversifierConfig:
        rho, gmin, gmax = self.rho, self.gamma_min, self.gamma_max
        if self.explore_decay and self.epochs > 1:
            frac = 1.0 - (1.0 - self.explore_final) * epoch / (self.epochs - 1)
            rho, gmin, gmax = rho * frac, gmin * frac, gmax * frac
        return DiversifierConfig(rho=rho, gamma_min=gmin, gamma_max=gmax, mode=self.mode, pool=pool, coder=coder)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    # flat key=value text format
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_key_values(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cls(), key) if key != "conv_channels" else (16,)
            kwargs[key] = _coerce(key, raw, default)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text())


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


# ---------------------------------------------------------------------------
# batch composition


def n_ordered_for(beta: float, batch_len: int) -> int:
    """Ordered items in a batch: round(beta * size), at least one."""
    n = int(np.floor(beta * batch_len + 0.5))
    return min(batch_len, max(1, n))


def compose_batch(records: RecordSet, permset: PermutationSet, cfg: TrainConfig, rng: np.random.Generator,
                  div_cfg: DiversifierConfig | None = None, div_rng: np.random.Generator | None = None,
                  start_index: int = 0) -> tuple[Batch, list[Decision]]:
    """Keep the first round(beta * B) records ordered; shuffle and diversify the rest.

    Shuffled items get a uniformly drawn non-identity permutation index and
    pass through the diversifier tile-wise before being recomposed. Ordered
    items are never diversified.
    """
    b = len(records)
    if b == 0:
        raise ValueError("empty batch")
    if int(np.floor(cfg.beta * b + 0.5)) == 0:
        raise ValueError(f"beta={cfg.beta} leaves no ordered item in a batch of {b}")
    n_ord = n_ordered_for(cfg.beta, b)
    images = records.images.copy()
    perm_labels = np.zeros(b, dtype=np.intp)
    decisions: list[Decision] = []
    n_shuf = b - n_ord
    if n_shuf:
        if permset.P < 2:
            raise ValueError("shuffling needs at least one non-identity permutation")
        perm_labels[n_ord:] = rng.integers(1, permset.P, size=n_shuf)
        grids = [shuffle_tiles(decompose(images[i], permset.grid_n), permset[perm_labels[i]]) for i in range(n_ord, b)]
        if div_cfg is not None and div_cfg.rho > 0:
            grids, decisions = diversify_batch(grids, div_cfg, div_rng if div_rng is not None else rng, start_index)
        for i, g in zip(range(n_ord, b), grids):
            images[i] = recompose(g)
    ordered = np.arange(b) < n_ord
    class_labels = np.where(ordered, records.shape_labels, -1)
    return Batch(images, ordered, class_labels, perm_labels), decisions


# ---------------------------------------------------------------------------
# state and checkpoints

RNG_STREAMS = ("order", "perm", "diversify")


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


@dataclass
class TrainState:
    epoch: int
    params: ParamSet
    opt: OptState
    rngs: dict[str, np.random.Generator]
    metrics: list[dict] = field(default_factory=list)
    spec: ModelSpec | None = None
    config: TrainConfig | None = None
    coder: CoderPair | None = None


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(path: str | os.PathLike, state: TrainState) -> None:
    """JSON header line followed by NDT1 tensors; the header carries a payload checksum."""
    names, blobs = [], []
    for k, v in state.params.items():
        names.append(k)
        blobs.append(ndt.dumps(v.data))
    for k, buf in state.opt.buffers.items():
        names.append("opt/" + k)
        blobs.append(ndt.dumps(buf))
    if state.coder is not None:
        for k, arr in state.coder.state_arrays().items():
            names.append("coder/" + k)
            blobs.append(ndt.dumps(arr))
    payload = b"".join(blobs)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_spec": state.spec.to_dict() if state.spec else None,
        "epoch": state.epoch,
        "seed": state.config.seed if state.config else None,
        "config": state.config.to_text() if state.config else None,
        "optimizer": {"lr": state.opt.lr, "momentum": state.opt.momentum, "weight_decay": state.opt.weight_decay},
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "metrics": state.metrics,
        "tensors": names,
        "payload_bytes": len(payload),
        "payload_sha256": _sha256(payload),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing checkpoint header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a shapejig checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    payload = raw[nl + 1 :]
    if len(payload) != header["payload_bytes"] or _sha256(payload) != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch (truncated or corrupted)")
    stream = io.BytesIO(payload)
    arrays = {name: ndt.read_from(stream) for name in header["tensors"]}

    spec = ModelSpec.from_dict(header["model_spec"]) if header["model_spec"] else None
    config = TrainConfig.from_text(header["config"]) if header["config"] else None
    from .autodiff import Tensor

    params = ParamSet({k: Tensor(v.copy()) for k, v in arrays.items() if "/" not in k})
    opt = OptState(**header["optimizer"])
    opt.buffers = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}
    rngs = {}
    for k, st in header["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    coder = None
    coder_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("coder/")}
    if coder_arrays:
        coder = CoderPair(channels=coder_arrays["f.w"].shape[1], features=coder_arrays["f.w"].shape[0],
                          hidden=coder_arrays["g.w1"].shape[0], dtype=coder_arrays["f.w"].dtype)
        coder.encoder["w"].data = coder_arrays["f.w"].copy()
        coder.encoder["b"].data = coder_arrays["f.b"].copy()
        coder.decoder.load_arrays({k: v for k, v in coder_arrays.items() if k.startswith("g.")})
        coder.trained = True
    return TrainState(header["epoch"], params, opt, rngs, header["metrics"], spec, config, coder)


# ---------------------------------------------------------------------------
# training loop


def format_metrics_csv(rows: list[dict]) -> str:
    out = [",".join(METRIC_COLUMNS)]
    for r in rows:
        vals = []
        for c in METRIC_COLUMNS:
            v = r[c]
            vals.append(str(v) if isinstance(v, int) else ("nan" if v is None or np.isnan(v) else repr(float(v))))
        out.append(",".join(vals))
    return "\n".join(out) + "\n"


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    spec: ModelSpec
    permset: PermutationSet
    timings: list[float]

    @property
    def params(self) -> ParamSet:
        return self.state.params


def load_inputs(cfg: TrainConfig) -> tuple[DatasetSplit, PermutationSet, DomainPool]:
    if not cfg.dataset:
        raise ConfigError("missing required config key 'dataset'")
    ds_path = Path(cfg.dataset)
    if not ds_path.is_dir():
        raise ConfigError(f"config key 'dataset': directory {ds_path} does not exist")
    data = DatasetSplit.load(ds_path)
    if cfg.permset:
        if not Path(cfg.permset).is_file():
            raise ConfigError(f"config key 'permset': file {cfg.permset} does not exist")
        permset = PermutationSet.load(cfg.permset)
    else:
        permset = generate_permutation_set(cfg.grid_n, cfg.n_perms, cfg.seed)
    pool_dir = Path(cfg.pool) if cfg.pool else ds_path / "pool"
    if cfg.pool and not pool_dir.is_dir():
        raise ConfigError(f"config key 'pool': directory {pool_dir} does not exist")
    pool = DomainPool.load(pool_dir) if pool_dir.is_dir() else make_domain_pool(seed=cfg.seed)
    return data, permset, pool


def _epoch_metrics(state: TrainState, spec: ModelSpec, data: DatasetSplit, permset: PermutationSet, epoch: int,
                   seed: int, sums: dict) -> dict:
    """Per-epoch row; splits that are absent (None) yield NaN columns."""
    params, nan = state.params, float("nan")
    row = {
        "epoch": epoch + 1,
        "train_class_loss": sums["class"] / max(sums["n_ordered"], 1),
        "train_jigsaw_loss": sums["jigsaw"] / max(sums["n"], 1),
        "val_accuracy": evaluate(params, spec, data.val).accuracy if data.val is not None else nan,
        "target_accuracy": evaluate(params, spec, data.target).accuracy if data.target is not None else nan,
        "jigsaw_accuracy": nan,
        "shape_bias": nan,
        "shape_fraction": nan,
        "texture_fraction": nan,
        "n_shuffled": sums["shuffled"],
        "n_diversified": sums["diversified"],
    }
    if data.val is not None:
        row["jigsaw_accuracy"] = jigsaw_accuracy(params, spec, permset, data.val, seed=int(seed * 100003 + epoch))
    if data.cue_conflict is not None:
        sb = shape_bias_score(params, spec, data.cue_conflict)
        row.update(shape_bias=sb.score, shape_fraction=sb.shape_fraction, texture_fraction=sb.texture_fraction)
    return row


StepHook = Callable[[int, int, ParamSet, Batch], None]


def train(
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    data: DatasetSplit | None = None,
    permset: PermutationSet | None = None,
    pool: DomainPool | None = None,
    resume: str | os.PathLike | TrainState | None = None,
    on_step: StepHook | None = None,
    keep_checkpoints: bool = False,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of compose_batch -> joint_loss -> backward -> sgd_step.

    ``on_step(epoch, batch_index, params, batch)`` sees the gradients before
    each update. With ``out_dir`` the config, metrics.csv, timing.csv and a
    checkpoint per epoch are written there.
    """
    if data is None or permset is None or pool is None:
        d, p, q = load_inputs(cfg)
        data, permset, pool = data or d, permset or p, pool or q
    if permset.P != cfg.n_perms or permset.grid_n != cfg.grid_n:
        cfg = replace(cfg, n_perms=permset.P, grid_n=permset.grid_n)
    dtype = cfg.np_dtype
    train_set = data.train.astype(dtype)
    eval_data = DatasetSplit(*(None if getattr(data, s) is None else getattr(data, s).astype(dtype)
                               for s in DatasetSplit.SPLITS))
    n_classes = cfg.n_classes or int(data.train.shape_labels.max()) + 1
    spec = ModelSpec(n_classes=n_classes, n_perms=permset.P, in_channels=train_set.images.shape[1],
                     image_size=train_set.images.shape[-1], conv_channels=cfg.conv_channels)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")

    if resume is not None:
        state = resume if isinstance(resume, TrainState) else load_checkpoint(resume)
        if state.spec != spec:
            raise CheckpointError("checkpoint model spec does not match the data/permutation set")
        state.config = cfg
        coder = state.coder
    else:
        coder = None
        if cfg.mode == "learned":
            coder = CoderPair(channels=spec.in_channels, seed=cfg.seed, dtype=dtype)
            corpus = train_set.images[np.random.default_rng(cfg.seed).permutation(len(train_set))[:100]]
            coder, _ = train_decoder(coder, corpus, pool, lam=cfg.decoder_lambda, tau=cfg.decoder_tau,
                                     epochs=cfg.decoder_epochs, seed=cfg.seed, lr=cfg.decoder_lr, grid_n=cfg.grid_n)
        state = TrainState(0, init_params(spec, cfg.seed, dtype),
                           OptState(cfg.lr, cfg.momentum, cfg.weight_decay), make_rngs(cfg.seed),
                           [], spec, cfg, coder)

    timings: list[float] = []
    n = len(train_set)
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        state.opt.lr = cfg.lr_at(epoch)
        div_cfg = cfg.diversifier(epoch, pool, coder)
        order = state.rngs["order"].permutation(n)
        sums = dict(**{k: 0.0 for k in ("class", "jigsaw")}, n=0, n_ordered=0, shuffled=0, diversified=0)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch, decisions = compose_batch(train_set[idx], permset, cfg, state.rngs["perm"], div_cfg,
                                             state.rngs["diversify"], start_index=start)
            try:
                state.params.zero_grad()
                with Tape() as tape:
                    loss, parts = joint_loss(batch, state.params, cfg.alpha, spec)
                backward(loss, tape)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch + 1, bi, str(exc)) from None
            if on_step is not None:
                on_step(epoch, bi, state.params, batch)
            sgd_step(state.params, state.opt)
            sums["class"] += parts.class_loss * parts.n_ordered
            sums["jigsaw"] += parts.jigsaw_loss * len(batch)
            sums["n"] += len(batch)
            sums["n_ordered"] += parts.n_ordered
            sums["shuffled"] += len(batch) - parts.n_ordered
            sums["diversified"] += sum(d.hit for d in decisions)
        state.epoch = epoch + 1
        row = _epoch_metrics(state, spec, eval_data, permset, epoch, cfg.seed, sums)
        state.metrics.append(row)
        timings.append(time.perf_counter() - t0)
        logger.info("epoch %d val %.3f target %.3f shape-bias %.3f", row["epoch"], row["val_accuracy"],
                    row["target_accuracy"], row["shape_bias"])
        if out is not None:
            (out / "metrics.csv").write_text(format_metrics_csv(state.metrics))
            with open(out / "timing.csv", "a" if epoch else "w") as fh:
                if epoch == 0:
                    fh.write("epoch,seconds\n")
                fh.write(f"{epoch + 1},{timings[-1]:.3f}\n")
            save_checkpoint(out / "last.ckpt", state)
            if keep_checkpoints:
                save_checkpoint(out / f"epoch_{epoch + 1:03d}.ckpt", state)
    return TrainResult(state, state.metrics, spec, permset, timings)
