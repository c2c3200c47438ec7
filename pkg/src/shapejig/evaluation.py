"""Accuracy, shape-bias and jigsaw metrics plus the spatial attention diagnostic."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .jigsaw import PermutationSet, decompose, recompose, shuffle_tiles
from .model import ModelSpec, forward, predict_logits
from .synthdata import RecordSet


@dataclass
class ShapeBias:
    score: float  # NaN when no prediction matched either cue
    shape_fraction: float
    texture_fraction: float
    n: int

    @property
    def defined(self) -> bool:
        return not np.isnan(self.score)


def shape_bias_from_predictions(pred, shape_labels, texture_labels) -> ShapeBias:
    """Matched-decision shape bias: shape hits / (shape hits + texture hits)."""
    pred, s, t = (np.asarray(a) for a in (pred, shape_labels, texture_labels))
    if np.any(s == t):
        raise ValueError("cue-conflict records need shape_label != texture_label")
    n = len(pred)
    if n == 0:
        raise ValueError("no cue-conflict records")
    shape_hits = int((pred == s).sum())
    tex_hits = int((pred == t).sum())
    matched = shape_hits + tex_hits
    score = shape_hits / matched if matched else float("nan")
    return ShapeBias(score, shape_hits / n, tex_hits / n, n)


@dataclass
class EvalReport:
    split: str
    accuracy: float
    per_class_accuracy: list[float]
    class_counts: list[int]
    n: int
    shape_bias: float | None = None
    shape_fraction: float | None = None
    texture_fraction: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_accuracy"] = [None if np.isnan(v) else v for v in self.per_class_accuracy]
        if d["shape_bias"] is not None and np.isnan(d["shape_bias"]):
            d["shape_bias"] = None
        return json.dumps(d, sort_keys=True)


def report_from_predictions(pred, labels, n_classes: int, split: str = "") -> EvalReport:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes}); class-count mismatch")
    counts = np.bincount(labels, minlength=n_classes)
    hits = np.bincount(labels[pred == labels], minlength=n_classes)
    per_class = [float(h / c) if c else float("nan") for h, c in zip(hits, counts)]
    return EvalReport(split, float((pred == labels).mean()), per_class, counts.tolist(), int(len(labels)))


def predict(params: ParamSet, spec: ModelSpec, images: np.ndarray) -> np.ndarray:
    return predict_logits(params, images, spec)[0].argmax(axis=1)


def evaluate(params: ParamSet, spec: ModelSpec, records: RecordSet, split: str = "") -> EvalReport:
    """Argmax accuracy on undiversified inputs, with shape bias for cue-conflict records."""
    if records.shape_labels.max() >= spec.n_classes:
        raise ValueError(f"records have labels >= {spec.n_classes}; class-count mismatch with the model")
    pred = predict(params, spec, records.images)
    report = report_from_predictions(pred, records.shape_labels, spec.n_classes, split)
    if np.all(records.texture_labels >= 0):
        sb = shape_bias_from_predictions(pred, records.shape_labels, records.texture_labels)
        report.shape_bias, report.shape_fraction, report.texture_fraction = sb.score, sb.shape_fraction, sb.texture_fraction
    return report


def shape_bias_score(params: ParamSet, spec: ModelSpec, cue_conflict: RecordSet) -> ShapeBias:
    if np.any(cue_conflict.texture_labels < 0):
        raise ValueError("every cue-conflict record needs a texture label")
    pred = predict(params, spec, cue_conflict.images)
    return shape_bias_from_predictions(pred, cue_conflict.shape_labels, cue_conflict.texture_labels)


def shuffled_copies(images: np.ndarray, permset: PermutationSet, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Each image shuffled by a uniformly drawn permutation of the set."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, permset.P, size=len(images))
    out = np.stack([recompose(shuffle_tiles(decompose(img, permset.grid_n), permset[p])) for img, p in zip(images, labels)])
    return out, labels


def jigsaw_accuracy(params: ParamSet, spec: ModelSpec, permset: PermutationSet, records: RecordSet, seed: int = 0) -> float:
    """Permutation-index accuracy on freshly shuffled, undiversified copies."""
    if permset.P != spec.n_perms:
        raise ValueError(f"permutation set has P={permset.P} but the model predicts {spec.n_perms}")
    images, labels = shuffled_copies(records.images, permset, seed)
    jig = predict_logits(params, images, spec)[1]
    return float((jig.argmax(axis=1) == labels).mean())


def attention_maps(params: ParamSet, spec: ModelSpec, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2 channel magnitude per spatial cell of the last conv stage, max-normalised per image.

    Returns ``(maps, all_zero)``; all-zero maps are left at zero and flagged.
    """
    maps = []
    for start in range(0, len(images), 256):
        act = forward(params, images[start : start + 256], spec).final_activation.data
        maps.append(np.sqrt((act * act).sum(axis=1)))
    maps = np.concatenate(maps)
    peak = maps.max(axis=(1, 2))
    zero = peak == 0
    maps = np.where(zero[:, None, None], 0.0, maps / np.where(zero, 1.0, peak)[:, None, None])
    return maps, zero


def write_attention(directory: str | os.PathLike, maps: np.ndarray, zero: np.ndarray) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        p = d / f"attention_{i:05d}.csv"
        rows = [",".join(repr(float(v)) for v in row) for row in m]
        p.write_text("\n".join(rows) + "\n")
        paths.append(p)
    (d / "flags.csv").write_text("index,all_zero\n" + "".join(f"{i},{int(z)}\n" for i, z in enumerate(zero)))
    return paths


def mask_contrast(maps: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mean attention inside minus outside the (downsampled) object mask, per image."""
    n, s, _ = maps.shape
    size = masks.shape[-1]
    f = size // s
    cover = masks[:, : s * f, : s * f].reshape(n, s, f, s, f).mean(axis=(2, 4))
    inside = cover >= 0.5
    out = np.full(n, np.nan)
    for i in range(n):
        if inside[i].any() and (~inside[i]).any():
            out[i] = maps[i][inside[i]].mean() - maps[i][~inside[i]].mean()
    return out


def write_reports(directory: str | os.PathLike, reports: list[EvalReport]) -> None:
    """CSV summary plus one JSON object per line."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["split,n,accuracy,shape_bias,shape_fraction,texture_fraction"]
    for r in reports:
        vals = [r.split, str(r.n), repr(r.accuracy)] + [
            "" if v is None else repr(float(v)) for v in (r.shape_bias, r.shape_fraction, r.texture_fraction)
        ]
        lines.append(",".join(vals))
    (d / "eval.csv").write_text("\n".join(lines) + "\n")
    (d / "eval.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
