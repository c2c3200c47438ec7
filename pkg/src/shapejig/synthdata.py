"""Procedural shape/texture benchmark.

Six binary shape masks are filled with a foreground texture over a
background texture. Texture domains differ in their generator kind and
palette, the foreground colour is correlated with the class in the source
domains (a texture shortcut), and a cue-conflict set pairs every shape with
another class's signature colour so that shape bias becomes measurable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import ndt

IMAGE_SIZE = 48
AREA_RANGE = (0.20, 0.60)

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star", "ring")
TEXTURE_KINDS = ("solid", "stripes", "checker", "white-noise", "blob-noise")

# class -> signature foreground colour
SIGNATURE_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.15, 0.30, 0.90],
        [0.90, 0.85, 0.10],
        [0.80, 0.20, 0.80],
        [0.10, 0.80, 0.85],
    ]
)


class DegenerateSampleError(ValueError):
    """Foreground and background are indistinguishable inside the mask."""


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str
    radius: tuple[float, float]
    position_jitter: float = 3.0
    rotation_jitter: float = np.pi


DEFAULT_SHAPES = (
    ShapeClass(0, "circle", (13.0, 20.0)),
    ShapeClass(1, "square", (13.0, 21.0)),
    ShapeClass(2, "triangle", (19.0, 24.0)),
    ShapeClass(3, "cross", (15.0, 22.0)),
    ShapeClass(4, "star", (19.0, 24.0)),
    ShapeClass(5, "ring", (15.0, 22.0)),
)


def _mask(name: str, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    r = np.hypot(u, v)
    if name == "circle":
        return r <= radius
    if name == "square":
        a = 0.85 * radius
        return np.maximum(np.abs(u), np.abs(v)) <= a
    if name == "triangle":
        angles = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        d = np.max([-(u * np.cos(t) + v * np.sin(t)) for t in angles], axis=0)
        return d <= radius / 2
    if name == "cross":
        w = 0.35 * radius
        return ((np.abs(u) <= w) & (np.abs(v) <= radius)) | ((np.abs(v) <= w) & (np.abs(u) <= radius))
    if name == "star":
        theta = np.arctan2(v, u)
        return r <= radius * (0.6 + 0.4 * np.cos(5 * theta))
    if name == "ring":
        return (r <= radius) & (r >= 0.55 * radius)
    raise ValueError(f"unknown shape {name!r}")


def rasterize(shape: ShapeClass, rng: np.random.Generator, size: int = IMAGE_SIZE, max_tries: int = 200) -> np.ndarray:
    """Binary mask of ``shape`` with jittered size, position and rotation.

    Draws are repeated until the mask covers 20-60% of the image.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    lo, hi = AREA_RANGE
    scale = size / IMAGE_SIZE  # shape geometry is defined at the default resolution
    for _ in range(max_tries):
        radius = rng.uniform(*shape.radius) * scale
        jitter = shape.position_jitter * scale
        cx, cy = size / 2 + rng.uniform(-jitter, jitter, size=2)
        rot = rng.uniform(-shape.rotation_jitter, shape.rotation_jitter)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(rot) + dy * np.sin(rot)
        v = -dx * np.sin(rot) + dy * np.cos(rot)
        mask = _mask(shape.name, u, v, radius)
        if lo <= mask.mean() <= hi:
            return mask
    raise RuntimeError(f"could not rasterize {shape.name} within the area bounds")


# ---------------------------------------------------------------------------
# textures


@dataclass(frozen=True)
class TextureSpec:
    kind: str
    colors: tuple[tuple[float, float, float], ...]
    period: float = 6.0
    angle: float = 0.0
    noise: float = 0.02
    smooth: float = 2.0

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise ValueError(f"unknown texture kind {self.kind!r}")


def render_texture(spec: TextureSpec, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """3 x size x size texture in [0, 1]."""
    c = np.asarray(spec.colors, dtype=np.float64)
    c1 = c[0][:, None, None]
    c2 = (c[1] if len(c) > 1 else c[0])[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if spec.kind == "solid":
        base = np.broadcast_to(c1, (3, size, size))
    elif spec.kind == "stripes":
        proj = xx * np.cos(spec.angle) + yy * np.sin(spec.angle)
        sel = (np.floor(proj / (spec.period / 2)) % 2).astype(bool)
        base = np.where(sel, c2, c1)
    elif spec.kind == "checker":
        cell = max(1.0, spec.period / 2)
        sel = ((np.floor(xx / cell) + np.floor(yy / cell)) % 2).astype(bool)
        base = np.where(sel, c2, c1)
    elif spec.kind == "white-noise":
        base = np.broadcast_to(c1, (3, size, size))
    else:  # blob-noise
        field_ = gaussian_filter(rng.standard_normal((size, size)), spec.smooth, mode="wrap")
        t = (field_ > 0).astype(np.float64)
        base = t * c1 + (1 - t) * c2
    out = base + spec.noise * rng.standard_normal((3, size, size))
    return np.clip(out, 0.0, 1.0)


def _jitter(color: np.ndarray, rng: np.random.Generator, amount: float = 0.05) -> tuple[float, float, float]:
    return tuple(np.clip(color + rng.uniform(-amount, amount, size=3), 0.0, 1.0).tolist())


def random_color(rng: np.random.Generator, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    return rng.uniform(lo, hi, size=3)


@dataclass(frozen=True)
class TextureDomain:
    """A texture domain: how foreground and background textures are drawn."""

    id: int
    name: str
    kind: str
    background: tuple[float, float, float]
    fg_partner: str = "dark"  # second colour of two-colour foreground textures

    def foreground(self, color: np.ndarray, rng: np.random.Generator) -> TextureSpec:
        color = np.asarray(color)
        if self.fg_partner == "dark":
            partner = color * 0.35
        elif self.fg_partner == "light":
            partner = 0.5 + 0.5 * color
        else:
            partner = random_color(rng)
        return TextureSpec(
            self.kind,
            (_jitter(color, rng), tuple(np.clip(partner, 0, 1).tolist())),
            period=float(rng.uniform(4, 8)),
            angle=float(rng.uniform(0, np.pi)),
            noise=0.1 if self.kind == "white-noise" else 0.02,
        )

    def background_texture(self, rng: np.random.Generator) -> TextureSpec:
        bg = np.asarray(self.background)
        kind = "blob-noise" if self.kind == "blob-noise" else "solid"
        second = np.clip(bg + 0.12, 0, 1)
        return TextureSpec(kind, (_jitter(bg, rng, 0.04), tuple(second.tolist())), noise=0.03, smooth=3.0)


DEFAULT_DOMAINS = (
    TextureDomain(0, "solid", "solid", (0.82, 0.82, 0.80), "dark"),
    TextureDomain(1, "stripes", "stripes", (0.12, 0.12, 0.14), "dark"),
    TextureDomain(2, "checker", "checker", (0.50, 0.48, 0.45), "light"),
    TextureDomain(3, "blob", "blob-noise", (0.22, 0.25, 0.45), "random"),
)


# ---------------------------------------------------------------------------
# records


@dataclass
class SampleRecord:
    image: np.ndarray = field(repr=False)
    shape_label: int
    domain_id: int = -1
    texture_label: int = -1
    seed: int = 0


def render_sample(shape: ShapeClass, fg_texture: TextureSpec, bg_texture: TextureSpec, seed: int,
                  size: int = IMAGE_SIZE) -> SampleRecord:
    """Fill ``shape``'s mask with ``fg_texture`` over ``bg_texture``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    mask = rasterize(shape, rng, size)
    fg_seed, bg_seed = rng.integers(0, 2**63 - 1, size=2)
    if fg_texture == bg_texture:
        bg_seed = fg_seed
    fg = render_texture(fg_texture, np.random.default_rng(fg_seed), size)
    bg = render_texture(bg_texture, np.random.default_rng(bg_seed), size)
    if np.array_equal(fg[:, mask], bg[:, mask]):
        raise DegenerateSampleError("foreground and background textures coincide; the shape is invisible")
    image = np.where(mask[None], fg, bg)
    return SampleRecord(image, shape.id, seed=int(seed))


@dataclass
class RecordSet:
    """Column-stacked records; the unit the trainer and evaluator consume."""

    images: np.ndarray = field(repr=False)
    shape_labels: np.ndarray
    domain_ids: np.ndarray
    texture_labels: np.ndarray
    seeds: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "RecordSet":
        if not records:
            raise ValueError("no records")
        return cls(
            np.stack([r.image for r in records]),
            np.array([r.shape_label for r in records], dtype=np.intp),
            np.array([r.domain_id for r in records], dtype=np.intp),
            np.array([r.texture_label for r in records], dtype=np.intp),
            np.array([r.seed for r in records], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx) -> "RecordSet":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return RecordSet(self.images[idx], self.shape_labels[idx], self.domain_ids[idx], self.texture_labels[idx], self.seeds[idx])

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(self.images[i], int(self.shape_labels[i]), int(self.domain_ids[i]),
                            int(self.texture_labels[i]), int(self.seeds[i]))

    def astype(self, dtype) -> "RecordSet":
        return replace(self, images=self.images.astype(dtype))

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(len(self)):
            name = f"img_{i:05d}.ndt"
            ndt.save(d / name, self.images[i])
            lines.append(f"{name} {self.shape_labels[i]} {self.domain_ids[i]} {self.texture_labels[i]} {self.seeds[i]}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "RecordSet":
        d = Path(directory)
        manifest = d / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.txt in {d}")
        records = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            name, shape, dom, tex, seed = line.split()
            records.append(SampleRecord(ndt.load(d / name), int(shape), int(dom), int(tex), int(seed)))
        return cls.from_records(records)


@dataclass
class DatasetSplit:
    train: RecordSet
    val: RecordSet | None = None
    target: RecordSet | None = None
    cue_conflict: RecordSet | None = None

    SPLITS = ("train", "val", "target", "cue_conflict")

    def save(self, directory: str | os.PathLike) -> None:
        for name in self.SPLITS:
            if getattr(self, name) is not None:
                getattr(self, name).save(Path(directory) / name)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "DatasetSplit":
        d = Path(directory)
        if not (d / "train" / "manifest.txt").exists():
            raise FileNotFoundError(f"{d} holds no train split")
        return cls(*(RecordSet.load(d / n) if (d / n / "manifest.txt").exists() else None for n in cls.SPLITS))


def _seed_for(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _domain_records(domain: TextureDomain, class_ids: Iterable[int], n_per_class: int, seed: int,
                    texture_bias: float, correlated: bool, shapes=DEFAULT_SHAPES, size: int = IMAGE_SIZE) -> list[SampleRecord]:
    out = []
    for c in class_ids:
        for i in range(n_per_class):
            rec_seed = _seed_for(seed, domain.id, c, i)
            rng = np.random.default_rng([rec_seed, 1])
            if correlated and rng.random() < texture_bias:
                color = SIGNATURE_COLORS[c]
            else:
                color = random_color(rng)
            fg = domain.foreground(color, rng)
            bg = domain.background_texture(rng)
            rec = render_sample(shapes[c], fg, bg, rec_seed, size)
            rec.domain_id = domain.id
            out.append(rec)
    return out


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    source_domains: tuple[int, ...] = (0, 1)
    target_domain: int = 3
    n_classes: int = 6
    texture_bias: float = 0.6
    val_fraction: float = 0.1
    n_cue_conflict: int = 300
    size: int = IMAGE_SIZE


def build_splits(n_per_class: int = 100, source_domains: Sequence[int] = (0, 1), target_domain: int = 3,
                 seed: int = 0, n_classes: int = 6, texture_bias: float = 0.6, val_fraction: float = 0.1,
                 domains: Sequence[TextureDomain] = DEFAULT_DOMAINS, size: int = IMAGE_SIZE,
                 n_cue_conflict: int = 300) -> DatasetSplit:
    """Class-balanced source train/validation, target-domain and cue-conflict records.

    In source domains the foreground takes the class's signature colour with
    probability ``texture_bias``; target-domain colours are uncorrelated.
    Validation takes ``val_fraction`` of every (domain, class) cell.
    """
    if target_domain in source_domains:
        raise ValueError(f"target domain {target_domain} is also a source domain")
    if not source_domains:
        raise ValueError("at least one source domain is required")
    if n_classes > len(DEFAULT_SHAPES):
        raise ValueError(f"at most {len(DEFAULT_SHAPES)} shape classes are available")
    by_id = {d.id: d for d in domains}
    classes = range(n_classes)
    n_val = int(round(val_fraction * n_per_class))
    if val_fraction > 0 and n_per_class > 1:
        n_val = min(max(n_val, 1), n_per_class - 1)  # tiny builds keep at least one record on each side
    train, val = [], []
    for dom in source_domains:
        recs = _domain_records(by_id[dom], classes, n_per_class, seed, texture_bias, True, size=size)
        for c in classes:
            cell = recs[c * n_per_class : (c + 1) * n_per_class]
            order = np.random.default_rng(_seed_for(seed, 1000 + dom, c)).permutation(n_per_class)
            val += [cell[i] for i in order[:n_val]]
            train += [cell[i] for i in order[n_val:]]
    target = _domain_records(by_id[target_domain], classes, n_per_class, seed, texture_bias, False, size=size)
    shuffle = np.random.default_rng(_seed_for(seed, 2000)).permutation(len(train))
    train = [train[i] for i in shuffle]
    cue = build_cue_conflict(n_cue_conflict, seed, n_classes, domains, tuple(source_domains), size)
    return DatasetSplit(RecordSet.from_records(train), RecordSet.from_records(val), RecordSet.from_records(target), cue)


def build_cue_conflict(n_pairs: int = 300, seed: int = 0, n_classes: int = 6,
                       domains: Sequence[TextureDomain] = DEFAULT_DOMAINS, source_domains: Sequence[int] = (0, 1),
                       size: int = IMAGE_SIZE, jitter_budget: int = 1000) -> RecordSet:
    """Shape of class ``i`` filled with the signature texture of class ``j != i``.

    Ordered pairs are visited round-robin so all ``C (C - 1)`` combinations
    are covered once ``n_pairs`` reaches that count.
    """
    pairs = [(i, j) for i in range(n_classes) for j in range(n_classes) if i != j]
    if n_pairs < 1 or n_pairs > len(pairs) * jitter_budget:
        raise ValueError(f"n_pairs must lie in [1, {len(pairs) * jitter_budget}]")
    by_id = {d.id: d for d in domains}
    out = []
    for n in range(n_pairs):
        i, j = pairs[n % len(pairs)]
        dom = by_id[source_domains[(n // len(pairs)) % len(source_domains)]]
        rec_seed = _seed_for(seed, 3000, n)
        rng = np.random.default_rng([rec_seed, 1])
        fg = dom.foreground(SIGNATURE_COLORS[j], rng)
        bg = dom.background_texture(rng)
        rec = render_sample(DEFAULT_SHAPES[i], fg, bg, rec_seed, size)
        rec.domain_id = dom.id
        rec.texture_label = j
        out.append(rec)
    return RecordSet.from_records(out)


def build_dataset(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> DatasetSplit:
    return build_splits(cfg.n_per_class, cfg.source_domains, cfg.target_domain, seed, cfg.n_classes,
                        cfg.texture_bias, cfg.val_fraction, size=cfg.size, n_cue_conflict=cfg.n_cue_conflict)


def make_domain_pool(n_per_kind: int = 20, seed: int = 0, size: int = 16):
    """Generic texture exemplars with random palettes, one domain per generator kind."""
    from .diversifier import DomainPool

    exemplars, ids = [], []
    for k, kind in enumerate(TEXTURE_KINDS):
        for i in range(n_per_kind):
            rng = np.random.default_rng(_seed_for(seed, 4000 + k, i))
            spec = TextureSpec(kind, (tuple(random_color(rng).tolist()), tuple(random_color(rng).tolist())),
                               period=float(rng.uniform(3, 8)), angle=float(rng.uniform(0, np.pi)),
                               noise=float(rng.uniform(0.02, 0.2)), smooth=float(rng.uniform(1, 3)))
            exemplars.append(render_texture(spec, rng, size))
            ids.append(k)
    return DomainPool(np.stack(exemplars), np.array(ids), seed)


def stats_features(images: np.ndarray) -> np.ndarray:
    """Per-image channel means and stds, concatenated."""
    mu = images.mean(axis=(2, 3))
    sd = images.std(axis=(2, 3))
    return np.concatenate([mu, sd], axis=1)


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    labels = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in labels])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = labels[d.argmin(axis=1)]
    return float((pred == test_y).mean())


def texture_direction_features(records: RecordSet, domains: Sequence[TextureDomain] = DEFAULT_DOMAINS) -> np.ndarray:
    """Unit direction from the domain background colour to the image's mean colour.

    The direction is insensitive to how much of the image the shape covers,
    which makes it a clean texture-only cue.
    """
    bg = {d.id: np.asarray(d.background) for d in domains}
    m = records.images.mean(axis=(2, 3)) - np.stack([bg[int(d)] for d in records.domain_ids])
    return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)


def object_masks(records: RecordSet, shapes: Sequence[ShapeClass] = DEFAULT_SHAPES) -> np.ndarray:
    """Recreate each record's binary shape mask from its seed."""
    size = records.images.shape[-1]
    return np.stack([rasterize(shapes[int(c)], np.random.default_rng(int(s)), size)
                     for c, s in zip(records.shape_labels, records.seeds)])
