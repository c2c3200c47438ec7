"""Shared convolutional feature extractor with classification and jigsaw heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    conv2d,
    dense,
    maxpool2d,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    take_rows,
    uniform_fan_in,
)


@dataclass(frozen=True)
class ModelSpec:
    """Conv stack (3x3 conv, relu, 2x2 max-pool per entry) feeding two linear heads."""

    n_classes: int = 6
    n_perms: int = 30
    in_channels: int = 3
    image_size: int = 48
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    pool: int = 2
    input_shift: float = 0.5
    input_gain: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.n_classes < 2 or self.n_perms < 1:
            raise ValueError("need at least 2 classes and 1 permutation")
        if self.final_size < 1:
            raise ValueError(f"image size {self.image_size} too small for {len(self.conv_channels)} pooling stages")

    @property
    def final_size(self) -> int:
        s = self.image_size
        for _ in self.conv_channels:
            s //= self.pool
        return s

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] * self.final_size**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> ParamSet:
    """He-uniform conv weights, fan-in scaled uniform head weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    cin = spec.in_channels
    k = spec.kernel
    for i, cout in enumerate(spec.conv_channels):
        params.add(f"f.conv{i}.w", Tensor(uniform_fan_in(rng, (cout, cin, k, k), cin * k * k, dtype, gain=np.sqrt(6.0))))
        params.add(f"f.conv{i}.b", Tensor(np.zeros(cout, dtype=dtype)))
        cin = cout
    d = spec.feature_dim
    params.add("c.w", Tensor(uniform_fan_in(rng, (d, spec.n_classes), d, dtype)))
    params.add("c.b", Tensor(np.zeros(spec.n_classes, dtype=dtype)))
    params.add("j.w", Tensor(uniform_fan_in(rng, (d, spec.n_perms), d, dtype)))
    params.add("j.b", Tensor(np.zeros(spec.n_perms, dtype=dtype)))
    return params


@dataclass
class Forward:
    features: Tensor
    class_logits: Tensor
    jigsaw_logits: Tensor
    final_activation: Tensor = field(repr=False)


def check_images(images, spec: ModelSpec) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ValueError(f"expected images of shape N x {' x '.join(map(str, expected))}, got {arr.shape}")
    return arr


def forward(params: ParamSet, images, spec: ModelSpec) -> Forward:
    """Shared features feed both heads; logits are N x C and N x P.

    Inputs in [0, 1] are centred and scaled by the ModelSpec's fixed shift and gain first.
    """
    arr = check_images(images, spec).astype(params["c.w"].dtype, copy=False)
    x = Tensor((arr - spec.input_shift) * spec.input_gain)
    pad = spec.kernel // 2
    for i in range(len(spec.conv_channels)):
        x = relu(conv2d(x, params[f"f.conv{i}.w"], params[f"f.conv{i}.b"], padding=pad))
        x = maxpool2d(x, spec.pool)
    final = x
    feats = reshape(x, (x.shape[0], spec.feature_dim))
    return Forward(
        feats,
        dense(feats, params["c.w"], params["c.b"]),
        dense(feats, params["j.w"], params["j.b"]),
        final,
    )


def class_loss(class_logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the classifier over the supplied (ordered) items."""
    if class_logits.shape[0] == 0 or len(labels) == 0:
        raise ValueError("class_loss needs at least one ordered item")
    return softmax_cross_entropy(class_logits, labels)


def jigsaw_loss(jigsaw_logits: Tensor, perm_labels) -> Tensor:
    """Mean cross-entropy of the permutation-index prediction over all items."""
    return softmax_cross_entropy(jigsaw_logits, perm_labels)


@dataclass
class Batch:
    """Images with per-item kind: ordered items carry a class label and perm label 0."""

    images: np.ndarray = field(repr=False)
    ordered: np.ndarray
    class_labels: np.ndarray
    perm_labels: np.ndarray

    def __post_init__(self):
        self.ordered = np.asarray(self.ordered, dtype=bool)
        self.class_labels = np.asarray(self.class_labels, dtype=np.intp)
        self.perm_labels = np.asarray(self.perm_labels, dtype=np.intp)
        n = len(self.images)
        if not (len(self.ordered) == len(self.class_labels) == len(self.perm_labels) == n):
            raise ValueError("batch columns have different lengths")
        if np.any(self.perm_labels[self.ordered] != 0):
            raise ValueError("ordered items must carry permutation label 0")
        if np.any(self.perm_labels[~self.ordered] == 0):
            raise ValueError("shuffled items must carry a non-identity permutation label")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_ordered(self) -> int:
        return int(self.ordered.sum())


@dataclass
class LossBreakdown:
    total: float
    class_loss: float
    jigsaw_loss: float
    class_correct: int = 0
    n_ordered: int = 0


def joint_loss(batch: Batch, params: ParamSet, alpha: float, spec: ModelSpec) -> tuple[Tensor, LossBreakdown]:
    """``class_loss(ordered) + alpha * jigsaw_loss(all items)``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ordered_idx = np.flatnonzero(batch.ordered)
    if ordered_idx.size == 0:
        raise ValueError("batch has no ordered items; the classification term is undefined")
    out = forward(params, batch.images, spec)
    cls_logits = take_rows(out.class_logits, ordered_idx)
    lc = class_loss(cls_logits, batch.class_labels[ordered_idx])
    lj = jigsaw_loss(out.jigsaw_logits, batch.perm_labels)
    total = lc + mul(lj, float(alpha))
    correct = int((cls_logits.data.argmax(axis=1) == batch.class_labels[ordered_idx]).sum())
    return total, LossBreakdown(total.item(), lc.item(), lj.item(), correct, len(ordered_idx))


def predict_logits(params: ParamSet, images, spec: ModelSpec, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Class and jigsaw logits without recording a tape, in fixed-size chunks."""
    images = check_images(images, spec)
    cls, jig = [], []
    for start in range(0, len(images), batch_size):
        out = forward(params, images[start : start + batch_size], spec)
        cls.append(out.class_logits.data)
        jig.append(out.jigsaw_logits.data)
    return np.concatenate(cls), np.concatenate(jig)


def gradcheck_model(spec: ModelSpec = ModelSpec(), seed: int = 0, n_images: int = 4, alpha: float = 0.7,
                    max_entries: int | None = 40, tolerance: float = 1e-4, h: float = 1e-5):
    """Finite-difference check of joint_loss gradients for every parameter tensor at 64-bit.

    Half the random batch is ordered; ``max_entries`` seeded positions are
    probed per tensor (all of them for small tensors, or when None).
    """
    from .autodiff import grad_check

    rng = np.random.default_rng(seed)
    params = init_params(spec, seed, np.float64)
    # nonzero biases keep pre-activations away from the relu kink at exactly zero
    for name, p in params.items():
        if name.endswith(".b"):
            p.data = rng.uniform(-0.1, 0.1, size=p.shape)
    images = rng.uniform(0.0, 1.0, size=(n_images, spec.in_channels, spec.image_size, spec.image_size))
    n_ord = max(1, n_images // 2)
    ordered = np.arange(n_images) < n_ord
    batch = Batch(images, ordered, np.where(ordered, rng.integers(0, spec.n_classes, n_images), -1),
                  np.where(ordered, 0, rng.integers(1, max(spec.n_perms, 2), n_images)))
    return grad_check(lambda: joint_loss(batch, params, alpha, spec)[0], params, tolerance=tolerance, h=h,
                      max_entries=max_entries, seed=seed)
