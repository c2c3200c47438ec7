"""Domain diversification of jigsaw tiles.

AdaIN statistics transfer, the gamma-interpolated translation operator, the
style / content / adjacent-tile losses, an optional learned encoder-decoder,
and the controller that stochastically pushes shuffled tiles toward
arbitrary texture domains.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    OptState,
    ParamSet,
    Tape,
    Tensor,
    backward,
    channel_stats,
    conv2d,
    norm,
    relu,
    reshape,
    sgd_step,
    sub,
    take_rows,
    uniform_fan_in,
)
from .autodiff import ndt
from .autodiff.tensor import NonFiniteError, as_tensor
from .jigsaw import TileGrid, decompose

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
MODES = ("pixel", "learned")


# ---------------------------------------------------------------------------
# statistics and AdaIN on plain arrays


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def array_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel mean and population std over spatial axes of an NCHW array."""
    mu = x.mean(axis=(-2, -1))
    centered = x - mu[..., None, None]
    return mu, np.sqrt((centered * centered).mean(axis=(-2, -1)))


def adain_to_stats(source: np.ndarray, mu_t: np.ndarray, sd_t: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Renormalise ``source`` channels to the given mean/std.

    ``epsilon`` floors the source std, so channels flatter than that collapse
    to the target mean while every other channel is matched exactly.
    """
    mu_s, sd_s = array_stats(source)
    scale = sd_t / np.maximum(sd_s, epsilon)
    return (source - mu_s[..., None, None]) * scale[..., None, None] + mu_t[..., None, None]


def adain(source: np.ndarray, target: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Adaptive instance normalisation of ``source`` toward ``target``'s channel stats.

    The shift uses the *target* mean. A constant source channel maps to the
    constant target mean since its centred values are all zero.
    """
    s, squeeze = _as_batch(source)
    t, _ = _as_batch(target)
    if s.shape[1] != t.shape[1]:
        raise ValueError(f"channel mismatch: source has {s.shape[1]}, target has {t.shape[1]}")
    if t.shape[0] not in (1, s.shape[0]):
        raise ValueError("target batch must be 1 or match the source batch")
    mu_t, sd_t = array_stats(t)
    out = adain_to_stats(s, mu_t, sd_t, epsilon)
    return out[0] if squeeze else out


def interpolate(source: np.ndarray, stylized: np.ndarray, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=source.dtype)
    if gamma.ndim:
        gamma = gamma.reshape(gamma.shape + (1,) * (source.ndim - gamma.ndim))
    return (1.0 - gamma) * source + gamma * stylized


# ---------------------------------------------------------------------------
# learned encoder / decoder


class UntrainedCoderError(RuntimeError):
    pass


class CoderPair:
    """Small convolutional encoder ``f`` and decoder ``g`` operating at full resolution.

    The encoder is frozen after construction; only the decoder is trained.
    """

    def __init__(self, channels: int = 3, features: int = 8, hidden: int = 8, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.channels, self.features = channels, features
        self.encoder = {
            "w": Tensor(uniform_fan_in(rng, (features, channels, 3, 3), channels * 9, dtype)),
            "b": Tensor(np.zeros(features, dtype=dtype)),
        }
        self.decoder = ParamSet(
            {
                "g.w1": Tensor(uniform_fan_in(rng, (hidden, features, 3, 3), features * 9, dtype)),
                "g.b1": Tensor(np.zeros(hidden, dtype=dtype)),
                "g.w2": Tensor(uniform_fan_in(rng, (channels, hidden, 3, 3), hidden * 9, dtype)),
                "g.b2": Tensor(np.zeros(channels, dtype=dtype)),
            }
        )
        self.trained = False

    def encode(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        return relu(conv2d(x, self.encoder["w"], self.encoder["b"], padding=1))

    def decode(self, t) -> Tensor:
        d = self.decoder
        h = relu(conv2d(as_tensor(t), d["g.w1"], d["g.b1"], padding=1))
        return conv2d(h, d["g.w2"], d["g.b2"], padding=1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"f.{k}": v.data for k, v in self.encoder.items()}
        out.update(self.decoder.state_arrays())
        return out


def stylize(source: np.ndarray, target: np.ndarray, gamma: float, coder: CoderPair | None = None,
            epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Translate ``source`` toward ``target``'s style by magnitude ``gamma``.

    Computes ``g((1 - gamma) f(source) + gamma AdaIN(f(source), f(target)))``;
    with ``coder=None`` both ``f`` and ``g`` are the identity (pixel mode).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    source = np.asarray(source)
    if coder is None:
        if gamma == 0.0:
            return source.copy()
        return interpolate(source, adain(source, target, epsilon), gamma)
    if not coder.trained:
        raise UntrainedCoderError("learned mode needs a trained decoder; run train_decoder first")
    squeeze = source.ndim == 3
    fs = coder.encode(source).data
    ft = coder.encode(np.asarray(target)).data
    mixed = interpolate(fs, adain(fs, ft, epsilon), gamma)
    out = coder.decode(Tensor(mixed)).data
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# losses (differentiable)

Layer = Callable[[Tensor], Tensor]


def identity_layer(x: Tensor) -> Tensor:
    return x


def _nchw(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def _stat_gap(a: Tensor, b: Tensor) -> Tensor:
    """Sum over samples of the L2 norm of the per-sample difference."""
    return norm(sub(a, b), axis=-1).sum()


@dataclass
class StyleStats:
    """Channel means and stds of an image under each feature layer."""

    means: list[np.ndarray]
    stds: list[np.ndarray]


def style_stats(x, phi: Sequence[Layer] = (identity_layer,)) -> StyleStats:
    x = _nchw(x)
    means, stds = [], []
    for layer in phi:
        mu, sd = channel_stats(layer(x))
        means.append(mu.data)
        stds.append(sd.data)
    return StyleStats(means, stds)


def style_loss(t, s, phi: Sequence[Layer] = (identity_layer,), coder: CoderPair | None = None) -> Tensor:
    """Sum over layers of ||mu(phi(g(t))) - mu(phi(s))|| + ||sigma(phi(g(t))) - sigma(phi(s))||.

    ``t`` and ``s`` may be single images or equally sized batches; batch terms
    are summed. ``coder=None`` means ``g`` is the identity.
    """
    t, s = _nchw(t), _nchw(s)
    gt = coder.decode(t) if coder is not None else t
    total = None
    for layer in phi:
        mu_t, sd_t = channel_stats(layer(gt))
        mu_s, sd_s = channel_stats(layer(s))
        term = _stat_gap(mu_t, mu_s) + _stat_gap(sd_t, sd_s)
        total = term if total is None else total + term
    return total


def content_loss(t, coder: CoderPair | None = None) -> Tensor:
    """Euclidean norm of ``f(g(t)) - t``; zero when ``f`` and ``g`` are identities."""
    t = as_tensor(t)
    if coder is None:
        return norm(sub(t, t))
    return norm(sub(coder.encode(coder.decode(t)), t))


def adjacent_diversity(tiles, phi: Sequence[Layer] = (identity_layer,)) -> Tensor:
    """Style distance of each interior tile to its row-major neighbours.

    Sums ``style_loss(z_k, z_{k-1}) + style_loss(z_k, z_{k+1})`` for
    ``k = 2 .. K-1`` (1-based), with the decoder taken as the identity.
    """
    z = tiles.tiles if isinstance(tiles, TileGrid) else tiles
    z = as_tensor(z)
    k = z.shape[0]
    if k < 3:
        raise ValueError(f"adjacent_diversity needs at least 3 tiles, got {k}")
    mid = np.arange(1, k - 1)
    total = None
    for layer in phi:
        mu, sd = channel_stats(layer(z))
        for stat in (mu, sd):
            centre = take_rows(stat, mid)
            term = norm(sub(centre, take_rows(stat, mid - 1)), axis=-1).sum()
            term = term + norm(sub(centre, take_rows(stat, mid + 1)), axis=-1).sum()
            total = term if total is None else total + term
    return total


def coder_phi(coder: CoderPair) -> tuple[Layer, Layer]:
    """Pixel layer plus the encoder's feature layer."""
    return (identity_layer, coder.encode)


@dataclass
class DecoderHistory:
    epoch: int
    loss: float
    content: float
    style: float
    adjacent: float


def train_decoder(
    coder: CoderPair,
    corpus: np.ndarray,
    pool: "DomainPool",
    lam: float = 0.1,
    tau: float = 0.01,
    epochs: int = 10,
    seed: int = 0,
    lr: float = 1e-3,
    momentum: float = 0.9,
    grid_n: int = 3,
    batch_size: int = 10,
    epsilon: float = DEFAULT_EPS,
) -> tuple[CoderPair, list[DecoderHistory]]:
    """Fit the decoder to ``L_content + lam * L_style - tau * L_adjacent``.

    Every tile of every corpus image gets a fixed pool exemplar, so the
    objective is stationary and ``history`` (whole-corpus loss after each
    epoch, index 0 before training) is comparable across epochs.
    """
    corpus = np.asarray(corpus)
    if corpus.ndim != 4:
        raise ValueError("corpus must be N x C x H x W")
    rng = np.random.default_rng(seed)
    n = corpus.shape[0]
    k = grid_n * grid_n
    tiles = np.stack([decompose(img, grid_n).tiles for img in corpus])  # N, K, C, h, w
    picks = rng.integers(0, len(pool), size=(n, k))
    phi = coder_phi(coder)

    feats = coder.encode(tiles.reshape((n * k,) + tiles.shape[2:])).data
    style_targets = []
    ex_feats = {}
    for i in np.unique(picks):
        ex_feats[i] = coder.encode(pool.exemplars[i]).data
    ex_idx = picks.reshape(-1)
    ex_batch_feats = np.concatenate([ex_feats[i] for i in ex_idx])
    mu_t, sd_t = array_stats(ex_batch_feats)
    targets = adain_to_stats(feats, mu_t, sd_t, epsilon).reshape((n, k) + feats.shape[1:])
    for layer_idx in range(len(phi)):
        per = {i: style_stats(pool.exemplars[i], (phi[layer_idx],)) for i in np.unique(picks)}
        style_targets.append(
            (
                np.concatenate([per[i].means[0] for i in ex_idx]).reshape(n, k, -1),
                np.concatenate([per[i].stds[0] for i in ex_idx]).reshape(n, k, -1),
            )
        )

    def objective(idx: np.ndarray):
        b = len(idx)
        t = Tensor(targets[idx].reshape((b * k,) + targets.shape[2:]))
        decoded = coder.decode(t)
        lc = norm(sub(coder.encode(decoded), t))
        ls = None
        for layer, (m, s) in zip(phi, style_targets):
            mu, sd = channel_stats(layer(decoded))
            m_t = Tensor(m[idx].reshape(b * k, -1))
            s_t = Tensor(s[idx].reshape(b * k, -1))
            term = norm(sub(mu, m_t), axis=-1).sum() + norm(sub(sd, s_t), axis=-1).sum()
            ls = term if ls is None else ls + term
        total = lc + ls * lam
        la = None
        if tau:
            for j in range(b):
                part = adjacent_diversity(take_rows(decoded, np.arange(j * k, (j + 1) * k)), phi)
                la = part if la is None else la + part
            total = total - la * tau
        scale = 1.0 / b
        return total * scale, (lc.item() * scale, ls.item() * scale, (la.item() * scale if la is not None else 0.0))

    def evaluate(epoch: int) -> DecoderHistory:
        sums = np.zeros(4)
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            loss, parts = objective(idx)
            w = len(idx)
            sums += w * np.array([loss.item(), *parts])
        sums /= n
        return DecoderHistory(epoch, *map(float, sums))

    history = [evaluate(0)]
    state = OptState(lr=lr, momentum=momentum, weight_decay=0.0)
    params = coder.decoder
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        try:
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                with Tape() as tape:
                    loss, _ = objective(idx)
                backward(loss, tape)
                sgd_step(params, state)
                if not all(np.all(np.isfinite(p.data)) for _, p in params.items()):
                    raise NonFiniteError("decoder parameters became non-finite")
            row = evaluate(epoch)
        except NonFiniteError as exc:
            raise NonFiniteError(f"decoder training diverged at epoch {epoch}: {exc}") from None
        history.append(row)
        logger.debug("decoder epoch %d loss %.6f", epoch, row.loss)
    coder.trained = True
    return coder, history


# ---------------------------------------------------------------------------
# pool, config and the exploration controller


@dataclass
class DomainPool:
    """Texture exemplars grouped by domain id; the source of target styles."""

    exemplars: np.ndarray = field(repr=False)
    domain_ids: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.exemplars = np.asarray(self.exemplars)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.intp)
        if self.exemplars.ndim != 4 or len(self.exemplars) == 0:
            raise ValueError("domain pool must hold at least one C x H x W exemplar")
        if len(self.domain_ids) != len(self.exemplars):
            raise ValueError("one domain id per exemplar is required")
        self.means, self.stds = array_stats(self.exemplars)

    def __len__(self) -> int:
        return len(self.exemplars)

    @property
    def channels(self) -> int:
        return self.exemplars.shape[1]

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (ex, dom) in enumerate(zip(self.exemplars, self.domain_ids)):
            name = f"exemplar_{i:05d}.ndt"
            ndt.save(d / name, ex)
            lines.append(f"{name} {int(dom)}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "DomainPool":
        d = Path(directory)
        manifest = d / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.txt in {d}")
        exemplars, ids = [], []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            name, dom = line.split()
            exemplars.append(ndt.load(d / name))
            ids.append(int(dom))
        if not exemplars:
            raise ValueError(f"domain pool at {d} is empty")
        return cls(np.stack(exemplars), np.array(ids))


@dataclass
class DiversifierConfig:
    rho: float = 0.5
    gamma_min: float = 0.75
    gamma_max: float = 1.0
    mode: str = "pixel"
    pool: DomainPool | None = None
    epsilon: float = DEFAULT_EPS
    coder: CoderPair | None = None

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.gamma_min <= self.gamma_max <= 1.0:
            raise ValueError(f"need 0 <= gamma_min <= gamma_max <= 1, got [{self.gamma_min}, {self.gamma_max}]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class Decision:
    """One image's draws: Bernoulli outcome plus per-tile exemplar, domain and gamma."""

    index: int
    hit: bool
    exemplars: list[int] = field(default_factory=list)
    domains: list[int] = field(default_factory=list)
    gammas: list[float] = field(default_factory=list)

    def to_line(self) -> str:
        tiles = " ".join(f"{d}:{g!r}" for d, g in zip(self.domains, self.gammas))
        return f"{self.index} {int(self.hit)} {tiles}".rstrip()


def image_stream(key: int, index: int) -> np.random.Generator:
    """Per-image generator so results do not depend on worker scheduling."""
    return np.random.default_rng([int(key), int(index)])


def diversify_grid(grid: TileGrid, cfg: DiversifierConfig, rng: np.random.Generator, index: int = 0) -> tuple[TileGrid, Decision]:
    pool = cfg.pool
    hit = bool(rng.random() < cfg.rho)
    if not hit:
        return grid, Decision(index, False)
    k = len(grid)
    picks = rng.integers(0, len(pool), size=k)
    gammas = rng.uniform(cfg.gamma_min, cfg.gamma_max, size=k)
    tiles = grid.tiles
    if cfg.mode == "pixel":
        stylized = adain_to_stats(tiles, pool.means[picks], pool.stds[picks], cfg.epsilon)
        out = interpolate(tiles, stylized, gammas)
    else:
        out = np.stack([stylize(tiles[i], pool.exemplars[picks[i]], float(gammas[i]), cfg.coder, cfg.epsilon)
                        for i in range(k)])
    decision = Decision(index, True, picks.tolist(), pool.domain_ids[picks].tolist(), gammas.tolist())
    return grid.replace(out.astype(tiles.dtype, copy=False)), decision


def diversify_batch(grids: Sequence[TileGrid], cfg: DiversifierConfig, rng, start_index: int = 0) -> tuple[list[TileGrid], list[Decision]]:
    """Stochastically shift shuffled tile grids toward pool domains.

    Each image is hit with probability ``rho``; on a hit every tile gets its
    own uniformly drawn exemplar and ``gamma ~ U[gamma_min, gamma_max]``.
    ``rng`` is an int key or a Generator (one key is drawn from it); image
    ``i`` then uses the stream ``(key, start_index + i)``.
    """
    if cfg.pool is None or len(cfg.pool) == 0:
        raise ValueError("diversify_batch needs a non-empty domain pool")
    if cfg.mode == "learned" and (cfg.coder is None or not cfg.coder.trained):
        raise UntrainedCoderError("learned mode needs a trained CoderPair in the config")
    key = int(rng.integers(0, 2**63 - 1)) if isinstance(rng, np.random.Generator) else int(rng)
    out, log = [], []
    for i, grid in enumerate(grids):
        if cfg.pool.channels != grid.tiles.shape[1]:
            raise ValueError("pool exemplars and tiles have different channel counts")
        g, d = diversify_grid(grid, cfg, image_stream(key, start_index + i), start_index + i)
        out.append(g)
        log.append(d)
    return out, log


def write_decision_log(path: str | os.PathLike, decisions: Sequence[Decision]) -> None:
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(d.to_line() + "\n")
