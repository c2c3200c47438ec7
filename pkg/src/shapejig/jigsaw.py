"""Jigsaw combinatorics: permutation sets and tile decompose/shuffle/recompose."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence

import numpy as np

MAX_ENUMERABLE_GRID = 3


def hamming_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of positions at which two permutations differ."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"permutations have different lengths: {a.shape[0]} vs {b.shape[0]}")
    return int(np.count_nonzero(a != b))


def is_bijection(perm: Sequence[int], n: int | None = None) -> bool:
    arr = np.asarray(perm)
    n = arr.size if n is None else n
    return arr.ndim == 1 and arr.size == n and np.array_equal(np.sort(arr), np.arange(n))


def min_pairwise_hamming(perms: np.ndarray) -> int:
    """Smallest Hamming distance over all unordered pairs (exhaustive)."""
    perms = np.asarray(perms)
    if len(perms) < 2:
        raise ValueError("need at least two permutations")
    d = (perms[:, None, :] != perms[None, :, :]).sum(axis=-1)
    iu = np.triu_indices(len(perms), k=1)
    return int(d[iu].min())


@dataclass(frozen=True)
class PermutationSet:
    """Ordered permutations of the ``grid_n**2`` tile indices.

    Index 0 is always the identity, the label of unshuffled images.
    """

    grid_n: int
    perms: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        perms = np.asarray(self.perms, dtype=np.intp)
        k = self.grid_n * self.grid_n
        if perms.ndim != 2 or perms.shape[1] != k:
            raise ValueError(f"expected P x {k} permutations, got shape {perms.shape}")
        if not np.array_equal(perms[0], np.arange(k)):
            raise ValueError("perms[0] must be the identity")
        for p in perms:
            if not is_bijection(p, k):
                raise ValueError(f"not a bijection on [0, {k}): {p.tolist()}")
        if len({tuple(p) for p in perms.tolist()}) != len(perms):
            raise ValueError("permutations must be distinct")
        perms.setflags(write=False)
        object.__setattr__(self, "perms", perms)

    @property
    def P(self) -> int:
        return len(self.perms)

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.perms[i]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(format_permset(self))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PermutationSet":
        with open(path) as fh:
            return parse_permset(fh.read())


def format_permset(ps: PermutationSet) -> str:
    lines = [f"{ps.grid_n} {ps.P} {ps.seed}"]
    lines += [" ".join(str(int(v)) for v in p) for p in ps.perms]
    return "\n".join(lines) + "\n"


def parse_permset(text: str) -> PermutationSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty permutation file")
    try:
        grid_n, count, seed = (int(v) for v in lines[0].split())
        perms = np.array([[int(v) for v in ln.split()] for ln in lines[1:]], dtype=np.intp)
    except ValueError as exc:
        raise ValueError(f"malformed permutation file: {exc}") from None
    if len(perms) != count:
        raise ValueError(f"header declares {count} permutations, file has {len(perms)}")
    return PermutationSet(grid_n, perms, seed)


def generate_permutation_set(grid_n: int, P: int, seed: int = 0) -> PermutationSet:
    """Greedy max-min Hamming selection over all ``(grid_n**2)!`` permutations.

    Starts from the identity; each step adds the candidate whose minimum
    distance to the chosen set is largest, ties going to the lexicographically
    smallest candidate. The selection consumes no randomness, so ``seed`` is
    only carried along as run metadata.
    """
    if grid_n < 1:
        raise ValueError("grid_n must be positive")
    if grid_n > MAX_ENUMERABLE_GRID:
        raise ValueError(f"grid_n={grid_n} is too large to enumerate; at most {MAX_ENUMERABLE_GRID} is supported")
    k = grid_n * grid_n
    total = math.factorial(k)
    if P < 1 or P > total:
        raise ValueError(f"P must lie in [1, {total}] for a {grid_n}x{grid_n} grid, got {P}")

    # itertools.permutations(range(k)) yields lexicographic order
    cands = np.array(list(permutations(range(k))), dtype=np.int8)
    chosen = [0]
    min_dist = (cands != cands[0]).sum(axis=1).astype(np.int16)
    min_dist[0] = -1
    for _ in range(P - 1):
        j = int(np.argmax(min_dist))
        chosen.append(j)
        np.minimum(min_dist, (cands != cands[j]).sum(axis=1).astype(np.int16), out=min_dist)
        min_dist[chosen] = -1
    return PermutationSet(grid_n, cands[chosen].astype(np.intp), seed)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    if not is_bijection(perm):
        raise ValueError(f"not a permutation: {perm.tolist()}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


@dataclass(frozen=True)
class TileGrid:
    """``grid_n**2`` equally shaped C x h x w tiles in row-major order."""

    tiles: np.ndarray = field(repr=False)
    grid_n: int
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        t = np.asarray(self.tiles)
        if t.ndim != 4 or t.shape[0] != self.grid_n * self.grid_n:
            raise ValueError(f"expected {self.grid_n ** 2} C x h x w tiles, got array of shape {t.shape}")
        c, h, w = self.source_shape
        if t.shape[1:] != (c, h // self.grid_n, w // self.grid_n):
            raise ValueError(f"tile shape {t.shape[1:]} inconsistent with source {self.source_shape}")

    def __len__(self) -> int:
        return self.tiles.shape[0]

    def replace(self, tiles: np.ndarray) -> "TileGrid":
        return TileGrid(np.asarray(tiles), self.grid_n, self.source_shape)


def decompose(image: np.ndarray, grid_n: int) -> TileGrid:
    """Cut a C x H x W image into row-major tiles (a copy; input untouched)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a C x H x W image, got shape {image.shape}")
    c, h, w = image.shape
    if grid_n < 1 or h % grid_n or w % grid_n:
        raise ValueError(f"image {h}x{w} is not divisible into a {grid_n}x{grid_n} grid")
    th, tw = h // grid_n, w // grid_n
    tiles = image.reshape(c, grid_n, th, grid_n, tw).transpose(1, 3, 0, 2, 4).reshape(grid_n * grid_n, c, th, tw)
    return TileGrid(np.ascontiguousarray(tiles), grid_n, (c, h, w))


def shuffle_tiles(grid: TileGrid, perm: Sequence[int]) -> TileGrid:
    """Output tile ``i`` is input tile ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.intp)
    if not is_bijection(perm, len(grid)):
        raise ValueError(f"invalid permutation for {len(grid)} tiles: {perm.tolist()}")
    return grid.replace(grid.tiles[perm])


def recompose(grid: TileGrid) -> np.ndarray:
    """Row-major reassembly of a tile grid into a C x H x W image."""
    n = grid.grid_n
    k, c, th, tw = grid.tiles.shape
    return np.ascontiguousarray(grid.tiles.reshape(n, n, c, th, tw).transpose(2, 0, 3, 1, 4).reshape(c, n * th, n * tw))
