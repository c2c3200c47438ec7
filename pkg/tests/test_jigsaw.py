import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapejig.jigsaw import (
    PermutationSet,
    TileGrid,
    decompose,
    format_permset,
    generate_permutation_set,
    hamming_distance,
    inverse_permutation,
    is_bijection,
    min_pairwise_hamming,
    parse_permset,
    recompose,
    shuffle_tiles,
)

from oracles import exhaustive_min_hamming, hamming, naive_tiles


def greedy_reference(k, P):
    """Pure-python greedy max-min selection with lexicographic tie-break."""
    cands = list(itertools.permutations(range(k)))
    chosen = [cands[0]]
    while len(chosen) < P:
        best, best_d = None, -1
        for c in cands:
            if c in chosen:
                continue
            d = min(hamming(c, s) for s in chosen)
            if d > best_d:
                best, best_d = c, d
        chosen.append(best)
    return np.array(chosen)


def test_hamming_examples():
    assert hamming_distance([0, 1, 2], [0, 1, 2]) == 0
    assert hamming_distance([0, 1, 2], [1, 2, 0]) == 3
    assert hamming_distance([0, 1, 2], [0, 2, 1]) == 2
    with pytest.raises(ValueError, match="lengths"):
        hamming_distance([0, 1], [0, 1, 2])


def test_trivial_sets():
    assert generate_permutation_set(1, 1).perms.tolist() == [[0]]
    ps = generate_permutation_set(2, 24)
    assert sorted(map(tuple, ps.perms.tolist())) == sorted(itertools.permutations(range(4)))


@pytest.mark.parametrize("P", [2, 5, 9, 13, 24])
def test_grid2_matches_pure_python_greedy(P):
    np.testing.assert_array_equal(generate_permutation_set(2, P).perms, greedy_reference(4, P))


def test_grid3_set_properties():
    a = generate_permutation_set(3, 30, seed=4)
    b = generate_permutation_set(3, 30, seed=4)
    np.testing.assert_array_equal(a.perms, b.perms)
    assert a.P == 30
    assert np.array_equal(a[0], np.arange(9))
    assert all(is_bijection(p, 9) for p in a.perms)
    assert len({tuple(p) for p in a.perms.tolist()}) == 30
    assert min_pairwise_hamming(a.perms) == exhaustive_min_hamming(a.perms)


def test_generation_errors():
    with pytest.raises(ValueError, match="too large"):
        generate_permutation_set(4, 10)
    with pytest.raises(ValueError, match="P must lie"):
        generate_permutation_set(2, 25)
    with pytest.raises(ValueError):
        generate_permutation_set(2, 0)


def test_permset_validation():
    with pytest.raises(ValueError, match="identity"):
        PermutationSet(2, [[1, 0, 2, 3]])
    with pytest.raises(ValueError, match="bijection"):
        PermutationSet(2, [[0, 1, 2, 3], [0, 0, 1, 2]])
    with pytest.raises(ValueError, match="distinct"):
        PermutationSet(2, [[0, 1, 2, 3], [1, 0, 2, 3], [1, 0, 2, 3]])


def test_text_format_roundtrip(tmp_path):
    ps = generate_permutation_set(2, 6, seed=11)
    text = format_permset(ps)
    assert text.splitlines()[0] == "2 6 11"
    assert text.splitlines()[1] == "0 1 2 3"
    ps.save(tmp_path / "p.txt")
    back = PermutationSet.load(tmp_path / "p.txt")
    np.testing.assert_array_equal(back.perms, ps.perms)
    assert back.seed == 11
    with pytest.raises(ValueError, match="declares"):
        parse_permset("2 3 0\n0 1 2 3\n")


def test_decompose_examples():
    img = np.arange(36.0).reshape(1, 6, 6)
    g = decompose(img, 3)
    assert len(g) == 9 and g.tiles.shape[1:] == (1, 2, 2)
    for got, ref in zip(g.tiles, naive_tiles(img, 3)):
        np.testing.assert_array_equal(got, ref)
    single = decompose(img, 1)
    np.testing.assert_array_equal(single.tiles[0], img)
    np.testing.assert_array_equal(recompose(single), img)
    with pytest.raises(ValueError, match="divisible"):
        decompose(np.zeros((1, 5, 6)), 3)


def test_decompose_is_a_copy():
    img = np.zeros((1, 4, 4))
    g = decompose(img, 2)
    g.tiles[0, 0, 0, 0] = 7.0
    assert img[0, 0, 0] == 0.0


def test_shuffle_examples():
    img = np.arange(16.0).reshape(1, 4, 4)
    g = decompose(img, 2)
    np.testing.assert_array_equal(shuffle_tiles(g, [0, 1, 2, 3]).tiles, g.tiles)
    rev = shuffle_tiles(g, [3, 2, 1, 0])
    np.testing.assert_array_equal(rev.tiles, g.tiles[::-1])
    with pytest.raises(ValueError, match="invalid permutation"):
        shuffle_tiles(g, [0, 0, 1, 2])


def test_tilegrid_rejects_inconsistent_tiles():
    with pytest.raises(ValueError):
        TileGrid(np.zeros((3, 1, 2, 2)), 2, (1, 4, 4))
    with pytest.raises(ValueError):
        TileGrid(np.zeros((4, 1, 3, 2)), 2, (1, 4, 4))


def test_inverse_permutation():
    p = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(p[inverse_permutation(p)], np.arange(4))
    with pytest.raises(ValueError):
        inverse_permutation([0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_roundtrips_and_multiset(grid_n, tile, channels, seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(channels, grid_n * tile, grid_n * tile))
    perm = rng.permutation(grid_n * grid_n)
    g = decompose(img, grid_n)
    assert np.array_equal(recompose(g), img)
    shuffled = shuffle_tiles(g, perm)
    back = shuffle_tiles(shuffled, inverse_permutation(perm))
    assert np.array_equal(recompose(back), img)
    assert np.array_equal(np.sort(recompose(shuffled).ravel()), np.sort(img.ravel()))
    # output tile i is input tile perm[i]
    for i, p in enumerate(perm):
        assert np.array_equal(shuffled.tiles[i], g.tiles[p])


def test_greedy_beats_random_sets():
    ps = generate_permutation_set(3, 30)
    rng = np.random.default_rng(0)
    all_perms = np.array(list(itertools.permutations(range(9))), dtype=np.int8)
    best = 0
    for _ in range(200):
        idx = rng.choice(math.factorial(9), size=30, replace=False)
        best = max(best, min_pairwise_hamming(all_perms[idx]))
    assert min_pairwise_hamming(ps.perms) >= best
