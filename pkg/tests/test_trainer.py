import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapejig.diversifier import DiversifierConfig
from shapejig.jigsaw import decompose, generate_permutation_set, inverse_permutation, recompose, shuffle_tiles
from shapejig.synthdata import build_splits, make_domain_pool
from shapejig.trainer import (
    METRIC_COLUMNS,
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    compose_batch,
    format_metrics_csv,
    load_checkpoint,
    load_inputs,
    make_rngs,
    n_ordered_for,
    parse_key_values,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    data = build_splits(n_per_class=4, seed=0, size=24, n_cue_conflict=12)
    return data, generate_permutation_set(3, 6, seed=0), make_domain_pool(n_per_kind=3, seed=0, size=8)


def tiny_cfg(**kw):
    base = dict(batch_size=8, epochs=2, conv_channels=(4, 8), grid_n=3, n_perms=6, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def run(tiny, out=None, **kw):
    data, ps, pool = tiny
    return train(tiny_cfg(**kw), out, data=data, permset=ps, pool=pool)


# ---------------------------------------------------------------- config


def test_config_text_roundtrip(tmp_path):
    cfg = TrainConfig(alpha=0.3, conv_channels=(8, 16), explore_decay=True, dataset="d")
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    cfg.save(tmp_path / "c.txt")
    assert TrainConfig.load(tmp_path / "c.txt", seed=9).seed == 9


def test_config_parsing_errors():
    assert parse_key_values("a = 1  # note\n\n# only comment\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_key_values("alpha 0.7")
    with pytest.raises(ConfigError, match="unknown config key"):
        TrainConfig.from_text("alhpa=0.7")
    with pytest.raises(ConfigError, match="cannot parse"):
        TrainConfig.from_text("epochs=many")
    with pytest.raises(ConfigError, match="beta"):
        TrainConfig(beta=1.5)
    with pytest.raises(ConfigError, match="gamma"):
        TrainConfig(gamma_min=0.9, gamma_max=0.8)


def test_missing_dataset_key_is_reported():
    with pytest.raises(ConfigError, match="missing required config key 'dataset'"):
        load_inputs(TrainConfig())
    with pytest.raises(ConfigError, match="does not exist"):
        load_inputs(TrainConfig(dataset="/nonexistent/dir"))


def test_schedules():
    cfg = TrainConfig(lr=0.1, lr_decay_every=10, epochs=30)
    assert [cfg.lr_at(e) for e in (0, 9, 10, 25)] == pytest.approx([0.1, 0.1, 0.01, 0.001])
    cfg = TrainConfig(rho=0.8, epochs=5, explore_decay=True, explore_final=0.0)
    assert cfg.diversifier(0).rho == pytest.approx(0.8)
    assert cfg.diversifier(4).rho == pytest.approx(0.0)
    assert TrainConfig(rho=0.8).diversifier(4).rho == 0.8


# ---------------------------------------------------------------- batches


@pytest.mark.parametrize("beta,b,expected", [(0.6, 64, 38), (0.6, 10, 6), (0.5, 3, 2), (1.0, 7, 7), (0.05, 8, 1)])
def test_ordered_count_rounding(beta, b, expected):
    assert n_ordered_for(beta, b) == expected


def test_beta_rounding_to_zero_is_an_error(tiny):
    data, ps, _ = tiny
    with pytest.raises(ValueError, match="no ordered item"):
        compose_batch(data.train[:4], ps, tiny_cfg(beta=0.1), np.random.default_rng(0))


def test_beta_one_has_no_shuffled_items(tiny):
    data, ps, pool = tiny
    cfg = tiny_cfg(beta=1.0, rho=1.0)
    batch, decisions = compose_batch(data.train[:8], ps, cfg, np.random.default_rng(0), cfg.diversifier(0, pool))
    assert batch.ordered.all() and not np.any(batch.perm_labels)
    assert decisions == []
    np.testing.assert_array_equal(batch.images, data.train.images[:8])


def test_shuffled_items_invert_to_source(tiny):
    data, ps, _ = tiny
    records = data.train[:10]
    batch, _ = compose_batch(records, ps, tiny_cfg(rho=0.0), np.random.default_rng(1))
    assert batch.n_ordered == 6
    assert np.all(batch.perm_labels[6:] >= 1) and np.all(batch.class_labels[6:] == -1)
    for i in range(6, 10):
        g = shuffle_tiles(decompose(batch.images[i], 3), inverse_permutation(ps[batch.perm_labels[i]]))
        np.testing.assert_array_equal(recompose(g), records.images[i])


def test_rho_zero_matches_undiversified_pipeline(tiny):
    data, ps, pool = tiny
    cfg = tiny_cfg(rho=0.0)
    plain, _ = compose_batch(data.train[:8], ps, cfg, np.random.default_rng(5))
    div, dec = compose_batch(data.train[:8], ps, cfg, np.random.default_rng(5), cfg.diversifier(0, pool),
                             np.random.default_rng(6))
    assert dec == []
    assert plain.images.tobytes() == div.images.tobytes()
    np.testing.assert_array_equal(plain.perm_labels, div.perm_labels)


def test_ordered_items_never_diversified(tiny):
    data, ps, pool = tiny
    cfg = tiny_cfg(rho=1.0)
    batch, dec = compose_batch(data.train[:8], ps, cfg, np.random.default_rng(2), cfg.diversifier(0, pool),
                               np.random.default_rng(3))
    np.testing.assert_array_equal(batch.images[: batch.n_ordered], data.train.images[: batch.n_ordered])
    assert len(dec) == 8 - batch.n_ordered and all(d.hit for d in dec)


def test_diversified_fraction_is_binomial(tiny):
    data, ps, pool = tiny
    cfg = tiny_cfg(beta=0.5, rho=0.3)
    div = DiversifierConfig(rho=0.3, pool=pool)
    rng, drng = np.random.default_rng(0), np.random.default_rng(1)
    hits = n = 0
    for k in range(40):
        _, dec = compose_batch(data.train[:20], ps, cfg, rng, div, drng, start_index=k * 20)
        hits += sum(d.hit for d in dec)
        n += len(dec)
    sd = np.sqrt(0.3 * 0.7 / n)
    assert abs(hits / n - 0.3) < 4 * sd


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 1.0), st.integers(2, 12), st.integers(0, 1000))
def test_batch_invariants(beta, b, seed):
    data = build_splits(n_per_class=2, seed=1, size=12, n_cue_conflict=6)
    ps = generate_permutation_set(3, 5, seed=0)
    cfg = TrainConfig(beta=beta, rho=0.0, grid_n=3, n_perms=5)
    records = data.train[np.arange(b) % len(data.train)]
    if np.floor(beta * b + 0.5) == 0:
        return
    batch, _ = compose_batch(records, ps, cfg, np.random.default_rng(seed))
    assert batch.n_ordered == n_ordered_for(beta, b)
    assert np.all((batch.perm_labels == 0) == batch.ordered)
    for i in range(b):
        assert np.array_equal(np.sort(batch.images[i].ravel()), np.sort(records.images[i].ravel()))


# ---------------------------------------------------------------- training


def test_alpha_zero_gives_zero_jigsaw_gradients(tiny):
    seen = []

    def hook(epoch, bi, params, batch):
        seen.append(float(np.abs(params["j.w"].grad).max() + np.abs(params["j.b"].grad).max()))

    data, ps, pool = tiny
    train(tiny_cfg(alpha=0.0), data=data, permset=ps, pool=pool, on_step=hook)
    assert len(seen) == 2 * int(np.ceil(len(data.train) / 8))
    assert max(seen) == 0.0


def test_metrics_rows_and_columns(tiny, tmp_path):
    res = run(tiny, tmp_path)
    assert [r["epoch"] for r in res.metrics] == [1, 2]
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert len(text.splitlines()) == 3
    assert (tmp_path / "timing.csv").read_text().startswith("epoch,seconds\n")
    assert (tmp_path / "config.txt").is_file() and (tmp_path / "last.ckpt").is_file()
    for r in res.metrics:
        assert 0.0 <= r["val_accuracy"] <= 1.0 and 0.0 <= r["target_accuracy"] <= 1.0
        assert r["n_shuffled"] > 0


def test_training_is_deterministic(tiny, tmp_path):
    run(tiny, tmp_path / "a", dtype="float64")
    run(tiny, tmp_path / "b", dtype="float64")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    c = run(tiny, tmp_path / "c", seed=4)
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != (tmp_path / "a" / "metrics.csv").read_bytes()
    assert c.metrics


def test_resume_is_bit_exact(tiny, tmp_path):
    data, ps, pool = tiny
    full = train(tiny_cfg(epochs=3), tmp_path / "full", data=data, permset=ps, pool=pool, keep_checkpoints=True)
    resumed = train(tiny_cfg(epochs=3), tmp_path / "res", data=data, permset=ps, pool=pool,
                    resume=tmp_path / "full" / "epoch_001.ckpt")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "res" / "metrics.csv").read_bytes()
    for name in full.params:
        assert full.params[name].data.tobytes() == resumed.params[name].data.tobytes()


def test_checkpoint_roundtrip_and_corruption(tiny, tmp_path):
    res = run(tiny, epochs=1)
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, res.state)
    back = load_checkpoint(path)
    assert back.epoch == 1 and back.spec == res.spec and back.config == res.state.config
    for name in res.params:
        np.testing.assert_array_equal(back.params[name].data, res.params[name].data)
    for k in res.state.opt.buffers:
        np.testing.assert_array_equal(back.opt.buffers[k], res.state.opt.buffers[k])
    for k, g in res.state.rngs.items():
        assert back.rngs[k].bit_generator.state == g.bit_generator.state

    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not json\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_resume_rejects_mismatched_spec(tiny, tmp_path):
    res = run(tiny, tmp_path, epochs=1)
    data, _, pool = tiny
    other = generate_permutation_set(3, 7, seed=0)
    with pytest.raises(CheckpointError, match="spec"):
        train(tiny_cfg(n_perms=7), data=data, permset=other, pool=pool, resume=tmp_path / "last.ckpt")
    assert res.metrics


def test_divergence_is_reported(tiny):
    with pytest.raises(TrainingDiverged, match="epoch"):
        with np.errstate(all="ignore"):
            run(tiny, lr=1e150, momentum=0.0)


def test_rng_streams_are_independent():
    a, b = make_rngs(0), make_rngs(0)
    assert a["order"].integers(1 << 30) == b["order"].integers(1 << 30)
    assert make_rngs(0)["order"].integers(1 << 30) != make_rngs(0)["perm"].integers(1 << 30)


def test_metrics_csv_formatting():
    row = {c: 0.5 for c in METRIC_COLUMNS}
    row.update(epoch=1, n_shuffled=3, n_diversified=0, shape_bias=float("nan"))
    lines = format_metrics_csv([row]).splitlines()
    assert lines[1].split(",")[0] == "1" and "nan" in lines[1].split(",")
