import math

import numpy as np
import pytest

from shapejig.autodiff import OptState, Tape, backward, sgd_step
from shapejig.model import (
    Batch,
    ModelSpec,
    forward,
    gradcheck_model,
    init_params,
    joint_loss,
    predict_logits,
)

SMALL = ModelSpec(n_classes=4, n_perms=5, image_size=12, conv_channels=(4, 6))


def make_batch(spec, n=6, n_ordered=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, spec.in_channels, spec.image_size, spec.image_size))
    ordered = np.arange(n) < n_ordered
    cls = np.where(ordered, rng.integers(0, spec.n_classes, n), -1)
    perms = np.where(ordered, 0, rng.integers(1, spec.n_perms, n))
    return Batch(images, ordered, cls, perms)


def grads_for(batch, params, alpha, spec):
    params.zero_grad()
    with Tape() as tape:
        loss, parts = joint_loss(batch, params, alpha, spec)
    backward(loss, tape)
    return params.grads(), parts


def test_spec_dimensions():
    spec = ModelSpec()
    assert spec.final_size == 6 and spec.feature_dim == 64 * 36
    with pytest.raises(ValueError, match="too small"):
        ModelSpec(image_size=4)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown"):
        ModelSpec.from_dict({**spec.to_dict(), "bogus": 1})


def test_forward_shapes():
    params = init_params(ModelSpec(), seed=0)
    out = forward(params, np.zeros((2, 3, 48, 48)), ModelSpec())
    assert out.class_logits.shape == (2, 6)
    assert out.jigsaw_logits.shape == (2, 30)
    assert out.final_activation.shape == (2, 64, 6, 6)
    with pytest.raises(ValueError, match="expected images"):
        forward(params, np.zeros((2, 3, 32, 32)), ModelSpec())


def test_logits_follow_input_permutation():
    params = init_params(SMALL, seed=1)
    x = np.random.default_rng(2).uniform(size=(5, 3, 12, 12))
    order = np.array([3, 0, 4, 1, 2])
    a_cls, a_jig = predict_logits(params, x, SMALL)
    b_cls, b_jig = predict_logits(params, x[order], SMALL)
    np.testing.assert_allclose(b_cls, a_cls[order], atol=1e-12)
    np.testing.assert_allclose(b_jig, a_jig[order], atol=1e-12)


def test_zero_heads_give_uniform_losses():
    spec = ModelSpec()
    params = init_params(spec, seed=0)
    for name in ("c.w", "j.w"):
        params[name].data[...] = 0.0
    _, parts = joint_loss(make_batch(spec, n=4, n_ordered=2), params, 0.7, spec)
    assert parts.class_loss == pytest.approx(math.log(6), abs=1e-12)
    assert parts.jigsaw_loss == pytest.approx(math.log(30), abs=1e-12)
    assert parts.total == pytest.approx(math.log(6) + 0.7 * math.log(30), abs=1e-12)


def test_alpha_zero_is_class_loss_only():
    params = init_params(SMALL, seed=3)
    batch = make_batch(SMALL, seed=4)
    g, parts = grads_for(batch, params, 0.0, SMALL)
    assert parts.total == parts.class_loss
    assert not np.any(g["j.w"]) and not np.any(g["j.b"])


def test_class_head_gradient_independent_of_alpha():
    params = init_params(SMALL, seed=5)
    batch = make_batch(SMALL, seed=6)
    g0, _ = grads_for(batch, params, 0.0, SMALL)
    g1, _ = grads_for(batch, params, 0.7, SMALL)
    for name in ("c.w", "c.b"):
        np.testing.assert_array_equal(g0[name], g1[name])
    # the shared trunk does feel alpha
    assert not np.allclose(g0["f.conv0.w"], g1["f.conv0.w"])


def test_jigsaw_gradient_scales_with_alpha():
    params = init_params(SMALL, seed=7)
    batch = make_batch(SMALL, seed=8)
    ga, _ = grads_for(batch, params, 0.5, SMALL)
    gb, _ = grads_for(batch, params, 1.0, SMALL)
    np.testing.assert_allclose(gb["j.w"], 2 * ga["j.w"], rtol=1e-12, atol=1e-15)


def test_joint_loss_rejects_bad_batches():
    params = init_params(SMALL, seed=0)
    batch = make_batch(SMALL)
    with pytest.raises(ValueError, match="non-negative"):
        joint_loss(batch, params, -0.1, SMALL)
    with pytest.raises(ValueError, match="no ordered"):
        joint_loss(make_batch(SMALL, n_ordered=0), params, 0.7, SMALL)
    with pytest.raises(ValueError, match="label 0"):
        Batch(batch.images, np.ones(6, bool), np.zeros(6), np.ones(6))
    with pytest.raises(ValueError, match="non-identity"):
        Batch(batch.images, np.zeros(6, bool), np.zeros(6), np.zeros(6))


def test_sgd_descends_on_fixed_batch():
    params = init_params(SMALL, seed=9)
    batch = make_batch(SMALL, n=8, n_ordered=5, seed=10)
    opt = OptState(0.01, 0.9, 5e-5)
    first = None
    for _ in range(30):
        params.zero_grad()
        with Tape() as tape:
            loss, parts = joint_loss(batch, params, 0.7, SMALL)
        backward(loss, tape)
        sgd_step(params, opt)
        first = parts.total if first is None else first
    assert parts.total < 0.5 * first


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["f.conv0.w"].data, c["f.conv0.w"].data)
    assert init_params(SMALL, 1, np.float32)["c.w"].dtype == np.float32


def test_gradcheck_small_model_passes():
    rows = gradcheck_model(SMALL, seed=1, max_entries=None)
    assert len(rows) == 8
    assert all(r.passed for r in rows), [(r.name, r.max_rel_error) for r in rows if not r.passed]
