import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, random_bag
from frailmil.cohort import Modality
from frailmil.exceptions import NumericalError
from frailmil.mil import (
    ModelConfig,
    attention_pool,
    bag_loss,
    count_params_flops,
    encode_instances,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    optimizer_step,
    save_checkpoint,
    train,
)


def fd_max_rel_error(model, bag, label, weights=None, step=1e-5):
    _, grads = loss_and_grad(model, bag, label, weights)
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = bag_loss(model, bag, label, weights)
            p[idx] = orig - step
            down = bag_loss(model, bag, label, weights)
            p[idx] = orig
            num = (up - down) / (2 * step)
            rel = abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]), 1e-6)
            worst = max(worst, rel)
    return worst


def test_init_deterministic_and_seeded(dims):
    a, b = init_model(TINY, dims, seed=1), init_model(TINY, dims, seed=1)
    c = init_model(TINY, dims, seed=2)
    assert a.equals(b)
    assert not a.equals(c)


def test_default_width_modality_tags(dims):
    model = init_model(ModelConfig(), dims)
    for m in dims:
        assert model.params[f"mod.{m.value}"].shape == (128,)


def test_single_instance_embedding(tiny_model):
    x = np.array([[0.3, -1.0, 2.0]])
    emb, _, _ = encode_instances(tiny_model, {Modality.PHYS: x})
    p = tiny_model.params
    hidden = np.maximum(p["enc.phys.W1"] @ x[0] + p["enc.phys.b1"], 0)
    assert emb.shape == (1, TINY.embed_dim)
    assert np.allclose(emb[0], p["enc.phys.W2"] @ hidden + p["enc.phys.b2"] + p["mod.phys"], rtol=0, atol=1e-15)


def test_zero_encoder_returns_modality_tag(tiny_model):
    for k in ("W1", "b1", "W2", "b2"):
        tiny_model.params[f"enc.sleep.{k}"][...] = 0
    emb, _, _ = encode_instances(tiny_model, {Modality.SLEEP: np.zeros((2, 2))})
    assert np.array_equal(emb, np.tile(tiny_model.params["mod.sleep"], (2, 1)))
    assert np.array_equal(emb[0], emb[1])


def test_attention_pool_edge_cases(tiny_model):
    e = np.random.default_rng(0).standard_normal((1, TINY.embed_dim))
    z, alpha, cache = attention_pool(tiny_model, e)
    assert alpha.tolist() == [1.0]
    assert np.array_equal(z, cache["h"][0])
    _, alpha2, _ = attention_pool(tiny_model, np.vstack([e, e]))
    assert alpha2.tolist() == [0.5, 0.5]


def test_zero_classifier_is_uniform(tiny_model, dims):
    tiny_model.params["cls.W"][...] = 0
    tr = forward(tiny_model, random_bag(np.random.default_rng(0), dims))
    assert tr.logits.tolist() == [0.0, 0.0, 0.0]
    assert np.allclose(tr.probs, 1 / 3)
    loss, _ = loss_and_grad(tiny_model, random_bag(np.random.default_rng(1), dims), 2)
    assert loss == pytest.approx(math.log(3), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance_and_simplex(seed):
    rng = np.random.default_rng(seed)
    dims = {Modality.PHYS: 3, Modality.SLEEP: 2, Modality.HRV: 4}
    model = init_model(TINY, dims, seed=seed % 97)
    bag = random_bag(rng, dims)
    tr = forward(model, bag)
    assert np.max(np.abs(forward(model, bag.permuted(rng)).logits - tr.logits)) < 1e-6
    assert abs(tr.alpha.sum() - 1) < 1e-6 and tr.alpha.min() >= 0
    assert abs(tr.probs.sum() - 1) < 1e-12


def test_forward_bit_identical(tiny_model, dims):
    bag = random_bag(np.random.default_rng(5), dims)
    assert forward(tiny_model, bag).logits.tobytes() == forward(tiny_model.copy(), bag).logits.tobytes()


def test_forward_errors(tiny_model, dims):
    with pytest.raises(ValueError):
        forward(tiny_model, {Modality.PHYS: np.zeros((2, 7))})
    with pytest.raises(ValueError):
        forward(tiny_model, {Modality.PHYS: np.zeros((0, 3))})
    tiny_model.params["proj.W"][0, 0] = np.inf
    with pytest.raises(NumericalError, match="proj"):
        forward(tiny_model, random_bag(np.random.default_rng(0), dims))


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed, dims):
    rng = np.random.default_rng(seed)
    model = init_model(TINY, dims, seed=seed)
    for name in ("proj.b", "attn.b", "cls.b", "enc.phys.b1"):
        model.params[name] += 0.1 * rng.standard_normal(model.params[name].shape)
    bag = random_bag(rng, dims, counts={Modality.PHYS: 3, Modality.SLEEP: 2, Modality.HRV: 1})
    assert fd_max_rel_error(model, bag, seed % 3, np.array([1.2, 0.7, 2.0])) < 1e-4


def test_class_weight_scales_loss_and_gradient(tiny_model, dims):
    bag = random_bag(np.random.default_rng(2), dims)
    l1, g1 = loss_and_grad(tiny_model, bag, 1, np.ones(3))
    l2, g2 = loss_and_grad(tiny_model, bag, 1, np.array([1.0, 2.0, 1.0]))
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-13, atol=0)


def scalar_adamw(w, grad, steps, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd)
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(w)
    return out


def one_weight_model(w0, lr, wd=0.0):
    cfg = ModelConfig(embed_dim=1, encoder_hidden=1, attention_dim=1, learning_rate=lr, weight_decay=wd)
    model = init_model(cfg, {Modality.PHYS: 1})
    model.params = {"attn.w": np.array([w0])}
    model.adam_m = {"attn.w": np.zeros(1)}
    model.adam_v = {"attn.w": np.zeros(1)}
    return model


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_optimizer_matches_scalar_reference(wd):
    model = one_weight_model(1.0, 0.1, wd)
    ours = []
    for _ in range(50):
        optimizer_step(model, {"attn.w": 2 * model.params["attn.w"]})
        ours.append(float(model.params["attn.w"][0]))
    ref = scalar_adamw(1.0, lambda w: 2 * w, 50, 0.1, wd)
    assert ours == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_quadratic_converges():
    traj = [1.0] + scalar_adamw(1.0, lambda w: 2 * w, 50, 0.1)
    model = one_weight_model(1.0, 0.1)
    for _ in range(50):
        optimizer_step(model, {"attn.w": 2 * model.params["attn.w"]})
    w50 = abs(model.params["attn.w"][0])
    assert w50 < 1.0
    assert w50 == pytest.approx(abs(traj[-1]), rel=1e-12)
    # monotone during the approach, then a decaying oscillation
    assert all(abs(b) < abs(a) for a, b in zip(traj[:9], traj[1:10]))
    assert max(map(abs, traj[40:])) < max(map(abs, traj[10:20]))


def test_zero_gradient_no_decay_is_identity(tiny_model):
    cfg = ModelConfig(**{**TINY.to_dict(), "weight_decay": 0.0})
    before = tiny_model.copy()
    optimizer_step(tiny_model, {k: np.zeros_like(v) for k, v in tiny_model.params.items()}, cfg)
    for k, v in tiny_model.params.items():
        assert v.tobytes() == before.params[k].tobytes()


def test_weight_decay_skips_biases_and_tags(tiny_model):
    before = tiny_model.copy()
    optimizer_step(tiny_model, {k: np.zeros_like(v) for k, v in tiny_model.params.items()})
    for k, v in tiny_model.params.items():
        decayed = k.rsplit(".", 1)[-1] in {"W1", "W2", "W", "V", "w"}
        factor = 1 - TINY.learning_rate * TINY.weight_decay if decayed else 1.0
        assert np.array_equal(v, before.params[k] * factor)


def separable_bags(dims, n=24, seed=0):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        c = i % 3
        bag = random_bag(rng, dims, label=c, patient=f"P{i}")
        for x in bag.instances.values():
            x[:, 0] += 3.0 * (c - 1)
        bags.append(bag)
    return bags


def test_training_decreases_loss(dims):
    cfg = ModelConfig(embed_dim=8, encoder_hidden=8, attention_dim=4, learning_rate=1e-2, max_epochs=5, patience=5, accumulate=4)
    bags = separable_bags(dims)
    _, hist = train(init_model(cfg, dims), bags[:18], bags[18:], cfg)
    losses = [h.train_loss for h in hist]
    assert len(losses) == 5
    assert all(b <= a + 1e-3 for a, b in zip(losses, losses[1:]))


def test_early_stopping_contracts(dims):
    bags = separable_bags(dims, 12)
    cfg0 = ModelConfig(**{**TINY.to_dict(), "patience": 0, "max_epochs": 10})
    _, hist = train(init_model(cfg0, dims), bags[:9], bags[9:], cfg0)
    assert len(hist) == 1
    cfg = ModelConfig(**{**TINY.to_dict(), "patience": 3, "max_epochs": 12})
    best, hist = train(init_model(cfg, dims), bags[:9], bags[9:], cfg)
    best_val = np.mean([bag_loss(best, b, int(b.label)) for b in bags[9:]])
    assert all(best_val <= h.val_loss + 1e-12 for h in hist)


def test_training_reproducible(dims):
    bags = separable_bags(dims, 12)
    a, ha = train(init_model(TINY, dims), bags[:9], bags[9:], TINY)
    b, hb = train(init_model(TINY, dims), bags[:9], bags[9:], TINY)
    assert a.equals(b) and ha == hb


def test_count_params_flops(dims):
    model = init_model(ModelConfig(), dims)
    D, L = 128, 64
    expected = sum(128 * f + 128 + D * 128 + D + D for f in dims.values()) + D * D + D + L * D + 2 * L + 3 * D + 3
    acc = count_params_flops(model, {m: 10 for m in dims})
    assert acc["params"] == expected == model.n_params()
    # a 2 -> 3 linear layer holds 6 weights + 3 biases
    small = init_model(ModelConfig(embed_dim=1, encoder_hidden=3, attention_dim=1), {Modality.PHYS: 2})
    assert small.params["enc.phys.W1"].size + small.params["enc.phys.b1"].size == 9
    double = count_params_flops(model, {m: 20 for m in dims})
    assert double["flops_pooled_path"] == 2 * acc["flops_pooled_path"]
    assert double["flops_classifier"] == acc["flops_classifier"]


def test_checkpoint_roundtrip(tmp_path, tiny_model, dims):
    optimizer_step(tiny_model, {k: np.ones_like(v) for k, v in tiny_model.params.items()})
    save_checkpoint(tiny_model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    assert back.equals(tiny_model)
    assert back.config == tiny_model.config
    bag = random_bag(np.random.default_rng(0), dims)
    assert forward(back, bag).logits.tobytes() == forward(tiny_model, bag).logits.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(learning_rate=0)
    assert ModelConfig(encoder_hidden={"phys": 16}).hidden_for("phys") == 16
