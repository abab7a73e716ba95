"""Optimizer, gradient plumbing, schedules, and checkpoint bit-exactness."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mantis_lab import autodiff as ad
from mantis_lab.autodiff import Tensor
from mantis_lab.errors import NumericError, ValidationError
from mantis_lab.train import (AdamW, OptimConfig, ParamStore,
                              compute_gradients, load_checkpoint,
                              save_checkpoint)


def simple_store(rng):
    store = ParamStore()
    store.add("w", rng.normal(size=(3, 2)), True)
    store.add("frozen", rng.normal(size=(4,)), False)
    return store


def test_compute_gradients_quadratic(rng):
    store = simple_store(rng)
    x = rng.normal(size=(2, 1))

    def loss_fn(p):
        out = ad.matmul(p["w"], Tensor(x))
        return 0.5 * (out * out).sum() + p["frozen"].sum() * 0.0

    val, grads = compute_gradients(loss_fn, store)
    w = store["w"].value
    assert_allclose(grads["w"], (w @ x) @ x.T, rtol=1e-12)
    assert "frozen" not in grads
    assert val == pytest.approx(0.5 * float(((w @ x) ** 2).sum()))


def test_untouched_trainable_gets_zero_gradient(rng):
    store = ParamStore()
    store.add("a", np.ones(2), True)
    store.add("b", np.ones(2), True)
    _, grads = compute_gradients(lambda p: (p["a"] * p["a"]).sum(), store)
    assert_allclose(grads["b"], 0.0)


def test_nonfinite_gradient_raises_with_name(rng):
    store = ParamStore()
    store.add("bad", np.zeros(1), True)
    with np.errstate(divide="ignore"):
        with pytest.raises(NumericError, match="bad"):
            compute_gradients(lambda p: ad.log(p["bad"]).sum(), store)


def test_adamw_single_scalar_hand_step():
    store = ParamStore()
    store.add("p", np.array([2.0]), True)
    cfg = OptimConfig(lr=0.1, weight_decay=0.01, epochs=10, warmup_epochs=1)
    opt = AdamW(store, cfg)
    g = np.array([0.5])
    opt.step({"p": g}, epoch=5)
    # hand arithmetic of one adaptive-moment update with bias correction
    lr_t = opt.learning_rate(5)
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = 2.0 * (1 - lr_t * 0.01)
    want -= lr_t * mhat / (np.sqrt(vhat) + 1e-8)
    assert_allclose(store["p"].value, [want], rtol=1e-12)


def test_adamw_zero_grad_zero_decay_is_identity(rng):
    store = simple_store(rng)
    before = store["w"].value.copy()
    opt = AdamW(store, OptimConfig(lr=0.1, weight_decay=0.0))
    opt.step({"w": np.zeros((3, 2))}, epoch=20)
    assert_allclose(store["w"].value, before, rtol=0, atol=0)


def test_adamw_rejects_frozen_updates(rng):
    store = simple_store(rng)
    opt = AdamW(store, OptimConfig())
    with pytest.raises(ValidationError):
        opt.step({"frozen": np.zeros(4)}, epoch=0)


def test_schedule_warmup_and_cosine():
    store = ParamStore()
    store.add("p", np.zeros(1), True)
    cfg = OptimConfig(lr=1.0, epochs=110, warmup_epochs=10)
    opt = AdamW(store, cfg)
    assert opt.learning_rate(0) == pytest.approx(0.1)  # base / warmup span
    assert opt.learning_rate(9) == pytest.approx(1.0)
    assert opt.learning_rate(10) == pytest.approx(1.0)
    mid = opt.learning_rate(10 + 50)
    assert mid == pytest.approx(0.5)
    assert opt.learning_rate(110) == pytest.approx(0.0, abs=1e-15)
    ramp = [opt.learning_rate(e) for e in range(10)]
    assert_allclose(ramp, np.arange(1, 11) / 10.0)


def test_frozen_tensors_bitwise_unchanged_by_training(rng):
    store = simple_store(rng)
    sig_frozen = store.signature(["frozen"])
    sig_w = store.signature(["w"])
    opt = AdamW(store, OptimConfig(lr=0.05, weight_decay=0.1))
    for epoch in range(5):
        _, grads = compute_gradients(
            lambda p: ((p["w"] - 1.0) * (p["w"] - 1.0)).sum()
            + (p["frozen"] * p["frozen"]).sum(), store)
        opt.step(grads, epoch)
    assert store.signature(["frozen"]) == sig_frozen
    assert store.signature(["w"]) != sig_w  # trainables actually moved


def test_training_is_bitwise_deterministic(rng):
    def run():
        r = np.random.default_rng(7)
        store = ParamStore()
        store.add("w", r.normal(size=(4, 4)), True)
        opt = AdamW(store, OptimConfig(lr=1e-2, weight_decay=1e-2))
        for epoch in range(10):
            _, grads = compute_gradients(
                lambda p: ((p["w"] @ p["w"]) * (p["w"] @ p["w"])).sum(), store)
            opt.step(grads, epoch)
        return store["w"].value.tobytes()

    assert run() == run()


def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    store = simple_store(rng)
    opt = AdamW(store, OptimConfig())
    _, grads = compute_gradients(lambda p: (p["w"] * p["w"]).sum(), store)
    opt.step(grads, epoch=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, opt, extra={"epoch": 1})

    store2 = simple_store(np.random.default_rng(99))
    opt2 = AdamW(store2, OptimConfig())
    extra = load_checkpoint(path, store2, opt2)
    assert extra == {"epoch": 1}
    for name in store.names():
        assert store2[name].value.tobytes() == store[name].value.tobytes()
        assert store2[name].trainable == store[name].trainable
    assert opt2.state.step_count == opt.state.step_count
    assert opt2.state.m["w"].tobytes() == opt.state.m["w"].tobytes()
    assert opt2.state.v["w"].tobytes() == opt.state.v["w"].tobytes()


def test_resume_matches_uninterrupted_run(rng, tmp_path):
    def fresh_store(seed):
        r = np.random.default_rng(seed)
        store = ParamStore()
        store.add("w", r.normal(size=(3, 3)), True)
        return store

    def loss(p):
        return ((p["w"] @ p["w"]) * p["w"]).sum()

    # uninterrupted: 8 epochs
    s_full = fresh_store(3)
    o_full = AdamW(s_full, OptimConfig(lr=1e-2))
    for epoch in range(8):
        _, g = compute_gradients(loss, s_full)
        o_full.step(g, epoch)

    # interrupted at epoch 4, checkpointed, resumed
    s_half = fresh_store(3)
    o_half = AdamW(s_half, OptimConfig(lr=1e-2))
    for epoch in range(4):
        _, g = compute_gradients(loss, s_half)
        o_half.step(g, epoch)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, s_half, o_half, extra={"epoch": 4})

    s_res = fresh_store(1234)
    o_res = AdamW(s_res, OptimConfig(lr=1e-2))
    start = load_checkpoint(path, s_res, o_res)["epoch"]
    for epoch in range(start, 8):
        _, g = compute_gradients(loss, s_res)
        o_res.step(g, epoch)

    assert s_res["w"].value.tobytes() == s_full["w"].value.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path, rng):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValidationError):
        load_checkpoint(path, simple_store(rng))


@pytest.mark.parametrize("controller", ["soft", "sigmoid", "tanh", "dense"])
def test_gradcheck_controller_variants(controller):
    # the smooth/thresholding controllers must all differentiate exactly;
    # hard-threshold is excluded by design (straight-through surrogate)
    from conftest import random_adapter, random_block
    from mantis_lab.ssm import block_forward

    rng = np.random.default_rng(42)
    block = random_block(rng, d=6, d_e=12, n_state=3)
    adapter = random_adapter(rng, d=6, n_state=3, d_phi=5, r=3,
                             controller=controller, drv_scale=2.0)
    z = rng.normal(size=(4, 6))
    e = rng.normal(size=(1, 6))
    target = rng.normal(size=(4, 6))

    store = ParamStore()
    for name, tensor in adapter.tensors.items():
        store.add(name, tensor.data, True)

    def loss_fn(bound):
        live = type(adapter)(adapter.config,
                             {k: bound[k] for k in adapter.tensors})
        out = block_forward(z, block, live, Tensor(e))
        diff = out - Tensor(target)
        return (diff * diff).sum()

    _, grads = compute_gradients(loss_fn, store)
    step = 1e-5
    for name in store.trainable_names():
        flat = store[name].value.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn(store.bind()).item()
            flat[i] = orig - step
            lo = loss_fn(store.bind()).item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            assert abs(gflat[i] - fd) <= 1e-4 * max(abs(fd), abs(gflat[i])) \
                + 1e-9, f"{controller} {name}[{i}]"
