import math

import numpy as np
import pytest

from dpgrad import tensor as T
from dpgrad.accountant import RdpAccountant, rdp_curve
from dpgrad.data import Dataset
from dpgrad.errors import LifecycleError, NumericError, ParameterError
from dpgrad.grad_sample import GradSampleModule
from dpgrad.layers import LayerDescriptor as D
from dpgrad.layers import ModelGraph, loss_forward_backward
from dpgrad.optimizer import (DpOptimizerConfig, DPOptimizer, LoaderConfig, NoiseSchedule, add_noise,
                              clip_and_sum, make_private, per_sample_norms, schedule_noise)
from dpgrad.validator import ValidationError

from helpers import rel_err


def _cfg(**kw):
    base = dict(noise_multiplier=0.0, max_grad_norm=1.0, learning_rate=0.1, expected_batch_size=4)
    base.update(kw)
    return DpOptimizerConfig(**base)


def _setup(seed=0, dtype=np.float32, **cfg):
    model = ModelGraph.build([D("linear", {"in_features": 3, "out_features": 4}), D("relu"),
                              D("linear", {"in_features": 4, "out_features": 2})], (3,), seed=seed, dtype=dtype)
    gsm = GradSampleModule(model)
    opt = DPOptimizer(model.parameters(), _cfg(**cfg), T.RngStream("standard", seed))
    return model, gsm, opt


def _backward(gsm, n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3)).astype(gsm.model.dtype)
    y = rng.integers(0, 2, size=n)
    gsm.backward(loss_forward_backward("softmax_cross_entropy", gsm(x), y)[1])


# -- clipping ------------------------------------------------------------------


def test_clip_worked_example():
    gs = {"w": np.array([[3.0, 4.0], [0.3, 0.4]])}
    summed, s = clip_and_sum(gs, 1.0)
    assert s.per_sample_norms.tolist() == [5.0, 0.5]
    assert s.scale_factors.tolist() == [0.2, 1.0]
    assert np.allclose(summed["w"], [0.9, 1.2], rtol=0, atol=1e-15)
    assert s.num_clipped == 1


def test_clip_norm_is_global_across_parameters():
    gs = {"a": np.array([[3.0]]), "b": np.array([[[4.0]]])}
    summed, s = clip_and_sum(gs, 2.5)
    assert s.per_sample_norms.tolist() == [5.0]
    assert summed["a"].tolist() == [1.5] and summed["b"].tolist() == [[2.0]]


def test_clip_sum_matches_loop():
    rng = np.random.default_rng(1)
    gs = {"a": rng.normal(size=(9, 3, 2)), "b": rng.normal(size=(9, 4))}
    summed, _ = clip_and_sum(gs, 1.3)
    expected = {k: np.zeros(v.shape[1:]) for k, v in gs.items()}
    for i in range(9):
        n = math.sqrt(sum(float(np.sum(v[i] ** 2)) for v in gs.values()))
        for k, v in gs.items():
            expected[k] += v[i] * min(1.0, 1.3 / n)
    for k in gs:
        assert rel_err(summed[k], expected[k]) <= 1e-6


def test_clip_errors():
    with pytest.raises(NumericError, match="bad"):
        per_sample_norms({"bad": np.array([[np.nan, 1.0]])})
    with pytest.raises(ParameterError):
        clip_and_sum({"a": np.ones((2, 2))}, 0.0)
    with pytest.raises(ParameterError):
        clip_and_sum({"a": np.ones((0, 2))}, 1.0)


# -- noise ---------------------------------------------------------------------


def test_noise_zero_sigma_identity_and_reproducible():
    summed = {"w": np.arange(6.0).reshape(2, 3)}
    assert np.array_equal(add_noise(summed, 0.0, 1.0, T.RngStream("standard", 0))["w"], summed["w"])
    a = add_noise(summed, 1.0, 1.0, T.RngStream("standard", 9))["w"]
    b = add_noise(summed, 1.0, 1.0, T.RngStream("standard", 9))["w"]
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["standard", "secure"])
def test_noise_std_is_sigma_c(kind):
    sigma, C = 1.7, 0.6
    rng = T.RngStream(kind, 4 if kind == "standard" else None)
    summed = {"w": np.full(100_000, 3.0)}
    diff = add_noise(summed, sigma, C, rng)["w"] - 3.0
    assert abs(diff.std() - sigma * C) <= 0.02 * sigma * C


# -- lifecycle -------------------------------------------------------------------


def _state(model):
    p = model.parameters()[0]
    return (p.grad_sample is not None, p.summed_grad is not None, p.grad is not None)


def test_gradient_lifecycle_transitions():
    model, gsm, opt = _setup()
    assert _state(model) == (False, False, False)
    _backward(gsm)
    assert _state(model) == (True, False, False)
    opt.virtual_step()
    assert _state(model) == (False, True, False)
    _backward(gsm, seed=1)
    opt.step()
    assert _state(model) == (True, True, True)
    opt.zero_grad()
    assert _state(model) == (False, False, False)


def test_lifecycle_violations():
    model, gsm, opt = _setup()
    with pytest.raises(LifecycleError):
        opt.step()  # nothing accumulated
    with pytest.raises(LifecycleError):
        opt.virtual_step()
    _backward(gsm)
    opt.step()
    with pytest.raises(LifecycleError):
        opt.step()  # double step
    with pytest.raises(LifecycleError):
        _backward(gsm)  # backward before zero_grad
    with pytest.raises(LifecycleError):
        opt.virtual_step()
    opt.zero_grad()
    _backward(gsm)
    with pytest.raises(LifecycleError):
        _backward(gsm)  # unconsumed grad_sample


def test_step_without_fresh_batch_after_virtual_step():
    model, gsm, opt = _setup()
    _backward(gsm)
    opt.virtual_step()
    opt.step()  # the accumulated batch is enough
    assert model.parameters()[0].grad is not None


def test_zero_gradients_and_zero_sigma_leave_parameters():
    model, gsm, opt = _setup()
    before = [p.data.copy() for p in model.parameters()]
    for p in model.parameters():
        p.grad_sample = np.zeros((4,) + p.shape, dtype=p.data.dtype)
    opt.step()
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_expected_batch_size_averaging():
    model, gsm, opt = _setup(expected_batch_size=10.0, max_grad_norm=1e9)
    p = model.parameters()[0]
    p_before = p.data.copy()
    _backward(gsm)
    summed = p.grad_sample.sum(axis=0)
    opt.step()
    assert np.allclose(p.grad, summed / 10.0, rtol=1e-6, atol=0)
    assert np.allclose(p.data, p_before - 0.1 * p.grad, rtol=1e-6, atol=1e-7)


def test_empty_batch_policies():
    model, gsm, opt = _setup(noise_multiplier=1.0)
    out = gsm(np.zeros((0, 3), dtype=np.float32))
    gsm.backward(out)
    opt.step()
    assert all(np.any(p.grad != 0) for p in model.parameters())  # noise only
    model, gsm, opt = _setup(empty_batch_policy="error")
    gsm.backward(gsm(np.zeros((0, 3), dtype=np.float32)))
    with pytest.raises(LifecycleError):
        opt.step()
    model, gsm, opt = _setup(averaging="realized")
    gsm.backward(gsm(np.zeros((0, 3), dtype=np.float32)))
    with pytest.raises(LifecycleError):
        opt.step()


def test_single_physical_batch_equals_plain_step():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(6, 3)).astype(np.float32), rng.integers(0, 2, size=6)
    updates = []
    for use_virtual in (False, True):
        model, gsm, opt = _setup(seed=3, noise_multiplier=0.8)
        gsm.backward(loss_forward_backward("softmax_cross_entropy", gsm(x), y)[1])
        if use_virtual:
            opt.virtual_step()
        opt.step()
        updates.append(np.concatenate([p.data.ravel() for p in model.parameters()]))
    assert np.array_equal(updates[0], updates[1])


def _box_muller(seed, n):
    gen = np.random.Generator(np.random.PCG64(seed))
    pairs = (n + 1) // 2
    u1, u2 = 1.0 - gen.random(pairs), gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2], out[1::2] = r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)
    return out[:n]


def test_full_step_vs_hand_pipeline():
    # linear 2 -> 1 with bias: three parameters, mse loss
    model = ModelGraph.build([D("linear", {"in_features": 2, "out_features": 1})], (2,), dtype=np.float64)
    w, b = model.layers[0].params["weight"], model.layers[0].params["bias"]
    w.data[...] = [[0.5, -1.0]]
    b.data[...] = [0.25]
    x = np.array([[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]])
    t = np.array([[1.0], [0.0], [2.0]])
    sigma, C, lr, seed = 0.7, 1.5, 0.3, 21
    gsm = GradSampleModule(model)
    opt = DPOptimizer(model.parameters(), DpOptimizerConfig(sigma, C, lr, expected_batch_size=2.5),
                      T.RngStream("standard", seed))
    gsm.backward(loss_forward_backward("mse", gsm(x), t)[1])
    opt.step()

    total = np.zeros(3)
    for xi, ti in zip(x, t):
        r = 2 * (0.5 * xi[0] - 1.0 * xi[1] + 0.25 - ti[0])
        g = np.array([r * xi[0], r * xi[1], r])
        total += g * min(1.0, C / np.linalg.norm(g))
    noise_w = sigma * C * _box_muller(seed, 2)
    noise_b = sigma * C * _box_muller_continue(seed, 2, 1)
    grad = (total + np.concatenate([noise_w, noise_b])) / 2.5
    expected = np.array([0.5, -1.0, 0.25]) - lr * grad
    assert np.allclose(np.concatenate([w.data.ravel(), b.data]), expected, rtol=1e-12, atol=1e-12)


def _box_muller_continue(seed, skip, n):
    # noise for the second parameter continues the same stream after the first draw
    gen = np.random.Generator(np.random.PCG64(seed))
    sp = (skip + 1) // 2
    gen.random(sp), gen.random(sp)
    pairs = (n + 1) // 2
    u1, u2 = 1.0 - gen.random(pairs), gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2], out[1::2] = r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)
    return out[:n]


# -- schedules ---------------------------------------------------------------------


def test_schedules():
    assert [NoiseSchedule("constant", 1.3).sigma(e) for e in range(4)] == [1.3] * 4
    assert NoiseSchedule("exponential", 2.0, gamma=0.5).sigma(1) == 1.0
    step = NoiseSchedule.parse("step:0.5:2", 4.0)
    assert [step.sigma(e) for e in range(5)] == [4.0, 4.0, 2.0, 2.0, 1.0]
    custom = NoiseSchedule.parse("custom:1,0.8,0.6", 9.0)
    assert [custom.sigma(e) for e in range(5)] == [1.0, 0.8, 0.6, 0.6, 0.6]
    assert schedule_noise(NoiseSchedule("custom", fn=lambda e: 1.0 / (e + 1)), 3) == 0.25
    for bad in ("linear", "step:0.5", "exponential:x"):
        with pytest.raises(ParameterError):
            NoiseSchedule.parse(bad, 1.0)
    with pytest.raises(ParameterError):
        NoiseSchedule("custom", fn=lambda e: -1.0).sigma(0)


def test_accountant_consumes_per_epoch_sigmas():
    sched = NoiseSchedule("exponential", 1.5, gamma=0.8)
    acc = RdpAccountant()
    model, gsm, opt = _setup(noise_multiplier=1.5)
    opt.accountant, opt.sample_rate = acc, 0.02
    for epoch in range(3):
        opt.noise_multiplier = sched.sigma(epoch)
        for k in range(5):
            _backward(gsm, seed=epoch * 10 + k)
            opt.step()
            opt.zero_grad()
    assert acc.steps == 15
    brute = sum(5 * rdp_curve(0.02, sched.sigma(e), acc.orders) for e in range(3))
    assert np.allclose(acc.rdp(), brute, rtol=1e-12, atol=0)


# -- orchestration -----------------------------------------------------------------


def _dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3)).astype(np.float32)
    return Dataset(x, (x[:, 0] > 0).astype(np.int64))


def test_make_private_trains_ten_steps_and_accounts():
    model = ModelGraph.build([D("linear", {"in_features": 3, "out_features": 2})], (3,))
    acc = RdpAccountant()
    gsm, opt, loader = make_private(model, _cfg(noise_multiplier=1.0, expected_batch_size=20),
                                    LoaderConfig(_dataset(), 0.1, seed=3, steps_per_epoch=10), accountant=acc)
    for x, y in loader:
        gsm.backward(loss_forward_backward("softmax_cross_entropy", gsm(x), y)[1])
        opt.step()
        opt.zero_grad()
    assert acc.steps == 10 and acc.get_epsilon(1e-5) > 0


def test_make_private_rejects_invalid_model():
    model = ModelGraph.build([D("batch_norm", {"num_features": 3})], (3, 2, 2))
    with pytest.raises(ValidationError) as info:
        make_private(model, _cfg(), LoaderConfig(_dataset(), 0.1))
    assert info.value.violations[0].kind == "batch_norm"


def test_secure_mode_uses_os_entropy():
    model = ModelGraph.build([D("linear", {"in_features": 3, "out_features": 2})], (3,))
    _, opt, loader = make_private(model, _cfg(secure_mode=True), LoaderConfig(_dataset(), 0.1))
    assert opt.rng.kind == "secure" and loader.sampler.rng.kind == "secure"
    with pytest.raises(ParameterError):
        DPOptimizer(model.parameters(), _cfg(secure_mode=True), T.RngStream("standard", 0))


@pytest.mark.parametrize("field,value", [("noise_multiplier", -1.0), ("max_grad_norm", 0.0),
                                         ("learning_rate", 0.0), ("expected_batch_size", 0.0),
                                         ("averaging", "median"), ("empty_batch_policy", "skip")])
def test_config_validation(field, value):
    with pytest.raises(ParameterError):
        _cfg(**{field: value})
