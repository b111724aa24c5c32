import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simdiff.diffusion import (
    AdamState,
    Architecture,
    Denoiser,
    TrainConfig,
    TrainingArrays,
    adam_update,
    forward_diffuse,
    load_checkpoint,
    make_linear_schedule,
    save_checkpoint,
    time_embedding,
    train,
    tweedie_x0hat,
)
from simdiff.diffusion.schedule import NoiseSchedule
from simdiff.errors import NumericalGuardError, RejectedInputError

SMALL = Architecture(1, 1, 2, widths=(4, 5, 6, 3), time_dim=8, time_hidden=7)


def test_two_step_schedule():
    s = make_linear_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar[1:], [0.5, 0.25], atol=1e-15)


def test_degenerate_schedule_rejected():
    with pytest.raises(RejectedInputError):
        make_linear_schedule(200, 0.0, 0.0)
    with pytest.raises(RejectedInputError):
        make_linear_schedule(1, 0.1, 0.2)


def test_terminal_alpha_bar_against_product():
    for beta_end in (0.05, 0.07):
        s = make_linear_schedule(200, 1e-4, beta_end)
        expected = math.prod(1 - (1e-4 + (beta_end - 1e-4) * i / 199) for i in range(200))
        assert s.alpha_bar[-1] == pytest.approx(expected, rel=1e-12)
    # the desk default keeps x_T within 1e-3 of pure noise in signal variance
    assert make_linear_schedule().alpha_bar[-1] < 1e-3
    assert make_linear_schedule(200, 1e-4, 0.05).alpha_bar[-1] > 1e-3


def test_schedule_recurrences():
    s = make_linear_schedule()
    np.testing.assert_allclose(s.alpha, 1 - s.beta, atol=1e-12)
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], atol=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)


def quarter_schedule():
    # alpha_bar[1] = 0.25 exactly
    return NoiseSchedule.from_betas([0.75, 0.5])


def test_forward_diffuse_values():
    s = quarter_schedule()
    assert forward_diffuse(2.0, 1, 1.0, s) == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-12)
    assert forward_diffuse(2.0, 1, 1.0, s) == pytest.approx(1.8660, abs=1e-4)
    assert forward_diffuse(3.5, 0, 9.0, s) == 3.5
    eps = np.array([0.3, -1.2])
    np.testing.assert_allclose(forward_diffuse(np.zeros(2), 1, eps, s), math.sqrt(0.75) * eps)
    with pytest.raises(RejectedInputError):
        forward_diffuse(1.0, 3, 0.0, s)


def test_tweedie_values():
    s = quarter_schedule()
    assert tweedie_x0hat(1.0, 0.5, 1, s) == pytest.approx((1 - math.sqrt(0.75) * 0.5) / 0.5, abs=1e-12)
    assert tweedie_x0hat(1.0, 0.5, 1, s) == pytest.approx(1.1340, abs=1e-4)
    assert tweedie_x0hat(0.7, 0.0, 0, s) == 0.7
    long = NoiseSchedule.from_betas(np.full(100, 0.5))
    with pytest.raises(NumericalGuardError):
        tweedie_x0hat(1.0, 0.0, 100, long)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_tweedie_inverts_forward(t, seed):
    s = make_linear_schedule()
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    np.testing.assert_allclose(tweedie_x0hat(forward_diffuse(x0, t, eps, s), eps, t, s), x0, atol=1e-10)


def test_per_sample_steps_broadcast():
    s = make_linear_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 1, 2, 2))
    eps = rng.standard_normal((3, 1, 2, 2))
    t = np.array([1, 50, 200])
    batched = forward_diffuse(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_allclose(batched[i], forward_diffuse(x0[i], t[i], eps[i], s))


def random_inputs(rng, b=2, h=5, w=6):
    return (rng.standard_normal((b, 1, h, w)), rng.integers(1, 200, b),
            rng.standard_normal((b, 1, h, w)), rng.standard_normal((b, 2, h, w)))


def test_zero_parameters_give_zero_output():
    rng = np.random.default_rng(0)
    x, t, c, k = random_inputs(rng)
    np.testing.assert_array_equal(Denoiser.zeros(SMALL).predict_noise(x, t, c, k), np.zeros_like(x))


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(1)
    d = Denoiser(SMALL, rng.normal(0, 0.3, SMALL.n_params()))
    x, t, c, k = random_inputs(rng, b=3)
    perm = [2, 0, 1]
    out = d.predict_noise(x, t, c, k)
    np.testing.assert_allclose(d.predict_noise(x[perm], t[perm], c[perm], k[perm]), out[perm], atol=1e-12)


def test_rejects_misaligned_inputs():
    rng = np.random.default_rng(2)
    x, t, c, k = random_inputs(rng)
    with pytest.raises(RejectedInputError):
        Denoiser.zeros(SMALL).predict_noise(x, t, c[:, :, :4], k)


def _silu(a):
    return a / (1 + np.exp(-a))


def _conv_loop(x, w, b):
    """Direct zero-padded 3x3 convolution on (C, H, W)."""
    cin, h, wd = x.shape
    xp = np.zeros((cin, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3]) + (0.0 if b is None else b[o])
    return out


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(3)
    d = Denoiser(SMALL, rng.normal(0, 0.3, SMALL.n_params()))
    x, t, c, k = random_inputs(rng, b=1)
    half = SMALL.time_dim // 2
    freqs = [10000.0 ** (-i / half) for i in range(half)]
    emb = np.array([math.sin(t[0] * f) for f in freqs] + [math.cos(t[0] * f) for f in freqs])
    e = _silu(d["time_w"] @ emb + d["time_b"])
    f1 = d["film1_w"] @ e + d["film1_b"]
    f3 = d["film3_w"] @ e + d["film3_b"]
    w1, w3 = SMALL.widths[0], SMALL.widths[2]
    h0 = np.concatenate([x[0], c[0], k[0]])
    h1 = _silu(_conv_loop(h0, d["conv1_w"], d["conv1_b"]) * (1 + f1[:w1, None, None]) + f1[w1:, None, None])
    h2 = _silu(_conv_loop(h1, d["conv2_w"], d["conv2_b"]))
    h3 = _silu(_conv_loop(h2, d["conv3_w"], d["conv3_b"]) * (1 + f3[:w3, None, None]) + f3[w3:, None, None])
    h4 = _silu(_conv_loop(h3, d["conv4_w"], d["conv4_b"]))
    expected = _conv_loop(h4, d["out_w"], d["out_b"]) + _conv_loop(x[0], d["skip_w"], None)
    np.testing.assert_allclose(d.predict_noise(x, t, c, k)[0], expected, atol=1e-11)


def test_time_embedding_layout():
    emb = time_embedding([0.0], 8)
    np.testing.assert_array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])


def finite_difference_errors(d, args, coords, h=1e-5):
    _, grad = d.loss_and_grad(*args)
    errs = []
    for i in coords:
        orig = d.params[i]
        d.params[i] = orig + h
        lp, _ = d.loss_and_grad(*args)
        d.params[i] = orig - h
        lm, _ = d.loss_and_grad(*args)
        d.params[i] = orig
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-7))
    return np.array(errs)


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(4)
    d = Denoiser(SMALL, rng.normal(0, 0.3, SMALL.n_params()))
    x, t, c, k = random_inputs(rng)
    eps = rng.standard_normal(x.shape)
    coords = rng.choice(SMALL.n_params(), 200, replace=False)
    assert finite_difference_errors(d, (x, t, c, k, eps), coords).max() <= 1e-4


def test_output_bias_gradient_closed_form():
    rng = np.random.default_rng(5)
    d = Denoiser(SMALL, rng.normal(0, 0.3, SMALL.n_params()))
    x, t, c, k = random_inputs(rng)
    eps = rng.standard_normal(x.shape)
    _, grad = d.loss_and_grad(x, t, c, k, eps)
    resid = d.predict_noise(x, t, c, k) - eps
    expected = 2 * resid.sum() / (resid.size // resid.shape[0])
    assert grad[d.segment_slices()["out_b"]][0] == pytest.approx(expected, rel=1e-12)


def test_gradient_zero_at_exact_fit_and_doubles_on_duplication():
    rng = np.random.default_rng(6)
    d = Denoiser(SMALL, rng.normal(0, 0.3, SMALL.n_params()))
    x, t, c, k = random_inputs(rng, b=1)
    eps = d.predict_noise(x, t, c, k)
    loss, grad = d.loss_and_grad(x, t, c, k, eps)
    assert loss == 0.0 and not np.any(grad)
    eps = rng.standard_normal(x.shape)
    _, g1 = d.loss_and_grad(x, t, c, k, eps)
    dup = [np.concatenate([a, a]) for a in (x, t, c, k, eps)]
    _, g2 = d.loss_and_grad(*dup)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-10, atol=1e-14)


def test_adam_zero_gradient_and_single_step():
    p = np.array([1.0, -2.0])
    st_ = AdamState.zeros_like(p, lr=0.1)
    adam_update(st_, p, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, -2.0])
    p = np.array([1.0, -2.0])
    st_ = AdamState.zeros_like(p, lr=0.1)
    g = np.array([3.0, -0.5])
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    adam_update(st_, p, g)
    np.testing.assert_allclose(p, [1.0 - 0.1 * 3 / (3 + 1e-8), -2.0 + 0.1 * 0.5 / (0.5 + 1e-8)], atol=1e-15)


def test_adam_is_deterministic():
    runs = []
    for _ in range(2):
        p = np.ones(3)
        s = AdamState.zeros_like(p, lr=0.01)
        for g in ([1.0, 2.0, 3.0], [0.5, -1.0, 0.0]):
            adam_update(s, p, np.array(g))
        runs.append(p.copy())
    assert np.array_equal(*runs)


def toy_arrays(n=6, seed=0):
    rng = np.random.default_rng(seed)
    target = rng.uniform(-1, 1, (n, 1, 8, 8))
    return TrainingArrays(target, np.roll(target, 1, axis=-1), np.concatenate([target, -target], 1))


def test_training_deterministic_and_resumable(tmp_path):
    arch_kw = dict(widths=SMALL.widths, time_dim=8, time_hidden=7)
    data = toy_arrays()
    sched = make_linear_schedule()
    init = Denoiser.initialize(data.architecture(**arch_kw), 0)
    cfg = TrainConfig(epochs=2, steps_per_epoch=5, batch_size=4, lr=1e-2, seed=3)
    a = train(data, sched, cfg, denoiser=init)
    b = train(data, sched, cfg, denoiser=init)
    assert np.array_equal(a.denoiser.params, b.denoiser.params) and a.losses == b.losses
    half = TrainConfig(epochs=1, steps_per_epoch=5, batch_size=4, lr=1e-2, seed=3)
    first = train(data, sched, half, denoiser=init)
    second = train(data, sched, half, denoiser=first.denoiser, adam=first.adam)
    assert second.adam.step == 10
    np.testing.assert_allclose(second.denoiser.params, a.denoiser.params, rtol=1e-5, atol=1e-6)


def test_empty_training_set_rejected():
    with pytest.raises(RejectedInputError):
        TrainingArrays(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)), np.zeros((0, 0, 4, 4)))


def test_single_record_overfits_toward_floor():
    data = toy_arrays(n=1)
    arch_kw = dict(widths=(8, 8, 8, 8), time_dim=8, time_hidden=8)
    init = Denoiser.initialize(data.architecture(**arch_kw), 1)
    res = train(data, make_linear_schedule(), TrainConfig(epochs=6, steps_per_epoch=50, batch_size=8, lr=3e-3),
                denoiser=init)
    means = res.epoch_means(50)
    assert means[-1] < means[0]
    # later epochs flatten: the last improvement is smaller than the first
    assert abs(means[-1] - means[-2]) < abs(means[1] - means[0])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    d = Denoiser(SMALL, rng.standard_normal(SMALL.n_params()).astype(np.float32))
    adam = AdamState.zeros_like(d.params, lr=0.003)
    adam.step = 12
    adam.m[:] = 0.5
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, d, {"seed": 4}, adam)
    assert path.read_bytes()[:4] == b"MPD1"
    d2, meta, adam2 = load_checkpoint(path)
    assert d2.arch == SMALL and meta["seed"] == 4
    np.testing.assert_array_equal(d2.params, d.params)
    assert adam2.step == 12 and adam2.lr == 0.003 and np.all(adam2.m == 0.5)
