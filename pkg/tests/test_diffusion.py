import numpy as np
import pytest

from ddl.diffusion import (Denoiser, attach_control, condition_planes, edge_correlation, evaluate_loss,
                           forward_diffuse, generate_hard, make_schedule, noise_prediction_loss, reverse_sample,
                           sample_noise_batch, to_model_range, train_control_step, train_denoiser_step)
from ddl.numerics import tensor as T
from ddl.numerics.optim import AdamW
from ddl.numerics.tensor import Tensor
from ddl.scenegen import DEFAULT_CONDITIONS, OracleParams, SceneSpec, apply_condition_oracle, generate_scene

SMALL = dict(channels=(8, 16), time_dim=8)


# ---------------------------------------------------------------- schedule
def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bars[1] == pytest.approx(0.7, abs=1e-15)


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bars[1:], [0.9, 0.72], rtol=0, atol=1e-15)


@pytest.mark.parametrize("T_,b1,bT", [(10, 1e-4, 0.02), (200, 1e-4, 0.05), (1000, 1e-3, 1e-3)])
def test_alpha_bar_strictly_decreasing(T_, b1, bT):
    s = make_schedule(T_, b1, bT)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    with pytest.raises(ValueError):
        s.betas[1] = 0.5


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10_001, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02),
                                  (10, 1e-4, 1.0)])
def test_bad_schedule_rejected(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_forward_diffuse_endpoint_and_closed_form():
    s = make_schedule(10, 1e-4, 0.02)
    x0 = np.full((3, 2, 2), 0.8)
    np.testing.assert_array_equal(forward_diffuse(x0, 0, np.ones_like(x0), s), x0)
    abar = s.alpha_bars[5]
    expected = np.sqrt(abar) * 0.8 + np.sqrt(1 - abar)
    np.testing.assert_allclose(forward_diffuse(x0, 5, np.ones_like(x0), s), expected, rtol=1e-15)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 11, np.ones_like(x0), s)


def test_forward_diffuse_hand_value():
    # a schedule whose alpha_bar_1 is exactly 0.25
    s = make_schedule(1, 0.75, 0.75)
    out = forward_diffuse(np.full(4, 0.8), 1, np.ones(4), s)
    np.testing.assert_allclose(out, 0.5 * 0.8 + np.sqrt(0.75), rtol=1e-15)
    assert out[0] == pytest.approx(1.26603, abs=1e-5)


def forward_moments(schedule, t, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    x0 = np.linspace(-1, 1, 16)
    eps = rng.standard_normal((n, 16))
    xt = forward_diffuse(np.broadcast_to(x0, eps.shape), t, eps, schedule)
    return x0, xt


def test_forward_moments_match_schedule():
    s = make_schedule(200, 1e-4, 0.05)
    x0, xt = forward_moments(s, s.T)
    abar = s.alpha_bars[s.T]
    se = np.sqrt((1 - abar) / len(xt))
    assert np.all(np.abs(xt.mean(0) - np.sqrt(abar) * x0) < 3 * se)
    assert abs(xt.var(0, ddof=1).mean() / (1 - abar) - 1) < 0.02


# ---------------------------------------------------------------- sampler
class ZeroEps:
    calls = 0

    def __call__(self, x, t):
        ZeroEps.calls += 1
        return Tensor(np.zeros(x.shape))


def test_sampler_matches_unrolled_oracle_with_zero_predictor():
    s = make_schedule(25, 1e-3, 0.1)
    seeds = [3, 99]
    shape = (3, 4, 4)
    with T.default_dtype(np.float64):
        raw = reverse_sample(ZeroEps(), shape, s, seeds, return_raw=True)
    for k, seed in enumerate(seeds):
        g = np.random.default_rng(seed)
        x = g.standard_normal(shape)
        for t in range(s.T, 0, -1):
            x = x / np.sqrt(1 - s.betas[t])
            if t > 1:
                var = s.betas[t] * (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t])
                x = x + np.sqrt(var) * g.standard_normal(shape)
        np.testing.assert_allclose(raw[k], x, rtol=0, atol=1e-10)


def test_sampler_t1_is_single_step():
    ZeroEps.calls = 0
    s = make_schedule(1, 0.1, 0.1)
    with T.default_dtype(np.float64):
        raw = reverse_sample(ZeroEps(), (3, 2, 2), s, [5], return_raw=True)
    assert ZeroEps.calls == 1
    x = np.random.default_rng(5).standard_normal((3, 2, 2))
    np.testing.assert_allclose(raw[0], x / np.sqrt(0.9), rtol=0, atol=1e-12)


def test_sampler_deterministic_and_clamped():
    d = Denoiser(3, **SMALL, seed=1)
    s = make_schedule(5, 1e-3, 0.1)
    a = reverse_sample(d, (3, 8, 8), s, [1, 2])
    b = reverse_sample(d, (3, 8, 8), s, [1, 2])
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    # each sample depends on its own seed only
    c = reverse_sample(d, (3, 8, 8), s, [2])
    np.testing.assert_allclose(c[0], b[1], atol=1e-6)


def test_controlled_model_needs_conditioning():
    m = attach_control(Denoiser(3, **SMALL), DEFAULT_CONDITIONS)
    s = make_schedule(3, 1e-3, 0.1)
    with pytest.raises(ValueError):
        reverse_sample(m, (3, 8, 8), s, [0])
    with pytest.raises(ValueError):
        reverse_sample(Denoiser(3, **SMALL), (3, 8, 8), s, [0], cond=np.zeros((1, 4, 8, 8)))


# ---------------------------------------------------------------- denoiser / control
def test_denoiser_shapes():
    d = Denoiser(3, **SMALL)
    out = d(Tensor(np.zeros((2, 3, 16, 8))), np.array([1, 5]))
    assert out.shape == (2, 3, 16, 8)


def test_zero_conv_is_noop_at_init():
    with T.default_dtype(np.float64):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            d = Denoiser(3, **SMALL, seed=seed)
            m = attach_control(d, DEFAULT_CONDITIONS, seed=seed + 1)
            x = rng.standard_normal((2, 3, 8, 8))
            t = rng.integers(1, 200, size=2)
            cond = rng.uniform(0, 1, size=(2, 4, 8, 8))
            with T.no_grad():
                a = d(Tensor(x), t).data
                b = m(Tensor(x), t, Tensor(cond)).data
            assert np.max(np.abs(a - b)) <= 1e-12


def test_zero_conv_init_and_gradient_nonzero():
    d = Denoiser(3, **SMALL)
    # a fresh denoiser's output conv is zero; stand in for a pretrained one
    w = d.decoder.conv_out.weight
    w.data[...] = np.random.default_rng(3).standard_normal(w.shape) * 0.1
    m = attach_control(d, DEFAULT_CONDITIONS)
    assert m.control.is_untrained()
    rng = np.random.default_rng(0)
    s = make_schedule(50, 1e-4, 0.05)
    x0 = rng.uniform(-1, 1, size=(2, 3, 8, 8))
    t, eps = sample_noise_batch(rng, x0, s)
    cond = rng.uniform(0, 1, size=(2, 4, 8, 8))
    loss = noise_prediction_loss(m, x0, t, eps, s, cond)
    loss.backward()
    assert all(np.any(z.weight.grad) for z in m.control.zero_convs)
    assert all(p.grad is None for p in d.parameters())


def test_conditioning_shape_mismatch_rejected():
    m = attach_control(Denoiser(3, **SMALL), DEFAULT_CONDITIONS)
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ValueError):
        m(x, np.array([1]), Tensor(np.zeros((1, 4, 16, 16))))
    with pytest.raises(ValueError):
        m(x, np.array([1]), Tensor(np.zeros((1, 2, 8, 8))))


def test_precomputed_hint_gives_same_output():
    m = attach_control(Denoiser(3, **SMALL), DEFAULT_CONDITIONS)
    rng = np.random.default_rng(4)
    for z in [m.control.hint_out, *m.control.zero_convs]:
        z.weight.data[...] = rng.standard_normal(z.weight.shape) * 0.1
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    cond = Tensor(rng.uniform(0, 1, (2, 4, 8, 8)))
    t = np.array([3, 17])
    with T.no_grad():
        plain = m(x, t, cond).data
        cached = m(x, t, cond, m.control.hint(cond)).data
    assert np.array_equal(plain, cached)
    assert not m.control.is_untrained()


def test_locked_parameters_unchanged_after_control_training():
    rng = np.random.default_rng(0)
    d = Denoiser(3, **SMALL, seed=2)
    w = d.decoder.conv_out.weight
    w.data[...] = np.random.default_rng(3).standard_normal(w.shape) * 0.1
    m = attach_control(d, DEFAULT_CONDITIONS)
    before = {k: v.tobytes() for k, v in d.state_dict().items()}
    s = make_schedule(50, 1e-4, 0.05)
    opt = AdamW(m.trainable_parameters(), lr=1e-3)
    images = rng.uniform(0, 1, size=(8, 3, 8, 8))
    cond = rng.uniform(0, 1, size=(8, 4, 8, 8))
    for _ in range(100):
        idx = rng.choice(8, size=4, replace=False)
        x0 = to_model_range(images[idx])
        t, eps = sample_noise_batch(rng, x0, s)
        train_control_step(m, opt, x0, cond[idx], t, eps, s)
    assert not m.control.is_untrained()
    assert {k: v.tobytes() for k, v in d.state_dict().items()} == before


def test_perfect_predictor_has_zero_loss():
    s = make_schedule(20, 1e-4, 0.05)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=(4, 3, 8, 8))
    t, eps = sample_noise_batch(rng, x0, s)
    with T.default_dtype(np.float64):
        class Oracle:
            def __call__(self, xt, tt):
                abar = s.alpha_bars[tt].reshape(-1, 1, 1, 1)
                return Tensor((xt.data - np.sqrt(abar) * x0) / np.sqrt(1 - abar))
        assert noise_prediction_loss(Oracle(), x0, t, eps, s).item() < 1e-20


def test_untrained_loss_near_one():
    d = Denoiser(3, channels=(32, 64), time_dim=32, seed=0)
    images = np.random.default_rng(1).uniform(0, 1, size=(32, 3, 16, 16))
    loss = evaluate_loss(d, images, make_schedule(200, 1e-4, 0.05), seed=0)
    assert abs(loss - 1.0) < 0.1


def test_train_step_rejects_nan():
    from ddl.errors import NumericalError
    d = Denoiser(3, **SMALL)
    s = make_schedule(10, 1e-4, 0.05)
    x0 = np.full((1, 3, 8, 8), np.nan)
    with pytest.raises(NumericalError):
        train_denoiser_step(d, AdamW(d.trainable_parameters()), x0, np.array([3]), np.zeros(x0.shape), s)


def test_condition_planes_layout():
    inv = np.linspace(0, 1, 16).reshape(4, 4)
    p = condition_planes(inv, "rain", DEFAULT_CONDITIONS)
    assert p.shape == (4, 4, 4)
    np.testing.assert_array_equal(p[0], inv)
    assert p[2].min() == 1.0 and not p[1].any() and not p[3].any()
    assert not condition_planes(inv, None, DEFAULT_CONDITIONS)[1:].any()


def test_generate_hard_warns_when_untrained_and_is_deterministic():
    m = attach_control(Denoiser(3, **SMALL), DEFAULT_CONDITIONS)
    s = make_schedule(4, 1e-3, 0.1)
    scene = generate_scene(0, SceneSpec(height=8, width=8, n_objects=(1, 1), object_size=(0.3, 0.5)))
    with pytest.warns(RuntimeWarning):
        a = generate_hard(m, [scene.depth], ["night"], [7], s)
    with pytest.warns(RuntimeWarning):
        b = generate_hard(m, [scene.depth], ["night"], [7], s)
    assert a.tobytes() == b.tobytes()


def test_edge_correlation_oracle():
    inv = generate_scene(2).depth.inverse()
    rgb = np.stack([inv, inv, inv])
    assert edge_correlation(rgb, inv) == pytest.approx(1.0)
    assert edge_correlation(np.zeros((3, 32, 32)), inv) == 0.0
    noise = np.random.default_rng(0).uniform(size=(3, 32, 32))
    assert abs(edge_correlation(noise, inv)) < 0.3


@pytest.mark.slow
def test_zero_strength_control_matches_unconditional():
    """With hard == easy the control branch has nothing to add."""
    rng = np.random.default_rng(0)
    spec = SceneSpec(height=16, width=16)
    scenes = [generate_scene(i, spec) for i in range(96)]
    zero = OracleParams().scaled(0.0)
    s = make_schedule(100, 1e-4, 0.05)
    d = Denoiser(3, channels=(16, 32), time_dim=16, seed=0)
    easy = np.stack([sc.easy_image for sc in scenes])
    train, held = easy[:64], easy[64:]
    opt = AdamW(d.trainable_parameters(), lr=1e-3)
    for _ in range(300):
        x0 = to_model_range(train[rng.choice(64, 8, replace=False)])
        t, eps = sample_noise_batch(rng, x0, s)
        train_denoiser_step(d, opt, x0, t, eps, s)
    m = attach_control(d, DEFAULT_CONDITIONS)
    from ddl.scenegen import normalized_inverse_depth
    tags = [DEFAULT_CONDITIONS[i % 3] for i in range(96)]
    hard = np.stack([apply_condition_oracle(sc, tag, 0, zero) for sc, tag in zip(scenes, tags)])
    assert hard.tobytes() == easy.tobytes()
    cond = np.stack([condition_planes(normalized_inverse_depth(sc.depth), tag, DEFAULT_CONDITIONS)
                     for sc, tag in zip(scenes, tags)])
    opt_c = AdamW(m.trainable_parameters(), lr=1e-3)
    for _ in range(300):
        idx = rng.choice(64, 8, replace=False)
        x0 = to_model_range(hard[idx])
        t, eps = sample_noise_batch(rng, x0, s)
        train_control_step(m, opt_c, x0, cond[idx], t, eps, s)
    uncond = evaluate_loss(d, hard[64:], s, seed=5, repeats=8)
    conditional = evaluate_loss(m, hard[64:], s, seed=5, cond=cond[64:], repeats=8)
    assert abs(conditional / uncond - 1) < 0.05
