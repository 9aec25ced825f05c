import numpy as np
import pytest

from fsdetect.embedding import init_network, load_checkpoint, vector_network_config
from fsdetect.episodes import SamplerConfig, SynthConfig, generate_synthetic
from fsdetect.errors import ConfigurationError, SamplingError, TrainingError
from fsdetect.optim import (ScheduleConfig, TrainSinks, adam_step, init_adam,
                            lr_at_step, train)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_reference_points():
    cfg = ScheduleConfig()
    assert lr_at_step(cfg, 0) == 1e-4
    assert lr_at_step(cfg, 80_000) == 5e-5
    assert lr_at_step(cfg, 199_999) == 2.5e-5


def test_lr_schedule_piecewise_constant_and_nonincreasing():
    cfg = ScheduleConfig(base_lr=0.5, gamma=0.7, step_size=1000, total_steps=10_000)
    prev = lr_at_step(cfg, 0)
    for step in range(0, 10_000, 250):
        lr = lr_at_step(cfg, step)
        assert lr <= prev
        assert lr == cfg.base_lr * cfg.gamma ** (step // 1000)
        prev = lr
    # breakpoints fall exactly on multiples of step_size
    assert lr_at_step(cfg, 999) == cfg.base_lr
    assert lr_at_step(cfg, 1000) == cfg.base_lr * cfg.gamma


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        ScheduleConfig(base_lr=0.0)
    with pytest.raises(ConfigurationError):
        ScheduleConfig(gamma=1.5)
    with pytest.raises(ConfigurationError):
        ScheduleConfig(step_size=0)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    params = np.array([1.0, -2.0, 3.0])
    state = init_adam(3, dtype=np.float64)
    new_params, new_state = adam_step(params, np.zeros(3), state, lr=1e-3)
    assert (new_params == params).all()
    assert new_state.t == 1


def test_adam_single_step_hand_value():
    params = np.zeros(1)
    state = init_adam(1, dtype=np.float64)
    new_params, _ = adam_step(params, np.array([0.5]), state, lr=1e-3)
    # m=0.05, v=2.5e-4, m_hat=0.5, v_hat=0.25 -> step = -1e-3 * 0.5 / (0.5 + 1e-8)
    assert abs(new_params[0] - (-9.9999998e-4)) < 1e-12


def test_adam_two_steps_match_recurrence_oracle():
    rng = np.random.default_rng(0)
    params = rng.normal(size=5)
    grads = rng.normal(size=5)
    state = init_adam(5, dtype=np.float64)
    p1, s1 = adam_step(params, grads, state, lr=2e-3)
    p2, s2 = adam_step(p1, grads, s1, lr=2e-3)

    # independent step-by-step recurrence
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros(5)
    v = np.zeros(5)
    theta = params.copy()
    for t in (1, 2):
        m = b1 * m + (1 - b1) * grads
        v = b2 * v + (1 - b2) * grads ** 2
        theta = theta - 2e-3 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert np.allclose(p2, theta, rtol=0, atol=1e-12)
    assert s2.t == 2


def test_adam_rejects_non_finite_gradient():
    params = np.zeros(3)
    state = init_adam(3, dtype=np.float64)
    grads = np.array([0.0, np.inf, 0.0])
    with pytest.raises(TrainingError, match="index 1"):
        adam_step(params, grads, state, lr=1e-3)


def test_adam_inputs_untouched():
    params = np.ones(4)
    grads = np.full(4, 0.25)
    state = init_adam(4, dtype=np.float64)
    adam_step(params, grads, state, lr=1e-3)
    assert (params == 1.0).all() and (state.m == 0).all() and state.t == 0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def easy_dataset(noise=1e-9, classes=3, dim=8, n=60, seed=5):
    return generate_synthetic(SynthConfig(num_fake_classes=classes, dimension=dim,
                                          center_separation=4.0, within_class_noise=noise,
                                          samples_per_class=n, seed=seed))


def test_train_zero_steps_is_identity():
    ds = easy_dataset()
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    result = train(net, ds, SamplerConfig(3, 5, 5, seed=2),
                   ScheduleConfig(total_steps=0))
    assert (result.network.params == net.params).all()
    assert result.losses.size == 0


def test_train_loss_decreases_on_separable_data():
    ds = easy_dataset(noise=1e-9, dim=8)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    schedule = ScheduleConfig(base_lr=1e-3, total_steps=300, episodes_per_step=2,
                              step_size=80_000)
    result = train(net, ds, SamplerConfig(3, 5, 5, seed=2), schedule)
    assert result.losses[:50].mean() > result.losses[-50:].mean()


def test_train_reaches_low_loss_within_1000_steps():
    ds = easy_dataset(noise=1e-9)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    schedule = ScheduleConfig(base_lr=1e-3, total_steps=1000, episodes_per_step=2,
                              step_size=80_000)
    result = train(net, ds, SamplerConfig(3, 5, 5, seed=2), schedule)
    assert (result.losses < 0.05).any()
    assert result.losses[-1] < 0.05


def test_train_deterministic_loss_sequences():
    ds = easy_dataset(noise=0.5)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    schedule = ScheduleConfig(base_lr=1e-3, total_steps=40, episodes_per_step=2)
    r1 = train(net, ds, SamplerConfig(3, 5, 5, seed=2), schedule)
    r2 = train(net, ds, SamplerConfig(3, 5, 5, seed=2), schedule)
    assert (r1.losses == r2.losses).all()
    assert (r1.network.params == r2.network.params).all()


def test_train_writes_log_and_checkpoints(tmp_path):
    ds = easy_dataset(noise=0.5)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    sinks = TrainSinks(log_path=tmp_path / "log.jsonl", checkpoint_dir=tmp_path / "ckpts",
                       checkpoint_every=10, log_every=5)
    schedule = ScheduleConfig(base_lr=1e-3, total_steps=20, episodes_per_step=2)
    result = train(net, ds, SamplerConfig(3, 5, 5, seed=2), schedule, sinks)
    import json
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[0]["step"] == 0 and lines[-1]["step"] == 19
    assert all({"step", "lr", "loss", "wallclock_ms"} <= set(l) for l in lines)
    assert (tmp_path / "ckpts" / "step_00000010.ckpt").exists()
    final = load_checkpoint(tmp_path / "ckpts" / "final.ckpt")
    assert (final.params == result.network.params).all()


def test_train_keeps_checkpoint_on_sampling_error(tmp_path):
    ds = easy_dataset(noise=0.5)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))
    sinks = TrainSinks(checkpoint_dir=tmp_path / "ckpts")
    with pytest.raises(SamplingError):
        train(net, ds, SamplerConfig(99, 5, 5, seed=2),
              ScheduleConfig(base_lr=1e-3, total_steps=5, episodes_per_step=1), sinks)
    assert (tmp_path / "ckpts" / "abort.ckpt").exists()


def test_train_aborts_on_non_finite_loss(tmp_path, monkeypatch):
    ds = easy_dataset(noise=0.5)
    net = init_network(vector_network_config(8, 16, (16,), seed=1))

    calls = {"n": 0}
    from fsdetect import optim as optim_mod
    real = optim_mod.episode_loss

    def exploding(net_, episode):
        calls["n"] += 1
        if calls["n"] >= 5:
            loss, grad = real(net_, episode)
            return float("nan"), grad
        return real(net_, episode)

    monkeypatch.setattr(optim_mod, "episode_loss", exploding)
    sinks = TrainSinks(checkpoint_dir=tmp_path / "ckpts", checkpoint_every=1000)
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(net, ds, SamplerConfig(3, 5, 5, seed=2),
              ScheduleConfig(base_lr=1e-3, total_steps=50, episodes_per_step=2), sinks)
    # the last good parameters were checkpointed on the way out
    assert (tmp_path / "ckpts" / "abort.ckpt").exists()
    aborted = load_checkpoint(tmp_path / "ckpts" / "abort.ckpt")
    assert np.isfinite(aborted.params).all()
