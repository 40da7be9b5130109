import hashlib
import warnings

import numpy as np
import pytest

from lapal import adversary, envsim, latentact, orchestrator, sacgen
from lapal.errors import ConfigError, DivergenceError
from lapal.latentact import CVAEConfig, train_codec
from lapal.orchestrator import (
    ExpertPolicy,
    PolicyBundle,
    RandomPolicy,
    RunConfig,
    aggregate_curves,
    curve_from_csv,
    curve_to_csv,
    evaluate_policy,
    load_policy,
    run_training,
    save_policy,
    transfer_policy,
)
from lapal.sacgen import SacConfig

SMALL_SAC = SacConfig(batch_size=64, actor_hidden=(24, 24), critic_hidden=(24, 24))


def small_run_cfg(algo, **kw):
    base = dict(
        algo=algo, env_id="pointmass", total_env_steps=600,
        steps_per_iteration=200, disc_updates_per_iteration=20,
        gen_updates_per_iteration=30, eval_every=200, eval_episodes=4,
        disc_hidden=(24, 24), divergence_guard=False,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def pm_demos():
    return envsim.collect_demos("pointmass", n_episodes=16, seed=0)


@pytest.fixture(scope="module")
def pm_codec(pm_demos):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        codec, _ = train_codec(pm_demos, CVAEConfig(latent_dim=2, epochs=20), seed=0)
    return codec


def demos_digest(demos):
    h = hashlib.sha256()
    for arr in (demos.states, demos.actions, demos.next_states, demos.rewards):
        h.update(arr.tobytes())
    return h.hexdigest()


def test_zero_budget_returns_empty_curve(pm_demos):
    cfg = small_run_cfg("gail", total_env_steps=0)
    res = run_training(cfg, SMALL_SAC, pm_demos, seed=0)
    assert res.curve == []
    assert res.bundle.kind == "raw"


def test_algo_codec_pairing_validated(pm_demos, pm_codec):
    with pytest.raises(ConfigError):
        run_training(small_run_cfg("lapal-agnostic"), SMALL_SAC, pm_demos, seed=0)
    with pytest.raises(ConfigError):
        run_training(small_run_cfg("gail"), SMALL_SAC, pm_demos, codec=pm_codec, seed=0)
    arm_demos = envsim.collect_demos("arm2", n_episodes=2, seed=0)
    with pytest.raises(ConfigError):
        run_training(small_run_cfg("lapal-agnostic", env_id="arm2"), SMALL_SAC,
                     arm_demos, codec=pm_codec, seed=0)


def test_unknown_algo_rejected():
    with pytest.raises(ConfigError):
        small_run_cfg("bc")


def test_emitted_latents_flag_scoped():
    with pytest.raises(ConfigError):
        small_run_cfg("gail", store_emitted_latents=True)
    small_run_cfg("lapal-agnostic", store_emitted_latents=True)


def test_smoke_runs_and_buffer_hygiene(pm_demos, pm_codec):
    before = demos_digest(pm_demos)
    for algo, codec in (("gail", None), ("lapal-agnostic", pm_codec),
                        ("lapal-aware", pm_codec)):
        res = run_training(small_run_cfg(algo), SMALL_SAC, pm_demos,
                           codec=codec, seed=1)
        steps = [r.env_steps for r in res.curve]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)
        assert all(np.isfinite(r.mean_eval_return) for r in res.curve)
        assert res.expert_return > res.random_return
    assert demos_digest(pm_demos) == before


def test_frozen_codec_untouched_by_agnostic_run(pm_demos, pm_codec):
    before = pm_codec.digest()
    res = run_training(small_run_cfg("lapal-agnostic"), SMALL_SAC, pm_demos,
                       codec=pm_codec, seed=2)
    assert pm_codec.digest() == before
    assert res.codec.digest() == before  # run copy trained nothing either
    assert res.codec.frozen


def test_aware_run_moves_codec(pm_demos, pm_codec):
    cfg = small_run_cfg("lapal-aware", codec_disc_lr=1e-3, codec_gen_lr=1e-3)
    res = run_training(cfg, SMALL_SAC, pm_demos, codec=pm_codec, seed=2)
    assert res.codec.digest() != pm_codec.digest()


def test_mode_boundary_differential(pm_demos, pm_codec):
    """lapal-aware with codec learning rates forced to zero must walk the
    task-agnostic update sequence bit-identically."""
    traces = {}
    for algo, lrs in (("lapal-agnostic", None), ("lapal-aware", 0.0)):
        kw = {} if lrs is None else {"codec_disc_lr": 0.0, "codec_gen_lr": 0.0}
        trace = []
        run_training(small_run_cfg(algo, **kw), SMALL_SAC, pm_demos,
                     codec=pm_codec, seed=3, on_iteration=trace.append)
        traces[algo] = trace
    a, b = traces["lapal-agnostic"], traces["lapal-aware"]
    assert len(a) == len(b) == 3
    for ra, rb in zip(a, b):
        assert ra["actor_digest"] == rb["actor_digest"]
        assert ra["critic_digest"] == rb["critic_digest"]
        assert ra["disc_digest"] == rb["disc_digest"]
        assert ra["alpha"] == rb["alpha"]
        assert ra["codec_digest"] == rb["codec_digest"]


def test_divergence_guard_on_nonfinite_loss(pm_demos, monkeypatch):
    def poisoned(d, states, u):
        return np.full(len(np.atleast_2d(states)), np.nan)

    monkeypatch.setattr(orchestrator.adversary, "disc_reward", poisoned)
    with pytest.raises(DivergenceError):
        run_training(small_run_cfg("gail", divergence_guard=True), SMALL_SAC,
                     pm_demos, seed=4)


def test_divergence_guard_below_random_baseline(pm_demos, monkeypatch):
    # reward a saturated corner action: the policy learns to fly away, so
    # eval return sits below the random baseline at half budget and the
    # guard must abort
    def runaway(d, states, u):
        u2 = np.atleast_2d(u)
        return -np.sum((u2 - 1.0) ** 2, axis=1)

    monkeypatch.setattr(orchestrator.adversary, "disc_reward", runaway)
    cfg = small_run_cfg("gail", divergence_guard=True, total_env_steps=2000,
                        gen_updates_per_iteration=150)
    with pytest.raises(DivergenceError, match="below the random baseline"):
        run_training(cfg, SMALL_SAC, pm_demos, seed=4)


def test_evaluate_policy_deterministic_and_ordered():
    for env_id in ("pointmass", "arm2"):
        e1 = evaluate_policy(ExpertPolicy(env_id), env_id, 6, seed=9)
        e2 = evaluate_policy(ExpertPolicy(env_id), env_id, 6, seed=9)
        assert e1 == e2
        r1 = evaluate_policy(RandomPolicy(env_id), env_id, 6, seed=9)
        assert e1[0] > r1[0]


def test_policy_checkpoint_round_trip(tmp_path, pm_demos, pm_codec):
    res = run_training(small_run_cfg("lapal-agnostic"), SMALL_SAC, pm_demos,
                       codec=pm_codec, seed=5)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_policy(p1, res.bundle)
    save_policy(p2, res.bundle)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_policy(p1)
    assert back.digest() == res.bundle.digest()
    before = evaluate_policy(res.bundle, "pointmass", 4, seed=6)
    after = evaluate_policy(back, "pointmass", 4, seed=6)
    assert before == after


def test_raw_policy_checkpoint(tmp_path, pm_demos):
    res = run_training(small_run_cfg("gail"), SMALL_SAC, pm_demos, seed=6)
    save_policy(tmp_path / "p.ckpt", res.bundle)
    back = load_policy(tmp_path / "p.ckpt")
    assert back.kind == "raw" and back.codec is None
    assert evaluate_policy(back, "pointmass", 3, 0) == evaluate_policy(
        res.bundle, "pointmass", 3, 0)


def test_curve_csv_round_trip(pm_demos):
    res = run_training(small_run_cfg("gail"), SMALL_SAC, pm_demos, seed=7)
    text = curve_to_csv(res.curve)
    assert text == curve_to_csv(curve_from_csv(text))
    agg = aggregate_curves([res.curve, res.curve])
    assert agg[0]["std_norm_return"] == 0.0
    with pytest.raises(Exception):
        curve_from_csv("bogus\n1,2\n")


def test_run_training_deterministic(pm_demos, pm_codec):
    def run():
        res = run_training(small_run_cfg("lapal-agnostic"), SMALL_SAC, pm_demos,
                           codec=pm_codec, seed=8)
        return curve_to_csv(res.curve), res.bundle.digest()

    assert run() == run()


def test_transfer_identity_and_validation(pm_demos, pm_codec):
    res = run_training(small_run_cfg("lapal-agnostic"), SMALL_SAC, pm_demos,
                       codec=pm_codec, seed=9)
    cfg2 = CVAEConfig(latent_dim=2, epochs=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t1, _ = transfer_policy(res.bundle, pm_demos, cfg2, seed=11)
        t2, _ = transfer_policy(res.bundle, pm_demos, cfg2, seed=11)
    assert t1.digest() == t2.digest()
    assert evaluate_policy(t1, "pointmass", 4, 12) == evaluate_policy(
        t2, "pointmass", 4, 12)
    with pytest.raises(ConfigError):
        transfer_policy(res.bundle, pm_demos, CVAEConfig(latent_dim=3), seed=0)
    # raw policies cannot transfer
    raw = run_training(small_run_cfg("gail", total_env_steps=200), SMALL_SAC,
                       pm_demos, seed=10)
    with pytest.raises(ConfigError):
        transfer_policy(raw.bundle, pm_demos, cfg2, seed=0)
