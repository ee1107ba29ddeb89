"""End-to-end acceptance checks, one test group per criterion.

The learned-policy criteria train the default two-stage pipeline once and cache
the checkpoints under ``REFLEXSIM_ACCEPTANCE_DIR`` (default ``.acceptance``),
keyed by the model hash of the default configuration. A PASS/FAIL line per
criterion is printed in the terminal summary.
"""

from __future__ import annotations

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from reflexsim import eval_metrics as em
from reflexsim import evaluation as ev
from reflexsim import policy_net as pn
from reflexsim import sim_core as sc
from reflexsim.cli import main
from reflexsim.config import Config, GeometryConfig, PPOConfig, RewardConfig
from reflexsim.episode_log import replay_episode_log
from reflexsim.env import HIST, N_OBS_HIGH
from reflexsim.sim_core import Kind, Mode, Outcome
from reflexsim.training.ppo import Batch, policy_logprob, ppo_loss_and_grads, trainable
from reflexsim.training.rewards import Branch, reward_regularizers, reward_task

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("REFLEXSIM_ACCEPTANCE_DIR", ROOT / ".acceptance"))


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def note(request, text):
    request.node.criterion_detail = text


# ----------------------------------------------------------------------------- 1. numerical core

def central_fd(f, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def worst_rel(analytic, numeric):
    a = np.concatenate([x.ravel() for x in analytic])
    b = np.concatenate([x.ravel() for x in numeric])
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-8))


@criterion(1, "MLP, PPO and log-prob gradients match central differences (rel 1e-4, >= 20 instances)")
def test_c1_gradients(request):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(20):
        net = pn.Mlp([6, 16, 16, 4], rng=rng, out_scale=1.0)
        x, g_out = rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
        grads, _ = pn.mlp_backward(net, x, g_out)
        worst = max(worst, worst_rel(grads, central_fd(lambda: float(np.sum(g_out * net.forward(x))),
                                                       net.params(), h=1e-5)))
    for _ in range(20):
        m, ls, a = rng.normal(size=(3, 3))
        gm, gl = pn.gaussian_logprob_grad(m, ls, a)
        fd = central_fd(lambda: float(pn.gaussian_logprob(m, ls, a)), [m, ls])
        worst = max(worst, worst_rel([gm, gl], fd))
    cfg = PPOConfig()
    for seed in range(20):
        r = np.random.default_rng(seed)
        pol = pn.HighLevelPolicy.create(4, [6], r, init_logstd=-0.3)
        obs = r.normal(size=(16, 4))
        out = pol.net.forward(pol.norm.transform(obs))
        act = out[:, :3] + 0.5 * r.normal(size=(16, 3))
        mode = r.integers(-1, 2, size=16)
        logp = policy_logprob(pol, pol.norm.transform(obs), act, mode) + 0.05 * r.normal(size=16)
        batch = Batch(obs, act, logp, r.normal(size=16), r.normal(size=16), r.uniform(size=16) < 0.8, mode)
        _, grads, _ = ppo_loss_and_grads(pol, batch, cfg)
        fd = central_fd(lambda: ppo_loss_and_grads(pol, batch, cfg)[0], trainable(pol))
        worst = max(worst, worst_rel(grads, fd))
    note(request, f"worst relative error {worst:.2e}, {time.time() - t0:.1f}s")
    assert worst < 1e-4
    assert time.time() - t0 < 60


# ----------------------------------------------------------------------------- 2. geometry oracle

def perimeter_distance(point, hl, hw, yaw, n=4000):
    s = np.linspace(-1.0, 1.0, n)
    edges = np.concatenate([np.stack([s * hl, np.full(n, hw)], 1), np.stack([s * hl, np.full(n, -hw)], 1),
                            np.stack([np.full(n, hl), s * hw], 1), np.stack([np.full(n, -hl), s * hw], 1)])
    c, sn = math.cos(yaw), math.sin(yaw)
    world = edges @ np.array([[c, sn], [-sn, c]])
    d = float(np.min(np.linalg.norm(world - point, axis=1)))
    body = np.array([c * point[0] + sn * point[1], -sn * point[0] + c * point[1]])
    return -d if (abs(body[0]) < hl and abs(body[1]) < hw) else d


@criterion(2, "CPA and collision distance match dense brute force within 1e-3 m")
def test_c2_geometry(request):
    t0 = time.time()
    rng = np.random.default_rng(99)
    p = rng.uniform(-5, 5, size=(1000, 2))
    v = rng.uniform(-3, 3, size=(1000, 2))
    pred = sc.cpa_predict(p, v)
    worst_cpa = 0.0
    for i in range(1000):
        t = np.arange(0.0, float(pred.t_cpa[i]) + 1.0, 1e-3)
        dense = float(np.min(np.linalg.norm(p[i][None] + t[:, None] * v[i][None], axis=1)))
        worst_cpa = max(worst_cpa, abs(float(pred.d_min_pred[i]) - dense))
    cfg = Config()
    worst_box = 0.0
    for _ in range(1000):
        hl, hw = rng.uniform(0.1, 0.8, size=2)
        s = sc.initial_state(cfg.sim)
        s.p = rng.uniform(-2, 2, size=2)
        s.yaw = np.array(rng.uniform(-math.pi, math.pi))
        q = s.p + rng.uniform(-2.5, 2.5, size=2)
        r = rng.uniform(0.05, 0.3)
        obs = sc.Obstacle(p_o=q, v_o=np.zeros(2), radius=np.array(r), kind=np.array(0), spawn_time=np.array(0.0),
                          reaction_time=np.array(1.0))
        got = float(sc.collision_distance(s, GeometryConfig(half_length=hl, half_width=hw), obs))
        worst_box = max(worst_box, abs(got - (perimeter_distance(q - s.p, hl, hw, float(s.yaw)) - r)))
    note(request, f"CPA err {worst_cpa:.1e} m, box err {worst_box:.1e} m, {time.time() - t0:.1f}s")
    assert worst_cpa <= 1e-3 and worst_box <= 1e-3
    assert time.time() - t0 < 60


# ----------------------------------------------------------------------------- 3. reward conformance

@criterion(3, "four-branch task reward and regularizers are exact")
def test_c3_rewards(request):
    t0 = time.time()
    w, ds = RewardConfig(), 0.1
    assert reward_task(Outcome.COLLISION, -0.05, True, False, [0, 0, 0], w, ds) == (w.R_fail, Branch.FAIL)
    assert reward_task(Outcome.SUCCESS, 0.3, True, True, [1, 0, 0], w, ds) == (w.R_succ, Branch.SUCCESS)
    r, b = reward_task(Outcome.RUNNING, 1.0, False, True, [1.0, 1.0, 0.0], w, ds)
    assert b == Branch.FALSE_POSITIVE and r == -w.lambda_fp * 2.0
    assert reward_task(Outcome.RUNNING, 1.0, False, False, [0, 0, 0], w, ds) == (0.0, Branch.OTHERWISE)
    v_cmd, v_prev, v_real = np.array([1.0, -0.5, 0.2]), np.array([0.5, 0.0, 0.0]), np.array([0.5, -0.5, 0.0])
    tau, qd = np.arange(8.0) - 3.0, np.linspace(-1, 1, 8)
    r_track, r_smooth, r_energy = reward_regularizers(v_cmd, v_prev, v_real, tau, qd, w)
    assert r_track == -w.k_track * float(np.sum((v_cmd - v_real) ** 2))
    assert r_smooth == -w.k_smooth * float(np.sum((v_cmd - v_prev) ** 2))
    assert r_energy == -w.k_power * float(np.sum(np.abs(tau * qd)))
    note(request, f"{time.time() - t0:.3f}s")
    assert time.time() - t0 < 1.0


# ----------------------------------------------------------------------------- 4. solvability

@criterion(4, "analytic dodger reaches ASR >= 0.95 on t_r in [1, 3.5] s over 1000 episodes")
def test_c4_oracle(request):
    cfg = Config()
    t0 = time.time()
    specs = [ev.EpisodeSpec(seed=(4, 1, 0, 0, i), band=(1.0, 3.5), kind=int(Kind.THREAT), index=i, group="oracle")
             for i in range(1000)]
    tasks = [ev.LaneTask(cfg, ev.ScriptedOracle(cfg), ch, cfg.eval.lane_size)
             for ch in ev.chunk_specs(specs, cfg.eval.lane_size)]
    results = [r for t in tasks for r in ev.evaluate_lane(t)[0]]
    asr = em.compute_asr([r.outcome for r in results])
    note(request, f"ASR {asr:.3f}, {time.time() - t0:.0f}s")
    assert asr >= 0.95
    assert time.time() - t0 < 300


# ----------------------------------------------------------------------------- trained pipeline

@pytest.fixture(scope="session")
def trained():
    """Default two-stage run, trained once and reused while the model hash is unchanged."""
    cfg = Config()
    out = CACHE / cfg.model_hash()
    t0 = time.time()
    if not (out / "high_level.npz").exists() or not (out / "DONE").exists():
        for stage in ("expert-low", "expert-high", "high-level"):
            code = main(["train", stage, "--out", str(out)])
            assert code == 0, f"training stage {stage} exited with {code}"
        (out / "DONE").write_text(f"{time.time() - t0:.0f}\n")
    return cfg, out, float((out / "DONE").read_text().split()[0])


@pytest.fixture(scope="session")
def learned_eval(trained):
    cfg, out, _ = trained
    controller = ev.load_controller(cfg, out)
    results, features, _, _ = ev.run_protocol(cfg, controller, seed=2025, workers=1)
    report = ev.build_report(cfg, controller, 2025, results, features)
    return report, results


def test_low_expert_tracks_lateral_step(trained):
    """Trained LOW expert follows a 1 m/s lateral step with steady-state error below 0.1 m/s."""
    cfg, out, _ = trained
    expert, _ = pn.load_checkpoint(out / "expert_low.npz", expected_config_hash=cfg.model_hash())
    from reflexsim.env import expert_accel
    state = sc.initial_state(cfg.sim, (1,))
    cmd = np.array([[0.0, 1.0, 0.0]])
    hist = np.repeat(cmd[:, None, :], HIST, axis=1)
    mode = np.array([int(Mode.LOW)])
    vy = []
    for _ in range(int(4.0 / cfg.sim.dt)):
        accel = expert_accel([expert, expert], hist, state, mode, cfg)
        state = sc.step(state, accel, mode, cfg.sim)
        vy.append(float(sc.to_body(state.v_world, state.yaw)[0, 1]))
    err = abs(float(np.mean(vy[-50:])) - 1.0)
    assert err < 0.1


@criterion(5, "learned policy: ASR >= 0.90 on [2,3), >= 0.80 on [1,2), monotone across bins, <= 2 h training")
def test_c5_learned_asr(request, trained, learned_eval):
    _, _, train_seconds = trained
    report, _ = learned_eval
    asr = [b["asr_mean"] for b in report.bins]
    note(request, "ASR by bin " + " / ".join(f"{a:.3f}" for a in asr) + f", training {train_seconds / 60:.0f} min")
    assert asr[2] >= 0.90
    assert asr[1] >= 0.80
    assert asr[0] < asr[1] <= asr[2]
    assert train_seconds <= 2 * 3600


@criterion(6, "false-positive trigger rate <= 0.10 on 500 non-threat episodes")
def test_c6_false_positives(request, learned_eval):
    report, results = learned_eval
    nonthreat = [r for r in results if not r.xi]
    kinds = {r.kind for r in nonthreat}
    note(request, f"rate {report.false_positive_rate:.3f} over {report.nonthreat_episodes}")
    assert report.nonthreat_episodes == 500 and kinds == {int(Kind.STILL), int(Kind.NON_CENTRAL)}
    assert report.false_positive_rate <= 0.10


@criterion(7, "HIGH >= 70% of post-trigger steps for t_r < 1.5 s, LOW >= 70% for t_r > 2.5 s")
def test_c7_mode_specialization(request, learned_eval):
    report, _ = learned_eval
    hi, lo = report.high_share_fast, report.low_share_slow
    note(request, f"HIGH share fast {hi:.3f}, LOW share slow {lo:.3f}")
    assert hi is not None and lo is not None
    assert hi >= 0.70 and lo >= 0.70


# ----------------------------------------------------------------------------- 8. TEA / TNA ordering

@criterion(8, "scripted rolling start-up beats stepping on TEA and TNA")
def test_c8_startup_ordering(request):
    m = ev.startup_metrics(Config())
    r, s = m["rolling"], m["stepping"]
    note(request, f"TEA {r['tea']:.2f}/{s['tea']:.2f}, TNA {r['tna']:.3f}/{s['tna']:.3f}")
    assert r["tea"] > s["tea"] and r["tna"] > s["tna"]
    assert r["gait"] == em.Gait.ROLLING.value and s["gait"] == em.Gait.STEPPING.value


# ----------------------------------------------------------------------------- 9. determinism and replay

@criterion(9, "logs are bit-identical across worker counts and replay without divergence")
def test_c9_determinism_and_replay(request, trained, tmp_path):
    cfg, out, _ = trained
    t0 = time.time()
    small = ["--episodes", "20", "--set", "eval.nonthreat_episodes=20", "--set", "eval.lane_size=10",
             "--checkpoint", str(out), "--seed", "17"]
    for w in (1, 3):
        assert main(["eval", "--out", str(tmp_path / f"w{w}"), "--workers", str(w), *small]) == 0
    a = sorted((tmp_path / "w1" / "logs").glob("*.jsonl"))
    b = sorted((tmp_path / "w3" / "logs").glob("*.jsonl"))
    assert a and [p.name for p in a] == [p.name for p in b]
    assert all(pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a, b))
    diverged = 0
    for path in a:
        rep = replay_episode_log(path)
        diverged += 0 if rep.ok and abs(rep.amd_logged - rep.amd_replayed) <= 1e-9 else 1
    note(request, f"{len(a)} logs, {diverged} divergent, {time.time() - t0:.0f}s")
    assert diverged == 0
    assert time.time() - t0 < 120


# ----------------------------------------------------------------------------- 10. curriculum

@criterion(10, "curriculum level never decreases and promotions meet the threshold")
def test_c10_curriculum_trace(request, trained):
    cfg, out, _ = trained
    with (out / "high_level_metrics.csv").open() as f:
        rows = list(csv.DictReader(f))
    levels = [int(r["level"]) for r in rows]
    promos = [r for r in rows if r["promoted"] == "1"]
    note(request, f"{len(rows)} iterations, final level {levels[-1]}, {len(promos)} promotions")
    assert rows and all(b >= a for a, b in zip(levels, levels[1:]))
    for r in promos:
        assert float(r["promotion_rate"]) >= cfg.curriculum.promote_threshold
    assert all((r["promoted"] == "1") == (lv > prev) for r, prev, lv in zip(rows, [0] + levels, levels))
