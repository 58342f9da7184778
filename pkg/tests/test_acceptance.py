"""End-to-end acceptance criteria.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured numbers
and then asserts the same condition. Training budgets are pinned below. Set
``MOMA_ACCEPTANCE_JOBS=N`` to run the training jobs of a criterion in ``N``
worker processes; results do not depend on ``N``.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
import torch

from momalab.baselines import awr_weights, expectile_loss
from momalab.dataset import make_dataset
from momalab.harness import ExperimentConfig, MetricsLog, convention_consistency, run
from momalab.mappo import (
    EntropyAlpha,
    Team,
    TeamValue,
    action_penalty,
    clipped_surrogate,
    entropy_bonus,
    gae_with_timeouts,
    ppo_loss,
    qmix_value,
    reacher_ppo_config,
)
from momalab.nn import bernoulli_bce, finite_diff_check, gaussian_log_prob, gaussian_nll
from momalab.rollout import RolloutConfig, SimulatorModel, generate_rollouts
from momalab.worldmodel import coordgame_wm_config, epistemic_general_uncertainty, epistemic_reward_uncertainty, train_ensemble

pytestmark = pytest.mark.acceptance

# ---------------------------------------------------------------------------
# pinned budgets (desk scale, one CPU core)

COORD_SEEDS = tuple(range(10))
COORD_MOMA_UPDATES = 250
COORD_BASELINE_STEPS = 1000
COORD_DATASET_EPISODES = 2000
REACHER_SEEDS = (0, 1, 2)
REACHER_MOMA_UPDATES = 300
REACHER_BASELINE_STEPS = 3000
REACHER_DATASET_EPISODES = 200
EVAL_EPISODES = 100

GRAD_POINTS = 100
GRAD_TOL = 1e-4
FD_EPSILON = 1e-5
KINK_MARGIN = 1e-3

COORD_EXPECTED = {"favorable": 0.625, "neutral": 0.5, "unfavorable": 0.375}
COORD_PUBLISHED = {"favorable": 0.623, "neutral": 0.502, "unfavorable": 0.375}


def _line(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)


# ---------------------------------------------------------------------------
# training jobs


def _job(kwargs: dict) -> dict:
    """Run one experiment; returns only picklable numbers so workers can send them back."""
    torch.set_num_threads(1)
    summary = run(ExperimentConfig(**kwargs))
    return {
        "mean": summary["mean_return"],
        "normalized": summary["normalized_score"],
        "consistency": convention_consistency(summary["eval"].state_traces),
    }


def _run_all(jobs: list[dict]) -> list[dict]:
    workers = int(os.environ.get("MOMA_ACCEPTANCE_JOBS", "1"))
    if workers <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def _coord_job(root, algorithm: str, kind: str, seed: int) -> dict:
    budget = COORD_MOMA_UPDATES if algorithm == "moma-ppo" else COORD_BASELINE_STEPS
    return dict(
        env_id="coordgame-v0", dataset=f"coord-{kind}", dataset_episodes=COORD_DATASET_EPISODES, algorithm=algorithm, seed=seed, preset="desk",
        updates=budget, steps=budget, eval_every=budget, eval_episodes=EVAL_EPISODES, output_dir=str(root / f"{algorithm}-{kind}-{seed}"),
    )


def _reacher_job(root, algorithm: str, mode: str, seed: int, tag: str = "default", **extra) -> dict:
    budget = REACHER_MOMA_UPDATES if algorithm == "moma-ppo" else REACHER_BASELINE_STEPS
    job = dict(
        env_id="reacher2-v0", obs_mode=mode, dataset="reacher-mix", dataset_episodes=REACHER_DATASET_EPISODES, algorithm=algorithm, seed=seed,
        preset="desk", updates=budget, steps=budget, eval_every=budget, eval_episodes=EVAL_EPISODES,
        output_dir=str(root / f"{algorithm}-{mode}-{seed}-{tag}"),
    )
    job.update(extra)
    return job


# ---------------------------------------------------------------------------
# 1. coordination-game score table


COORD_TARGETS = {
    ("moma-ppo", "favorable"): (0.95, 1.0),
    ("moma-ppo", "neutral"): (0.95, 1.0),
    ("moma-ppo", "unfavorable"): (0.95, 1.0),
    ("ibc", "favorable"): (0.95, 1.0),
    ("ibc", "neutral"): (0.35, 0.70),
    ("ibc", "unfavorable"): (0.0, 0.10),
    ("maiql", "favorable"): (0.95, 1.0),
    ("maiql", "unfavorable"): (0.0, 0.10),
}


def test_criterion_1_coordination_score_table(tmp_path_factory, capsys):
    root = tmp_path_factory.mktemp("coord")
    cells = list(COORD_TARGETS)
    jobs = [_coord_job(root, algo, kind, seed) for algo, kind in cells for seed in COORD_SEEDS]
    results = iter(_run_all(jobs))
    table, ok = [], True
    for algo, kind in cells:
        scores = [next(results)["mean"] for _ in COORD_SEEDS]
        mean = float(np.mean(scores))
        lo, hi = COORD_TARGETS[(algo, kind)]
        cell_ok = lo <= mean <= hi
        ok &= cell_ok
        table.append(f"{algo}/{kind}={mean:.3f}{'' if cell_ok else '(!)'} [{lo}, {hi}] seeds={np.round(scores, 2).tolist()}")
    _line(capsys, 1, ok, "; ".join(table))
    assert ok


# ---------------------------------------------------------------------------
# 2. dataset means


def test_criterion_2_dataset_means(capsys):
    means = {kind: float(make_dataset(f"coord-{kind}", COORD_DATASET_EPISODES, seed=0).flat["rewards"].mean()) for kind in COORD_EXPECTED}
    ok = all(abs(means[k] - COORD_EXPECTED[k]) <= 0.01 for k in means)
    detail = "; ".join(f"{k}={means[k]:.4f} (analytic {COORD_EXPECTED[k]}, published {COORD_PUBLISHED[k]})" for k in means)
    _line(capsys, 2, ok, detail)
    assert ok
    for k in means:
        assert abs(means[k] - COORD_PUBLISHED[k]) <= 0.01


# ---------------------------------------------------------------------------
# 3. gradient suite


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=torch.float64, requires_grad=True)


def _away_from(values: torch.Tensor, kinks) -> bool:
    v = values.detach()
    return all(bool(((v - k).abs() > KINK_MARGIN).all()) for k in kinks)


def _worst_over_points(make_point, rng) -> float:
    """Max relative finite-difference error over ``GRAD_POINTS`` accepted points."""
    worst, accepted = 0.0, 0
    while accepted < GRAD_POINTS:
        point = make_point(rng)
        if point is None:
            continue  # too close to a kink; draw again
        loss_fn, params = point
        worst = max(worst, finite_diff_check(loss_fn, params, epsilon=FD_EPSILON, n_samples=40, rng=rng))
        accepted += 1
    return worst


def _nll_point(rng):
    mu, log_s, y = _leaf(rng, 6, 3), _leaf(rng, 6, 3), _leaf(rng, 6, 3, lo=-2, hi=2)
    return (lambda: gaussian_nll(mu, log_s, y).mean()), [mu, log_s, y]


def _bce_point(rng):
    p, t = _leaf(rng, 8, lo=0.05, hi=0.95), torch.tensor(rng.integers(0, 2, 8), dtype=torch.float64)
    return (lambda: bernoulli_bce(p, t).mean()), [p]


def _ppo_point(rng):
    """Clipped surrogate, entropy bonus and action penalty on free log-probabilities and actions."""
    clip, alpha = 0.2, float(rng.uniform(0.1, 1.0))
    new_logp, actions = _leaf(rng, 8, 2, lo=-1.5, hi=0.5), _leaf(rng, 8, 2, lo=-1.6, hi=1.6)
    old_logp = torch.tensor(rng.uniform(-1.5, 0.5, size=(8, 2)), dtype=torch.float64)
    adv = torch.tensor(rng.normal(size=8), dtype=torch.float64)
    ratio = torch.exp(new_logp - old_logp).detach()
    clipped = ratio.clamp(1 - clip, 1 + clip)
    if not (_away_from(ratio, (1 - clip, 1 + clip)) and _away_from(actions.abs(), (1.0,))):
        return None
    ents = -(ratio * new_logp.detach()).mean(0), -(clipped * new_logp.detach()).mean(0)
    if not bool(((ents[0] - ents[1]).abs() > KINK_MARGIN).all()):
        return None
    err = ((1 - actions.abs()).clamp(max=0) ** 2).detach()
    for i in range(2):
        if abs(float((ratio[:, i] * err[:, i]).mean() - (clipped[:, i] * err[:, i]).mean())) <= KINK_MARGIN and float(err[:, i].sum()) > 0:
            return None

    def loss():
        r = torch.exp(new_logp - old_logp)
        c = r.clamp(1 - clip, 1 + clip)
        total = sum(clipped_surrogate(r[:, i], adv, clip) for i in range(2))
        # the temperature is a constant within one gradient step, so its own update is switched off here
        bonus, _ = entropy_bonus(r, c, new_logp, alpha, 0.0, -1.0)
        pen = sum(action_penalty(actions[:, i : i + 1], r[:, i], c[:, i]) for i in range(2))
        return total + bonus + pen

    return loss, [new_logp, actions]


def _qmix_point(rng):
    w, b, v = _leaf(rng, 5, 3), _leaf(rng, 5), _leaf(rng, 5, 3, lo=-3, hi=3)
    if not _away_from(w, (0.0,)):
        return None
    return (lambda: (qmix_value(w, b, v) ** 2).mean()), [w, b, v]


def _expectile_point(rng):
    q, v = _leaf(rng, 16, lo=-2, hi=2), _leaf(rng, 16, lo=-2, hi=2)
    if not _away_from(q - v, (0.0,)):
        return None
    e = float(rng.uniform(0.55, 0.95))
    return (lambda: expectile_loss(q - v, e).mean()), [q, v]


def _awr_point(rng):
    """Weighted log-likelihood with weights that are differentiable in the critic outputs."""
    beta, clamp = float(rng.uniform(0.5, 3.0)), 100.0
    leaves = [_leaf(rng, 6, lo=-0.5, hi=0.5), _leaf(rng, 6, lo=-0.5, hi=0.5)] + [_leaf(rng, 6, 2, lo=-0.5, hi=0.5) for _ in range(4)]
    mu, log_s, a = _leaf(rng, 6, 2), _leaf(rng, 6, 2, lo=-1, hi=0), torch.tensor(rng.uniform(-1, 1, size=(6, 2)), dtype=torch.float64)
    bq, bv, wq, q, wv, v = leaves
    log_w = (bq - bv) + beta * (wq * q - wv * v).sum(-1)
    if not _away_from(log_w, (math.log(clamp),)):
        return None

    def loss():
        w, _ = awr_weights(*leaves, beta=beta, clamp=clamp)
        return -(w * gaussian_log_prob(a, mu, log_s).sum(-1)).mean()

    return loss, leaves + [mu, log_s]


def _network_checks(rng) -> dict:
    """The same losses through the real team modules, on a reacher rollout in float64."""
    ds = make_dataset("reacher-mix", 3, seed=0, obs_mode="ind")
    small = dict(embed_dim=16, hidden=(32,), mixer_hidden=(16,))
    cfg = reacher_ppo_config(entropy_coef=0.0, init_alpha=0.5, **small)
    team = Team(ds.spec, cfg, seed=0)
    buf = generate_rollouts(ds, team, SimulatorModel(ds.env), RolloutConfig(k=3, batch_size=8), np.random.default_rng(0), torch.Generator().manual_seed(0))
    team = team.double()
    batch = buf.minibatch(torch.arange(len(buf)))
    batch = {k: ([x.double() for x in v] if isinstance(v, list) else (v.double() if v.is_floating_point() else v)) for k, v in batch.items()}
    batch["actions"] = [a * 1.3 for a in batch["actions"]]
    batch["returns"] = torch.linspace(-1, 1, len(buf), dtype=torch.float64)
    batch["advantages"] = torch.linspace(1, -1, len(buf), dtype=torch.float64)
    params = list(team.parameters())
    ppo = finite_diff_check(lambda: ppo_loss(team, batch, cfg, EntropyAlpha(0.5))[0], params, epsilon=FD_EPSILON, n_samples=GRAD_POINTS, rng=rng)
    value = TeamValue(ds.spec, (5, 5), cfg).double()
    feats = [torch.tensor(rng.normal(size=(8, 5)), dtype=torch.float64) for _ in range(2)]
    states = torch.tensor(rng.normal(size=(8, ds.spec.state_dim)), dtype=torch.float64)
    qmix = finite_diff_check(lambda: (value(states, feats)[0] ** 2).mean(), list(value.parameters()), epsilon=FD_EPSILON, n_samples=GRAD_POINTS, rng=rng)
    return {"ppo-network": ppo, "qmix-network": qmix}


def test_criterion_3_gradient_suite(capsys):
    rng = np.random.default_rng(3)
    points = {
        "gaussian-nll": _nll_point,
        "bce": _bce_point,
        "ppo": _ppo_point,
        "qmix": _qmix_point,
        "expectile": _expectile_point,
        "awr": _awr_point,
    }
    errors = {name: _worst_over_points(fn, rng) for name, fn in points.items()}
    errors.update(_network_checks(rng))
    ok = all(e < GRAD_TOL for e in errors.values())
    _line(capsys, 3, ok, f"{GRAD_POINTS} points each, worst relative error: " + ", ".join(f"{k}={v:.1e}" for k, v in errors.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. GAE oracle


def _forward_gae(r, v, nv, m, z, gamma, lam):
    """Direct forward sums, stopping at the first absorbing or truncated step."""
    n = len(r)
    R, A = np.zeros(n), np.zeros(n)
    for t in range(n):
        disc = 1.0
        for k in range(t, n):
            R[t] += disc * r[k]
            if m[k] == 0:
                break
            if z[k] == 0 or k == n - 1:
                R[t] += disc * gamma * nv[k]
                break
            disc *= gamma
        weight = 1.0
        for k in range(t, n):
            A[t] += weight * (r[k] + gamma * nv[k] * m[k] - v[k])
            if m[k] * z[k] == 0:
                break
            weight *= gamma * lam
    return R, A


def test_criterion_4_gae_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        r, v, nv = rng.normal(size=(3, 20))
        m = (rng.uniform(size=20) > 0.1).astype(float)
        z = (rng.uniform(size=20) > 0.2).astype(float)
        gamma, lam = rng.uniform(0.9, 1.0), rng.uniform(0.8, 1.0)
        R, A = gae_with_timeouts(r, v, nv, m, z, gamma, lam)
        bR, bA = _forward_gae(r, v, nv, m, z, gamma, lam)
        worst = max(worst, float(np.abs(R.numpy() - bR).max()), float(np.abs(A.numpy() - bA).max()))
    ok = worst <= 1e-6
    _line(capsys, 4, ok, f"1000 sequences of length 20, max abs error {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5. uncertainty oracle


def test_criterion_5_uncertainty_oracle(capsys):
    rng = np.random.default_rng(5)
    worst, exact_1d = 0.0, True
    for _ in range(1000):
        n, d = int(rng.integers(2, 8)), int(rng.integers(1, 12))
        preds = rng.normal(scale=rng.uniform(0.01, 3.0), size=(n, d))
        t = torch.as_tensor(preds)
        eps_r = float(epistemic_reward_uncertainty(t[:, -1]))
        eps_g = float(epistemic_general_uncertainty(t))
        cov = np.atleast_2d(np.cov(preds, rowvar=False, ddof=1))
        worst = max(worst, abs(eps_r - np.var(preds[:, -1], ddof=1)), abs(eps_g - np.linalg.norm(cov, "fro")))
        one = t[:, -1:]
        exact_1d &= float(epistemic_general_uncertainty(one)) == float(epistemic_reward_uncertainty(one[:, 0]))
    ok = worst <= 1e-10 and exact_1d
    _line(capsys, 5, ok, f"1000 ensembles, max abs error {worst:.1e}, 1-d eps_g == eps_r exactly: {exact_1d}")
    assert ok


# ---------------------------------------------------------------------------
# 6. out-of-distribution sensitivity


def test_criterion_6_ood_sensitivity(capsys):
    rng = np.random.default_rng(6)
    results, ok = [], True
    for kind in COORD_EXPECTED:
        train = make_dataset(f"coord-{kind}", COORD_DATASET_EPISODES, seed=0)
        held_out = make_dataset(f"coord-{kind}", 200, seed=1000)
        ens = train_ensemble(train, coordgame_wm_config(), seed=0)
        f = held_out.flat
        s_val = torch.as_tensor(f["states"], dtype=torch.float32)
        a_val = torch.as_tensor(f["joint_action"], dtype=torch.float32)
        s_rand = torch.as_tensor(rng.uniform(size=s_val.shape), dtype=torch.float32)
        a_rand = torch.as_tensor(rng.uniform(size=a_val.shape), dtype=torch.float32)
        med_val = float(ens.uncertainties(s_val, a_val)[1].median())
        med_rand = float(ens.uncertainties(s_rand, a_rand)[1].median())
        ok &= med_rand > med_val
        results.append(f"{kind}: random {med_rand:.2e} > held-out {med_val:.2e}")
    _line(capsys, 6, ok, "median eps_g; " + "; ".join(results))
    assert ok


# ---------------------------------------------------------------------------
# 7 and 8. reacher mixture dataset


@pytest.fixture(scope="module")
def reacher_runs(tmp_path_factory):
    """Default MOMA-PPO and IBC runs in fo and leader modes, then the ablation reusing each world model."""
    root = tmp_path_factory.mktemp("reacher")
    plan = [(algo, mode, seed) for algo in ("moma-ppo", "ibc") for mode in ("fo", "leader") for seed in REACHER_SEEDS]
    results = dict(zip(plan, _run_all([_reacher_job(root, *p) for p in plan])))
    ablation = [
        _reacher_job(root, "moma-ppo", "fo", seed, tag="ablation", wm_path=str(root / f"moma-ppo-fo-{seed}-default" / "wm.pt"), rollout={"l_eps": math.inf, "lambda_g": 0.0})
        for seed in REACHER_SEEDS
    ]
    for seed, res in zip(REACHER_SEEDS, _run_all(ablation)):
        results[("ablation", "fo", seed)] = res
    return results


def _mean(results, algo, mode, key="normalized"):
    return float(np.mean([results[(algo, mode, s)][key] for s in REACHER_SEEDS]))


def test_criterion_7_reacher_strategy_agreement(reacher_runs, capsys):
    fo = _mean(reacher_runs, "moma-ppo", "fo")
    gap = _mean(reacher_runs, "moma-ppo", "leader") - _mean(reacher_runs, "ibc", "leader")
    consistency = {(mode, s): reacher_runs[("moma-ppo", mode, s)]["consistency"] for mode in ("fo", "leader") for s in REACHER_SEEDS}
    checks = {"fo>=0.85": fo >= 0.85, "gap>=0.10": gap >= 0.10, "consistency>=0.9": min(consistency.values()) >= 0.9}
    ok = all(checks.values())
    detail = (
        f"fo score {fo:.3f}, leader gap {gap:.3f} (moma {_mean(reacher_runs, 'moma-ppo', 'leader'):.3f}, ibc {_mean(reacher_runs, 'ibc', 'leader'):.3f}), "
        f"min consistency {min(consistency.values()):.2f}; failed: {[k for k, v in checks.items() if not v]}"
    )
    _line(capsys, 7, ok, detail)
    assert ok


def test_criterion_8_reacher_ablation(reacher_runs, capsys):
    default = _mean(reacher_runs, "moma-ppo", "fo")
    ablated = _mean(reacher_runs, "ablation", "fo")
    ok = default - ablated >= 0.10
    _line(capsys, 8, ok, f"default {default:.3f}, no termination and no general penalty {ablated:.3f}, drop {default - ablated:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_byte_identical_metrics(tmp_path, capsys):
    small = {"dataset_episodes": 200, "eval_every": 2, "eval_episodes": 20}
    configs = {
        "moma-ppo": dict(dataset="coord-unfavorable", algorithm="moma-ppo", preset="desk", updates=4, wm={"steps": 200}, **small),
        "maiql": dict(dataset="coord-unfavorable", algorithm="maiql", preset="desk", steps=40, **small),
        "ibc": dict(env_id="reacher2-v0", obs_mode="leader", dataset="reacher-mix", algorithm="ibc", preset="desk", steps=40, **{**small, "dataset_episodes": 10}),
    }
    same = {}
    for name, kw in configs.items():
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            run(ExperimentConfig(seed=7, output_dir=str(out), **kw))
            blobs.append((out / "metrics.csv").read_bytes())
        same[name] = blobs[0] == blobs[1] and len(MetricsLog.read(tmp_path / f"{name}-a" / "metrics.csv")) >= 2
    ok = all(same.values())
    _line(capsys, 9, ok, "identical metrics.csv on repeat: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
