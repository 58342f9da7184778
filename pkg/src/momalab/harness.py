"""Experiment orchestration: configuration, training loops, evaluation and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds_mod
from .baselines import BaselineConfig, BcTeam, MaiqlTeam, MaiqlTrainer, bc_loss, sample_batch
from .dataset import OfflineDataset, history_entry, normalized_score
from .envs import make_env
from .errors import ConfigError, InputError, MomaError
from .mappo import EntropyAlpha, PpoConfig, Team, make_optimizer, ppo_update, save_team, set_lr_fraction
from .nn import adam_step, make_adam
from .rollout import RolloutConfig, SimulatorModel, fill_buffer, push_entry
from .worldmodel import WorldModelConfig, load_ensemble, save_ensemble, train_ensemble

ALGORITHMS = ("moma-ppo", "ibc", "maiql", "iql-central")

# Desk-scale settings used by the acceptance suite: smaller networks and larger
# learning rates so a run fits in minutes on one CPU core.
DESK_PRESETS = {
    "coordgame-v0": {
        "wm": {"hidden": (128, 128), "lr": 3e-3, "steps": 1500},
        "ppo": {"entropy_target": 0.3, "entropy_coef": 2e-4, "embed_dim": 32, "hidden": (64, 64), "lr": 3e-4, "memory_lr": 6e-4},
        "baseline": {"embed_dim": 32, "hidden": (64, 64), "lr": 1e-3},
    },
    "reacher2-v0": {
        "wm": {"hidden": (200, 200, 200), "lr": 1e-3, "steps": 4000},
        "ppo": {"entropy_target": -4.0, "embed_dim": 32, "hidden": (64, 64), "lr": 3e-4, "memory_lr": 6e-4},
        "baseline": {"embed_dim": 32, "hidden": (64, 64), "lr": 1e-3},
    },
}

PAPER_PRESETS = {
    "coordgame-v0": {"wm": {}, "ppo": {"entropy_target": 0.3}, "baseline": {}},
    "reacher2-v0": {"wm": {}, "ppo": {"entropy_target": -4.0}, "baseline": {}},
}


@dataclass
class ExperimentConfig:
    env_id: str = "coordgame-v0"
    obs_mode: str = "full"
    dataset: str = "coord-favorable"  # a dataset file, or a generator name
    dataset_episodes: int = 2000
    dataset_seed: int | None = None  # defaults to the run seed
    algorithm: str = "moma-ppo"
    seed: int = 0
    preset: str = "paper"
    updates: int = 5000  # PPO updates for moma-ppo
    steps: int = 100000  # gradient steps for baselines
    eval_every: int = 50
    eval_episodes: int = 100
    gt: bool = False  # ground-truth simulator in place of the world model
    wm_path: str | None = None
    output_dir: str = "runs/default"
    ppo: dict = field(default_factory=dict)
    rollout: dict = field(default_factory=dict)
    wm: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.preset not in ("paper", "desk"):
            raise ConfigError("preset must be 'paper' or 'desk'")
        if self.updates < 0 or self.steps < 0 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("budgets must be non-negative and cadences positive")

    @property
    def base_env(self) -> str:
        return "reacher2-v0" if self.env_id.startswith("reacher2-v0") else "coordgame-v0"

    def _merged(self, section: str) -> dict:
        presets = DESK_PRESETS if self.preset == "desk" else PAPER_PRESETS
        return {**presets[self.base_env][section], **getattr(self, section)}

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self._merged("ppo"))

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(**self.rollout)

    def wm_config(self) -> WorldModelConfig:
        return WorldModelConfig(**self._merged("wm"))

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(**{**self._merged("baseline"), "steps": self.steps})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"ppo": PpoConfig, "rollout": RolloutConfig, "wm": WorldModelConfig, "baseline": BaselineConfig}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if low in ("inf", "infinity"):
        return math.inf
    if "," in text:
        return tuple(_parse_value(x) for x in text.split(",") if x.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, env: dict | None = None) -> ExperimentConfig:
    """Parse a flat ``key = value`` file. Section keys look like ``ppo.lr = 3e-4``.

    Lines starting with ``#`` are comments. ``MOMA_SEED`` in ``env`` overrides ``seed``.
    """
    env = os.environ if env is None else env
    top: dict = {}
    sections: dict[str, dict] = {k: {} for k in _SECTIONS}
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        parsed = _parse_value(value)
        if "." in key:
            sec, sub = key.split(".", 1)
            if sec not in _SECTIONS or sub not in {f.name for f in dataclasses.fields(_SECTIONS[sec])}:
                raise ConfigError(f"config line {n}: unknown key {key!r}")
            if sub in ("hidden", "mixer_hidden") and not isinstance(parsed, tuple):
                parsed = (parsed,)
            sections[sec][sub] = parsed
        elif key in names and key not in _SECTIONS:
            top[key] = parsed
        else:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
    if env.get("MOMA_SEED"):
        top["seed"] = int(env["MOMA_SEED"])
    for key in ("env_id", "obs_mode", "dataset", "algorithm", "preset", "output_dir", "wm_path"):
        if key in top and top[key] is not None:
            top[key] = str(top[key])
    return ExperimentConfig(**top, **sections)


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), env)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if k in _SECTIONS:
            for sk, sv in v.items():
                lines.append(f"{k}.{sk} = {_format_value(sv)}")
        else:
            lines.append(f"{k} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v) + ("," if len(v) == 1 else "")
    return str(v)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    sem: float
    normalized: float
    scores: np.ndarray
    state_traces: np.ndarray  # (episodes, T + 1, S)


def sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def evaluate(env, team, n_episodes: int = 100, rng: np.random.Generator | None = None, normalizers: tuple[float, float] | None = None, greedy: bool = True, generator=None) -> EvalResult:
    """Run ``n_episodes`` episodes in the real simulator, all in lockstep."""
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = env.spec
    window = team.config.window
    starts = [env.reset(rng) for _ in range(n_episodes)]
    states = [s for s, _ in starts]
    windows = [torch.zeros(n_episodes, window, spec.obs_dims[i] + spec.action_sizes[i] + 1) for i in range(spec.n_agents)]
    for b, (_, obs) in enumerate(starts):
        for i in range(spec.n_agents):
            windows[i][b, 0] = torch.as_tensor(history_entry(spec, i, obs[i]), dtype=torch.float32)
    lengths = torch.ones(n_episodes, dtype=torch.long)
    rewards = np.zeros((n_episodes, spec.horizon))
    traces = [[env.state_vector(s)] for s in states]
    for t in range(spec.horizon):
        svec = torch.as_tensor(np.stack([tr[-1] for tr in traces]), dtype=torch.float32)
        acts = team.act(windows, lengths, svec, generator, greedy=greedy).actions
        acts = [a.numpy() for a in acts]
        entries = [np.zeros((n_episodes, w.shape[-1])) for w in windows]
        for b in range(n_episodes):
            joint = [acts[i][b] for i in range(spec.n_agents)]
            res = env.step(states[b], joint)
            states[b] = res.state
            rewards[b, t] = res.reward
            traces[b].append(res.state_vector)
            for i in range(spec.n_agents):
                entries[i][b] = history_entry(spec, i, res.observations[i], joint[i])
        for i in range(spec.n_agents):
            windows[i], new_lengths = push_entry(windows[i], lengths, torch.as_tensor(entries[i], dtype=torch.float32))
        lengths = new_lengths
    scores = np.array([spec.episode_score(r) for r in rewards])
    mean = float(scores.mean())
    norm = normalized_score(mean, *normalizers) if normalizers is not None else math.nan
    return EvalResult(mean, sem(scores), norm, scores, np.asarray(traces))


def elbow_signs(traces: np.ndarray) -> np.ndarray:
    """Per-episode sign of the median elbow angle over the post-reset states of reacher traces."""
    theta2 = np.arctan2(traces[:, 1:, 3], traces[:, 1:, 2])
    return np.sign(np.median(theta2, axis=1))


def convention_consistency(traces: np.ndarray) -> float:
    """Fraction of episodes sharing the most common elbow-sign convention."""
    signs = elbow_signs(traces)
    _, counts = np.unique(signs, return_counts=True)
    return float(counts.max() / len(signs))


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = (
    "step",
    "eval_return",
    "eval_sem",
    "normalized_score",
    "actor",
    "critic",
    "entropy",
    "alpha",
    "penalty",
    "clip_frac",
    "bc",
    "q",
    "v",
    "pi",
    "clamped",
    "mean_length",
    "truncation_fraction",
    "mean_eps_g",
)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    """Append-only CSV with a fixed header; rows must have increasing steps."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.last_step = -1
        with open(self.path, "w", newline="") as f:
            f.write(",".join(METRIC_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        step = int(row["step"])
        if step <= self.last_step:
            raise InputError("metrics rows must be strictly increasing in step")
        unknown = set(row) - set(METRIC_COLUMNS)
        if unknown:
            raise InputError(f"unknown metric columns {sorted(unknown)}")
        self.last_step = step
        with open(self.path, "a", newline="") as f:
            f.write(",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# running


def load_or_make_dataset(config: ExperimentConfig) -> OfflineDataset:
    path = Path(config.dataset)
    if path.exists():
        data = ds_mod.load(path)
    else:
        seed = config.seed if config.dataset_seed is None else config.dataset_seed
        data = ds_mod.make_dataset(config.dataset, config.dataset_episodes, seed, obs_mode=config.obs_mode if config.base_env == "reacher2-v0" else "fo")
    if data.spec.full_id != make_env(config.env_id, None if config.base_env == "coordgame-v0" else config.obs_mode).spec.full_id:
        raise ConfigError(f"dataset environment {data.spec.full_id!r} does not match {config.env_id!r} / {config.obs_mode!r}")
    return data


def _average(reports: list[dict]) -> dict:
    keys = sorted({k for r in reports for k in r})
    return {k: float(np.mean([r[k] for r in reports if k in r])) for k in keys}


def run(config: ExperimentConfig, dataset: OfflineDataset | None = None, model=None) -> dict:
    """Train the configured algorithm, logging evaluations; returns the final summary."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    log = MetricsLog(out / "metrics.csv")
    torch.manual_seed(config.seed)
    try:
        data = dataset if dataset is not None else load_or_make_dataset(config)
        env = data.env
        eval_rng = np.random.default_rng([config.seed, 1])
        if config.algorithm == "moma-ppo":
            team, final = _run_moma(config, data, model, log, eval_rng)
        else:
            team, final = _run_baseline(config, data, log, eval_rng)
        save_team(team, out / "team.pt", config.algorithm)
        summary = {
            "status": "ok",
            "task": data.spec.full_id + ":" + str(config.dataset),
            "algorithm": config.algorithm,
            "seed": config.seed,
            "mean_return": final.mean,
            "sem": final.sem,
            "normalized_score": final.normalized,
            "eval_episodes": config.eval_episodes,
            "config": {k: v for k, v in config.to_dict().items() if k not in ("seed", "output_dir", "dataset_seed")},
        }
    except MomaError as exc:
        summary = {"status": "aborted", "error": f"{type(exc).__name__}: {exc}", "algorithm": config.algorithm, "seed": config.seed}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
        raise
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    summary["eval"] = final
    summary["team"] = team
    return summary


def _eval_row(step, result: EvalResult) -> dict:
    return {"step": step, "eval_return": result.mean, "eval_sem": result.sem, "normalized_score": result.normalized}


def _run_moma(config, data, model, log, eval_rng):
    spec = data.spec
    if model is None:
        if config.gt:
            model = SimulatorModel(data.env)
        elif config.wm_path:
            model = load_ensemble(config.wm_path)
        else:
            model = train_ensemble(data, config.wm_config(), seed=config.seed)
            save_ensemble(model, Path(config.output_dir) / "wm.pt")
    ppo = config.ppo_config()
    rcfg = config.rollout_config()
    team = Team(spec, ppo, seed=config.seed)
    opt = make_optimizer(team)
    alpha = EntropyAlpha(ppo.init_alpha)
    rng = np.random.default_rng([config.seed, 2])
    gen = torch.Generator().manual_seed(config.seed)
    reports, stats = [], []
    final = None
    for update in range(1, config.updates + 1):
        if ppo.lr_schedule == "linear":
            set_lr_fraction(opt, team, 1.0 - (update - 1) / config.updates)
        buf = fill_buffer(data, team, model, rcfg, ppo.transitions_per_update, rng, gen, policy_version=update)
        reports.append(ppo_update(buf, team, opt, ppo, alpha, gen))
        stats.append(buf.stats())
        if update % config.eval_every == 0 or update == config.updates:
            final = evaluate(data.env, team, config.eval_episodes, eval_rng, data.normalizers)
            log.append({**_eval_row(update, final), **_average(reports), **_average(stats)})
            reports, stats = [], []
    if final is None:
        final = evaluate(data.env, team, config.eval_episodes, eval_rng, data.normalizers)
        log.append(_eval_row(0, final))
    return team, final


def _run_baseline(config, data, log, eval_rng):
    spec = data.spec
    bcfg = config.baseline_config()
    rng = np.random.default_rng([config.seed, 3])
    if config.algorithm == "ibc":
        team = BcTeam(spec, bcfg, seed=config.seed)
        opt = make_adam(team.parameters(), lr=bcfg.lr)

        def step_fn():
            loss = bc_loss(team, sample_batch(data, bcfg.batch_size, rng, bcfg.window, next_step=False))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(opt)
            return {"bc": float(loss.detach())}

    else:
        team = MaiqlTeam(spec, bcfg, seed=config.seed, central=config.algorithm == "iql-central")
        trainer = MaiqlTrainer(team)

        def step_fn():
            return trainer.step(sample_batch(data, bcfg.batch_size, rng, bcfg.window))

    reports = []
    final = None
    for step in range(1, config.steps + 1):
        reports.append(step_fn())
        if step % config.eval_every == 0 or step == config.steps:
            final = evaluate(data.env, team, config.eval_episodes, eval_rng, data.normalizers)
            log.append({**_eval_row(step, final), **_average(reports)})
            reports = []
    if final is None:
        final = evaluate(data.env, team, config.eval_episodes, eval_rng, data.normalizers)
        log.append(_eval_row(0, final))
    return team, final


def load_checkpoint(path):
    """Rebuild any saved team (moma-ppo, ibc, maiql or iql-central) from its checkpoint."""
    blob = torch.load(path, weights_only=False)
    header = blob["header"]
    algo = header["algorithm"]
    spec = make_env(header["env_id"], header["obs_mode"]).spec
    if list(spec.obs_dims) != header["obs_dims"] or list(spec.action_sizes) != header["action_sizes"]:
        raise ConfigError("checkpoint agent dims disagree with the environment")
    if algo == "moma-ppo":
        team = Team(spec, PpoConfig(**header["config"]))
    elif algo == "ibc":
        team = BcTeam(spec, BaselineConfig(**header["config"]))
    elif algo in ("maiql", "iql-central"):
        team = MaiqlTeam(spec, BaselineConfig(**header["config"]), central=algo == "iql-central")
    else:
        raise ConfigError(f"unknown algorithm {algo!r} in checkpoint")
    team.load_state_dict(blob["state_dict"])
    return team


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportRow:
    task: str
    algorithm: str
    n_seeds: int
    mean: float
    sem: float
    single_seed: bool

    def format(self) -> str:
        flag = "  (single seed)" if self.single_seed else ""
        return f"{self.task:<40} {self.algorithm:<12} {self.mean:.2f} ± {self.sem:.2f}  n={self.n_seeds}{flag}"


def report(paths) -> list[ReportRow]:
    """Aggregate final normalised scores across seeds per (task, algorithm)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for p in paths:
        p = Path(p)
        summary_path = p / "summary.json" if p.is_dir() else p
        s = json.loads(summary_path.read_text())
        if s.get("status") != "ok":
            raise InputError(f"{summary_path}: run did not complete")
        groups.setdefault((s["task"], s["algorithm"]), []).append(s)
    if not groups:
        raise InputError("report needs at least one completed run")
    rows = []
    for (task, algo), runs in sorted(groups.items()):
        first = json.dumps(runs[0]["config"], sort_keys=True)
        if any(json.dumps(r["config"], sort_keys=True) != first for r in runs[1:]):
            raise ConfigError(f"runs for {task} / {algo} were produced with different configs")
        scores = [r["normalized_score"] for r in runs]
        rows.append(ReportRow(task, algo, len(scores), float(np.mean(scores)), sem(scores), len(scores) == 1))
    return rows


def format_report(rows: list[ReportRow]) -> str:
    return "\n".join(r.format() for r in rows) + "\n"
