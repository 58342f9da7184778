"""Offline datasets: collection, text serialisation, statistics and history sampling.

A dataset is a list of trajectories of ``(state, per-agent obs, joint action,
reward, done, next state)`` steps plus metadata. Agent histories are built
from per-step *entries* ``[obs_t, prev_action_{t-1}, start_flag]``; the entry
at ``t = 0`` carries a zero action slot and ``start_flag = 1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .envs import EnvSpec, make_env, run_episode, scripted_policy
from .errors import ConfigError, DatasetError, SchemaError

SCHEMA_VERSION = 1
HISTORY_WINDOW = 10


# ---------------------------------------------------------------------------
# action / history encodings


def encode_action(spec: EnvSpec, agent: int, action) -> np.ndarray:
    """Vector form of one agent's action: one-hot if discrete, clipped otherwise."""
    n = spec.action_sizes[agent]
    if spec.discrete:
        out = np.zeros(n)
        out[int(np.asarray(action).reshape(-1)[0])] = 1.0
        return out
    return np.clip(np.asarray(action, dtype=np.float64).reshape(n), -1.0, 1.0)


def encode_actions(spec: EnvSpec, agent: int, actions: np.ndarray) -> np.ndarray:
    """Batched :func:`encode_action` over an ``(N, d)`` array of stored actions."""
    actions = np.asarray(actions, dtype=np.float64)
    if spec.discrete:
        return np.eye(spec.action_sizes[agent])[actions.reshape(-1).astype(np.int64)]
    return np.clip(actions.reshape(len(actions), -1), -1.0, 1.0)


def entry_dim(spec: EnvSpec, agent: int) -> int:
    return spec.obs_dims[agent] + spec.action_sizes[agent] + 1


def history_entry(spec: EnvSpec, agent: int, obs, prev_action=None) -> np.ndarray:
    act = np.zeros(spec.action_sizes[agent]) if prev_action is None else encode_action(spec, agent, prev_action)
    start = 1.0 if prev_action is None else 0.0
    return np.concatenate([np.asarray(obs, dtype=np.float64), act, [start]])


# ---------------------------------------------------------------------------
# containers


@dataclass
class Trajectory:
    states: np.ndarray  # (T, S)
    observations: list[np.ndarray]  # per agent (T, O_i)
    actions: list[np.ndarray]  # per agent (T, d_i); discrete stored as (T, 1) indices
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    next_states: np.ndarray  # (T, S)
    tag: str = ""

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self, spec: EnvSpec) -> None:
        T = len(self)
        if T == 0:
            raise SchemaError("empty trajectory")
        if self.states.shape != (T, spec.state_dim) or self.next_states.shape != (T, spec.state_dim):
            raise SchemaError("state dims disagree with the environment")
        if len(self.observations) != spec.n_agents or len(self.actions) != spec.n_agents:
            raise SchemaError("per-agent arity disagrees with n_agents")
        for i in range(spec.n_agents):
            if self.observations[i].shape != (T, spec.obs_dims[i]):
                raise SchemaError(f"agent {i} observation dims disagree with the environment")
        if np.any(self.dones[:-1]):
            raise SchemaError("done flag set before the final step")


@dataclass
class DatasetStats:
    state_min: np.ndarray
    state_max: np.ndarray
    reward_min: float
    reward_max: float
    score_mean: float
    score_median: float
    score_min: float
    score_max: float

    def to_dict(self) -> dict:
        return {
            "state_min": [float(x) for x in self.state_min],
            "state_max": [float(x) for x in self.state_max],
            "reward_min": float(self.reward_min),
            "reward_max": float(self.reward_max),
            "score_mean": float(self.score_mean),
            "score_median": float(self.score_median),
            "score_min": float(self.score_min),
            "score_max": float(self.score_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(
            np.asarray(d["state_min"], dtype=np.float64),
            np.asarray(d["state_max"], dtype=np.float64),
            **{k: float(d[k]) for k in ("reward_min", "reward_max", "score_mean", "score_median", "score_min", "score_max")},
        )

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class HistorySample:
    windows: list[np.ndarray]  # per agent (L, entry_dim_i), oldest first
    state: np.ndarray
    trajectory: int
    t: int


@dataclass
class HistoryBatch:
    """Padded, left-aligned history windows for a batch of dataset timesteps."""

    windows: list[torch.Tensor]  # per agent (B, W, entry_dim_i)
    lengths: torch.Tensor  # (B,)
    states: torch.Tensor  # (B, S)
    trajectory: np.ndarray
    t: np.ndarray


@dataclass
class OfflineDataset:
    metadata: dict
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        if not self.trajectories:
            raise DatasetError("dataset has no trajectories")

    @cached_property
    def env(self):
        return make_env(self.metadata["env_id"], self.metadata.get("obs_mode"))

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    @property
    def n_steps(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    @property
    def normalizers(self) -> tuple[float, float]:
        n = self.metadata["normalizers"]
        return float(n["expert"]), float(n["random"])

    def subset(self, indices: Sequence[int]) -> "OfflineDataset":
        meta = dict(self.metadata)
        trajs = [self.trajectories[i] for i in indices]
        meta["n_episodes"] = len(trajs)
        return OfflineDataset(meta, trajs)

    # flat views for model fitting -------------------------------------------

    @cached_property
    def flat(self) -> dict[str, np.ndarray]:
        spec = self.spec
        trajs = self.trajectories
        out = {
            "states": np.concatenate([tr.states for tr in trajs]),
            "next_states": np.concatenate([tr.next_states for tr in trajs]),
            "rewards": np.concatenate([tr.rewards for tr in trajs]),
            "dones": np.concatenate([tr.dones for tr in trajs]).astype(np.float64),
            "traj": np.concatenate([np.full(len(tr), k) for k, tr in enumerate(trajs)]),
            "t": np.concatenate([np.arange(len(tr)) for tr in trajs]),
        }
        for i in range(spec.n_agents):
            out[f"action{i}"] = np.concatenate([tr.actions[i] for tr in trajs])
        out["joint_action"] = np.concatenate(
            [encode_actions(spec, i, out[f"action{i}"]) for i in range(spec.n_agents)], axis=1
        )
        return out

    @cached_property
    def _entries(self):
        """Per-agent history entries for every timestep 0..T of every trajectory."""
        spec = self.spec
        per_agent: list[list[np.ndarray]] = [[] for _ in range(spec.n_agents)]
        offsets = [0]
        for tr in self.trajectories:
            final_obs = self.env.observe(tr.next_states[-1])
            for i in range(spec.n_agents):
                obs = np.concatenate([tr.observations[i], final_obs[i][None]])
                acts = encode_actions(spec, i, tr.actions[i])
                prev = np.concatenate([np.zeros((1, acts.shape[1])), acts])
                start = np.zeros((len(obs), 1))
                start[0] = 1.0
                per_agent[i].append(np.concatenate([obs, prev, start], axis=1))
            offsets.append(offsets[-1] + len(tr) + 1)
        entries = [torch.as_tensor(np.concatenate(e), dtype=torch.float32) for e in per_agent]
        return entries, np.asarray(offsets[:-1])

    def history_batch(self, traj: np.ndarray, t: np.ndarray, window: int = HISTORY_WINDOW, next_step: bool = False) -> HistoryBatch:
        """Windows ending at ``t`` (or ``t + 1`` when ``next_step``) for the given steps."""
        entries, offsets = self._entries
        traj = np.asarray(traj, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        end = t + 1 if next_step else t
        start = np.maximum(0, end - window + 1)
        lengths = end - start + 1
        w = int(min(window, lengths.max()))
        slot = np.arange(w)
        idx = offsets[traj][:, None] + start[:, None] + slot[None, :]
        valid = slot[None, :] < lengths[:, None]
        idx = np.where(valid, idx, 0)
        idx_t = torch.as_tensor(idx)
        mask = torch.as_tensor(valid)[..., None]
        windows = [torch.where(mask, e[idx_t], torch.zeros(())) for e in entries]
        if next_step:
            states = np.stack([self.trajectories[k].next_states[s] for k, s in zip(traj, t)])
        else:
            states = np.stack([self.trajectories[k].states[s] for k, s in zip(traj, t)])
        return HistoryBatch(windows, torch.as_tensor(lengths), torch.as_tensor(states, dtype=torch.float32), traj, t)


# ---------------------------------------------------------------------------
# collection


def reference_normalizers(env, rng: np.random.Generator, n_episodes: int = 100) -> dict:
    """Expert and uniform-random reference scores for score normalisation."""
    spec = env.spec
    if spec.env_id == "coordgame-v0":
        # perfect coordination scores 1; independent uniform agents agree half the time
        return {"expert": 1.0, "random": 0.5}
    experts = [scripted_policy("reacher-expert", env, convention=c) for c in ("ccw", "cw")]
    rand = scripted_policy("uniform-random", env)
    expert = np.mean([spec.episode_score([s[3].reward for s in run_episode(env, experts[e % 2], rng)]) for e in range(n_episodes)])
    random = np.mean([spec.episode_score([s[3].reward for s in run_episode(env, rand, rng)]) for e in range(n_episodes)])
    return {"expert": float(expert), "random": float(random)}


def collect(env, policies, n_episodes: int, rng: np.random.Generator, seed=None, normalizers: dict | None = None) -> OfflineDataset:
    """Roll ``n_episodes`` episodes, cycling through ``policies`` episode by episode.

    With two policies and an even episode count the mixture is exactly 50/50.
    """
    if not isinstance(policies, (list, tuple)):
        policies = [policies]
    spec = env.spec
    trajs = []
    for ep in range(n_episodes):
        pol = policies[ep % len(policies)]
        steps = run_episode(env, pol, rng)
        trajs.append(
            Trajectory(
                states=np.stack([env.state_vector(s[0]) for s in steps]),
                observations=[np.stack([s[1][i] for s in steps]) for i in range(spec.n_agents)],
                actions=[
                    np.stack([np.asarray(s[2][i], dtype=np.float64).reshape(-1) for s in steps])
                    for i in range(spec.n_agents)
                ],
                rewards=np.array([s[3].reward for s in steps]),
                dones=np.array([s[3].done for s in steps]),
                next_states=np.stack([s[3].state_vector for s in steps]),
                tag=pol.tag,
            )
        )
    if normalizers is None:
        normalizers = reference_normalizers(env, np.random.default_rng(rng.integers(2**63)))
    meta = {
        "env_id": spec.env_id,
        "obs_mode": spec.obs_mode,
        "n_agents": spec.n_agents,
        "state_dim": spec.state_dim,
        "obs_dims": list(spec.obs_dims),
        "action_sizes": list(spec.action_sizes),
        "discrete": spec.discrete,
        "seeds": [] if seed is None else [seed],
        "n_episodes": n_episodes,
        "normalizers": normalizers,
    }
    return OfflineDataset(meta, trajs)


COORD_DATASETS = {
    "favorable": (0.75, 0.75),
    "neutral": (0.5, 0.5),
    "unfavorable": (0.25, 0.75),
}


def make_dataset(name: str, n_episodes: int, seed: int, obs_mode: str = "fo") -> OfflineDataset:
    """Named datasets: ``coord-favorable|neutral|unfavorable`` and ``reacher-mix``."""
    rng = np.random.default_rng(seed)
    if name.startswith("coord-"):
        kind = name[len("coord-") :]
        if kind not in COORD_DATASETS:
            raise ConfigError(f"unknown coordination dataset {name!r}")
        env = make_env("coordgame-v0")
        pol = scripted_policy("bernoulli", env, p_right=COORD_DATASETS[kind])
        return collect(env, pol, n_episodes, rng, seed=seed)
    if name == "reacher-mix":
        env = make_env("reacher2-v0", obs_mode)
        pols = [scripted_policy("reacher-expert", env, convention=c) for c in ("ccw", "cw")]
        return collect(env, pols, n_episodes, rng, seed=seed)
    raise ConfigError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# statistics, splits, sampling, normalisation


def compute_stats(dataset: OfflineDataset) -> DatasetStats:
    f = dataset.flat
    all_states = np.concatenate([f["states"], f["next_states"]])
    scores = np.array([dataset.spec.episode_score(tr.rewards) for tr in dataset.trajectories])
    return DatasetStats(
        state_min=all_states.min(0),
        state_max=all_states.max(0),
        reward_min=float(f["rewards"].min()),
        reward_max=float(f["rewards"].max()),
        score_mean=float(scores.mean()),
        score_median=float(np.median(scores)),
        score_min=float(scores.min()),
        score_max=float(scores.max()),
    )


def split(dataset: OfflineDataset, val_fraction: float = 0.1, rng: np.random.Generator | None = None):
    """Trajectory-level train/validation split."""
    n = len(dataset.trajectories)
    if n < 2:
        raise ConfigError("need at least two trajectories to split")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    perm = rng.permutation(n)
    return dataset.subset(sorted(perm[n_val:])), dataset.subset(sorted(perm[:n_val]))


def sample_index(dataset: OfflineDataset, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform ``(trajectory, t)`` pairs over all recorded steps."""
    f = dataset.flat
    k = rng.integers(0, len(f["t"]), size=n)
    return f["traj"][k], f["t"][k]


def sample_history(dataset: OfflineDataset, rng: np.random.Generator, window: int = HISTORY_WINDOW) -> HistorySample:
    traj, t = sample_index(dataset, 1, rng)
    batch = dataset.history_batch(traj, t, window)
    L = int(batch.lengths[0])
    return HistorySample(
        windows=[w[0, :L].double().numpy() for w in batch.windows],
        state=dataset.trajectories[int(traj[0])].states[int(t[0])].copy(),
        trajectory=int(traj[0]),
        t=int(t[0]),
    )


def sample_histories(dataset: OfflineDataset, n: int, rng: np.random.Generator, window: int = HISTORY_WINDOW) -> HistoryBatch:
    traj, t = sample_index(dataset, n, rng)
    return dataset.history_batch(traj, t, window)


def normalized_score(raw_return: float, expert_return: float, random_return: float) -> float:
    if not math.isfinite(expert_return - random_return) or expert_return == random_return:
        raise ConfigError("degenerate normalizers: expert and random returns must differ")
    return (raw_return - random_return) / (expert_return - random_return)


# ---------------------------------------------------------------------------
# serialisation


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _record(k: int, s: int, tr: Trajectory) -> str:
    return _dumps(
        [
            k,
            s,
            tr.states[s].tolist(),
            [o[s].tolist() for o in tr.observations],
            [a[s].tolist() for a in tr.actions],
            float(tr.rewards[s]),
            bool(tr.dones[s]),
            tr.next_states[s].tolist(),
        ]
    )


def dumps(dataset: OfflineDataset) -> str:
    records = [_record(k, s, tr) for k, tr in enumerate(dataset.trajectories) for s in range(len(tr))]
    header = {
        "schema_version": SCHEMA_VERSION,
        **dataset.metadata,
        "n_episodes": len(dataset.trajectories),
        "n_records": len(records),
        "tags": [tr.tag for tr in dataset.trajectories],
        "stats_checksum": compute_stats(dataset).checksum(),
    }
    body = "\n".join(records)
    trailer = {"record_count": len(records), "sha256": hashlib.sha256(body.encode()).hexdigest()}
    return "\n".join([_dumps(header), body, _dumps(trailer)]) + "\n"


def save(dataset: OfflineDataset, path) -> None:
    Path(path).write_text(dumps(dataset))


def loads(text: str) -> OfflineDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3:
        raise DatasetError("truncated dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"line 1: malformed header ({e})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {header.get('schema_version')!r}")
    try:
        trailer = json.loads(lines[-1])
        count = trailer["record_count"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise DatasetError("truncated dataset file: missing trailer") from None
    records = lines[1:-1]
    if count != len(records) or header.get("n_records") != len(records):
        raise DatasetError(f"record count mismatch: trailer says {count}, found {len(records)}")
    n_agents = int(header["n_agents"])
    parsed: dict[int, list] = {}
    for lineno, line in enumerate(records, start=2):
        try:
            rec = json.loads(line)
            k, s, state, obs, acts, rew, done, nxt = rec
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise DatasetError(f"line {lineno}: corrupted record ({e})") from None
        if len(obs) != n_agents or len(acts) != n_agents:
            raise SchemaError(f"line {lineno}: record arity {len(obs)} != header n_agents {n_agents}")
        steps = parsed.setdefault(k, [])
        if s != len(steps):
            raise DatasetError(f"line {lineno}: out-of-order step index {s}")
        steps.append((state, obs, acts, rew, done, nxt))
    if hashlib.sha256("\n".join(records).encode()).hexdigest() != trailer.get("sha256"):
        raise DatasetError("checksum failure")
    tags = header.pop("tags", [""] * len(parsed))
    stored_stats = header.get("stats_checksum")
    for key in ("schema_version", "n_records", "stats_checksum"):
        header.pop(key, None)
    f64 = lambda x: np.asarray(x, dtype=np.float64)
    trajs = []
    for k in range(len(parsed)):
        if k not in parsed:
            raise DatasetError(f"missing trajectory {k}")
        steps = parsed[k]
        trajs.append(
            Trajectory(
                states=f64([st[0] for st in steps]),
                observations=[f64([st[1][i] for st in steps]) for i in range(n_agents)],
                actions=[f64([st[2][i] for st in steps]) for i in range(n_agents)],
                rewards=f64([st[3] for st in steps]),
                dones=np.array([bool(st[4]) for st in steps]),
                next_states=f64([st[5] for st in steps]),
                tag=tags[k],
            )
        )
    ds = OfflineDataset(header, trajs)
    for tr in trajs:
        tr.validate(ds.spec)
    if stored_stats != compute_stats(ds).checksum():
        raise DatasetError("stats checksum failure")
    return ds


def load(path) -> OfflineDataset:
    return loads(Path(path).read_text())
