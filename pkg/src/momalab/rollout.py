"""Synthetic data generation: short branched rollouts through a learned model.

Rollouts start from dataset timesteps (with their real agent histories), run
the current team for at most ``k`` steps inside the world model and stop early
when the model predicts an absorbing state or its general uncertainty reaches
``l_eps``. Every stored transition carries the penalised reward
``r - lambda_r eps_r - lambda_g eps_g`` and a timeout flag used by GAE.
All branches advance in lockstep as one batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import HISTORY_WINDOW, OfflineDataset, sample_index
from .envs import observe_batch
from .errors import ConfigError, InputError
from .mappo import encode_joint_action
from .worldmodel import ModelPrediction, model_step


@dataclass
class RolloutConfig:
    k: int = 10
    batch_size: int = 200
    lambda_r: float = 0.0
    lambda_g: float = 1.0
    l_eps: float | None = None  # None: use the threshold stored with the ensemble

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1:
            raise ConfigError("k and batch_size must be >= 1")
        if self.lambda_r < 0 or self.lambda_g < 0:
            raise ConfigError("penalty coefficients must be non-negative")
        if self.l_eps is not None and not self.l_eps > 0:
            raise ConfigError("l_eps must be positive")


def penalized_reward(reward, eps_r, eps_g, lambda_r: float = 0.0, lambda_g: float = 1.0):
    return reward - lambda_r * eps_r - lambda_g * eps_g


def timeout_mask(j, t, k: int, eps_g, l_eps: float):
    """1 while the rollout may continue, 0 on its last allowed step or once ``eps_g >= l_eps``."""
    if torch.is_tensor(eps_g) or isinstance(eps_g, np.ndarray):
        last = torch.as_tensor(np.asarray(j) == np.asarray(t) + k - 1)
        return (~(last | (torch.as_tensor(eps_g) >= l_eps))).to(torch.float32)
    return 0.0 if (j == t + k - 1 or eps_g >= l_eps) else 1.0


@dataclass
class RolloutBuffer:
    """Transitions grouped rollout by rollout, oldest step first within each."""

    windows: list[torch.Tensor]  # per agent (N, W, d)
    lengths: torch.Tensor  # (N,)
    states: torch.Tensor  # (N, S)
    actions: list[torch.Tensor]  # per agent, as sampled
    log_probs: torch.Tensor  # (N, n_agents)
    values: torch.Tensor  # (N,)
    next_values: torch.Tensor  # (N,)
    rewards: torch.Tensor  # penalised
    raw_rewards: torch.Tensor
    masks: torch.Tensor  # model termination mask f
    timeouts: torch.Tensor  # zeta
    next_states: torch.Tensor
    eps_g: torch.Tensor
    rollout_ids: torch.Tensor
    steps: torch.Tensor
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n_rollouts(self) -> int:
        return int(self.rollout_ids.max()) + 1 if len(self) else 0

    def rollout_lengths(self) -> torch.Tensor:
        return torch.bincount(self.rollout_ids, minlength=self.n_rollouts)

    def minibatch(self, idx: torch.Tensor) -> dict:
        return {
            "windows": [w[idx] for w in self.windows],
            "lengths": self.lengths[idx],
            "states": self.states[idx],
            "actions": [a[idx] for a in self.actions],
            "log_probs": self.log_probs[idx],
        }

    @staticmethod
    def concat(buffers: list["RolloutBuffer"]) -> "RolloutBuffer":
        if len(buffers) == 1:
            return buffers[0]
        offset, ids = 0, []
        for b in buffers:
            ids.append(b.rollout_ids + offset)
            offset += b.n_rollouts
        cat = lambda name: torch.cat([getattr(b, name) for b in buffers])
        n_agents = len(buffers[0].windows)
        return RolloutBuffer(
            windows=[torch.cat([b.windows[i] for b in buffers]) for i in range(n_agents)],
            lengths=cat("lengths"),
            states=cat("states"),
            actions=[torch.cat([b.actions[i] for b in buffers]) for i in range(n_agents)],
            log_probs=cat("log_probs"),
            values=cat("values"),
            next_values=cat("next_values"),
            rewards=cat("rewards"),
            raw_rewards=cat("raw_rewards"),
            masks=cat("masks"),
            timeouts=cat("timeouts"),
            next_states=cat("next_states"),
            eps_g=cat("eps_g"),
            rollout_ids=torch.cat(ids),
            steps=cat("steps"),
            meta=dict(buffers[0].meta),
        )

    def stats(self) -> dict:
        lengths = self.rollout_lengths().to(torch.float64)
        last = torch.ones(len(self), dtype=torch.bool)
        last[:-1] = self.rollout_ids[1:] != self.rollout_ids[:-1]
        # early truncations: rollouts cut by uncertainty before the horizon
        early = last & (self.timeouts == 0) & (self.steps < self.meta.get("k", 0) - 1)
        return {
            "mean_length": float(lengths.mean()) if len(lengths) else 0.0,
            "truncation_fraction": float(early.sum()) / max(self.n_rollouts, 1),
            "mean_eps_g": float(self.eps_g.mean()) if len(self) else 0.0,
        }


def push_entry(windows: torch.Tensor, lengths: torch.Tensor, entry: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Append ``entry`` to left-aligned windows, dropping the oldest entry when full."""
    w = windows.shape[1]
    out = windows.clone()
    full = lengths >= w
    if full.any():
        out[full] = torch.roll(windows[full], -1, dims=1)
    pos = torch.where(full, w - 1, lengths).long()
    out[torch.arange(len(out)), pos] = entry
    return out, torch.clamp(lengths + 1, max=w)


def pad_windows(windows: torch.Tensor, width: int) -> torch.Tensor:
    if windows.shape[1] > width:
        raise InputError("window wider than the requested width")
    if windows.shape[1] == width:
        return windows
    pad = torch.zeros(windows.shape[0], width - windows.shape[1], windows.shape[2], dtype=windows.dtype)
    return torch.cat([windows, pad], 1)


class SimulatorModel:
    """Ground-truth dynamics with the world-model interface (zero uncertainty)."""

    def __init__(self, env, stats=None):
        self.env = env
        self.spec = env.spec
        self.l_eps = math.inf
        self.stats = stats

    def step(self, s: torch.Tensor, a: torch.Tensor, generator=None) -> ModelPrediction:
        spec = self.spec
        cuts = np.cumsum([0, *spec.action_sizes])
        nxt, rew, mask = [], [], []
        a_np = a.numpy()
        for row, act in zip(s.numpy(), a_np):
            state = self.env.state_from_vector(row)
            acts = [act[cuts[i] : cuts[i + 1]] for i in range(spec.n_agents)]
            if spec.discrete:
                acts = [int(np.argmax(x)) for x in acts]
            res = self.env.step(state, acts)
            nxt.append(res.state_vector)
            rew.append(res.reward)
            mask.append(0.0 if res.done else 1.0)
        zeros = torch.zeros(len(s))
        return ModelPrediction(
            torch.as_tensor(np.stack(nxt), dtype=torch.float32),
            torch.as_tensor(rew, dtype=torch.float32),
            torch.as_tensor(mask, dtype=torch.float32),
            zeros,
            zeros.clone(),
        )


def _model_step(model, s, a, generator, l_eps):
    if isinstance(model, SimulatorModel):
        return model.step(s, a, generator)
    return model_step(model, s, a, generator, l_eps)


def generate_rollouts(
    dataset: OfflineDataset,
    team,
    model,
    config: RolloutConfig,
    rng: np.random.Generator,
    generator: torch.Generator,
    policy_version: int = 0,
) -> RolloutBuffer:
    """Branch ``config.batch_size`` rollouts of at most ``config.k`` steps.

    ``team`` provides ``act(windows, lengths, states, generator)`` and
    ``values(windows, lengths, states)``; ``model`` is a world-model ensemble
    or a :class:`SimulatorModel`.
    """
    spec = dataset.spec
    env = dataset.env
    b, k = config.batch_size, config.k
    l_eps = config.l_eps if config.l_eps is not None else float(model.l_eps)
    window = team.config.window if hasattr(team, "config") else HISTORY_WINDOW

    traj, t0 = sample_index(dataset, b, rng)
    hist = dataset.history_batch(traj, t0, window=window)
    windows = [pad_windows(w, window) for w in hist.windows]
    lengths = hist.lengths.clone()
    s = hist.states.clone()

    records = []
    alive = torch.ones(b, dtype=torch.bool)
    act = team.act(windows, lengths, s, generator)
    for j in range(k):
        joint = encode_joint_action(spec, act.actions)
        pred = _model_step(model, s, joint, generator, l_eps)
        r_tilde = penalized_reward(pred.reward, pred.eps_r, pred.eps_g, config.lambda_r, config.lambda_g)
        zeta = timeout_mask(np.full(b, j), np.zeros(b, dtype=np.int64), k, pred.eps_g, l_eps)
        obs = observe_batch(env, pred.next_state)
        new_windows, new_lengths = [], None
        col = 0
        for i in range(spec.n_agents):
            n_i = spec.action_sizes[i]
            entry = torch.cat([obs[i], joint[:, col : col + n_i], torch.zeros(b, 1)], -1)
            col += n_i
            w_i, new_lengths = push_entry(windows[i], lengths, entry)
            new_windows.append(w_i)
        next_act = team.act(new_windows, new_lengths, pred.next_state, generator) if j + 1 < k else None
        next_values = next_act.values if next_act is not None else team.values(new_windows, new_lengths, pred.next_state)
        records.append(
            dict(
                alive=alive.clone(),
                windows=windows,
                lengths=lengths,
                states=s,
                actions=act.actions,
                log_probs=act.log_probs,
                values=act.values,
                next_values=next_values,
                rewards=r_tilde,
                raw_rewards=pred.reward,
                masks=pred.mask,
                timeouts=zeta,
                next_states=pred.next_state,
                eps_g=pred.eps_g,
            )
        )
        alive = alive & (zeta > 0) & (pred.mask > 0)
        if not alive.any():
            break
        windows, lengths, s, act = new_windows, new_lengths, pred.next_state, next_act

    return _assemble(records, spec.n_agents, config, l_eps, policy_version)


def _assemble(records, n_agents, config, l_eps, policy_version) -> RolloutBuffer:
    alive = torch.stack([r["alive"] for r in records], 1)  # (b, J)
    b, n_steps = alive.shape
    row, step = torch.nonzero(alive, as_tuple=True)  # row-major: rollout by rollout

    def gather(name):
        stacked = torch.stack([r[name] for r in records], 1)
        return stacked[row, step]

    ids = torch.unique_consecutive(row, return_inverse=True)[1]
    return RolloutBuffer(
        windows=[torch.stack([r["windows"][i] for r in records], 1)[row, step] for i in range(n_agents)],
        lengths=gather("lengths"),
        states=gather("states"),
        actions=[torch.stack([r["actions"][i] for r in records], 1)[row, step] for i in range(n_agents)],
        log_probs=gather("log_probs"),
        values=gather("values"),
        next_values=gather("next_values"),
        rewards=gather("rewards"),
        raw_rewards=gather("raw_rewards"),
        masks=gather("masks"),
        timeouts=gather("timeouts"),
        next_states=gather("next_states"),
        eps_g=gather("eps_g"),
        rollout_ids=ids,
        steps=step,
        meta={
            "k": config.k,
            "b": config.batch_size,
            "lambda_r": config.lambda_r,
            "lambda_g": config.lambda_g,
            "l_eps": l_eps,
            "policy_version": policy_version,
        },
    )


def fill_buffer(dataset, team, model, config: RolloutConfig, n_transitions: int, rng, generator, policy_version: int = 0) -> RolloutBuffer:
    """Generate rollout batches until at least ``n_transitions`` are collected."""
    parts, total = [], 0
    while total < n_transitions:
        buf = generate_rollouts(dataset, team, model, config, rng, generator, policy_version)
        parts.append(buf)
        total += len(buf)
    return RolloutBuffer.concat(parts)
