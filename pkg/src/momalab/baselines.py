"""Offline model-free baselines: independent behavioural cloning and MAIQL.

MAIQL is implicit Q-learning with QMIX mixing of per-agent Q and V values:
expectile regression for V, SARSA-style Bellman regression for Q, and
advantage-weighted regression for the decentralised policies. Centralised IQL
is the same learner run as a single agent over the concatenated observations
and the joint action.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import HISTORY_WINDOW, OfflineDataset, sample_index
from .envs import EnvSpec
from .errors import ConfigError
from .mappo import AgentPolicy, TeamAct, qmix_value
from .nn import Mlp, MlpSpec, adam_step, make_adam, polyak_update


@dataclass
class BaselineConfig:
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 128
    window: int = HISTORY_WINDOW
    mixer_hidden: tuple[int, ...] = (64,)
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 10000
    gamma: float = 0.99
    expectile: float = 0.7
    beta: float = 3.0
    tau: float = 0.005
    twin_q: bool = True
    weight_clamp: float = 100.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.mixer_hidden = tuple(self.mixer_hidden)
        if not 0.0 < self.expectile < 1.0:
            raise ConfigError("expectile must lie in (0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.beta < 0:
            raise ConfigError("invalid baseline hyperparameters")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")


# ---------------------------------------------------------------------------
# batches


def _flat_index(dataset: OfflineDataset, traj: np.ndarray, t: np.ndarray) -> np.ndarray:
    lengths = np.array([len(tr) for tr in dataset.trajectories])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return offsets[traj] + t


def _stored_actions(spec: EnvSpec, flat: dict, idx: np.ndarray) -> list[torch.Tensor]:
    out = []
    for i in range(spec.n_agents):
        a = flat[f"action{i}"][idx]
        out.append(torch.as_tensor(a[:, 0], dtype=torch.long) if spec.discrete else torch.as_tensor(a, dtype=torch.float32))
    return out


def sample_batch(dataset: OfflineDataset, n: int, rng: np.random.Generator, window: int = HISTORY_WINDOW, next_step: bool = True) -> dict:
    """Random dataset transitions with histories at ``t`` (and ``t + 1``)."""
    traj, t = sample_index(dataset, n, rng)
    idx = _flat_index(dataset, traj, t)
    flat = dataset.flat
    hb = dataset.history_batch(traj, t, window)
    batch = {
        "windows": hb.windows,
        "lengths": hb.lengths,
        "states": hb.states,
        "actions": _stored_actions(dataset.spec, flat, idx),
        "rewards": torch.as_tensor(flat["rewards"][idx], dtype=torch.float32),
        "masks": torch.as_tensor(1.0 - flat["dones"][idx], dtype=torch.float32),
    }
    if next_step:
        nb = dataset.history_batch(traj, t, window, next_step=True)
        batch.update(next_windows=nb.windows, next_lengths=nb.lengths, next_states=nb.states)
    return batch


# ---------------------------------------------------------------------------
# centralised view


def central_spec(spec: EnvSpec) -> EnvSpec:
    """Single-agent spec over concatenated observations and the joint action."""
    n_joint = int(np.prod(spec.action_sizes)) if spec.discrete else int(sum(spec.action_sizes))
    return EnvSpec(
        env_id=spec.env_id,
        obs_mode=spec.obs_mode,
        n_agents=1,
        state_dim=spec.state_dim,
        obs_dims=(int(sum(spec.obs_dims)),),
        # history entries still carry the concatenated per-agent action encodings
        action_sizes=(int(sum(spec.action_sizes)),),
        discrete=spec.discrete,
        horizon=spec.horizon,
        score_mode=spec.score_mode,
    ), n_joint


def central_windows(spec: EnvSpec, windows) -> list[torch.Tensor]:
    obs = [w[..., : spec.obs_dims[i]] for i, w in enumerate(windows)]
    acts = [w[..., spec.obs_dims[i] : spec.obs_dims[i] + spec.action_sizes[i]] for i, w in enumerate(windows)]
    return [torch.cat(obs + acts + [windows[0][..., -1:]], -1)]


def join_actions(spec: EnvSpec, actions) -> torch.Tensor:
    """Per-agent actions -> joint action (mixed-radix index if discrete)."""
    if not spec.discrete:
        return torch.cat([a.reshape(len(a), -1) for a in actions], -1)
    joint = torch.zeros_like(actions[0])
    for i, a in enumerate(actions):
        joint = joint * spec.action_sizes[i] + a
    return joint


def split_actions(spec: EnvSpec, joint: torch.Tensor) -> list[torch.Tensor]:
    if not spec.discrete:
        return list(torch.split(joint, list(spec.action_sizes), dim=-1))
    out = []
    rest = joint.clone()
    for n in reversed(spec.action_sizes):
        out.append(rest % n)
        rest = rest // n
    return out[::-1]


def _policy(spec: EnvSpec, agent: int, config, n_out: int | None = None) -> AgentPolicy:
    pol = AgentPolicy(spec, agent, config)
    if n_out is not None and n_out != spec.action_sizes[agent]:
        # central discrete policy: entries carry concatenated one-hots, head covers joint indices
        in_dim = pol.head.linear.in_features
        pol.head = type(pol.head)(in_dim, n_out)
    return pol


# ---------------------------------------------------------------------------
# behavioural cloning


class BcTeam(nn.Module):
    def __init__(self, spec: EnvSpec, config: BaselineConfig | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.config = config or BaselineConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.policies = nn.ModuleList(AgentPolicy(spec, i, self.config) for i in range(spec.n_agents))

    def log_probs(self, windows, lengths, actions) -> torch.Tensor:
        return torch.stack(
            [p.log_prob(p.dist(p.features(w, lengths)), a) for p, w, a in zip(self.policies, windows, actions)], -1
        )

    @torch.no_grad()
    def act(self, windows, lengths, states=None, generator=None, greedy: bool = True) -> TeamAct:
        actions, logps = [], []
        for p, w in zip(self.policies, windows):
            params = p.dist(p.features(w, lengths))
            a = p.mode(params) if greedy else p.sample(params, generator)
            actions.append(a)
            logps.append(p.log_prob(params, a))
        return TeamAct(actions, torch.stack(logps, -1), torch.zeros(len(lengths)))


def bc_loss(team: BcTeam, batch: dict) -> torch.Tensor:
    """Negative dataset log-likelihood summed over agents (each agent independent)."""
    return -team.log_probs(batch["windows"], batch["lengths"], batch["actions"]).mean(0).sum()


def ibc_train(dataset: OfflineDataset, team: BcTeam, steps: int, rng: np.random.Generator, callback=None) -> BcTeam:
    cfg = team.config
    opt = make_adam(team.parameters(), lr=cfg.lr)
    for step in range(1, steps + 1):
        batch = sample_batch(dataset, cfg.batch_size, rng, cfg.window, next_step=False)
        loss = bc_loss(team, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        adam_step(opt)
        if callback is not None:
            callback(step, {"bc": float(loss.detach())})
    return team


# ---------------------------------------------------------------------------
# MAIQL


def expectile_loss(diff, e: float = 0.7):
    """``|e - 1[diff < 0]| * diff**2`` elementwise."""
    diff = torch.as_tensor(diff)
    weight = torch.abs(e - (diff < 0).to(diff.dtype))
    return weight * diff**2


class CriticAgent(nn.Module):
    """Per-agent history encoder with twin Q heads and a state-value head."""

    def __init__(self, spec: EnvSpec, agent: int, config: BaselineConfig, n_actions: int):
        super().__init__()
        self.discrete = spec.discrete
        self.n_actions = n_actions
        self.encoder = AgentPolicy(spec, agent, config)
        # only the memory is used; drop the unused policy layers
        del self.encoder.trunk, self.encoder.head
        feat = self.encoder.feature_dim
        q_in = feat if spec.discrete else feat + n_actions
        q_out = n_actions if spec.discrete else 1
        self.q = nn.ModuleList(Mlp(MlpSpec(q_in, q_out, config.hidden)) for _ in range(2 if config.twin_q else 1))
        self.v = Mlp(MlpSpec(feat, 1, config.hidden))

    def features(self, windows, lengths):
        return self.encoder.features(windows, lengths)

    def q_values(self, feats, actions) -> torch.Tensor:
        """(n_twins, B) Q-values of the given actions."""
        if self.discrete:
            return torch.stack([q(feats).gather(-1, actions.long().unsqueeze(-1)).squeeze(-1) for q in self.q])
        x = torch.cat([feats, actions.reshape(len(actions), -1)], -1)
        return torch.stack([q(x).squeeze(-1) for q in self.q])

    def value(self, feats) -> torch.Tensor:
        return self.v(feats).squeeze(-1)


class Mixer(nn.Module):
    def __init__(self, state_dim: int, n_agents: int, hidden):
        super().__init__()
        self.net = Mlp(MlpSpec(state_dim, n_agents + 1, hidden))

    def forward(self, states):
        out = self.net(states)
        return out[..., :-1], out[..., -1]


class MaiqlTeam(nn.Module):
    """MAIQL learner; ``central=True`` gives centralised IQL over the joint spaces."""

    def __init__(self, spec: EnvSpec, config: BaselineConfig | None = None, seed: int = 0, central: bool = False):
        super().__init__()
        self.spec = spec
        self.config = config or BaselineConfig()
        self.central = central
        inner, n_joint = central_spec(spec) if central else (spec, None)
        self.inner = inner
        n_actions = [n_joint] if central else list(spec.action_sizes)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.policies = nn.ModuleList(_policy(inner, i, self.config, n_actions[i] if central else None) for i in range(inner.n_agents))
            self.critics = nn.ModuleList(CriticAgent(inner, i, self.config, n_actions[i]) for i in range(inner.n_agents))
            self.mix_q = Mixer(spec.state_dim, inner.n_agents, self.config.mixer_hidden)
            self.mix_v = Mixer(spec.state_dim, inner.n_agents, self.config.mixer_hidden)
        self.target_critics = copy.deepcopy(self.critics).requires_grad_(False)
        self.target_mix_q = copy.deepcopy(self.mix_q).requires_grad_(False)

    # views -------------------------------------------------------------------

    def view(self, windows, actions=None):
        if not self.central:
            return windows, actions
        return central_windows(self.spec, windows), None if actions is None else [join_actions(self.spec, actions)]

    def q_parameters(self):
        return [p for c in self.critics for m in (c.encoder, c.q) for p in m.parameters()] + list(self.mix_q.parameters())

    def v_parameters(self):
        return [p for c in self.critics for p in c.v.parameters()] + list(self.mix_v.parameters())

    # pieces used by the losses ---------------------------------------------

    def target_q(self, windows, lengths, states, actions):
        """Per-agent twin-min target Q ``(B, N)`` and target mixer ``(|w|, b)``."""
        with torch.no_grad():
            qs = torch.stack(
                [c.q_values(c.features(w, lengths), a).min(0).values for c, w, a in zip(self.target_critics, windows, actions)], -1
            )
            w, b = self.target_mix_q(states)
        return qs, w.abs(), b

    def values(self, windows, lengths, states, detach_features: bool = True):
        feats = [c.features(w, lengths) for c, w in zip(self.critics, windows)]
        if detach_features:
            feats = [f.detach() for f in feats]
        v_i = torch.stack([c.value(f) for c, f in zip(self.critics, feats)], -1)
        w, b = self.mix_v(states)
        return v_i, w.abs(), b

    @torch.no_grad()
    def act(self, windows, lengths, states=None, generator=None, greedy: bool = True) -> TeamAct:
        wins, _ = self.view(windows)
        actions, logps = [], []
        for p, w in zip(self.policies, wins):
            params = p.dist(p.features(w, lengths))
            a = p.mode(params) if greedy else p.sample(params, generator)
            actions.append(a)
            logps.append(p.log_prob(params, a))
        if self.central:
            actions = split_actions(self.spec, actions[0])
        return TeamAct(actions, torch.stack(logps, -1), torch.zeros(len(lengths)))


def maiql_q_loss(team: MaiqlTeam, batch: dict) -> torch.Tensor:
    """Bellman regression of every mixed twin Q toward ``r + gamma m V(s')``."""
    cfg = team.config
    wins, acts = team.view(batch["windows"], batch["actions"])
    next_wins, _ = team.view(batch["next_windows"])
    with torch.no_grad():
        v_i, w_v, b_v = team.values(next_wins, batch["next_lengths"], batch["next_states"])
        target = batch["rewards"] + cfg.gamma * batch["masks"] * qmix_value(w_v, b_v, v_i)
    q_i = torch.stack([c.q_values(c.features(w, batch["lengths"]), a) for c, w, a in zip(team.critics, wins, acts)], -1)
    w_q, b_q = team.mix_q(batch["states"])
    q_tot = qmix_value(w_q.expand_as(q_i), b_q.expand(q_i.shape[:-1]), q_i)  # (twins, B)
    return ((target - q_tot) ** 2).mean(-1).sum()


def maiql_v_loss(team: MaiqlTeam, batch: dict) -> torch.Tensor:
    """Expectile regression of the mixed V toward the mixed target Q."""
    wins, acts = team.view(batch["windows"], batch["actions"])
    q_hat, w_hat, b_hat = team.target_q(wins, batch["lengths"], batch["states"], acts)
    target = qmix_value(w_hat, b_hat, q_hat)
    v_i, w_v, b_v = team.values(wins, batch["lengths"], batch["states"])
    return expectile_loss(target - qmix_value(w_v, b_v, v_i), team.config.expectile).mean()


def awr_weights(b_hat_q, b_v, w_hat_q, q_hat, w_v, v, beta: float, clamp: float = 100.0):
    """``B(s) prod_i exp(beta (w_Q^i Q^i - w_V^i V^i))`` with ``B = exp(b_Q - b_V)``, clamped.

    Computed in log space; returns ``(weights, number clamped)``.
    """
    log_w = (b_hat_q - b_v) + beta * (w_hat_q * q_hat - w_v * v).sum(-1)
    limit = math.log(clamp)
    n_clamped = int((log_w > limit).sum())
    return torch.exp(log_w.clamp(max=limit)), n_clamped


def maiql_policy_loss(team: MaiqlTeam, batch: dict) -> tuple[torch.Tensor, int]:
    cfg = team.config
    wins, acts = team.view(batch["windows"], batch["actions"])
    with torch.no_grad():
        q_hat, w_hat, b_hat = team.target_q(wins, batch["lengths"], batch["states"], acts)
        v_i, w_v, b_v = team.values(wins, batch["lengths"], batch["states"])
        weights, n_clamped = awr_weights(b_hat, b_v, w_hat, q_hat, w_v, v_i, cfg.beta, cfg.weight_clamp)
    logp = torch.stack([p.log_prob(p.dist(p.features(w, batch["lengths"])), a) for p, w, a in zip(team.policies, wins, acts)], -1)
    return -(weights * logp.sum(-1)).mean(), n_clamped


class MaiqlTrainer:
    """Optimisers and the per-step update order: Q, V, policy, then Polyak."""

    def __init__(self, team: MaiqlTeam):
        self.team = team
        lr = team.config.lr
        self.q_opt = make_adam(team.q_parameters(), lr=lr)
        self.v_opt = make_adam(team.v_parameters(), lr=lr)
        self.pi_opt = make_adam(team.policies.parameters(), lr=lr)
        self.n_clamped = 0

    def step(self, batch: dict) -> dict:
        team = self.team
        q_loss = maiql_q_loss(team, batch)
        self.q_opt.zero_grad(set_to_none=True)
        q_loss.backward()
        adam_step(self.q_opt)

        v_loss = maiql_v_loss(team, batch)
        self.v_opt.zero_grad(set_to_none=True)
        v_loss.backward()
        adam_step(self.v_opt)

        pi_loss, clamped = maiql_policy_loss(team, batch)
        self.pi_opt.zero_grad(set_to_none=True)
        pi_loss.backward()
        adam_step(self.pi_opt)
        self.n_clamped += clamped

        polyak_update(team.critics, team.target_critics, team.config.tau)
        polyak_update(team.mix_q, team.target_mix_q, team.config.tau)
        return {"q": float(q_loss.detach()), "v": float(v_loss.detach()), "pi": float(pi_loss.detach()), "clamped": clamped}


def maiql_train(dataset: OfflineDataset, team: MaiqlTeam, steps: int, rng: np.random.Generator, callback=None) -> MaiqlTeam:
    trainer = MaiqlTrainer(team)
    for step in range(1, steps + 1):
        report = trainer.step(sample_batch(dataset, team.config.batch_size, rng, team.config.window))
        if callback is not None:
            callback(step, report)
    return team
