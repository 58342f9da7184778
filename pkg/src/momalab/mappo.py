"""Multi-agent PPO on synthetic rollouts.

Each agent owns a history encoder, a policy head and a per-agent value head;
the team value mixes the per-agent values with state-conditioned non-negative
weights (QMIX). Training uses timeout-aware GAE, the clipped surrogate, an
adaptive entropy bonus and a penalty on out-of-bound continuous actions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import HISTORY_WINDOW, entry_dim
from .envs import EnvSpec
from .errors import ConfigError, InputError, NumericError
from .nn import AttentionMemory, CategoricalHead, GaussianHead, Mlp, MlpSpec, adam_step, clip_grad_norm, make_adam


@dataclass
class PpoConfig:
    clip: float = 0.2
    gae_lambda: float = 0.98
    gamma: float = 0.99
    epochs: int = 5
    transitions_per_update: int = 2000
    minibatch_size: int = 256
    lr: float = 5e-5
    memory_lr: float = 1e-4
    critic_coef: float = 0.5
    entropy_coef: float = 0.001
    entropy_target: float = -4.0
    action_penalty_coef: float = 1.0
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 128
    window: int = HISTORY_WINDOW
    mixer_hidden: tuple[int, ...] = (64,)
    init_alpha: float = 0.0
    lr_schedule: str = "constant"  # or "linear": anneal both rates to zero over the run

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.mixer_hidden = tuple(self.mixer_hidden)
        positive = ("clip", "gamma", "epochs", "transitions_per_update", "minibatch_size", "lr", "memory_lr", "max_grad_norm", "embed_dim", "window")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0 or self.gamma > 1.0:
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if min(self.critic_coef, self.entropy_coef, self.action_penalty_coef, self.init_alpha) < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError("lr_schedule must be 'constant' or 'linear'")


def coordgame_ppo_config(**kw) -> PpoConfig:
    return PpoConfig(**{"entropy_target": 0.3, **kw})


def reacher_ppo_config(**kw) -> PpoConfig:
    return PpoConfig(**{"entropy_target": -4.0, **kw})


# ---------------------------------------------------------------------------
# networks


class AgentPolicy(nn.Module):
    """History-conditioned decentralised policy for one agent.

    The embedding of the history is concatenated with the newest entry (the
    current observation and previous action) before the policy MLP.
    """

    def __init__(self, spec: EnvSpec, agent: int, config: PpoConfig):
        super().__init__()
        self.agent = agent
        self.discrete = spec.discrete
        self.entry_dim = entry_dim(spec, agent)
        self.feature_dim = config.embed_dim + self.entry_dim
        self.memory = AttentionMemory(self.entry_dim, config.embed_dim, config.window)
        self.trunk = Mlp(MlpSpec(self.feature_dim, config.hidden[-1], config.hidden[:-1]))
        n = spec.action_sizes[agent]
        self.head = CategoricalHead(config.hidden[-1], n) if spec.discrete else GaussianHead(config.hidden[-1], n)

    def features(self, windows: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        emb = self.memory(windows, lengths)
        last = (lengths.long() - 1).clamp(min=0)
        newest = windows[torch.arange(len(windows)), last]
        return torch.cat([emb, newest], -1)

    def dist(self, feats: torch.Tensor):
        return self.head(torch.relu(self.trunk(feats)))

    def log_prob(self, params, actions: torch.Tensor) -> torch.Tensor:
        return self.head.log_prob(params, actions)

    def sample(self, params, generator: torch.Generator) -> torch.Tensor:
        return self.head.sample(params, generator)

    def mode(self, params) -> torch.Tensor:
        return self.head.mode(params)


class TeamValue(nn.Module):
    """Per-agent value heads and a QMIX mixer over the global state."""

    def __init__(self, spec: EnvSpec, feature_dims, config: PpoConfig):
        super().__init__()
        self.n_agents = spec.n_agents
        self.heads = nn.ModuleList(Mlp(MlpSpec(d, 1, config.hidden)) for d in feature_dims)
        self.mixer = Mlp(MlpSpec(spec.state_dim, spec.n_agents + 1, config.mixer_hidden))

    def agent_values(self, feats) -> torch.Tensor:
        return torch.stack([h(f).squeeze(-1) for h, f in zip(self.heads, feats)], -1)

    def mixing(self, states: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.mixer(states)
        return out[..., :-1], out[..., -1]

    def forward(self, states: torch.Tensor, feats) -> tuple[torch.Tensor, torch.Tensor]:
        v_i = self.agent_values(feats)
        w, b = self.mixing(states)
        return qmix_value(w, b, v_i), v_i


def qmix_value(weights: torch.Tensor, bias: torch.Tensor, agent_values: torch.Tensor) -> torch.Tensor:
    """V = sum_i |w_i| V_i + b over the trailing agent axis."""
    if weights.shape != agent_values.shape:
        raise InputError("mixing weights and agent values disagree in shape")
    return (weights.abs() * agent_values).sum(-1) + bias


@dataclass
class TeamAct:
    actions: list[torch.Tensor]  # per agent: (B,) indices or (B, d) raw Gaussian samples
    log_probs: torch.Tensor  # (B, N)
    values: torch.Tensor  # (B,) mixed value


class Team(nn.Module):
    def __init__(self, spec: EnvSpec, config: PpoConfig | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.config = config or PpoConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.policies = nn.ModuleList(AgentPolicy(spec, i, self.config) for i in range(spec.n_agents))
            self.value = TeamValue(spec, [p.feature_dim for p in self.policies], self.config)

    def features(self, windows, lengths):
        return [p.features(w, lengths) for p, w in zip(self.policies, windows)]

    @torch.no_grad()
    def act(self, windows, lengths, states, generator: torch.Generator | None = None, greedy: bool = False) -> TeamAct:
        feats = self.features(windows, lengths)
        actions, logps = [], []
        for p, f in zip(self.policies, feats):
            params = p.dist(f)
            a = p.mode(params) if greedy else p.sample(params, generator)
            actions.append(a)
            logps.append(p.log_prob(params, a))
        values, _ = self.value(states, feats)
        return TeamAct(actions, torch.stack(logps, -1), values)

    @torch.no_grad()
    def values(self, windows, lengths, states) -> torch.Tensor:
        return self.value(states, self.features(windows, lengths))[0]

    def evaluate(self, windows, lengths, states, actions):
        """Differentiable ``(log_probs (B, N), mixed value (B,))`` for stored actions."""
        feats = self.features(windows, lengths)
        logps = torch.stack([p.log_prob(p.dist(f), a) for p, f, a in zip(self.policies, feats, actions)], -1)
        values, _ = self.value(states, feats)
        return logps, values

    def param_groups(self) -> list[dict]:
        memory = [q for p in self.policies for q in p.memory.parameters()]
        mem_ids = {id(q) for q in memory}
        rest = [q for q in self.parameters() if id(q) not in mem_ids]
        return [{"params": memory, "lr": self.config.memory_lr}, {"params": rest, "lr": self.config.lr}]


def greedy_action(policy: AgentPolicy, windows: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Distribution mode: Gaussian mean or the lowest-index argmax of the logits."""
    with torch.no_grad():
        return policy.mode(policy.dist(policy.features(windows, lengths)))


def encode_joint_action(spec: EnvSpec, actions) -> torch.Tensor:
    """Per-agent team actions -> ``(B, sum d_i)`` model/history encoding."""
    parts = []
    for i, a in enumerate(actions):
        if spec.discrete:
            parts.append(nn.functional.one_hot(a.long(), spec.action_sizes[i]).to(torch.float32))
        else:
            parts.append(a.reshape(len(a), -1).clamp(-1.0, 1.0).to(torch.float32))
    return torch.cat(parts, -1)


# ---------------------------------------------------------------------------
# losses


def gae_with_timeouts(rewards, values, next_values, masks, timeout_masks, gamma: float = 0.99, lam: float = 0.98):
    """Timeout-aware GAE; returns ``(returns, advantages)``.

    ``masks`` is 0 at absorbing states, ``timeout_masks`` is 0 where a
    rollout was truncated. A timeout stops accumulation and bootstraps from
    the next-state value.
    """
    seqs = [torch.as_tensor(x, dtype=torch.float64) for x in (rewards, values, next_values, masks, timeout_masks)]
    n = len(seqs[0])
    if any(x.dim() != 1 or len(x) != n for x in seqs):
        raise InputError("gae_with_timeouts: sequences must be 1-d and of equal length")
    r, v, nv, m, z = (x.tolist() for x in seqs)
    returns = [0.0] * n
    advantages = [0.0] * n
    if n == 0:
        return torch.zeros(0, dtype=torch.float64), torch.zeros(0, dtype=torch.float64)
    running_return = nv[-1] * m[-1]
    running_adv = 0.0
    for t in reversed(range(n)):
        running_return = r[t] + gamma * m[t] * (running_return * z[t] + (1.0 - z[t]) * nv[t] * m[t])
        returns[t] = running_return
        delta = r[t] + gamma * nv[t] * m[t] - v[t]
        running_adv = delta + gamma * lam * running_adv * m[t] * z[t]
        advantages[t] = running_adv
    return torch.tensor(returns, dtype=torch.float64), torch.tensor(advantages, dtype=torch.float64)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float = 0.2) -> torch.Tensor:
    """Mean of ``-min(rho A, clip(rho) A)``."""
    clipped = ratio.clamp(1.0 - clip, 1.0 + clip)
    return -torch.minimum(ratio * advantages, clipped * advantages).mean()


def entropy_estimate(ratio: torch.Tensor, clipped_ratio: torch.Tensor, new_log_probs: torch.Tensor) -> torch.Tensor:
    surrogate = -(ratio * new_log_probs).mean(0)
    clipped = -(clipped_ratio * new_log_probs).mean(0)
    return torch.minimum(surrogate, clipped)


def entropy_bonus(ratio, clipped_ratio, new_log_probs, alpha: float, coeff: float, target: float) -> tuple[torch.Tensor, float]:
    """Adaptive entropy bonus; returns ``(loss term, updated alpha)``.

    The entropy is estimated from samples of the old policy, importance
    weighted by ``ratio``. Per-agent estimates (trailing axis) are averaged.
    """
    ent = entropy_estimate(ratio, clipped_ratio, new_log_probs).mean()
    new_alpha = max(0.0, alpha + coeff * (target - float(ent.detach())))
    return -ent * new_alpha, new_alpha


def action_penalty(actions: torch.Tensor, ratio: torch.Tensor, clipped_ratio: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Importance-weighted squared excess of ``|a|`` over 1 (``actions`` is ``(B, d)``)."""
    delta = 1.0 - actions.abs()
    err = ((delta < 0.0).to(actions.dtype) * delta**2).sum(-1)
    return coeff * torch.maximum((ratio * err).mean(), (clipped_ratio * err).mean())


@dataclass
class EntropyAlpha:
    value: float = 0.0

    def __post_init__(self):
        if self.value < 0:
            raise ConfigError("entropy alpha must be non-negative")


def ppo_loss(team: Team, batch: dict, config: PpoConfig, alpha: EntropyAlpha):
    """Total minibatch loss and its components; updates ``alpha`` in place."""
    new_logp, values = team.evaluate(batch["windows"], batch["lengths"], batch["states"], batch["actions"])
    ratio = torch.exp(new_logp - batch["log_probs"])
    clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip)
    adv = batch["advantages"].unsqueeze(-1)
    actor = -torch.minimum(ratio * adv, clipped * adv).mean(0).sum()
    critic = config.critic_coef * (0.5 * (values - batch["returns"]) ** 2).mean()
    bonus, alpha.value = entropy_bonus(ratio, clipped, new_logp, alpha.value, config.entropy_coef, config.entropy_target)
    penalty = torch.zeros(())
    if not team.spec.discrete:
        for i, a in enumerate(batch["actions"]):
            penalty = penalty + action_penalty(a, ratio[:, i], clipped[:, i], config.action_penalty_coef)
    total = actor + critic + bonus + penalty
    parts = {
        "actor": float(actor.detach()),
        "critic": float(critic.detach()),
        "entropy": float(entropy_estimate(ratio, clipped, new_logp).mean().detach()),
        "penalty": float(penalty.detach()),
        "clip_frac": float(((ratio - 1.0).abs() > config.clip).float().mean()),
    }
    return total, parts


def ppo_update(buffer, team: Team, optimizer: torch.optim.Optimizer, config: PpoConfig, alpha: EntropyAlpha, generator: torch.Generator) -> dict:
    """Several epochs of minibatch PPO over one rollout buffer; returns mean diagnostics."""
    returns, adv = gae_with_timeouts(buffer.rewards, buffer.values, buffer.next_values, buffer.masks, buffer.timeouts, config.gamma, config.gae_lambda)
    returns = returns.to(torch.float32)
    adv = adv.to(torch.float32)
    if config.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buffer)
    params = list(team.parameters())
    sums: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start : start + config.minibatch_size]
            batch = buffer.minibatch(idx)
            batch["returns"] = returns[idx]
            batch["advantages"] = adv[idx]
            loss, parts = ppo_loss(team, batch, config, alpha)
            if not math.isfinite(float(loss.detach())):
                raise NumericError("non-finite PPO loss; update aborted")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clip_grad_norm(params, config.max_grad_norm)
            adam_step(optimizer)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    report = {k: v / max(count, 1) for k, v in sums.items()}
    report["alpha"] = alpha.value
    return report


def make_optimizer(team: Team) -> torch.optim.Adam:
    return make_adam(team.param_groups(), lr=team.config.lr)


def set_lr_fraction(optimizer: torch.optim.Optimizer, team: Team, fraction: float) -> None:
    """Scale the memory and main learning rates to ``fraction`` of their configured values."""
    for group, base in zip(optimizer.param_groups, (team.config.memory_lr, team.config.lr)):
        group["lr"] = base * fraction


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def save_team(team: nn.Module, path, algorithm: str = "moma-ppo") -> None:
    spec = team.spec
    header = {
        "algorithm": algorithm,
        "env_id": spec.env_id,
        "obs_mode": spec.obs_mode,
        "obs_dims": list(spec.obs_dims),
        "action_sizes": list(spec.action_sizes),
        "config": asdict(team.config),
        "config_hash": config_hash(team.config),
    }
    torch.save({"header": header, "state_dict": team.state_dict()}, path)


def load_team(path, expected_algorithm: str = "moma-ppo") -> Team:
    from .envs import make_env

    blob = torch.load(path, weights_only=False)
    header = blob["header"]
    if header["algorithm"] != expected_algorithm:
        raise ConfigError(f"checkpoint holds {header['algorithm']!r}, expected {expected_algorithm!r}")
    spec = make_env(header["env_id"], header["obs_mode"]).spec
    if list(spec.obs_dims) != header["obs_dims"] or list(spec.action_sizes) != header["action_sizes"]:
        raise ConfigError("checkpoint agent dims disagree with the environment")
    team = Team(spec, PpoConfig(**header["config"]))
    team.load_state_dict(blob["state_dict"])
    return team
