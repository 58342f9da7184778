"""Ensemble dynamics/reward/termination model with epistemic uncertainty.

Each member maps ``(s, a)`` to a diagonal Gaussian over the state change, a
Gaussian over the reward and a Bernoulli termination probability. Inputs and
regression targets are standardised with training-set statistics; every
prediction handed out by :func:`model_step` is in original units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import DatasetStats, OfflineDataset, compute_stats, split
from .errors import ConfigError, NumericError
from .nn import EnsembleMlp, MlpSpec, adam_step, bernoulli_bce, clamp_log_std, gaussian_nll, make_adam

log = logging.getLogger(__name__)


@dataclass
class WorldModelConfig:
    hidden: tuple[int, ...] = (1024, 1024, 1024, 1024)
    n_members: int = 7
    n_elites: int = 5
    lr: float = 3e-5
    batch_size: int = 256
    steps: int = 3000
    val_fraction: float = 0.1
    # the rollout threshold defaults to this multiple of a validation quantile of eps_g
    l_eps_multiplier: float = 5.0
    l_eps_quantile: float = 0.95
    # project sampled next states onto the nearest one-hot (discrete-state envs)
    project_one_hot: bool | None = None
    max_attempts: int = 3

    def __post_init__(self):
        if self.n_elites > self.n_members or self.n_elites < 1:
            raise ConfigError("need 1 <= n_elites <= n_members")


def coordgame_wm_config(**kw) -> WorldModelConfig:
    return WorldModelConfig(**{"hidden": (128, 128), "lr": 3e-3, "steps": 1500, **kw})


def reacher_wm_config(**kw) -> WorldModelConfig:
    return WorldModelConfig(**{"hidden": (1024,) * 4, "lr": 3e-5, **kw})


@dataclass
class ModelPrediction:
    next_state: torch.Tensor  # (B, S)
    reward: torch.Tensor  # (B,)
    mask: torch.Tensor  # (B,) 1 = alive, 0 = absorbing
    eps_r: torch.Tensor  # (B,)
    eps_g: torch.Tensor  # (B,)


def split_outputs(out: torch.Tensor, state_dim: int):
    """Raw member outputs -> (standardised mean, log-std, termination probability)."""
    d = state_dim + 1
    return out[..., :d], clamp_log_std(out[..., d : 2 * d]), torch.sigmoid(out[..., -1])


# ---------------------------------------------------------------------------
# uncertainty measures


def epistemic_reward_uncertainty(rewards) -> torch.Tensor:
    """Unbiased variance of member reward predictions along axis 0."""
    r = torch.as_tensor(rewards)
    if r.shape[0] < 2:
        raise ConfigError("need at least two ensemble members")
    return ((r - r.mean(0)) ** 2).sum(0) / (r.shape[0] - 1)


def epistemic_general_uncertainty(predictions) -> torch.Tensor:
    """Frobenius norm of the ensemble covariance of ``[s', r]`` predictions.

    ``predictions`` has shape ``(N, D)`` or ``(N, B, D)``. Uses the identity
    ``||C^T C||_F = ||C C^T||_F`` so the cost is ``N^2 D`` rather than ``N D^2``.
    """
    x = torch.as_tensor(predictions)
    if x.shape[0] < 2:
        raise ConfigError("need at least two ensemble members")
    if x.shape[-1] == 1:
        # a 1x1 covariance: its norm is the variance itself, computed without the square root round trip
        return epistemic_reward_uncertainty(x[..., 0])
    squeeze = x.dim() == 2
    if squeeze:
        x = x[:, None, :]
    c = x - x.mean(0, keepdim=True)
    gram = torch.einsum("nbd,mbd->bnm", c, c)
    out = torch.sqrt((gram**2).sum((-1, -2))) / (x.shape[0] - 1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# ensemble


class WorldModelEnsemble(nn.Module):
    def __init__(self, env_id: str, obs_mode: str, state_dim: int, action_dim: int, config: WorldModelConfig, stats: DatasetStats, project_one_hot: bool):
        super().__init__()
        self.env_id = env_id
        self.obs_mode = obs_mode
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.stats = stats
        self.project_one_hot = project_one_hot
        self.net_spec = MlpSpec(state_dim + action_dim, 2 * (state_dim + 1) + 1, tuple(config.hidden))
        self.net = EnsembleMlp(config.n_members, self.net_spec)
        self.elites: list[int] = list(range(config.n_elites))
        self.l_eps = math.inf
        self.val_mse: list[float] = []
        d_in, d_out = state_dim + action_dim, state_dim + 1
        self.register_buffer("in_mean", torch.zeros(d_in))
        self.register_buffer("in_std", torch.ones(d_in))
        self.register_buffer("out_mean", torch.zeros(d_out))
        self.register_buffer("out_std", torch.ones(d_out))
        self.register_buffer("state_lo", torch.as_tensor(stats.state_min, dtype=torch.float32))
        self.register_buffer("state_hi", torch.as_tensor(stats.state_max, dtype=torch.float32))

    @property
    def reward_bounds(self) -> tuple[float, float]:
        return self.stats.reward_min, self.stats.reward_max

    def _inputs(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return (torch.cat([s, a], -1) - self.in_mean) / self.in_std

    def member_outputs(self, s: torch.Tensor, a: torch.Tensor, members=None):
        """Stacked outputs in original units for the given members (default: elites).

        Returns ``(mean_next_state, std_next_state, mean_reward, std_reward, p_done)``
        each with a leading member axis.
        """
        idx = self.elites if members is None else members
        mu, log_std, p = split_outputs(self.net(self._inputs(s, a), idx), self.state_dim)
        mu = mu * self.out_std + self.out_mean
        std = torch.exp(log_std) * self.out_std
        next_mu = s.unsqueeze(0) + mu[..., :-1]
        return next_mu, std[..., :-1], mu[..., -1], std[..., -1], p

    @torch.no_grad()
    def uncertainties(self, s: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Uncapped ``(eps_r, eps_g)`` over the elites."""
        next_mu, _, r_mu, _, _ = self.member_outputs(s, a)
        eps_r = epistemic_reward_uncertainty(r_mu)
        eps_g = epistemic_general_uncertainty(torch.cat([next_mu, r_mu.unsqueeze(-1)], -1))
        return eps_r, eps_g


def model_step(ensemble: WorldModelEnsemble, s: torch.Tensor, a: torch.Tensor, generator: torch.Generator, l_eps: float | None = None) -> ModelPrediction:
    """One batched world-model step.

    ``s`` is ``(B, S)``, ``a`` the encoded joint action ``(B, A)``. The next
    state comes from a uniformly chosen elite's Gaussian; reward is the elite
    mean; the mask is 0 when a strict majority of elites predicts termination.
    """
    l_eps = ensemble.l_eps if l_eps is None else l_eps
    with torch.no_grad():
        next_mu, next_std, r_mu, _, p = ensemble.member_outputs(s, a)
        n, b = r_mu.shape
        pick = torch.randint(0, n, (b,), generator=generator)
        rows = torch.arange(b)
        noise = torch.randn(next_mu.shape[1:], generator=generator, dtype=next_mu.dtype)
        next_state = next_mu[pick, rows] + next_std[pick, rows] * noise
        next_state = torch.minimum(torch.maximum(next_state, ensemble.state_lo), ensemble.state_hi)
        if ensemble.project_one_hot:
            next_state = torch.nn.functional.one_hot(next_state.argmax(-1), next_state.shape[-1]).to(next_state.dtype)
        lo, hi = ensemble.reward_bounds
        reward = r_mu.mean(0).clamp(lo, hi)
        votes = (p > 0.5).sum(0)
        mask = (2 * votes <= n).to(next_state.dtype)
        eps_r = epistemic_reward_uncertainty(r_mu)
        eps_g = epistemic_general_uncertainty(torch.cat([next_mu, r_mu.unsqueeze(-1)], -1))
        if math.isfinite(l_eps):
            eps_r = eps_r.clamp(max=l_eps)
            eps_g = eps_g.clamp(max=l_eps)
    return ModelPrediction(next_state, reward, mask, eps_r, eps_g)


# ---------------------------------------------------------------------------
# training


def _tensors(ds: OfflineDataset):
    f = ds.flat
    s = torch.as_tensor(f["states"], dtype=torch.float32)
    a = torch.as_tensor(f["joint_action"], dtype=torch.float32)
    target = torch.as_tensor(
        np.concatenate([f["next_states"] - f["states"], f["rewards"][:, None]], 1), dtype=torch.float32
    )
    done = torch.as_tensor(f["dones"], dtype=torch.float32)
    return s, a, target, done


def _fit_members(ens: WorldModelEnsemble, data, cfg: WorldModelConfig, seeds) -> tuple[EnsembleMlp, np.ndarray]:
    """Train ``len(seeds)`` fresh members together; also returns per-member divergence flags.

    Members share nothing but the batched matmul: each has its own init seed,
    its own minibatch stream and its own gradient-norm clip.
    """
    s, a, target, done = data
    n = len(seeds)
    net = EnsembleMlp(n, ens.net_spec, seeds)
    streams = [np.random.default_rng(int(sd)) for sd in seeds]
    opt = make_adam(net.parameters(), lr=cfg.lr)
    x_all = ens._inputs(s, a)
    y_all = (target - ens.out_mean) / ens.out_std
    diverged = np.zeros(n, dtype=bool)
    for step in range(cfg.steps):
        idx = torch.as_tensor(np.stack([g.integers(0, len(s), size=cfg.batch_size) for g in streams]))
        mu, log_std, p = split_outputs(net(x_all[idx]), ens.state_dim)
        finite = torch.isfinite(mu).all(-1).all(-1) & torch.isfinite(log_std).all(-1).all(-1)
        newly = ~finite.numpy() & ~diverged
        if newly.any():
            log.warning("world-model members %s diverged at step %d", np.flatnonzero(newly).tolist(), step)
            diverged |= newly
        alive = torch.as_tensor(np.flatnonzero(~diverged))
        if len(alive) == 0:
            break
        nll = gaussian_nll(mu[alive], log_std[alive], y_all[idx[alive]]).mean(-1)
        bce = bernoulli_bce(p[alive], done[idx[alive]]).mean(-1)
        loss = (nll + bce).sum()
        opt.zero_grad()
        loss.backward()
        net.clip_member_grads(1.0)
        for prm in net.parameters():
            prm.grad[torch.as_tensor(diverged)] = 0.0
        adam_step(opt)
    return net, diverged


@torch.no_grad()
def validation_mse(ens: WorldModelEnsemble, m: int, val_data) -> float:
    s, a, target, _ = val_data
    next_mu, _, r_mu, _, _ = ens.member_outputs(s, a, members=[m])
    pred = torch.cat([next_mu[0] - s, r_mu[0].unsqueeze(-1)], -1)
    return float(((pred - target) ** 2).mean())


def train_ensemble(dataset: OfflineDataset, config: WorldModelConfig | None = None, seed: int = 0, validation: OfflineDataset | None = None) -> WorldModelEnsemble:
    """Fit ``n_members`` models independently, keep the ``n_elites`` best on validation MSE.

    If ``validation`` is omitted, ``dataset`` is split at trajectory level.
    Clipping boxes always come from train and validation together.
    """
    cfg = config or WorldModelConfig()
    rng = np.random.default_rng(seed)
    if validation is None:
        train, validation = split(dataset, cfg.val_fraction, rng)
    else:
        train = dataset
    spec = dataset.spec
    full = OfflineDataset(dict(train.metadata), train.trajectories + validation.trajectories)
    stats = compute_stats(full)
    project = spec.discrete and spec.env_id == "coordgame-v0" if cfg.project_one_hot is None else cfg.project_one_hot
    data = _tensors(train)
    val_data = _tensors(validation)
    ens = WorldModelEnsemble(spec.env_id, spec.obs_mode, spec.state_dim, data[1].shape[1], cfg, stats, project)
    x = torch.cat([data[0], data[1]], -1)
    ens.in_mean.copy_(x.mean(0))
    ens.in_std.copy_(x.std(0).clamp(min=1e-6))
    ens.out_mean.copy_(data[2].mean(0))
    ens.out_std.copy_(data[2].std(0).clamp(min=1e-6))

    seeds = rng.integers(0, 2**31 - 1, size=(cfg.max_attempts, cfg.n_members))
    pending = np.arange(cfg.n_members)
    for attempt in range(cfg.max_attempts):
        net, diverged = _fit_members(ens, data, cfg, seeds[attempt, pending])
        with torch.no_grad():
            for k, m in enumerate(pending):
                if not diverged[k]:
                    for dst, src in zip(ens.net.parameters(), net.parameters()):
                        dst[m] = src[k]
        pending = pending[diverged]
        if len(pending) == 0:
            break
    else:
        raise NumericError(f"members {pending.tolist()} diverged {cfg.max_attempts} times")

    ens.val_mse = [validation_mse(ens, m, val_data) for m in range(cfg.n_members)]
    ens.elites = sorted(int(i) for i in np.argsort(ens.val_mse, kind="stable")[: cfg.n_elites])
    _, eps_g = ens.uncertainties(val_data[0], val_data[1])
    q = float(torch.quantile(eps_g.double(), cfg.l_eps_quantile))
    ens.l_eps = max(cfg.l_eps_multiplier * q, 1e-8)
    ens.eval()
    return ens


# ---------------------------------------------------------------------------
# checkpoints


def save_ensemble(ens: WorldModelEnsemble, path) -> None:
    header = {
        "env_id": ens.env_id,
        "obs_mode": ens.obs_mode,
        "state_dim": ens.state_dim,
        "action_dim": ens.action_dim,
        "n_members": ens.net.n_members,
        "elites": list(ens.elites),
        "l_eps": ens.l_eps,
        "val_mse": list(ens.val_mse),
        "project_one_hot": ens.project_one_hot,
        "config": asdict(ens.config),
        "stats": ens.stats.to_dict(),
    }
    torch.save({"header": header, "state": ens.state_dict()}, Path(path))


def load_ensemble(path) -> WorldModelEnsemble:
    blob = torch.load(Path(path), weights_only=False)
    h = blob["header"]
    cfg_dict = dict(h["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    ens = WorldModelEnsemble(
        h["env_id"], h["obs_mode"], h["state_dim"], h["action_dim"], WorldModelConfig(**cfg_dict),
        DatasetStats.from_dict(h["stats"]), h["project_one_hot"],
    )
    ens.load_state_dict(blob["state"])
    ens.elites = list(h["elites"])
    ens.l_eps = float(h["l_eps"])
    ens.val_mse = list(h["val_mse"])
    ens.eval()
    return ens
