"""Function approximators and optimisation primitives shared by every learner.

Everything runs on CPU through torch. Forward passes are deterministic given
parameters and inputs; all sampling takes an explicit ``torch.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
PROB_EPS = 1e-7
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"

    def __post_init__(self):
        dims = (self.input_dim, self.output_dim, *self.hidden)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))


_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
}


def mlp_forward(params: Sequence[torch.Tensor], spec: MlpSpec, x: torch.Tensor) -> torch.Tensor:
    """Evaluate an MLP given a flat ``[W0, b0, W1, b1, ...]`` parameter list.

    Weights are stored ``(out, in)`` as in ``nn.Linear``. The activation is
    applied between layers, never after the output layer.
    """
    if x.shape[-1] != spec.input_dim:
        raise ConfigError(f"MLP expects input dim {spec.input_dim}, got {x.shape[-1]}")
    n_layers = len(spec.layer_dims)
    if len(params) != 2 * n_layers:
        raise ConfigError(f"expected {2 * n_layers} parameter tensors, got {len(params)}")
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(n_layers):
        h = F.linear(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in spec.layer_dims)

    def flat_params(self) -> list[torch.Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.flat_params(), self.spec, x)


def mlp(input_dim: int, output_dim: int, hidden: Sequence[int] = (256, 256)) -> Mlp:
    return Mlp(MlpSpec(int(input_dim), int(output_dim), tuple(int(h) for h in hidden)))


class EnsembleMlp(nn.Module):
    """``n_members`` independent MLPs evaluated together with batched matmuls.

    Weights are stored ``(M, in, out)``. Member ``m`` is initialised from its own
    seed with the same uniform(+-1/sqrt(fan_in)) scheme as ``nn.Linear``.
    """

    def __init__(self, n_members: int, spec: MlpSpec, seeds: Sequence[int] | None = None):
        super().__init__()
        self.spec = spec
        self.n_members = n_members
        self.weights = nn.ParameterList(torch.empty(n_members, i, o) for i, o in spec.layer_dims)
        self.biases = nn.ParameterList(torch.empty(n_members, o) for _, o in spec.layer_dims)
        seeds = list(range(n_members)) if seeds is None else list(seeds)
        for m, seed in enumerate(seeds):
            self.reset_member(m, int(seed))

    @torch.no_grad()
    def reset_member(self, m: int, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for w, b in zip(self.weights, self.biases):
            bound = 1.0 / math.sqrt(w.shape[1])
            w[m] = (torch.rand(w.shape[1:], generator=gen, dtype=w.dtype) * 2 - 1) * bound
            b[m] = (torch.rand(b.shape[1:], generator=gen, dtype=b.dtype) * 2 - 1) * bound

    def member_params(self, m: int) -> list[torch.Tensor]:
        """Flat ``[W0, b0, ...]`` in ``nn.Linear`` layout for :func:`mlp_forward`."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w[m].T, b[m]]
        return out

    def forward(self, x: torch.Tensor, members: Sequence[int] | None = None) -> torch.Tensor:
        """``x`` is ``(B, in)`` (shared) or ``(M', B, in)``; returns ``(M', B, out)``."""
        if x.shape[-1] != self.spec.input_dim:
            raise ConfigError(f"MLP expects input dim {self.spec.input_dim}, got {x.shape[-1]}")
        idx = None if members is None else torch.as_tensor(list(members), dtype=torch.long)
        n = self.n_members if idx is None else len(idx)
        h = x.unsqueeze(0).expand(n, *x.shape) if x.dim() == 2 else x
        act = _ACTIVATIONS[self.spec.activation]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if idx is not None:
                w, b = w[idx], b[idx]
            h = torch.baddbmm(b.unsqueeze(1), h, w)
            if k < last:
                h = act(h)
        return h

    def clip_member_grads(self, max_norm: float = 1.0) -> torch.Tensor:
        """Per-member gradient-norm clipping; returns the per-member factors."""
        params = [p for p in self.parameters() if p.grad is not None]
        sq = sum((p.grad.reshape(self.n_members, -1) ** 2).sum(1) for p in params)
        norms = torch.sqrt(sq)
        factor = torch.where(norms > max_norm, max_norm / norms, torch.ones_like(norms))
        for p in params:
            p.grad.mul_(factor.reshape(-1, *([1] * (p.dim() - 1))))
        return factor


# ---------------------------------------------------------------------------
# losses and log-densities


def _require_finite(*tensors: torch.Tensor) -> None:
    # a sum is non-finite iff some element is (or the sum overflows, also worth flagging)
    if not math.isfinite(float(sum(t.detach().sum() for t in tensors))):
        raise NumericError("non-finite input to loss")


def gaussian_nll(mu: torch.Tensor, log_sigma: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian negative log-likelihood summed over the last axis."""
    _require_finite(mu, log_sigma, target)
    if mu.shape != log_sigma.shape or mu.shape != target.shape:
        raise ConfigError(f"shape mismatch {tuple(mu.shape)} / {tuple(log_sigma.shape)} / {tuple(target.shape)}")
    inv_var = torch.exp(-2.0 * log_sigma)
    per_dim = HALF_LOG_2PI + log_sigma + 0.5 * (target - mu) ** 2 * inv_var
    return per_dim.sum(-1)


def gaussian_log_prob(x: torch.Tensor, mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    return -(HALF_LOG_2PI + log_sigma + 0.5 * ((x - mu) * torch.exp(-log_sigma)) ** 2).sum(-1)


def bernoulli_bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped away from 0 and 1."""
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def clamp_log_std(log_std: torch.Tensor) -> torch.Tensor:
    return log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


# ---------------------------------------------------------------------------
# distribution heads


class GaussianHead(nn.Module):
    """Diagonal Gaussian with state-dependent log-std."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.dim = dim
        self.linear = nn.Linear(in_dim, 2 * dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, log_std = self.linear(x).chunk(2, dim=-1)
        return mu, clamp_log_std(log_std)

    @staticmethod
    def sample(params, generator: torch.Generator) -> torch.Tensor:
        mu, log_std = params
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(log_std) * noise

    @staticmethod
    def log_prob(params, action: torch.Tensor) -> torch.Tensor:
        mu, log_std = params
        return gaussian_log_prob(action, mu, log_std)

    @staticmethod
    def mode(params) -> torch.Tensor:
        return params[0]


class CategoricalHead(nn.Module):
    def __init__(self, in_dim: int, n: int):
        super().__init__()
        self.n = n
        self.linear = nn.Linear(in_dim, n)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.linear(x), dim=-1)

    @staticmethod
    def sample(log_probs: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        flat = log_probs.reshape(-1, log_probs.shape[-1]).exp()
        idx = torch.multinomial(flat, 1, generator=generator)
        return idx.reshape(log_probs.shape[:-1])

    @staticmethod
    def log_prob(log_probs: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return log_probs.gather(-1, action.long().unsqueeze(-1)).squeeze(-1)

    @staticmethod
    def mode(log_probs: torch.Tensor) -> torch.Tensor:
        # first maximal index, so exact ties go to the lowest action
        best = log_probs.max(dim=-1, keepdim=True).values
        hits = (log_probs == best).to(torch.int64)
        return hits.argmax(dim=-1)


# ---------------------------------------------------------------------------
# attention memory


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(pos * freq)
    enc[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return enc


class AttentionMemory(nn.Module):
    """Encode an observation-action history into a fixed-size embedding.

    Entries are projected to ``embed_dim``, tagged with a sinusoidal encoding of
    their age (0 = most recent), passed through one single-head self-attention
    layer with a residual connection and layer norm, then pooled by soft
    attention against a learned query. Windows are left-aligned: entry
    ``lengths[b] - 1`` is the newest, later slots are padding and are masked.
    A zero-length history maps to a learned start embedding.
    """

    def __init__(self, entry_dim: int, embed_dim: int = 128, window: int = 10):
        super().__init__()
        if entry_dim < 1 or embed_dim < 2 or window < 1:
            raise ConfigError("invalid AttentionMemory dims")
        self.entry_dim = entry_dim
        self.embed_dim = embed_dim
        self.window = window
        self.encoder = nn.Linear(entry_dim, embed_dim)
        self.query = nn.Linear(embed_dim, embed_dim)
        self.key = nn.Linear(embed_dim, embed_dim)
        self.value = nn.Linear(embed_dim, embed_dim)
        self.norm = nn.LayerNorm(embed_dim)
        self.soft_key = nn.Linear(embed_dim, embed_dim, bias=False)
        self.soft_query = nn.Parameter(torch.randn(embed_dim))
        self.start = nn.Parameter(0.1 * torch.randn(embed_dim))
        self.register_buffer("positions", sinusoidal_encoding(window, embed_dim), persistent=False)

    def forward(self, windows: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if windows.shape[-1] != self.entry_dim:
            raise ConfigError(f"memory expects entry dim {self.entry_dim}, got {windows.shape[-1]}")
        b, w, _ = windows.shape
        if w > self.window:
            raise ConfigError(f"history window {w} exceeds capacity {self.window}")
        lengths = lengths.long()
        slots = torch.arange(w)
        valid = slots[None, :] < lengths[:, None]
        empty = lengths == 0
        # attend over slot 0 for empty rows; their output is replaced below
        valid = valid | (empty[:, None] & (slots[None, :] == 0))
        age = (lengths[:, None] - 1 - slots[None, :]).clamp(min=0, max=self.window - 1)

        x = self.encoder(windows)
        x = x + self.positions[age].to(x.dtype)
        scale = 1.0 / math.sqrt(self.embed_dim)
        scores = torch.einsum("bqe,bke->bqk", self.query(x), self.key(x)) * scale
        scores = scores.masked_fill(~valid[:, None, :], float("-inf"))
        attended = torch.einsum("bqk,bke->bqe", torch.softmax(scores, dim=-1), self.value(x))
        y = self.norm(x + attended)

        soft = (self.soft_key(y) @ self.soft_query) * scale
        soft = soft.masked_fill(~valid, float("-inf"))
        pooled = (torch.softmax(soft, dim=-1).unsqueeze(-1) * y).sum(1)
        return torch.where(empty[:, None], self.start.expand(b, -1), pooled)


def memory_encode(mem: AttentionMemory, history: Sequence[Sequence[float]] | torch.Tensor) -> torch.Tensor:
    """Encode one history (oldest first) into an ``embed_dim`` vector."""
    dtype = mem.encoder.weight.dtype
    h = torch.as_tensor(np.asarray(history, dtype=np.float64), dtype=dtype) if not torch.is_tensor(history) else history
    if h.numel() == 0:
        h = torch.zeros(0, mem.entry_dim, dtype=dtype)
    h = h.reshape(-1, mem.entry_dim)[-mem.window :]
    n = h.shape[0]
    padded = torch.zeros(1, max(n, 1), mem.entry_dim, dtype=dtype)
    padded[0, :n] = h
    return mem(padded, torch.tensor([n]))[0]


# ---------------------------------------------------------------------------
# optimisation


def make_adam(groups, lr: float = 3e-4) -> torch.optim.Adam:
    return torch.optim.Adam(groups, lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=True)


def grad_norm(params: Iterable[torch.Tensor]) -> float:
    grads = [p.grad for p in _with_grads(params)]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads))))


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one Adam update, refusing non-finite gradients."""
    if not math.isfinite(grad_norm(optimizer.param_groups)):
        raise NumericError("non-finite gradient")
    optimizer.step()


def _with_grads(params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    out = []
    for p in params:
        if isinstance(p, dict):
            out.extend(q for q in p["params"] if q.grad is not None)
        elif p.grad is not None:
            out.append(p)
    return out


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float = 1.0) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the scaling factor applied (1.0 when already within bounds).
    """
    ps = _with_grads(params)
    total = grad_norm(ps)
    if not ps or total <= max_norm:
        return 1.0
    factor = max_norm / total
    torch._foreach_mul_([p.grad for p in ps], factor)
    return factor


def polyak_update(online: nn.Module, target: nn.Module, tau: float = 0.005) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    with torch.no_grad():
        for p_t, p_o in zip(target.parameters(), online.parameters()):
            if p_t.shape != p_o.shape:
                raise ConfigError("polyak_update: parameter shapes differ")
            p_t.mul_(1.0 - tau).add_(p_o, alpha=tau)


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``params`` are leaf tensors (ideally float64) that ``loss_fn`` reads; up to
    ``n_samples`` scalar coordinates are drawn uniformly across all of them.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    picks = np.arange(total) if total <= n_samples else rng.choice(total, size=n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = view[idx].item()
            view[idx] = orig + epsilon
            up = float(loss_fn())
            view[idx] = orig - epsilon
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            analytic = float(grads[k].reshape(-1)[idx])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
