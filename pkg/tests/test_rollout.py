import math

import numpy as np
import pytest
import torch

from momalab.dataset import make_dataset
from momalab.errors import ConfigError, InputError
from momalab.mappo import Team, coordgame_ppo_config, reacher_ppo_config
from momalab.rollout import (
    RolloutBuffer,
    RolloutConfig,
    SimulatorModel,
    fill_buffer,
    generate_rollouts,
    pad_windows,
    penalized_reward,
    push_entry,
    timeout_mask,
)
from momalab.worldmodel import ModelPrediction, coordgame_wm_config, train_ensemble

SMALL = dict(embed_dim=16, hidden=(32,), mixer_hidden=(16,))


@pytest.fixture(scope="module")
def coord():
    return make_dataset("coord-neutral", 30, seed=0)


@pytest.fixture(scope="module")
def team(coord):
    return Team(coord.spec, coordgame_ppo_config(**SMALL), seed=0)


class ScriptedUncertainty(SimulatorModel):
    """True dynamics, but eps_g is a fixed value chosen per step index."""

    def __init__(self, env, eps_by_step, l_eps):
        super().__init__(env)
        self.eps_by_step = eps_by_step
        self.l_eps = l_eps
        self.calls = 0

    def step(self, s, a, generator=None):
        pred = super().step(s, a, generator)
        eps = torch.full((len(s),), float(self.eps_by_step[self.calls]))
        self.calls += 1
        return ModelPrediction(pred.next_state, pred.reward, pred.mask, eps * 0.5, eps)


def test_penalized_reward_examples():
    assert penalized_reward(1.0, 0.3, 0.5, 1.0, 1.0) == pytest.approx(0.2)
    assert penalized_reward(1.0, 0.3, 0.5) == pytest.approx(0.5)  # defaults lambda_r 0, lambda_g 1
    assert penalized_reward(2.0, 9.0, 9.0, 0.0, 0.0) == 2.0


def test_timeout_mask_threshold_is_inclusive():
    assert timeout_mask(0, 0, 10, 0.99, 1.0) == 1.0
    assert timeout_mask(0, 0, 10, 1.0, 1.0) == 0.0
    assert timeout_mask(9, 0, 10, 0.0, 1.0) == 0.0
    assert timeout_mask(12, 3, 10, 0.0, math.inf) == 0.0
    vec = timeout_mask(np.array([0, 1, 2]), np.zeros(3, dtype=int), 3, torch.tensor([0.1, 2.0, 0.1]), 1.0)
    assert vec.tolist() == [1.0, 0.0, 0.0]


def test_rollout_config_validation():
    for bad in (dict(k=0), dict(batch_size=0), dict(lambda_g=-1.0), dict(l_eps=0.0)):
        with pytest.raises(ConfigError):
            RolloutConfig(**bad)


def test_push_entry_and_padding():
    w = torch.zeros(2, 3, 1)
    w[1] = torch.tensor([[1.0], [2.0], [3.0]])
    lengths = torch.tensor([0, 3])
    out, new_len = push_entry(w, lengths, torch.tensor([[7.0], [4.0]]))
    assert out[0, :, 0].tolist() == [7.0, 0.0, 0.0] and out[1, :, 0].tolist() == [2.0, 3.0, 4.0]
    assert new_len.tolist() == [1, 3]
    assert pad_windows(torch.ones(1, 2, 1), 4).shape == (1, 4, 1)
    with pytest.raises(InputError):
        pad_windows(torch.ones(1, 5, 1), 4)


def test_infinite_threshold_gives_full_length_rollouts(coord, team):
    cfg = RolloutConfig(k=4, batch_size=12)
    buf = generate_rollouts(coord, team, SimulatorModel(coord.env), cfg, np.random.default_rng(0), torch.Generator().manual_seed(0))
    # the coordination game never terminates, so every rollout runs to the horizon
    assert buf.n_rollouts == 12 and len(buf) == 48
    assert buf.rollout_lengths().tolist() == [4] * 12
    per_rollout = buf.timeouts.reshape(12, 4)
    assert per_rollout[:, :3].eq(1).all() and per_rollout[:, 3].eq(0).all()
    assert buf.steps.reshape(12, 4).tolist() == [[0, 1, 2, 3]] * 12
    assert buf.stats()["truncation_fraction"] == 0.0


def test_uncertainty_cut_ends_rollout_early(coord, team):
    model = ScriptedUncertainty(coord.env, eps_by_step=[0.1, 5.0, 0.1], l_eps=1.0)
    buf = generate_rollouts(coord, team, model, RolloutConfig(k=3, batch_size=5), np.random.default_rng(0), torch.Generator())
    assert buf.rollout_lengths().tolist() == [2] * 5
    assert buf.timeouts.reshape(5, 2).tolist() == [[1.0, 0.0]] * 5
    assert model.calls == 2
    assert buf.stats()["truncation_fraction"] == 1.0


def test_penalty_is_applied_and_never_raises_reward(coord, team):
    model = ScriptedUncertainty(coord.env, eps_by_step=[0.25, 0.5], l_eps=10.0)
    cfg = RolloutConfig(k=2, batch_size=8, lambda_r=2.0, lambda_g=1.0)
    buf = generate_rollouts(coord, team, model, cfg, np.random.default_rng(1), torch.Generator())
    expected = buf.raw_rewards - 2.0 * 0.5 * buf.eps_g - buf.eps_g
    torch.testing.assert_close(buf.rewards, expected)
    assert (buf.rewards <= buf.raw_rewards).all()


def test_rollouts_start_at_dataset_states(coord, team):
    rng = np.random.default_rng(5)
    buf = generate_rollouts(coord, team, SimulatorModel(coord.env), RolloutConfig(k=3, batch_size=20), rng, torch.Generator())
    dataset_states = {tuple(s) for s in coord.flat["states"].astype(np.float32).tolist()}
    starts = buf.states[buf.steps == 0]
    assert all(tuple(s) in dataset_states for s in starts.tolist())
    # consecutive steps chain through the model's next state
    for r in range(buf.n_rollouts):
        rows = (buf.rollout_ids == r).nonzero().flatten()
        for a, b in zip(rows[:-1], rows[1:]):
            assert torch.equal(buf.next_states[a], buf.states[b])


def test_next_values_match_value_of_next_history(coord, team):
    buf = generate_rollouts(coord, team, SimulatorModel(coord.env), RolloutConfig(k=3, batch_size=6), np.random.default_rng(2), torch.Generator())
    for a in range(len(buf) - 1):
        if buf.rollout_ids[a] == buf.rollout_ids[a + 1]:
            assert float(buf.next_values[a]) == pytest.approx(float(buf.values[a + 1]), abs=1e-6)


def test_rollouts_are_deterministic(coord, team):
    def make():
        return generate_rollouts(coord, team, SimulatorModel(coord.env), RolloutConfig(k=5, batch_size=10), np.random.default_rng(9), torch.Generator().manual_seed(9))

    a, b = make(), make()
    for name in ("states", "rewards", "log_probs", "values", "timeouts"):
        assert torch.equal(getattr(a, name), getattr(b, name))


def test_fill_buffer_collects_enough_and_renumbers(coord, team):
    cfg = RolloutConfig(k=3, batch_size=7)
    buf = fill_buffer(coord, team, SimulatorModel(coord.env), cfg, 50, np.random.default_rng(0), torch.Generator())
    assert len(buf) >= 50 and buf.n_rollouts == len(buf) // 3
    assert torch.equal(buf.rollout_lengths(), torch.full((buf.n_rollouts,), 3))
    assert isinstance(buf, RolloutBuffer)


def test_world_model_rollouts_respect_threshold(coord, team):
    ens = train_ensemble(coord, coordgame_wm_config(steps=100, n_members=3, n_elites=2), seed=0)
    buf = generate_rollouts(coord, team, ens, RolloutConfig(k=6, batch_size=30), np.random.default_rng(0), torch.Generator())
    assert buf.meta["l_eps"] == ens.l_eps
    assert (buf.eps_g <= ens.l_eps).all()
    # any transition at or over the threshold is the last one of its rollout
    over = (buf.eps_g >= ens.l_eps).nonzero().flatten()
    for i in over.tolist():
        assert buf.timeouts[i] == 0
        assert i == len(buf) - 1 or buf.rollout_ids[i + 1] != buf.rollout_ids[i]
    # every state the model produced is a cell of the game
    assert torch.equal(buf.next_states.sum(-1), torch.ones(len(buf)))


def test_reacher_rollouts_store_raw_actions():
    ds = make_dataset("reacher-mix", 4, seed=0, obs_mode="ind")
    team = Team(ds.spec, reacher_ppo_config(**SMALL), seed=1)
    buf = generate_rollouts(ds, team, SimulatorModel(ds.env), RolloutConfig(k=2, batch_size=4), np.random.default_rng(0), torch.Generator())
    assert buf.actions[0].shape == (8, 1)
    assert buf.windows[0].shape == (8, 10, 5 + 1 + 1)
