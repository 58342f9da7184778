"""Ground-truth simulators and scripted data-collection policies.

Two environments are provided, both value-semantic (``step`` returns a new
state and never mutates its input):

* ``coordgame-v0``: the iterated two-player coordination game. Each agent picks
  left (0) or right (1); the team earns 1 when the choices agree. The global
  state is a one-hot over ``{start, LL, LR, RL, RR}`` recording the previous
  joint action.
* ``reacher2-v0``: a kinematic two-link planar arm. Agent 0 drives the
  shoulder angle ``theta1``, agent 1 the elbow angle ``theta2``. Actions are
  joint velocities in ``[-1, 1]`` scaled to 2 rad/s. The suffixes ``-fo``,
  ``-ind`` and ``-leader`` pick the observation function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, InputError

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_mode: str
    n_agents: int
    state_dim: int
    obs_dims: tuple[int, ...]
    action_sizes: tuple[int, ...]
    discrete: bool
    horizon: int
    # "mean" averages per-step reward over the episode, "sum" is the plain return
    score_mode: str = "sum"

    def __post_init__(self):
        if self.n_agents < 1 or self.horizon < 1:
            raise ConfigError("n_agents and horizon must be >= 1")
        if len(self.obs_dims) != self.n_agents or len(self.action_sizes) != self.n_agents:
            raise ConfigError("per-agent dims must have n_agents entries")

    @property
    def full_id(self) -> str:
        return self.env_id if self.obs_mode == "full" else f"{self.env_id}-{self.obs_mode}"

    @property
    def action_dims(self) -> tuple[int, ...]:
        """Width of each agent's action once encoded as a vector (one-hot if discrete)."""
        return self.action_sizes

    def episode_score(self, rewards) -> float:
        rewards = np.asarray(rewards, dtype=np.float64)
        return float(rewards.mean() if self.score_mode == "mean" else rewards.sum())


@dataclass(frozen=True)
class StepResult:
    state: object
    state_vector: np.ndarray
    observations: list[np.ndarray]
    reward: float
    done: bool
    truncated: bool


# ---------------------------------------------------------------------------
# iterated coordination game


@dataclass(frozen=True)
class CoordState:
    cell: int  # 0 = start, 1 + 2 * a0 + a1 otherwise
    t: int = 0
    finished: bool = False


class CoordinationGame:
    n_cells = 5
    indices = (tuple(range(5)), tuple(range(5)))

    def __init__(self, horizon: int = 25):
        self.spec = EnvSpec(
            env_id="coordgame-v0",
            obs_mode="full",
            n_agents=2,
            state_dim=self.n_cells,
            obs_dims=(self.n_cells, self.n_cells),
            action_sizes=(2, 2),
            discrete=True,
            horizon=horizon,
            score_mode="mean",
        )

    def state_vector(self, state: CoordState) -> np.ndarray:
        v = np.zeros(self.n_cells)
        v[state.cell] = 1.0
        return v

    def state_from_vector(self, vec) -> CoordState:
        return CoordState(int(np.argmax(vec)))

    def observe(self, state_vec) -> list[np.ndarray]:
        state_vec = np.asarray(state_vec, dtype=np.float64)
        return [state_vec.copy(), state_vec.copy()]

    def reset(self, rng: np.random.Generator | None = None):
        state = CoordState(0)
        return state, self.observe(self.state_vector(state))

    @staticmethod
    def payoff(a0: int, a1: int) -> float:
        return 1.0 if a0 == a1 else 0.0

    def step(self, state: CoordState, joint_action) -> StepResult:
        if state.finished:
            raise InputError("episode already finished")
        acts = [_as_discrete(a, 2) for a in joint_action]
        if len(acts) != 2:
            raise InputError("coordination game takes exactly two actions")
        nxt = CoordState(1 + 2 * acts[0] + acts[1], state.t + 1)
        truncated = nxt.t >= self.spec.horizon
        nxt = replace(nxt, finished=truncated)
        vec = self.state_vector(nxt)
        return StepResult(nxt, vec, self.observe(vec), self.payoff(*acts), False, truncated)


def _as_discrete(a, n: int) -> int:
    arr = np.asarray(a)
    if arr.size != 1:
        raise InputError(f"discrete action must be a scalar, got shape {arr.shape}")
    val = float(arr.reshape(()))
    if not val.is_integer() or not 0 <= val < n:
        raise InputError(f"discrete action {val} outside [0, {n})")
    return int(val)


# ---------------------------------------------------------------------------
# kinematic two-agent reacher

LINK1 = 0.1
LINK2 = 0.1
DT = 0.05
MAX_SPEED = 2.0
TARGET_RADIUS = (0.05, 0.19)
INIT_ANGLE = 0.1

# global state layout
#   0 cos th1, 1 sin th1, 2 cos th2, 3 sin th2, 4 dth1, 5 dth2,
#   6 target x, 7 target y, 8 fingertip-target x, 9 fingertip-target y
REACHER_STATE_DIM = 10
OBS_INDICES: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {
    "fo": (tuple(range(10)), tuple(range(10))),
    "ind": ((0, 1, 4, 6, 7), (2, 3, 5, 6, 7)),
    "leader": ((0, 1, 2, 3, 4, 5, 6, 7), (0, 1, 2, 3, 4, 5)),
}


def wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2.0 * np.pi) - np.pi


def forward_kinematics(theta1, theta2) -> np.ndarray:
    theta1 = np.asarray(theta1, dtype=np.float64)
    theta2 = np.asarray(theta2, dtype=np.float64)
    x = LINK1 * np.cos(theta1) + LINK2 * np.cos(theta1 + theta2)
    y = LINK1 * np.sin(theta1) + LINK2 * np.sin(theta1 + theta2)
    return np.stack([x, y], axis=-1)


def inverse_kinematics(target, elbow_sign: float) -> tuple[float, float]:
    """Joint angles placing the fingertip on ``target`` with ``sign(theta2) = elbow_sign``.

    Out-of-reach targets fall back to the nearest reachable configuration
    (arm fully stretched or folded towards the target direction).
    """
    x, y = float(target[0]), float(target[1])
    r2 = x * x + y * y
    c = (r2 - LINK1**2 - LINK2**2) / (2.0 * LINK1 * LINK2)
    theta2 = math.copysign(math.acos(min(1.0, max(-1.0, c))), elbow_sign)
    theta1 = math.atan2(y, x) - math.atan2(LINK2 * math.sin(theta2), LINK1 + LINK2 * math.cos(theta2))
    return float(wrap_angle(theta1)), theta2


@dataclass(frozen=True)
class ReacherState:
    theta: tuple[float, float]
    theta_dot: tuple[float, float]
    target: tuple[float, float]
    t: int = 0
    finished: bool = False

    @property
    def fingertip(self) -> np.ndarray:
        return forward_kinematics(*self.theta)


class Reacher2:
    def __init__(self, obs_mode: str = "fo", horizon: int = 50):
        if obs_mode not in OBS_INDICES:
            raise ConfigError(f"unknown reacher observation mode {obs_mode!r}")
        self.obs_mode = obs_mode
        self.indices = OBS_INDICES[obs_mode]
        self.spec = EnvSpec(
            env_id="reacher2-v0",
            obs_mode=obs_mode,
            n_agents=2,
            state_dim=REACHER_STATE_DIM,
            obs_dims=tuple(len(ix) for ix in self.indices),
            action_sizes=(1, 1),
            discrete=False,
            horizon=horizon,
            score_mode="sum",
        )

    def state_vector(self, state: ReacherState) -> np.ndarray:
        th1, th2 = state.theta
        tip = state.fingertip
        tx, ty = state.target
        return np.array(
            [
                math.cos(th1), math.sin(th1), math.cos(th2), math.sin(th2),
                state.theta_dot[0], state.theta_dot[1],
                tx, ty, tip[0] - tx, tip[1] - ty,
            ]
        )

    def state_from_vector(self, vec) -> ReacherState:
        v = np.asarray(vec, dtype=np.float64)
        th1 = math.atan2(v[1], v[0])
        th2 = math.atan2(v[3], v[2])
        return ReacherState((th1, th2), (float(v[4]), float(v[5])), (float(v[6]), float(v[7])))

    def observe(self, state_vec) -> list[np.ndarray]:
        v = np.asarray(state_vec, dtype=np.float64)
        return [v[list(ix)].copy() for ix in self.indices]

    def reset(self, rng: np.random.Generator):
        theta = rng.uniform(-INIT_ANGLE, INIT_ANGLE, size=2)
        lo, hi = TARGET_RADIUS
        radius = math.sqrt(rng.uniform(lo * lo, hi * hi))
        angle = rng.uniform(-math.pi, math.pi)
        state = ReacherState(
            (float(theta[0]), float(theta[1])),
            (0.0, 0.0),
            (radius * math.cos(angle), radius * math.sin(angle)),
        )
        return state, self.observe(self.state_vector(state))

    def step(self, state: ReacherState, joint_action) -> StepResult:
        if state.finished:
            raise InputError("episode already finished")
        acts = [np.asarray(a, dtype=np.float64).reshape(-1) for a in joint_action]
        if len(acts) != 2 or any(a.size != 1 for a in acts):
            raise InputError("reacher takes one scalar action per agent")
        a = np.array([acts[0][0], acts[1][0]])
        if not np.all(np.isfinite(a)):
            raise InputError("non-finite action")
        vel = np.clip(a, -1.0, 1.0) * MAX_SPEED
        th1 = float(wrap_angle(state.theta[0] + DT * vel[0]))
        th2 = float(np.clip(state.theta[1] + DT * vel[1], -math.pi, math.pi))
        t = state.t + 1
        truncated = t >= self.spec.horizon
        nxt = ReacherState((th1, th2), (float(vel[0]), float(vel[1])), state.target, t, truncated)
        dist = float(np.linalg.norm(nxt.fingertip - np.asarray(state.target)))
        vec = self.state_vector(nxt)
        return StepResult(nxt, vec, self.observe(vec), -dist, False, truncated)


# ---------------------------------------------------------------------------
# registry


def make_env(env_id: str, obs_mode: str | None = None):
    """Build an environment from ``coordgame-v0`` or ``reacher2-v0[-fo|-ind|-leader]``."""
    if env_id.startswith("coordgame-v0"):
        if env_id not in ("coordgame-v0", "coordgame-v0-full") or obs_mode not in (None, "full"):
            raise ConfigError(f"unknown environment {env_id!r}")
        return CoordinationGame()
    if env_id.startswith("reacher2-v0"):
        suffix = env_id[len("reacher2-v0") :].lstrip("-") or None
        mode = suffix or obs_mode or "fo"
        if suffix and obs_mode and suffix != obs_mode:
            raise ConfigError(f"conflicting observation modes {suffix!r} / {obs_mode!r}")
        return Reacher2(mode)
    raise ConfigError(f"unknown environment {env_id!r}")


def observe_batch(env, states):
    """Per-agent observations for a ``(B, S)`` array or tensor of global states."""
    return [states[:, list(ix)] for ix in env.indices]


def observe(env, state_vec, obs_mode: str | None = None) -> list[np.ndarray]:
    """Per-agent observations of a global state vector under ``obs_mode``."""
    if obs_mode is not None and obs_mode != env.spec.obs_mode:
        env = make_env(env.spec.env_id, obs_mode)
    return env.observe(state_vec)


# ---------------------------------------------------------------------------
# scripted team policies


@dataclass
class ScriptedPolicy:
    """A team controller with privileged access to the simulator state."""

    tag: str
    act: Callable[[object, np.random.Generator], list] = field(repr=False)

    def __call__(self, state, rng: np.random.Generator) -> list:
        return self.act(state, rng)


def scripted_policy(kind: str, env=None, **params) -> ScriptedPolicy:
    """Build a data-collection policy.

    ``bernoulli``: ``p_right=(p0, p1)``, stateless coin flips per agent.
    ``reacher-expert``: ``convention="ccw"|"cw"``, an inverse-kinematics
    feedback controller holding ``sign(theta2)`` fixed; ``gain`` is the
    fraction of the remaining joint error removed per step before saturation.
    ``uniform-random``: uniform over each agent's action space (needs ``env``).
    """
    if kind == "bernoulli":
        p = tuple(float(x) for x in params["p_right"])

        def act(state, rng):
            return [int(rng.random() < pi) for pi in p]

        return ScriptedPolicy(f"bernoulli{p}", act)

    if kind == "reacher-expert":
        convention = params.get("convention", "ccw")
        if convention not in ("ccw", "cw"):
            raise ConfigError(f"unknown convention {convention!r}")
        sign = 1.0 if convention == "ccw" else -1.0
        gain = float(params.get("gain", 0.5))

        def act(state: ReacherState, rng):
            goal1, goal2 = inverse_kinematics(state.target, sign)
            err = np.array([wrap_angle(goal1 - state.theta[0]), goal2 - state.theta[1]])
            a = np.clip(gain * err / (DT * MAX_SPEED), -1.0, 1.0)
            return [np.array([a[0]]), np.array([a[1]])]

        return ScriptedPolicy(f"expert-{convention}", act)

    if kind == "uniform-random":
        if env is None:
            raise ConfigError("uniform-random policy needs the environment")
        spec = env.spec

        def act(state, rng):
            if spec.discrete:
                return [int(rng.integers(n)) for n in spec.action_sizes]
            return [rng.uniform(-1.0, 1.0, size=n) for n in spec.action_sizes]

        return ScriptedPolicy("uniform-random", act)

    raise ConfigError(f"unknown scripted policy kind {kind!r}")


def run_episode(env, policy, rng: np.random.Generator):
    """Roll one episode; returns the list of ``(state, obs, action, StepResult)``."""
    state, obs = env.reset(rng)
    steps = []
    while True:
        action = policy(state, rng)
        res = env.step(state, action)
        steps.append((state, obs, action, res))
        if res.done or res.truncated:
            return steps
        state, obs = res.state, res.observations
