"""Learned insertion controller plus force-only search baselines.

The controller is a synchronous advantage actor-critic over wrench
observations with one parallel environment per hole geometry.  Networks
are small fully-connected stacks implemented directly in numpy: the
analytic gradients are hand-written so they can be checked against
finite differences, and every random draw flows through seeded
generators so training curves reproduce bitwise.
"""
from __future__ import annotations

import math
import time as _time
from collections import deque
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .control import PiController, PiGains
from .episode import EpisodeLog
from .errors import AutochargeError, InvalidConfigError, WorkspaceExitError
from .simworld import ACTION_DELTAS, ACTION_STEP, HOLE_SHAPES, Scene, SceneConfig

FORCE_SCALE = 20.0   # N
TORQUE_SCALE = 2.0   # N*m
N_ACTIONS = 4
OBS_DIM = 6
POLICY_FORMAT_VERSION = 1


def normalize_wrench(wrench) -> np.ndarray:
    w = np.asarray(wrench, dtype=float).reshape(6)
    if not np.all(np.isfinite(w)):
        raise AutochargeError("non-finite wrench observation")
    return np.concatenate([w[:3] / FORCE_SCALE, w[3:] / TORQUE_SCALE])


def episode_reward(steps_used: int, step_budget: int) -> float:
    """Sparse terminal reward: 1 - T/T_max on success."""
    if not 0 <= steps_used <= step_budget:
        raise AutochargeError(f"steps_used {steps_used} outside [0, {step_budget}]")
    return 1.0 - steps_used / step_budget


def discounted_return(rewards, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise AutochargeError("gamma must be in [0, 1]")
    total = 0.0
    for t, r in enumerate(rewards):
        total += (gamma ** t) * float(r)
    return total


# --------------------------------------------------------------------------
# Insertion environment (hybrid position-force control)
# --------------------------------------------------------------------------

@dataclass
class InsertSettings:
    max_steps: int = 300
    offset: float = 0.005      # initial planar error bound, m
    substeps: int = 10
    dt: float = 0.01
    workspace: float = 0.05
    window: int = 5            # wrench moving-average length, control ticks
    pi: PiGains = field(default_factory=PiGains)


class InsertionEnv:
    """Peg-above-port episode: 4 planar actions, PI-regulated press.

    Observations are the moving average of the last ``window`` wrench
    samples, normalized by the fixed force/torque scales.
    """

    def __init__(self, scene: Scene, settings: InsertSettings | None = None,
                 rng: np.random.Generator | None = None):
        self.scene = scene
        self.settings = settings or InsertSettings()
        self.rng = rng or np.random.default_rng(0)
        self.state = None
        self.pi = PiController(self.settings.pi)
        self._history: deque = deque(maxlen=self.settings.window)
        self.steps = 0
        self.sim_time = 0.0

    def sample_offset(self) -> np.ndarray:
        """Uniform draw from the disc of radius ``offset``."""
        ang = self.rng.uniform(0.0, 2.0 * math.pi)
        rad = self.settings.offset * math.sqrt(self.rng.random())
        return np.array([rad * math.cos(ang), rad * math.sin(ang)])

    def reset(self, offset=None) -> np.ndarray:
        if offset is None:
            offset = self.sample_offset()
        self.state = self.scene.settled_insert_state(offset)
        self.pi.reset()
        self._history.clear()
        self._history.append(self.state.wrench.copy())
        self.steps = 0
        self.sim_time = 0.0
        return self._obs()

    def _obs(self) -> np.ndarray:
        mean = np.mean(np.asarray(self._history), axis=0)
        return normalize_wrench(mean)

    def step_delta(self, delta_xy) -> tuple[np.ndarray, float, bool, dict]:
        s = self.settings
        self.steps += 1
        try:
            self.state, wrench = self.scene.planar_move(
                self.state, delta_xy, self.pi, self.rng,
                substeps=s.substeps, dt=s.dt, workspace=s.workspace)
        except WorkspaceExitError:
            info = {"success": False, "steps": self.steps, "reason": "workspace"}
            return self._obs(), 0.0, True, info
        self._history.append(wrench.copy())
        self.sim_time = self.state.time
        if self.scene.insert_success(self.state):
            r = episode_reward(self.steps, s.max_steps)
            return self._obs(), r, True, {"success": True, "steps": self.steps}
        if self.steps >= s.max_steps:
            return self._obs(), 0.0, True, {"success": False, "steps": self.steps,
                                            "reason": "timeout"}
        return self._obs(), 0.0, False, {"success": False, "steps": self.steps}

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        if not 0 <= int(action) < N_ACTIONS:
            raise InvalidConfigError(f"action must be 0..{N_ACTIONS - 1}")
        return self.step_delta(ACTION_DELTAS[int(action)] * ACTION_STEP)


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

def init_params(rng: np.random.Generator, hidden: int = 64) -> dict:
    def layer(nin, nout, gain=1.0):
        w = rng.normal(0.0, gain / math.sqrt(nin), size=(nin, nout))
        return w, np.zeros(nout)

    params = {}
    for prefix, nout, gain in (("a", N_ACTIONS, 0.1), ("c", 1, 1.0)):
        w1, b1 = layer(OBS_DIM, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, nout, gain)
        params.update({f"{prefix}1w": w1, f"{prefix}1b": b1,
                       f"{prefix}2w": w2, f"{prefix}2b": b2,
                       f"{prefix}3w": w3, f"{prefix}3b": b3})
    return params


def _mlp_forward(params: dict, prefix: str, x: np.ndarray):
    h1 = np.tanh(x @ params[f"{prefix}1w"] + params[f"{prefix}1b"])
    h2 = np.tanh(h1 @ params[f"{prefix}2w"] + params[f"{prefix}2b"])
    out = h2 @ params[f"{prefix}3w"] + params[f"{prefix}3b"]
    return out, (x, h1, h2)


def _mlp_backward(params: dict, prefix: str, cache, d_out: np.ndarray,
                  grads: dict) -> None:
    x, h1, h2 = cache
    grads[f"{prefix}3w"] += h2.T @ d_out
    grads[f"{prefix}3b"] += d_out.sum(axis=0)
    dh2 = (d_out @ params[f"{prefix}3w"].T) * (1.0 - h2 * h2)
    grads[f"{prefix}2w"] += h1.T @ dh2
    grads[f"{prefix}2b"] += dh2.sum(axis=0)
    dh1 = (dh2 @ params[f"{prefix}2w"].T) * (1.0 - h1 * h1)
    grads[f"{prefix}1w"] += x.T @ dh1
    grads[f"{prefix}1b"] += dh1.sum(axis=0)


def actor_logits(params: dict, obs: np.ndarray) -> np.ndarray:
    out, _ = _mlp_forward(params, "a", np.atleast_2d(obs))
    return out


def critic_value(params: dict, obs: np.ndarray) -> np.ndarray:
    out, _ = _mlp_forward(params, "c", np.atleast_2d(obs))
    return out[:, 0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def greedy_action(params, obs) -> int:
    weights = params.weights if isinstance(params, PolicyParams) else params
    logits = actor_logits(weights, obs)[0]
    return int(np.argmax(logits))  # first max wins: lowest-index tie-break


def policy_act(params, obs, mode: str = "greedy",
               rng: np.random.Generator | None = None) -> int:
    """Action choice: 'greedy' argmax or 'sample' from the softmax."""
    weights = params.weights if isinstance(params, PolicyParams) else params
    if not np.all(np.isfinite(np.asarray(obs, dtype=float))):
        raise AutochargeError("non-finite observation")
    if mode == "greedy":
        return greedy_action(weights, obs)
    if mode != "sample":
        raise InvalidConfigError(f"unknown action mode '{mode}'")
    if rng is None:
        raise InvalidConfigError("sampling mode needs a generator")
    probs = np.exp(_log_softmax(actor_logits(weights, obs)))[0]
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right")
               .clip(0, N_ACTIONS - 1))


# --------------------------------------------------------------------------
# A2C loss, gradients, optimiser
# --------------------------------------------------------------------------

def a2c_loss(params: dict, batch: dict, entropy_coef: float = 0.01,
             value_coef: float = 0.5) -> float:
    obs = batch["obs"]
    actions = batch["actions"]
    returns = batch["returns"]
    adv = batch["advantages"]
    logits, _ = _mlp_forward(params, "a", obs)
    logp = _log_softmax(logits)
    n = len(obs)
    pol = -np.mean(adv * logp[np.arange(n), actions])
    probs = np.exp(logp)
    entropy = -np.mean((probs * logp).sum(axis=1))
    values, _ = _mlp_forward(params, "c", obs)
    v_loss = 0.5 * np.mean((values[:, 0] - returns) ** 2)
    return float(pol - entropy_coef * entropy + value_coef * v_loss)


def a2c_loss_and_grads(params: dict, batch: dict, entropy_coef: float = 0.01,
                       value_coef: float = 0.5) -> tuple[float, dict]:
    obs = batch["obs"]
    actions = batch["actions"]
    returns = batch["returns"]
    adv = batch["advantages"]
    n = len(obs)
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    logits, a_cache = _mlp_forward(params, "a", obs)
    logp = _log_softmax(logits)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    pol = -np.mean(adv * logp[np.arange(n), actions])
    entropy_rows = -(probs * logp).sum(axis=1)
    entropy = entropy_rows.mean()

    d_logits = (adv[:, None] * (probs - onehot)) / n
    d_entropy = -probs * (logp + entropy_rows[:, None])  # dH/dlogits per row
    d_logits += -entropy_coef * d_entropy / n
    _mlp_backward(params, "a", a_cache, d_logits, grads)

    values, c_cache = _mlp_forward(params, "c", obs)
    v_err = values[:, 0] - returns
    v_loss = 0.5 * np.mean(v_err ** 2)
    d_values = (value_coef * v_err / n)[:, None]
    _mlp_backward(params, "c", c_cache, d_values, grads)

    loss = float(pol - entropy_coef * entropy + value_coef * v_loss)
    return loss, grads


class Adam:
    def __init__(self, params: dict, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] *= scale
    return total


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainSettings:
    total_interactions: int = 300_000
    rollout: int = 32
    lr: float = 3e-4
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    geometries: tuple = HOLE_SHAPES
    insert: InsertSettings = field(default_factory=InsertSettings)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfigError("gamma must be in [0, 1]")
        if self.total_interactions <= 0 or self.rollout <= 0:
            raise InvalidConfigError("interaction and rollout counts must be positive")
        if not self.geometries:
            raise InvalidConfigError("at least one training geometry is required")


@dataclass
class PolicyParams:
    weights: dict
    hidden: int
    force_scale: float = FORCE_SCALE
    torque_scale: float = TORQUE_SCALE
    geometries: tuple = ()
    version: int = POLICY_FORMAT_VERSION


@dataclass
class TrainReport:
    episode_rewards: list = field(default_factory=list)
    episode_ends: list = field(default_factory=list)   # interaction count per episode
    moving_avg: list = field(default_factory=list)
    interactions: int = 0
    wall_time: float = 0.0
    diverged: bool = False
    ma_window: int = 50


def moving_average(values, window: int = 50) -> list:
    out = []
    acc = deque(maxlen=window)
    for v in values:
        acc.append(float(v))
        out.append(sum(acc) / len(acc))
    return out


def insertion_env_factory(scene_cfg: SceneConfig, settings: TrainSettings):
    """One insertion environment per training hole geometry."""
    def make(index: int, rng: np.random.Generator) -> InsertionEnv:
        cfg = dc_replace(scene_cfg, hole_shape=settings.geometries[index])
        return InsertionEnv(Scene(cfg), settings.insert, rng)

    return make, len(settings.geometries)


def a2c_train(env_factory, settings: TrainSettings, seed: int,
              n_envs: int | None = None) -> tuple[PolicyParams, TrainReport]:
    """Synchronous advantage actor-critic over parallel environments.

    ``env_factory(index, rng)`` builds each environment (one per hole
    geometry in the standard setup).  Rollouts of ``settings.rollout``
    steps are bootstrapped with the critic, advantages are the n-step
    returns minus values, and the combined policy/entropy/value gradient
    is applied with Adam.  A NaN loss aborts with a partial report.
    Fixed seeds yield identical reward curves.
    """
    t0 = _time.perf_counter()
    n = len(settings.geometries) if n_envs is None else n_envs
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(n + 2)
    init_rng = np.random.default_rng(children[0])
    act_rng = np.random.default_rng(children[1])
    envs = [env_factory(i, np.random.default_rng(children[2 + i]))
            for i in range(n)]
    params = init_params(init_rng, settings.hidden)
    opt = Adam(params, lr=settings.lr)
    report = TrainReport(ma_window=50)

    obs = np.stack([env.reset() for env in envs])
    interactions = 0
    while interactions < settings.total_interactions:
        buf_obs, buf_act, buf_rew, buf_done, buf_val = [], [], [], [], []
        for _ in range(settings.rollout):
            logits = actor_logits(params, obs)
            logp = _log_softmax(logits)
            probs = np.exp(logp)
            draws = act_rng.random(n)
            actions = np.array([
                int(np.searchsorted(np.cumsum(probs[i]), draws[i], side="right")
                    .clip(0, N_ACTIONS - 1)) for i in range(n)])
            values = critic_value(params, obs)
            buf_obs.append(obs.copy())
            buf_act.append(actions)
            buf_val.append(values)
            rewards = np.zeros(n)
            dones = np.zeros(n)
            new_obs = obs.copy()
            for i, env in enumerate(envs):
                o, r, done, info = env.step(actions[i])
                rewards[i] = r
                dones[i] = 1.0 if done else 0.0
                if done:
                    report.episode_rewards.append(float(r))
                    report.episode_ends.append(interactions + i + 1)
                    o = env.reset()
                new_obs[i] = o
            obs = new_obs
            interactions += n
            buf_rew.append(rewards)
            buf_done.append(dones)
        # bootstrapped n-step returns
        ret = critic_value(params, obs)
        returns = np.zeros((settings.rollout, n))
        for t in reversed(range(settings.rollout)):
            ret = buf_rew[t] + settings.gamma * ret * (1.0 - buf_done[t])
            returns[t] = ret
        batch = {
            "obs": np.concatenate(buf_obs),
            "actions": np.concatenate(buf_act),
            "returns": returns.reshape(-1),
            "advantages": returns.reshape(-1) - np.concatenate(buf_val),
        }
        loss, grads = a2c_loss_and_grads(params, batch, settings.entropy_coef,
                                         settings.value_coef)
        if not math.isfinite(loss):
            report.diverged = True
            break
        clip_grad_norm(grads, settings.max_grad_norm)
        opt.step(params, grads)

    report.interactions = interactions
    report.moving_avg = moving_average(report.episode_rewards, report.ma_window)
    report.wall_time = _time.perf_counter() - t0
    pol = PolicyParams(params, settings.hidden,
                       geometries=tuple(settings.geometries))
    return pol, report


def train_insertion_policy(scene_cfg: SceneConfig, settings: TrainSettings,
                           seed: int) -> tuple[PolicyParams, TrainReport]:
    """A2C training with one parallel environment per hole geometry."""
    factory, n = insertion_env_factory(scene_cfg, settings)
    return a2c_train(factory, settings, seed, n_envs=n)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

def save_policy(params: PolicyParams, path) -> None:
    np.savez(path,
             format_version=np.int64(params.version),
             hidden=np.int64(params.hidden),
             force_scale=float(params.force_scale),
             torque_scale=float(params.torque_scale),
             geometries=np.array(list(params.geometries), dtype="U16"),
             **{f"w_{k}": v for k, v in params.weights.items()})


def load_policy(path) -> PolicyParams:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != POLICY_FORMAT_VERSION:
            raise InvalidConfigError(
                f"policy file version {version} unsupported (expected {POLICY_FORMAT_VERSION})")
        weights = {k[2:]: data[k] for k in data.files if k.startswith("w_")}
        return PolicyParams(weights, int(data["hidden"]),
                            float(data["force_scale"]), float(data["torque_scale"]),
                            tuple(data["geometries"].tolist()), version)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------

def random_search(env: InsertionEnv, rng: np.random.Generator,
                  log: EpisodeLog | None = None) -> dict:
    """Uniform random 1 mm planar moves with PI vertical regulation."""
    env.reset()
    done = False
    info = {"success": True, "steps": 0}
    while not done:
        action = int(rng.integers(N_ACTIONS))
        _, _, done, info = env.step(action)
        if log is not None:
            log.add(env.sim_time, "random_search", action=action)
    info["sim_time"] = env.sim_time
    return info


def spiral_search(env: InsertionEnv, pitch: float = 0.001,
                  max_radius: float = 0.010,
                  log: EpisodeLog | None = None) -> dict:
    """Archimedean spiral in 1 mm steps around the start point."""
    env.reset()
    start = env.scene.to_plane(env.state.ee_pose.translation)[:2].copy()
    theta = 0.0
    prev = start.copy()
    # press and dwell at the start point before spiralling out
    _, _, done, info = env.step_delta(np.zeros(2))
    b = pitch / (2.0 * math.pi)
    while not done:
        r = b * theta
        if r > max_radius:
            info = {"success": False, "steps": env.steps, "reason": "radius_budget"}
            break
        theta += ACTION_STEP / max(math.hypot(r, b), 1e-9)
        r = b * theta
        waypoint = start + np.array([r * math.cos(theta), r * math.sin(theta)])
        delta = waypoint - prev
        prev = waypoint
        _, _, done, info = env.step_delta(delta)
        if log is not None:
            log.add(env.sim_time, "spiral_search", radius=r)
    info["sim_time"] = env.sim_time
    return info


def evaluate_policy(env: InsertionEnv, params: PolicyParams, trials: int,
                    mode: str = "greedy",
                    rng: np.random.Generator | None = None) -> list[dict]:
    results = []
    for _ in range(trials):
        obs = env.reset()
        done = False
        info = {}
        while not done:
            action = policy_act(params, obs, mode=mode, rng=rng)
            obs, _, done, info = env.step(action)
        info["sim_time"] = env.sim_time
        results.append(info)
    return results
