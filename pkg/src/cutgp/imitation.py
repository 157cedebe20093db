"""Imitation learning from a scripted expert through GP-corrected observations.

The expert acts on clean simulator observations. Every stored training
pair is ``(o_e + d', pi_e(o_e))`` where ``d'`` is a draw of the learned
disturbance model, so the learner is trained on observations that look
like the target domain while its labels stay those of the source domain.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import sim
from .nn import MLP, Adam
from .sim import OBS_INDEX, ACT_DIM, OBS_DIM

log = logging.getLogger(__name__)

# independent random streams, combined with the run seed and a counter
STREAM_ENV = 1
STREAM_COLLECT = 2
STREAM_TRAIN = 3
STREAM_INIT = 4
STREAM_EVAL = 5


def derive_seed(seed: int, stream: int, index: int = 0) -> int:
    """Order-independent child seed for (run seed, stream, counter)."""
    return int(np.random.SeedSequence([int(seed), int(stream), int(index)]).generate_state(1)[0])


def beta_schedule(episode: int, decay_episodes: int = 45) -> float:
    """Expert mixing probability: 1 at episode 0, linearly down to 0 at ``decay_episodes``."""
    if episode < 0:
        raise ValueError("episode index must be non-negative")
    if decay_episodes <= 0:
        return 0.0
    return max(0.0, 1.0 - episode / decay_episodes)


# ------------------------------------------------------------------ policies

DEFAULT_EXPERT = {
    "f_contact": 1.0,  # N, contact when |f| exceeds this
    "kp_high": 2500.0,
    "kp_low_z": 1000.0,
    "t_approach": 0.0,
    "t_cut": 1.0,
    "force_ref": 9.0,  # N, feed is trimmed above this load
    "force_gain": 0.1,  # feed trim per N over force_ref
    "n_target": 1.0,  # mm
    "gain_kp": 10.0,  # 1/s
    "gain_t": 10.0,
    "gain_n": 10.0,
}


class ScriptedExpert:
    """Memoryless two-phase gain/feed/depth schedule.

    Before contact: high gains, nominal feed, depth ramping to its target.
    After contact: high feed trimmed by the measured load, compliant Z gain,
    depth held where it is.
    """

    kind = "scripted-expert"

    def __init__(self, config: Optional[dict] = None, rate_bounds=None):
        self.config = {**DEFAULT_EXPERT, **(config or {})}
        if rate_bounds is None:
            b = sim.DEFAULT_CONFIG["bounds"]
            rate_bounds = [b["kp_rate"]] * 3 + [b["t_delta_rate"], b["n_delta_rate"]]
        self.rate_bounds = np.asarray(rate_bounds, dtype=float).reshape(ACT_DIM)

    def in_contact(self, obs) -> bool:
        f = np.asarray(obs)[sim.FORCE_SLICE]
        return bool(np.linalg.norm(f) > self.config["f_contact"])

    def targets(self, obs):
        c = self.config
        obs = np.asarray(obs, dtype=float)
        if self.in_contact(obs):
            load = float(np.linalg.norm(obs[sim.FORCE_SLICE]))
            kp = np.array([c["kp_high"], c["kp_high"], c["kp_low_z"]])
            t = c["t_cut"] - c["force_gain"] * max(0.0, load - c["force_ref"])
            n = obs[OBS_INDEX["n_delta"]]  # held
        else:
            kp = np.full(3, c["kp_high"])
            t = c["t_approach"]
            n = c["n_target"]
        return kp, t, n

    def __call__(self, obs) -> np.ndarray:
        c = self.config
        obs = np.asarray(obs, dtype=float)
        kp, t, n = self.targets(obs)
        cur_kp = obs[OBS_INDEX["kp_x"]:OBS_INDEX["kp_z"] + 1]
        a = np.concatenate([
            c["gain_kp"] * (kp - cur_kp),
            [c["gain_t"] * (t - obs[OBS_INDEX["t_delta"]]),
             c["gain_n"] * (n - obs[OBS_INDEX["n_delta"]])],
        ])
        return np.clip(a, -self.rate_bounds, self.rate_bounds)

    def to_json(self) -> dict:
        return {"kind": self.kind, "config": self.config, "bounds": self.rate_bounds.tolist()}


class LinearPolicy:
    """``a = W o + b`` clipped to the rate bounds; a test expert."""

    kind = "linear"

    def __init__(self, W, b, rate_bounds):
        self.W = np.asarray(W, dtype=float).reshape(ACT_DIM, -1)
        self.b = np.asarray(b, dtype=float).reshape(ACT_DIM)
        self.rate_bounds = np.asarray(rate_bounds, dtype=float).reshape(ACT_DIM)

    def __call__(self, obs):
        return np.clip(self.W @ np.asarray(obs, dtype=float) + self.b, -self.rate_bounds, self.rate_bounds)


class LearnedPolicy:
    """MLP on normalised observations; outputs are rates scaled by the bounds."""

    kind = "learned"

    def __init__(self, net: MLP, obs_mean, obs_scale, rate_bounds, provenance=None):
        self.net = net
        self.obs_mean = np.asarray(obs_mean, dtype=float).reshape(-1)
        self.obs_scale = np.asarray(obs_scale, dtype=float).reshape(-1)
        self.rate_bounds = np.asarray(rate_bounds, dtype=float).reshape(-1)
        self.provenance = dict(provenance or {})

    @classmethod
    def init(cls, rate_bounds, hidden=(64, 64), seed: int = 0, obs_dim: int = OBS_DIM):
        rb = np.asarray(rate_bounds, dtype=float).reshape(-1)
        net = MLP([obs_dim, *hidden, rb.shape[0]], np.random.default_rng(derive_seed(seed, STREAM_INIT)))
        return cls(net, np.zeros(obs_dim), np.ones(obs_dim), rb, {"seed": int(seed)})

    def copy(self) -> "LearnedPolicy":
        return LearnedPolicy(self.net.copy(), self.obs_mean, self.obs_scale, self.rate_bounds,
                             dict(self.provenance))

    def normalise(self, obs):
        return (np.asarray(obs, dtype=float) - self.obs_mean) / self.obs_scale

    def raw(self, obs) -> np.ndarray:
        return self.net(self.normalise(obs)) * self.rate_bounds

    def __call__(self, obs) -> np.ndarray:
        return np.clip(self.raw(obs), -self.rate_bounds, self.rate_bounds)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "dims": {"obs": int(self.obs_mean.shape[0]), "act": int(self.rate_bounds.shape[0])},
            "layers": self.net.sizes,
            "activation": "tanh",
            "weights": [w.tolist() for w in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "normalization": {"mean": self.obs_mean.tolist(), "scale": self.obs_scale.tolist()},
            "bounds": self.rate_bounds.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LearnedPolicy":
        if doc.get("kind") != cls.kind:
            raise ValueError(f"not a learned policy: kind={doc.get('kind')!r}")
        net = MLP.from_json({"sizes": doc["layers"], "weights": doc["weights"], "biases": doc["biases"]})
        norm = doc["normalization"]
        return cls(net, norm["mean"], norm["scale"], doc["bounds"], doc.get("provenance"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def load_policy(spec, env: Optional[sim.CutEnv] = None):
    """Builtin name (``expert``, ``baseline``, ``null``) or a policy JSON file."""
    bounds = env.rate_bounds if env is not None else None
    if spec in ("expert", "scripted-expert"):
        return ScriptedExpert(rate_bounds=bounds)
    if spec in ("baseline", "null", "constant"):
        return sim.ConstantPolicy()
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"policy file not found: {path}")
    doc = json.loads(path.read_text())
    kind = doc.get("kind")
    if kind == "learned":
        return LearnedPolicy.from_json(doc)
    if kind == "scripted-expert":
        return ScriptedExpert(doc.get("config"), doc.get("bounds", bounds))
    raise ValueError(f"{path}: unknown policy kind {kind!r}")


# -------------------------------------------------------------------- data

@dataclass
class DemoBuffer:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __len__(self):
        return sum(self.episode_lengths)

    def append_episode(self, obs, act, info: dict):
        obs = np.asarray(obs, dtype=float).reshape(len(obs), -1)
        act = np.asarray(act, dtype=float).reshape(obs.shape[0], -1)
        if self.observations and (obs.shape[1] != self.observations[0].shape[1]
                                  or act.shape[1] != self.actions[0].shape[1]):
            raise ValueError("observation/action dimension mismatch")
        self.observations.append(obs)
        self.actions.append(act)
        self.episode_lengths.append(obs.shape[0])
        self.provenance.append(dict(info))

    def extend(self, other: "DemoBuffer"):
        for o, a, info in zip(other.observations, other.actions, other.provenance):
            self.append_episode(o, a, info)

    def arrays(self):
        if not self.observations:
            return np.zeros((0, OBS_DIM)), np.zeros((0, ACT_DIM))
        return np.concatenate(self.observations), np.concatenate(self.actions)


def disturbance_sampler(gp, times, sensor_sigma: float = 0.0) -> Callable:
    """``rng -> (len(times), 3)`` draws of GP disturbance plus sensor noise."""
    n = len(times)
    gp_draw = gp.sampler(times) if gp is not None else None

    def draw(rng):
        d = np.zeros((n, 3)) if gp_draw is None else gp_draw(rng)
        if sensor_sigma > 0:
            d = d + sensor_sigma * rng.standard_normal((n, 3))
        return d

    return draw


def collect(env: sim.CutEnv, expert, learner, beta: float, draw: Optional[Callable],
            seed: int, episode: int = 0) -> DemoBuffer:
    """One episode of mixed-control data collection.

    The environment must be clean. At each step the expert acts with
    probability ``beta``, otherwise the learner acts on the corrected
    observation. Every step stores ``(o_e + d', expert(o_e))``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if env.augmented:
        raise ValueError("collect() expects a clean environment; disturbances come from the GP")
    rng = np.random.default_rng(derive_seed(seed, STREAM_COLLECT, episode))
    env_seed = derive_seed(seed, STREAM_ENV, episode)
    obs = env.reset(env_seed)
    d = draw(rng) if draw is not None else np.zeros((env.horizon + 1, 3))
    O, A = [], []
    n_expert = 0
    while not env.done:
        o_t = sim.augment_observation(obs, d[env.k])
        a_e = np.asarray(expert(obs), dtype=float)
        use_expert = beta >= 1.0 or (beta > 0.0 and rng.random() < beta)
        if use_expert or learner is None:
            a = a_e
            n_expert += 1
        else:
            a = np.asarray(learner(o_t), dtype=float)
        O.append(o_t)
        A.append(a_e)
        obs, _, _ = env.step(a)
    buf = DemoBuffer()
    buf.append_episode(O, A, {"episode": int(episode), "beta": float(beta), "env_seed": env_seed,
                              "seed": int(seed), "expert_steps": n_expert, "steps": len(O)})
    return buf


# ---------------------------------------------------------------- training

@dataclass
class ImitationConfig:
    algorithm: str = "dagger"
    episodes: int = 50
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 20
    beta_decay_episodes: int = 45
    hidden: tuple = (64, 64)
    warm_start_episodes: int = 10
    warm_start_epochs: int = 60
    warm_start_rounds: int = 5
    warm_start_tolerance: float = 0.05

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.algorithm not in ("bc", "dagger"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def observation_stats(obs: np.ndarray):
    mean = obs.mean(axis=0)
    scale = obs.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return mean, scale


def train_bc(buffer: DemoBuffer, init: LearnedPolicy, epochs: int = 20, lr: float = 1e-3,
             batch: int = 64, seed: int = 0, round_index: int = 0,
             normalise: bool = True):
    """Mini-batch Adam regression of scaled expert actions; returns (policy, losses).

    ``losses`` holds the full-buffer training loss before training and after
    each epoch.
    """
    obs, act = buffer.arrays()
    if obs.shape[0] == 0:
        raise ValueError("cannot train on an empty buffer")
    if obs.shape[1] != init.obs_mean.shape[0] or act.shape[1] != init.rate_bounds.shape[0]:
        raise ValueError(f"buffer dims {obs.shape[1]}/{act.shape[1]} do not match the policy")
    if epochs <= 0:
        return init, []
    pol = init.copy()
    if normalise:
        pol.obs_mean, pol.obs_scale = observation_stats(obs)
    x = pol.normalise(obs)
    y = act / pol.rate_bounds
    net = pol.net
    opt = Adam(net.params, lr=lr)
    rng = np.random.default_rng(derive_seed(seed, STREAM_TRAIN, round_index))
    n = x.shape[0]
    losses = [net.loss_and_grads(x, y)[0]]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            _, grads = net.loss_and_grads(x[idx], y[idx])
            opt.step(net.params, grads)
        losses.append(float(np.mean((net(x) - y) ** 2)))
    pol.provenance = {**pol.provenance, "trained_pairs": int(n)}
    return pol, losses


def episode_reward(env: sim.CutEnv, policy, seed: int) -> float:
    return sim.rollout(env, policy, seed=seed).total_reward


def warm_start(env: sim.CutEnv, expert, config: ImitationConfig, seed: int):
    """BC on clean expert rollouts until the learner's clean reward is within tolerance.

    Returns ``(policy, info)``; ``info`` records the reward gap per round.
    """
    if env.augmented:
        raise ValueError("warm start runs in the clean environment")
    pol = LearnedPolicy.init(env.rate_bounds, config.hidden, seed)
    buf = DemoBuffer()
    check = [derive_seed(seed, STREAM_EVAL, 10_000 + i) for i in range(3)]
    expert_r = float(np.mean([episode_reward(env, expert, s) for s in check]))
    rounds = []
    ep = 0
    for r in range(config.warm_start_rounds):
        for _ in range(config.warm_start_episodes):
            buf.extend(collect(env, expert, None, 1.0, None, derive_seed(seed, STREAM_INIT, 1), ep))
            ep += 1
        pol, losses = train_bc(buf, pol, config.warm_start_epochs, config.lr, config.batch,
                               derive_seed(seed, STREAM_INIT, 2), r)
        learner_r = float(np.mean([episode_reward(env, pol, s) for s in check]))
        gap = abs(learner_r - expert_r) / max(abs(expert_r), 1e-9)
        rounds.append({"round": r, "pairs": len(buf), "learner_reward": learner_r,
                       "expert_reward": expert_r, "gap": gap, "final_loss": losses[-1]})
        log.info("warm start round %d: learner %.4f expert %.4f gap %.3f", r, learner_r, expert_r, gap)
        if gap <= config.warm_start_tolerance:
            break
    pol.provenance = {**pol.provenance, "warm_start": rounds}
    return pol, {"rounds": rounds, "converged": rounds[-1]["gap"] <= config.warm_start_tolerance}


def run_bc(env: sim.CutEnv, expert, draw: Optional[Callable], config: ImitationConfig,
           seed: int, init: Optional[LearnedPolicy] = None):
    """Collect ``config.episodes`` expert-driven episodes, then train once."""
    if init is None:
        init, _ = warm_start(env, expert, config, seed)
    buf = DemoBuffer()
    for i in range(config.episodes):
        buf.extend(collect(env, expert, None, 1.0, draw, seed, i))
    pol, losses = train_bc(buf, init, config.epochs, config.lr, config.batch, seed, 0)
    pol.provenance = {**pol.provenance, "algorithm": "bc", "seed": int(seed),
                      "episodes": buf.provenance, "loss": losses}
    return pol, buf


def run_dagger(env: sim.CutEnv, expert, draw: Optional[Callable], config: ImitationConfig,
               seed: int, init: Optional[LearnedPolicy] = None):
    """Aggregate mixed-control data for ``config.episodes`` episodes, retraining after each."""
    if init is None:
        init, _ = warm_start(env, expert, config, seed)
    pol = init
    buf = DemoBuffer()
    losses = []
    for i in range(config.episodes):
        beta = beta_schedule(i, config.beta_decay_episodes)
        buf.extend(collect(env, expert, pol, beta, draw, seed, i))
        pol, ep_loss = train_bc(buf, pol, config.epochs, config.lr, config.batch, seed, i)
        losses.append(ep_loss[-1] if ep_loss else None)
    pol.provenance = {**pol.provenance, "algorithm": "dagger", "seed": int(seed),
                      "episodes": buf.provenance, "loss": losses}
    return pol, buf


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]
