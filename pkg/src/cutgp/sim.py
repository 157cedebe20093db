"""Planar cutting environment.

A disc cutter (axis along x) feeds along -y through a rectangular slab
whose cross-section in the y-z plane is an occupancy grid. The tool centre
point (TCP) is the lowest point of the disc, so the depth of cut is the
distance of the TCP below the slab surface. The reference path runs along
the surface (zero reference depth of cut); the policy picks the actual
depth through its offset ``n_delta``.

The tool tracks its setpoint with a per-axis critically damped second-order
response of stiffness ``K_p``; the cutting force enters as an acceleration
through ``compliance``. Forces are evaluated from the mechanistic flute
model at ``substeps`` spindle angles per control step and averaged, which
is what the force sensor reports.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import mechanistic as mech

log = logging.getLogger(__name__)

OBS_NAMES = (
    "path_alignment",
    "e_x", "e_y", "e_z",
    "v_x", "v_y", "v_z",
    "f_x", "f_y", "f_z",
    "t_delta", "n_delta",
    "kp_x", "kp_y", "kp_z",
)
OBS_INDEX = {name: i for i, name in enumerate(OBS_NAMES)}
ACTION_NAMES = ("kp_rate_x", "kp_rate_y", "kp_rate_z", "t_delta_rate", "n_delta_rate")
OBS_DIM = len(OBS_NAMES)
ACT_DIM = len(ACTION_NAMES)

FORCE_SLICE = slice(OBS_INDEX["f_x"], OBS_INDEX["f_z"] + 1)

DEFAULT_CONFIG = {
    "tool": {
        "n_flutes": 4,
        "edge_thickness_mm": 2.0,
        "k_c": [200.0, 80.0, 25.0],
        "k_e": [8.0, 4.0, 1.5],
        "tool_radius_mm": 10.0,
        "spindle_rps": 25.0,
    },
    # per-episode material draw; omit to keep the tool constants fixed
    "constants_ranges": {
        "k_c": [[150.0, 60.0, 18.0], [250.0, 100.0, 32.0]],
        "k_e": [[6.0, 3.0, 1.0], [10.0, 5.0, 2.0]],
    },
    "material": {
        "surface_z_mm": 0.0,
        "y_start_mm": 0.0,
        "extent_mm": [40.0, 5.0],  # length along y, depth below surface
        "thickness_mm": 8.0,
        "grid_mm": 0.1,
    },
    "path": {
        "start": [0.0, 55.0, 0.0],
        "end": [0.0, -6.0, 0.0],
        "speed_nominal": 12.5,  # mm/s, 0.75 m/min
    },
    "weights": {
        "Q_MRV": 1e-2,
        "Q_cut": 0.05,
        "Q_d": [1e-2, 1e-2, 1e-2],
        "Q_f": [1e-4, 1e-4, 1e-4],
    },
    "bounds": {
        "kp": [100.0, 2500.0],
        "t_delta": [-1.0, 1.0],
        "n_delta": [0.0, 3.0],
        "kp_rate": 5000.0,
        "t_delta_rate": 2.0,
        "n_delta_rate": 2.0,
    },
    "initial": {"kp": [1000.0, 1000.0, 1000.0], "t_delta": 0.0, "n_delta": 0.0},
    "dt": 0.02,
    "horizon": 600,
    "substeps": 16,
    "compliance": 20.0,  # mm/s^2 per N
    "augmentation": {"enabled": False, "gp_model_path": None, "sensor_sigma": 0.0},
}


class EpisodeDone(RuntimeError):
    """step() called on a finished episode."""


def merge_config(base: dict, override: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, override: Optional[dict] = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        cfg = merge_config(cfg, json.loads(Path(path).read_text()))
    return merge_config(cfg, override)


@dataclass(frozen=True)
class RewardWeights:
    q_mrv: float
    q_cut: float
    q_d: np.ndarray
    q_f: np.ndarray

    @classmethod
    def from_config(cls, w: dict) -> "RewardWeights":
        out = cls(float(w["Q_MRV"]), float(w["Q_cut"]),
                  np.asarray(w["Q_d"], dtype=float).reshape(3),
                  np.asarray(w["Q_f"], dtype=float).reshape(3))
        if out.q_mrv < 0 or out.q_cut < 0 or np.any(out.q_d < 0) or np.any(out.q_f < 0):
            raise ValueError("reward weights must be non-negative")
        return out

    def reward(self, d_mrv, dt, e, f):
        """Per-step reward; arguments may carry a leading time axis."""
        e = np.asarray(e, dtype=float)
        f = np.asarray(f, dtype=float)
        return (self.q_mrv * np.asarray(d_mrv) - self.q_cut * np.asarray(dt)
                - (e * e * self.q_d).sum(axis=-1) - (f * f * self.q_f).sum(axis=-1))

    def components(self, d_mrv, dt, e, f) -> dict:
        e = np.asarray(e, dtype=float)
        f = np.asarray(f, dtype=float)
        return {
            "mrv": float(np.sum(self.q_mrv * np.asarray(d_mrv))),
            "time": float(-np.sum(self.q_cut * np.asarray(dt) * np.ones(len(e)))),
            "path": float(-np.sum((e * e * self.q_d).sum(axis=-1))),
            "force": float(-np.sum((f * f * self.q_f).sum(axis=-1))),
        }


class Material:
    """Boolean occupancy grid over the slab cross-section (y, z)."""

    def __init__(self, y_start, length, surface_z, depth, grid, thickness):
        self.y0 = float(y_start)
        self.z0 = float(surface_z) - float(depth)
        self.surface_z = float(surface_z)
        self.grid = float(grid)
        self.thickness = float(thickness)
        self.ny = int(round(length / grid))
        self.nz = int(round(depth / grid))
        if self.ny <= 0 or self.nz <= 0:
            self.ny = max(self.ny, 0)
            self.nz = max(self.nz, 0)
        self.occ = np.ones((self.ny, self.nz), dtype=bool)
        self.yc = self.y0 + (np.arange(self.ny) + 0.5) * self.grid
        self.zc = self.z0 + (np.arange(self.nz) + 0.5) * self.grid

    @classmethod
    def from_config(cls, m: dict) -> "Material":
        length, depth = m["extent_mm"]
        return cls(m.get("y_start_mm", 0.0), length, m["surface_z_mm"], depth,
                   m["grid_mm"], m["thickness_mm"])

    @property
    def cell_volume(self):
        return self.grid * self.grid * self.thickness

    def occupied(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        iy = np.floor((pts[..., 0] - self.y0) / self.grid).astype(int)
        iz = np.floor((pts[..., 1] - self.z0) / self.grid).astype(int)
        ok = (iy >= 0) & (iy < self.ny) & (iz >= 0) & (iz < self.nz)
        out = np.zeros(pts.shape[:-1], dtype=bool)
        out[ok] = self.occ[iy[ok], iz[ok]]
        return out

    def remove_disc(self, cy, cz, radius) -> int:
        """Clear cells whose centres lie inside the disc; returns the count."""
        if self.ny == 0 or self.nz == 0:
            return 0
        lo_y = max(0, int(np.floor((cy - radius - self.y0) / self.grid)))
        hi_y = min(self.ny, int(np.ceil((cy + radius - self.y0) / self.grid)) + 1)
        lo_z = max(0, int(np.floor((cz - radius - self.z0) / self.grid)))
        hi_z = min(self.nz, int(np.ceil((cz + radius - self.z0) / self.grid)) + 1)
        if lo_y >= hi_y or lo_z >= hi_z:
            return 0
        dy = self.yc[lo_y:hi_y, None] - cy
        dz = self.zc[None, lo_z:hi_z] - cz
        inside = dy * dy + dz * dz <= radius * radius
        block = self.occ[lo_y:hi_y, lo_z:hi_z]
        hit = block & inside
        n = int(hit.sum())
        if n:
            block[hit] = False
        return n

    def removed_cells(self) -> int:
        return int(self.occ.size - self.occ.sum())


@dataclass
class Trajectory:
    """Per-step episode record; ``states`` holds arrays keyed by name."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    states: dict
    dt: float
    seed: Optional[int] = None

    def __len__(self):
        return self.rewards.shape[0]

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


TRACE_COLUMNS = ("t", "e_x", "e_z", "F_y", "F_z", "t_delta", "n_delta",
                 "Kp_x", "Kp_y", "Kp_z", "reward",
                 "e_y", "F_x", "d_mrv", "dt")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    s = traj.states
    cols = {
        "t": s["t"], "e_x": s["e"][:, 0], "e_z": s["e"][:, 2],
        "F_y": s["f"][:, 1], "F_z": s["f"][:, 2],
        "t_delta": s["t_delta"], "n_delta": s["n_delta"],
        "Kp_x": s["kp"][:, 0], "Kp_y": s["kp"][:, 1], "Kp_z": s["kp"][:, 2],
        "reward": traj.rewards,
        "e_y": s["e"][:, 1], "F_x": s["f"][:, 0], "d_mrv": s["d_mrv"],
        "dt": np.full(len(traj), traj.dt),
    }
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i in range(len(traj)):
            w.writerow([repr(float(cols[c][i])) for c in TRACE_COLUMNS])


def read_trajectory_csv(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.asarray([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def _critically_damped(x, v, target, omega, dt):
    """Exact response of x'' + 2 w x' + w^2 (x - target) = 0 over dt."""
    y0 = x - target
    a = v + omega * y0
    e = np.exp(-omega * dt)
    return target + (y0 + a * dt) * e, (v - omega * a * dt) * e


class CutEnv:
    """Cutting environment with an optional GP disturbance on the force sensor."""

    def __init__(self, config: Optional[dict] = None, gp_model=None):
        self.config = cfg = merge_config(DEFAULT_CONFIG, config)
        try:
            self.base_tool = mech.ToolModel.from_config(cfg["tool"])
            self.spindle_rps = float(cfg["tool"]["spindle_rps"])
            self.weights = RewardWeights.from_config(cfg["weights"])
            b = cfg["bounds"]
            self.kp_bounds = (float(b["kp"][0]), float(b["kp"][1]))
            self.t_bounds = (float(b["t_delta"][0]), float(b["t_delta"][1]))
            self.n_bounds = (float(b["n_delta"][0]), float(b["n_delta"][1]))
            self.rate_bounds = np.array([b["kp_rate"]] * 3 + [b["t_delta_rate"], b["n_delta_rate"]],
                                        dtype=float)
            self.dt = float(cfg["dt"])
            self.horizon = int(cfg["horizon"])
            self.substeps = int(cfg["substeps"])
            self.compliance = float(cfg["compliance"])
            p = cfg["path"]
            self.path_start = np.asarray(p["start"], dtype=float).reshape(3)
            self.path_end = np.asarray(p["end"], dtype=float).reshape(3)
            self.v_nominal = float(p["speed_nominal"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid environment config: {exc!r}") from exc
        if self.dt <= 0 or self.substeps < 1 or self.horizon < 1:
            raise ValueError("dt, substeps and horizon must be positive")
        if self.spindle_rps <= 0:
            raise ValueError("spindle speed must be positive")
        if self.kp_bounds[0] <= 0 or self.kp_bounds[0] > self.kp_bounds[1]:
            raise ValueError("invalid K_p bounds")
        seg = self.path_end - self.path_start
        self.path_length = float(np.linalg.norm(seg))
        if self.path_length <= 0:
            raise ValueError("reference path has zero length")
        self.tangent = seg / self.path_length
        self.doc_dir = np.array([0.0, 0.0, -1.0])
        aug = cfg.get("augmentation") or {}
        self.sensor_sigma = float(aug.get("sensor_sigma", 0.0) or 0.0)
        self.gp = gp_model
        if self.gp is None and aug.get("enabled") and aug.get("gp_model_path"):
            from .gp import GpModel
            self.gp = GpModel.load(aug["gp_model_path"])
        enabled = bool(aug.get("enabled")) or gp_model is not None
        self.augmented = enabled and (self.gp is not None or self.sensor_sigma > 0)
        self._draw_grid = None
        self.done = True

    # ------------------------------------------------------------------ setup
    @property
    def time_grid(self) -> np.ndarray:
        return np.arange(self.horizon + 1) * self.dt

    def disturbance_sampler(self):
        """Cached GP posterior sampler on the episode time grid."""
        if self._draw_grid is None and self.gp is not None:
            self._draw_grid = self.gp.sampler(self.time_grid)
        return self._draw_grid

    def draw_disturbance(self, rng: np.random.Generator) -> np.ndarray:
        """One episode's GP draw plus sensor noise, shape (horizon + 1, 3)."""
        n = self.horizon + 1
        d = np.zeros((n, 3))
        sampler = self.disturbance_sampler()
        if sampler is not None:
            d += sampler(rng)
        if self.sensor_sigma > 0:
            d += self.sensor_sigma * rng.standard_normal((n, 3))
        return d

    def reset(self, seed: int = 0) -> np.ndarray:
        cfg = self.config
        self.seed = int(seed)
        self.rng = np.random.default_rng([self.seed, 0x5EED])
        ranges = cfg.get("constants_ranges")
        if ranges:
            kc, ke = mech.sample_constants(ranges, self.rng)
            self.tool = self.base_tool.with_constants(kc, ke)
        else:
            self.tool = self.base_tool
        self.material = Material.from_config(cfg["material"])
        init = cfg["initial"]
        self.kp = np.clip(np.asarray(init["kp"], dtype=float).reshape(3), *self.kp_bounds)
        self.t_delta = float(np.clip(init["t_delta"], *self.t_bounds))
        self.n_delta = float(np.clip(init["n_delta"], *self.n_bounds))
        self.s = 0.0
        self.pos = self.path_start + self.n_delta * self.doc_dir
        self.vel = np.zeros(3)
        self.angle = 0.0
        self.time = 0.0
        self.k = 0
        self.mrv = 0.0
        self.force = np.zeros(3)
        self.disturbance = self.draw_disturbance(self.rng) if self.augmented else None
        self.done = False
        self.measured = self._measure()
        return self.observe()

    # --------------------------------------------------------------- helpers
    def commanded_feed(self) -> float:
        return self.v_nominal * (1.0 + self.t_delta)

    def setpoint(self) -> np.ndarray:
        return self.path_start + self.s * self.tangent + self.n_delta * self.doc_dir

    def path_error(self, pos=None) -> np.ndarray:
        pos = self.pos if pos is None else pos
        r = pos - self.path_start
        along = np.clip(r @ self.tangent, 0.0, self.path_length)
        return r - along * self.tangent

    def _measure(self) -> np.ndarray:
        f = self.force.copy()
        if self.disturbance is not None:
            f = f + self.disturbance[min(self.k, self.horizon)]
        return f

    def observe(self) -> np.ndarray:
        c_dot = self.tangent * self.commanded_feed()
        return np.concatenate([
            [c_dot @ self.vel],
            self.path_error(),
            self.vel,
            self.measured,
            [self.t_delta, self.n_delta],
            self.kp,
        ])

    def cutting_force(self) -> np.ndarray:
        """Mean force on the tool (frame W) over the coming control step."""
        tool = self.tool
        k = np.arange(self.substeps)
        angles = self.angle + 2.0 * np.pi * self.spindle_rps * (k + 0.5) * self.dt / self.substeps
        theta = angles[:, None] + tool.phase_offsets[None, :]
        feed = max(0.0, float(self.vel @ self.tangent))
        spindle = mech.SpindleState(self.spindle_rps, feed)
        h = mech.chip_thickness(theta, spindle, tool.n_flutes)
        centre = np.array([self.pos[1], self.pos[2] + tool.tool_radius])
        pts = centre + (tool.tool_radius + self.material.grid) * mech.edge_direction(theta)
        engaged = self.material.occupied(pts) & (h > 0)
        if not engaged.any():
            return np.zeros(3)
        f_m = mech.total_force_batch(tool, theta, h, engaged).mean(axis=0)
        return mech.M_TO_W @ f_m

    # ------------------------------------------------------------------ step
    def apply_rates(self, action) -> np.ndarray:
        a = np.clip(np.asarray(action, dtype=float).reshape(ACT_DIM), -self.rate_bounds, self.rate_bounds)
        self.kp = np.clip(self.kp + a[:3] * self.dt, *self.kp_bounds)
        self.t_delta = float(np.clip(self.t_delta + a[3] * self.dt, *self.t_bounds))
        self.n_delta = float(np.clip(self.n_delta + a[4] * self.dt, *self.n_bounds))
        return a

    def step(self, action):
        if self.done:
            raise EpisodeDone("episode finished; call reset()")
        self.apply_rates(action)
        self.s = min(self.path_length, self.s + self.commanded_feed() * self.dt)
        sp = self.setpoint()
        self.force = self.cutting_force()
        omega = np.sqrt(self.kp)
        target = sp + self.compliance * self.force / self.kp
        self.pos, self.vel = _critically_damped(self.pos, self.vel, target, omega, self.dt)
        tool = self.tool
        removed = self.material.remove_disc(self.pos[1], self.pos[2] + tool.tool_radius,
                                            tool.tool_radius)
        d_mrv = removed * self.material.cell_volume
        self.mrv += d_mrv
        self.angle = float(np.mod(self.angle + 2.0 * np.pi * self.spindle_rps * self.dt, 2.0 * np.pi))
        self.time += self.dt
        self.k += 1
        self.measured = self._measure()
        e = self.path_error()
        reward = float(self.weights.reward(d_mrv, self.dt, e, self.measured))
        self.done = self.s >= self.path_length or self.k >= self.horizon
        self.last_info = {"d_mrv": d_mrv, "e": e, "f": self.measured.copy(),
                          "f_mech": self.force.copy(), "setpoint": sp}
        return self.observe(), reward, self.done


def augment_observation(obs, draw) -> np.ndarray:
    """Add a force disturbance to the measured-force entries of ``obs``."""
    draw = np.asarray(draw, dtype=float)
    if not np.all(np.isfinite(draw)):
        raise ValueError("disturbance draw must be finite")
    out = np.array(obs, dtype=float, copy=True)
    out[..., FORCE_SLICE] += draw
    return out


Policy = Callable[[np.ndarray], np.ndarray]


class ConstantPolicy:
    """Always returns the same action (zero rates hold the process parameters)."""

    kind = "constant"

    def __init__(self, action=None):
        self.action = np.zeros(ACT_DIM) if action is None else np.asarray(action, dtype=float)

    def __call__(self, obs):
        return self.action.copy()


def rollout(env: CutEnv, policy: Policy, horizon: Optional[int] = None,
            seed: int = 0, obs_fn: Optional[Callable] = None) -> Trajectory:
    """Run one seeded episode and record everything needed for reports.

    ``obs_fn(obs, k)`` optionally transforms the observation handed to the
    policy (the env still evolves from the raw one).
    """
    obs = env.reset(seed)
    limit = env.horizon if horizon is None else int(horizon)
    O, A, R = [], [], []
    keys = ("t", "e", "f", "f_mech", "t_delta", "n_delta", "kp", "d_mrv", "mrv", "pos", "vel")
    st = {k: [] for k in keys}
    k = 0
    while k < limit and not env.done:
        o_in = obs if obs_fn is None else obs_fn(obs, k)
        a = np.asarray(policy(o_in), dtype=float)
        O.append(obs)
        obs, r, _ = env.step(a)
        A.append(a)
        R.append(r)
        info = env.last_info
        st["t"].append(env.time)
        st["e"].append(info["e"])
        st["f"].append(info["f"])
        st["f_mech"].append(info["f_mech"])
        st["t_delta"].append(env.t_delta)
        st["n_delta"].append(env.n_delta)
        st["kp"].append(env.kp.copy())
        st["d_mrv"].append(info["d_mrv"])
        st["mrv"].append(env.mrv)
        st["pos"].append(env.pos.copy())
        st["vel"].append(env.vel.copy())
        k += 1
    shapes = {"e": 3, "f": 3, "f_mech": 3, "kp": 3, "pos": 3, "vel": 3}
    states = {key: np.asarray(v, dtype=float).reshape((-1, shapes[key]) if key in shapes else (-1,))
              for key, v in st.items()}
    return Trajectory(np.asarray(O, dtype=float).reshape(-1, OBS_DIM),
                      np.asarray(A, dtype=float).reshape(-1, ACT_DIM),
                      np.asarray(R, dtype=float), states, env.dt, seed)


def recompute_rewards(traj: Trajectory, weights: RewardWeights) -> np.ndarray:
    s = traj.states
    return weights.reward(s["d_mrv"], traj.dt, s["e"], s["f"])
