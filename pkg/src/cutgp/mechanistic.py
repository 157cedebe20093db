"""Mechanistic flute force model for a rotating disc cutter.

Conventions
-----------
Flute angles ``theta`` are measured in the cutter plane from the direction
pointing into the material, perpendicular to the feed (``theta = 0``), towards
the feed direction (``theta = pi/2``). A flute therefore removes material only
while ``sin(theta) > 0``; conventional (up) milling enters at ``theta = 0``
with zero chip thickness.

Flute-frame forces are ordered ``(tangential, radial, axial)`` and are the
forces acting on the tool. The tool model frame M has its x axis at
``theta = 0`` and its y axis at ``theta = pi/2``; ``flute_rotation`` maps the
flute frame into M.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ToolModel:
    """Cutter geometry and mechanistic constants.

    ``k_c`` (N/mm^2) and ``k_e`` (N/mm) are ordered tangential, radial,
    axial. ``edge_thickness`` may be a scalar shared by every flute or one
    value per flute.
    """

    n_flutes: int
    edge_thickness: object
    k_c: np.ndarray
    k_e: np.ndarray
    tool_radius: float
    phase_offsets: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if int(self.n_flutes) < 1:
            raise ValueError("n_flutes must be >= 1")
        b = np.broadcast_to(np.asarray(self.edge_thickness, dtype=float),
                            (int(self.n_flutes),)).copy()
        if np.any(b <= 0):
            raise ValueError("edge thickness must be positive")
        if self.tool_radius <= 0:
            raise ValueError("tool radius must be positive")
        kc = np.asarray(self.k_c, dtype=float).reshape(3)
        ke = np.asarray(self.k_e, dtype=float).reshape(3)
        if self.phase_offsets is None:
            offs = 2.0 * np.pi * np.arange(int(self.n_flutes)) / int(self.n_flutes)
        else:
            offs = np.asarray(self.phase_offsets, dtype=float).reshape(int(self.n_flutes))
        object.__setattr__(self, "n_flutes", int(self.n_flutes))
        object.__setattr__(self, "edge_thickness", b)
        object.__setattr__(self, "k_c", kc)
        object.__setattr__(self, "k_e", ke)
        object.__setattr__(self, "tool_radius", float(self.tool_radius))
        object.__setattr__(self, "phase_offsets", offs)

    @classmethod
    def from_config(cls, cfg: dict) -> "ToolModel":
        return cls(
            n_flutes=cfg["n_flutes"],
            edge_thickness=cfg["edge_thickness_mm"],
            k_c=cfg["k_c"],
            k_e=cfg["k_e"],
            tool_radius=cfg["tool_radius_mm"],
            phase_offsets=cfg.get("phase_offsets"),
        )

    def with_constants(self, k_c, k_e) -> "ToolModel":
        return ToolModel(self.n_flutes, self.edge_thickness, k_c, k_e,
                         self.tool_radius, self.phase_offsets)


@dataclass(frozen=True)
class SpindleState:
    speed: float  # rev/s
    feed_rate: float  # mm/s
    rotation_angle: float = 0.0  # rad

    def flute_angles(self, tool: ToolModel) -> np.ndarray:
        return self.rotation_angle + tool.phase_offsets


def chip_thickness(theta, spindle: SpindleState, n_flutes: int):
    """Uncut chip thickness (mm); zero where the flute is leaving the cut."""
    if spindle.speed <= 0:
        raise ValueError("spindle speed must be positive to compute chip thickness")
    h = np.sin(theta) * spindle.feed_rate / (n_flutes * spindle.speed)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


def flute_force(tool: ToolModel, flute: int, h) -> np.ndarray:
    """Flute-frame force ``b k_e + b k_c h`` (N); ``h`` may be an array."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("chip thickness must be non-negative")
    b = tool.edge_thickness[flute]
    return b * tool.k_e + b * tool.k_c * h[..., None]


def flute_rotation(theta) -> np.ndarray:
    """Rotation(s) taking flute-frame (t, r, a) components into frame M.

    The tool feels the tangential force against the flute's motion and the
    radial force pushing it away from the cut surface.
    """
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    z = np.zeros_like(theta)
    o = np.ones_like(theta)
    # columns: -tangent, -radial, -axis; a proper rotation
    return np.stack([
        np.stack([s, -c, z], axis=-1),
        np.stack([-c, -s, z], axis=-1),
        np.stack([z, z, -o], axis=-1),
    ], axis=-2)


def total_force(tool: ToolModel, spindle: SpindleState, engagement) -> np.ndarray:
    """Engagement-weighted sum of rotated flute forces in frame M (N)."""
    g = np.asarray(engagement, dtype=bool).reshape(-1)
    if g.shape[0] != tool.n_flutes:
        raise ValueError(f"engagement has {g.shape[0]} flags for {tool.n_flutes} flutes")
    if not g.any():
        return np.zeros(3)
    theta = spindle.flute_angles(tool)
    h = chip_thickness(theta, spindle, tool.n_flutes)
    total = np.zeros(3)
    for p in np.flatnonzero(g):
        total += flute_rotation(theta[p]) @ flute_force(tool, p, h[p])
    return total


def total_force_batch(tool: ToolModel, theta: np.ndarray, h: np.ndarray,
                      engaged: np.ndarray) -> np.ndarray:
    """Vectorised :func:`total_force` over a leading batch axis.

    ``theta``, ``h`` and ``engaged`` have shape ``(batch, n_flutes)``.
    Returns ``(batch, 3)`` forces in frame M.
    """
    b = tool.edge_thickness
    fp = b[None, :, None] * (tool.k_e + tool.k_c * h[..., None])  # (B, P, 3)
    fp = fp * engaged[..., None]
    rot = flute_rotation(theta)  # (B, P, 3, 3)
    return np.einsum("bpij,bpj->bi", rot, fp)


# M axes expressed in the base frame W: x_M = -z_W, y_M = -y_W, z_M = -x_W
M_TO_W = np.array([
    [0.0, 0.0, -1.0],
    [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0],
])


def edge_direction(theta) -> np.ndarray:
    """Unit vector(s) from tool centre to flute edge in the W ``(y, z)`` plane."""
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), -np.cos(theta)], axis=-1)


def engagement_from_geometry(centre_yz, occupancy, tool: ToolModel,
                             spindle: SpindleState, probe: float = 0.0) -> np.ndarray:
    """Flute engagement flags for a cutter centred at ``centre_yz``.

    ``occupancy`` is any callable mapping an ``(..., 2)`` array of ``(y, z)``
    points to booleans (the sim's material grid provides one). A flute is
    engaged when its edge point, pushed ``probe`` mm radially outwards, lies
    in material and its chip thickness is positive.
    """
    theta = spindle.flute_angles(tool)
    pts = np.asarray(centre_yz, dtype=float) + (tool.tool_radius + probe) * edge_direction(theta)
    inside = np.asarray(occupancy(pts), dtype=bool)
    h = chip_thickness(theta, spindle, tool.n_flutes) if spindle.speed > 0 else np.zeros_like(theta)
    return inside & (np.asarray(h) > 0)


def sample_constants(ranges: dict, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(k_c, k_e)`` uniformly within ``{"k_c": [lo, hi], "k_e": [lo, hi]}``
    where each bound is a 3-vector."""
    kc_lo, kc_hi = (np.asarray(v, dtype=float) for v in ranges["k_c"])
    ke_lo, ke_hi = (np.asarray(v, dtype=float) for v in ranges["k_e"])
    u = rng.random(6)
    return kc_lo + u[:3] * (kc_hi - kc_lo), ke_lo + u[3:] * (ke_hi - ke_lo)
