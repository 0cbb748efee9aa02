"""Differentiable elasto-plastic dough simulation with rigid kinematic tools.

Wraps the MLS-MPM kernels in a numpy-facing API: simulation state and
configuration types, the tool catalog, forward rollouts, the composite
manipulation loss, and gradients of that loss with respect to action
sequences (reverse-mode adjoint by default, central finite differences as a
config-selectable fallback).

Conventions: the simulation domain is the unit box with the y axis vertical
in both 2-D and 3-D; tool poses store 3-vector positions whose z component
is ignored in 2-D mode. Material parameters are artifact defaults tuned for
a soft dough at desk scale, exposed in SimConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, SdfPrimitive

_FLOOR_CELLS = 3  # velocity boundary band; the floor sits at 3 cells


class SimulationDivergedError(RuntimeError):
    """Particle state became non-finite or unbounded during integration."""

    def __init__(self, step: int, detail: str = ""):
        msg = f"simulation diverged at action step {step}"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs.

    grid_res is nodes-per-axis minus one (cells per axis); None picks the
    desk-scale default for the dimension (32 in 2-D, 48 in 3-D). dt must be
    CFL-safe for the stiffness: dt <= 0.5 * dx / sqrt(E / density).
    loss_weights order the composite loss terms (point-to-point, tool
    proximity, action regularization). grad_mode 'adjoint' differentiates
    through the rollout; 'fd' uses central differences per action component.
    """

    dim: int = 3
    grid_res: int | None = None
    dt: float = 5e-4
    substeps_per_action: int = 20
    youngs_modulus: float = 5e3
    poisson_ratio: float = 0.2
    yield_stress: float = 1e3
    density: float = 1e3
    gravity: float = 9.8
    ground_friction: float = 0.5
    contact_cells: float = 0.5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 0.02)
    action_bound: float = 1.0
    velocity_cap: float = 25.0
    grad_mode: str = "adjoint"

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.grid_res is None:
            object.__setattr__(self, "grid_res", 32 if self.dim == 2 else 48)
        if self.grid_res < 16:
            raise ValueError(f"grid_res must be >= 16, got {self.grid_res}")
        if self.substeps_per_action < 1:
            raise ValueError("substeps_per_action must be >= 1")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if min(self.youngs_modulus, self.yield_stress, self.density) <= 0:
            raise ValueError("material parameters must be positive")
        wave_speed = math.sqrt(self.youngs_modulus / self.density)
        dt_max = 0.5 * self.dx / wave_speed
        if self.dt <= 0 or self.dt > dt_max:
            raise ValueError(
                f"dt={self.dt} violates the CFL bound {dt_max:.3e} for "
                f"E={self.youngs_modulus}, density={self.density}, dx={self.dx:.4f}")
        if self.grad_mode not in ("adjoint", "fd"):
            raise ValueError(f"grad_mode must be 'adjoint' or 'fd', got {self.grad_mode!r}")
        if self.action_bound <= 0 or self.velocity_cap <= 0:
            raise ValueError("action_bound and velocity_cap must be positive")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_res

    @property
    def floor_height(self) -> float:
        """y coordinate of the ground plane (top of the wall band)."""
        return _FLOOR_CELLS * self.dx


# Action channels understood by the simulator. vx/vy/vz are tool-frame
# translation velocities; roll spins a capsule about its axis; open is the
# gripper plate separation rate.
_CHANNELS = ("vx", "vy", "vz", "roll", "open")


@dataclass(frozen=True)
class ToolSpec:
    """A rigid kinematic tool: geometry, controllable channels, friction."""

    name: str
    geometry: SdfPrimitive
    action_channels: tuple[str, ...]
    friction: float = 0.4

    def __post_init__(self):
        if not 3 <= len(self.action_channels) <= 5:
            raise ValueError(
                f"tool must expose between 3 and 5 action channels, got "
                f"{len(self.action_channels)}")
        for c in self.action_channels:
            if c not in _CHANNELS:
                raise ValueError(f"unknown action channel {c!r}")
        sizes = (self.geometry.params[:3] if self.geometry.kind == "plate_pair"
                 else self.geometry.params)
        if any(p <= 0 for p in sizes):
            raise ValueError("tool geometry parameters must be positive")
        if self.friction < 0:
            raise ValueError("friction must be nonnegative")

    @property
    def dof(self) -> int:
        return len(self.action_channels)


def tool_catalog() -> dict[str, ToolSpec]:
    """Desk-scale tool set: rolling pin, knife, gripper, pole.

    Pin = capsule (axis z), knife = thin box (blade normal x), gripper =
    plate pair (plates offset along x, opening controllable), pole =
    cylinder (axis y). Sizes are in domain units (the unit box).
    """
    from . import geometry as g

    return {
        "rolling_pin": ToolSpec(
            "rolling_pin", g.capsule_sdf(radius=0.035, half_length=0.12),
            ("vx", "vy", "vz", "roll"), friction=0.4),
        "knife": ToolSpec(
            "knife", g.box_sdf(half_extents=(0.012, 0.09, 0.09)),
            ("vx", "vy", "vz"), friction=0.2),
        "gripper": ToolSpec(
            "gripper", g.plate_pair_sdf(half_extents=(0.012, 0.07, 0.07), gap=0.12),
            ("vx", "vy", "vz", "open"), friction=0.6),
        "pole": ToolSpec(
            "pole", g.cylinder_sdf(radius=0.025, half_length=0.12),
            ("vx", "vy", "vz"), friction=0.4),
    }


@dataclass
class ToolPose:
    """Tool placement: world position plus the internal roll/gap state."""

    position: np.ndarray
    roll: float = 0.0
    gap: float | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    def packed(self, dim: int, tool: ToolSpec | None) -> np.ndarray:
        gap = self.gap
        if gap is None:
            gap = (tool.geometry.params[3]
                   if (tool and tool.geometry.kind == "plate_pair") else 0.0)
        return np.concatenate([self.position[:dim], [self.roll, gap]])

    @staticmethod
    def from_packed(vec: np.ndarray, dim: int) -> "ToolPose":
        pos = np.zeros(3)
        pos[:dim] = vec[:dim]
        return ToolPose(pos, roll=float(vec[dim]), gap=float(vec[dim + 1]))


@dataclass
class ActionSequence:
    """L rows of per-step action vectors, one column per tool channel."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"actions must be 2-d (L, dof), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("actions must be finite")

    @classmethod
    def zeros(cls, horizon: int, dof: int) -> "ActionSequence":
        return cls(np.zeros((horizon, dof)))

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dof(self) -> int:
        return self.values.shape[1]


@dataclass
class SimState:
    """Full particle state; arrays are owned (copy on construction)."""

    positions: np.ndarray      # (N, dim)
    velocities: np.ndarray     # (N, dim)
    def_grad: np.ndarray       # (N, dim, dim)
    affine: np.ndarray         # (N, dim, dim) APIC velocity gradient
    plastic: np.ndarray        # (N,) accumulated plastic strain
    mass: np.ndarray           # (N,)
    volume: np.ndarray         # (N,)
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float)
        n, d = self.positions.shape
        self.velocities = np.array(self.velocities, dtype=float).reshape(n, d)
        self.def_grad = np.array(self.def_grad, dtype=float).reshape(n, d, d)
        self.affine = np.array(self.affine, dtype=float).reshape(n, d, d)
        self.plastic = np.array(self.plastic, dtype=float).reshape(n)
        self.mass = np.array(self.mass, dtype=float).reshape(n)
        self.volume = np.array(self.volume, dtype=float).reshape(n)
        for name in ("positions", "velocities", "def_grad", "affine"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        if np.any(np.linalg.det(self.def_grad) <= 0):
            raise ValueError("deformation gradients must have positive determinant")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def cloud(self):
        """Positions as a PointCloud (3-D) or a plain array (2-D)."""
        if self.dim == 3:
            return PointCloud(self.positions)
        return self.positions.copy()

    def copy(self) -> "SimState":
        return SimState(self.positions, self.velocities, self.def_grad,
                        self.affine, self.plastic, self.mass, self.volume,
                        self.time)


def initial_state(points, cfg: SimConfig, total_volume: float | None = None) -> SimState:
    """Resting state from sampled material points.

    total_volume is the physical volume the points fill (pairs with
    geometry.shape_volume); when omitted, each particle gets half a grid
    cell per axis, the usual material-point heuristic.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    if cfg.dim == 3 and pts.shape[1] != 3:
        raise ValueError(f"3-d config needs (N, 3) points, got {pts.shape}")
    if cfg.dim == 2 and pts.shape[1] != 2:
        raise ValueError(f"2-d config needs (N, 2) points, got {pts.shape}")
    n = pts.shape[0]
    vol = (total_volume / n) if total_volume else (0.5 * cfg.dx) ** cfg.dim
    eye = np.broadcast_to(np.eye(cfg.dim), (n, cfg.dim, cfg.dim))
    return SimState(
        positions=pts,
        velocities=np.zeros((n, cfg.dim)),
        def_grad=eye,
        affine=np.zeros((n, cfg.dim, cfg.dim)),
        plastic=np.zeros(n),
        mass=np.full(n, cfg.density * vol),
        volume=np.full(n, vol),
    )


def _channel_map(tool: ToolSpec, dim: int) -> tuple[int, ...]:
    """Map action columns to pose-rate slots; -1 drops a column (z in 2-D)."""
    slots = {"vx": 0, "vy": 1, "vz": 2 if dim == 3 else -1,
             "roll": dim, "open": dim + 1}
    return tuple(slots[c] for c in tool.action_channels)


def _signature(cfg: SimConfig, tool: ToolSpec | None):
    if tool is None:
        tool_part = (None, None, 0.0, None)
    else:
        tool_part = (tool.geometry.kind, tool.geometry.params, tool.friction,
                     _channel_map(tool, cfg.dim))
    return (cfg.dim, cfg.grid_res, cfg.dt, cfg.substeps_per_action,
            cfg.youngs_modulus, cfg.poisson_ratio, cfg.yield_stress,
            cfg.gravity, cfg.ground_friction, cfg.contact_cells,
            cfg.velocity_cap) + tool_part


def _kernels(cfg: SimConfig, tool: ToolSpec | None):
    from . import _mpm
    return _mpm.build_kernels(_signature(cfg, tool))


def _carry(state: SimState, pose_vec: np.ndarray):
    import jax.numpy as jnp
    return tuple(jnp.asarray(a) for a in (
        state.positions, state.velocities, state.def_grad, state.affine,
        state.plastic, state.mass, state.volume, pose_vec))


def _check_row(step: int, x, v, cap: float):
    x = np.asarray(x)
    v = np.asarray(v)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SimulationDivergedError(step, "non-finite particle state")
    if np.max(np.abs(v)) > cap:
        raise SimulationDivergedError(step, f"velocity exceeded {cap} m/s")
    if np.min(x) < -0.5 or np.max(x) > 1.5:
        raise SimulationDivergedError(step, "particles left the domain")


def _validate_actions(actions: ActionSequence, tool: ToolSpec | None, cfg: SimConfig):
    if tool is not None and actions.dof != tool.dof:
        raise ValueError(
            f"action dof {actions.dof} does not match tool "
            f"{tool.name!r} dof {tool.dof}")
    if np.max(np.abs(actions.values), initial=0.0) > cfg.action_bound + 1e-12:
        raise ValueError(
            f"action components exceed the bound {cfg.action_bound}")


def rollout(state: SimState, tool: ToolSpec | None, pose: ToolPose | None,
            actions: ActionSequence, cfg: SimConfig):
    """Integrate the action sequence; returns (final state, per-step clouds).

    Each action row is held constant for substeps_per_action substeps of dt
    seconds; one cloud snapshot is recorded after each row. Integration is
    deterministic. Raises SimulationDivergedError (with the offending row
    index) when the state blows up.
    """
    if state.dim != cfg.dim:
        raise ValueError(f"state is {state.dim}-d but config is {cfg.dim}-d")
    _validate_actions(actions, tool, cfg)
    kern = _kernels(cfg, tool)
    pose_vec = (pose.packed(cfg.dim, tool) if pose is not None
                else np.zeros(cfg.dim + 2))
    carry = _carry(state, pose_vec)
    clouds = []
    for step in range(actions.horizon):
        carry, xs = kern["run_row"](carry, actions.values[step])
        _check_row(step, xs, carry[1], cfg.velocity_cap)
        clouds.append(np.asarray(xs))
    final = SimState(
        positions=np.asarray(carry[0]), velocities=np.asarray(carry[1]),
        def_grad=np.asarray(carry[2]), affine=np.asarray(carry[3]),
        plastic=np.asarray(carry[4]), mass=np.asarray(carry[5]),
        volume=np.asarray(carry[6]),
        time=state.time + actions.horizon * cfg.substeps_per_action * cfg.dt)
    return final, np.stack(clouds) if clouds else np.zeros((0, state.count, cfg.dim))


def integrate_pose(pose: ToolPose, tool: ToolSpec, actions: ActionSequence,
                   cfg: SimConfig) -> ToolPose:
    """Final tool pose after the action sequence (same integrator as rollout)."""
    cmap = _channel_map(tool, cfg.dim)
    vec = pose.packed(cfg.dim, tool)
    for row in np.asarray(actions.values):
        rates = np.zeros(cfg.dim + 2)
        for col, slot in enumerate(cmap):
            if slot >= 0:
                rates[slot] += row[col]
        for _ in range(cfg.substeps_per_action):
            vec = vec + cfg.dt * rates
            if tool.geometry.kind == "plate_pair":
                vec[cfg.dim + 1] = max(vec[cfg.dim + 1], 0.0)
    return ToolPose.from_packed(vec, cfg.dim)


def _coerce_cloud(c) -> np.ndarray:
    if isinstance(c, PointCloud):
        return c.points
    return np.asarray(c, dtype=float)


def loss_p2p(current, candidate) -> float:
    """Index-aligned L1 loss: sum_i ||p_i' - p_i||_1.

    The alignment comes from transport.emd_step, whose output preserves
    input indexing; no matching is performed here.
    """
    a, b = _coerce_cloud(current), _coerce_cloud(candidate)
    if a.shape != b.shape:
        raise ValueError(f"cloud shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def tool_sdf_values(tool: ToolSpec, pose: ToolPose, points) -> np.ndarray:
    """Signed distance from the posed tool surface to each point."""
    pts = _coerce_cloud(points)
    dim = pts.shape[1]
    from . import _mpm
    import jax.numpy as jnp
    sdf_fn, _ = _mpm.make_tool_functions(tool.geometry.kind, tool.geometry.params, dim)
    phi = sdf_fn(jnp.asarray(pose.packed(dim, tool)), jnp.asarray(pts))
    return np.asarray(phi)


def tool_distance(tool: ToolSpec, pose: ToolPose, points) -> float:
    """Distance from the tool surface to the nearest point (<= 0 if touching)."""
    return float(tool_sdf_values(tool, pose, points).min())


def composite_loss(current, candidate, tool: ToolSpec | None, pose: ToolPose | None,
                   velocities: ActionSequence,
                   weights: tuple[float, float, float] = (1.0, 1.0, 0.02)) -> float:
    """Weighted manipulation objective.

    point-to-point term + tool proximity term + action regularization. The
    proximity term is the clamped distance from the tool to the nearest
    point, max(min_i sdf(p_i), 0): zero once the tool touches the material,
    so only the approach phase is penalized. The regularization is the mean
    squared action-row magnitude.
    """
    p2p = loss_p2p(current, candidate)
    prox = 0.0
    if tool is not None and pose is not None:
        prox = max(tool_distance(tool, pose, current), 0.0)
    vals = np.asarray(velocities.values)
    reg = float(np.mean(np.sum(vals ** 2, axis=-1))) if vals.size else 0.0
    return weights[0] * p2p + weights[1] * prox + weights[2] * reg


def grad_actions(state: SimState, tool: ToolSpec | None, pose: ToolPose | None,
                 actions: ActionSequence, candidate, cfg: SimConfig,
                 return_loss: bool = False):
    """Gradient of composite_loss(final state, candidate, ...) w.r.t. actions.

    'adjoint' mode differentiates the whole rollout in reverse mode with
    per-row checkpointing; 'fd' mode runs central differences per action
    component (2*L*dof rollouts) and exists as the slow trustworthy oracle.
    With return_loss the (loss, gradient) pair is returned — the forward
    value comes for free from the reverse pass.
    """
    _validate_actions(actions, tool, cfg)
    cand = _coerce_cloud(candidate)
    if cand.shape != state.positions.shape:
        raise ValueError(
            f"candidate shape {cand.shape} does not match state {state.positions.shape}")
    import jax.numpy as jnp
    kern = _kernels(cfg, tool)
    pose_vec = (pose.packed(cfg.dim, tool) if pose is not None
                else np.zeros(cfg.dim + 2))
    carry = _carry(state, pose_vec)
    weights = jnp.asarray(cfg.loss_weights)

    if cfg.grad_mode == "adjoint":
        loss, grad = kern["loss_grad"](jnp.asarray(actions.values), carry,
                                       jnp.asarray(cand), weights)
        grad = np.asarray(grad)
        if not (np.isfinite(float(loss)) and np.all(np.isfinite(grad))):
            # Locate the offending row for the error by replaying forward.
            rollout(state, tool, pose, actions, cfg)
            raise SimulationDivergedError(actions.horizon - 1, "non-finite gradient")
        return (float(loss), grad) if return_loss else grad

    a0 = np.asarray(actions.values)
    grad = np.zeros_like(a0)
    h = 1e-4
    for i in range(a0.shape[0]):
        for j in range(a0.shape[1]):
            hi, lo = a0.copy(), a0.copy()
            hi[i, j] += h
            lo[i, j] -= h
            lp = float(kern["loss"](jnp.asarray(hi), carry, jnp.asarray(cand), weights))
            lm = float(kern["loss"](jnp.asarray(lo), carry, jnp.asarray(cand), weights))
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise SimulationDivergedError(i, "non-finite loss in finite differences")
            grad[i, j] = (lp - lm) / (2 * h)
    if return_loss:
        base = float(kern["loss"](jnp.asarray(a0), carry, jnp.asarray(cand), weights))
        return base, grad
    return grad
