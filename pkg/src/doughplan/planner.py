"""Closed-loop MPC that walks a particle state toward a target cloud.

The loop alternates three moves: ask optimal transport where the cloud can
plausibly go next (a candidate a few EMD-gradient steps away), ask the
differentiable simulator for a short action horizon that chases that
candidate, then execute the horizon and re-measure. When an executed
horizon fails to reduce the transport distance, the executed actions are
reverted and the tool is picked up and re-placed where the remaining
deformation is largest — the reset move that escapes the local minima
greedy gradient-chasing falls into.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .geometry import PointCloud
from .physics import (
    ActionSequence,
    SimConfig,
    SimState,
    SimulationDivergedError,
    ToolPose,
    ToolSpec,
    composite_loss,
    grad_actions,
    integrate_pose,
    rollout,
    tool_sdf_values,
)
from .transport import EmdStepParams, SinkhornParams

__all__ = [
    "PlannerConfig",
    "DeformationField",
    "IterationRecord",
    "PlanTrace",
    "select_initial_position",
    "optimize_actions",
    "mpc_run",
]

# Absolute floor for the stop threshold so a goal that is already met
# (emd ~ 0) still terminates when the relative threshold collapses to 0.
_TAU_FLOOR = 1e-12


@dataclass(frozen=True)
class PlannerConfig:
    """Knobs for the MPC loop.

    max_steps bounds the total executed simulation rows; each accepted
    horizon consumes L of them. K is the candidate step count, J the inner
    optimization iterations per horizon, alpha the candidate step length
    (None resolves to 2% of the scene diagonal, see transport). The stop
    threshold defaults to stop_fraction of the initial transport distance;
    placement_delta defaults to 5% of the dough's bounding-box diagonal.
    """

    max_steps: int = 200
    K: int = 20
    L: int = 40
    J: int = 50
    learning_rate: float = 0.02
    alpha: float | None = None
    stop_threshold: float | None = None
    stop_fraction: float = 0.05
    placement_delta: float | None = None
    placement_grid: int = 9
    max_resets: int = 8
    sinkhorn: SinkhornParams | None = None
    scoring_tolerance: float = 1e-5
    sim: SimConfig | None = None

    def __post_init__(self):
        for name in ("max_steps", "K", "L", "J", "placement_grid", "max_resets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.stop_threshold is not None and not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")
        if not self.stop_fraction > 0:
            raise ValueError("stop_fraction must be positive")
        if self.placement_delta is not None and not self.placement_delta > 0:
            raise ValueError("placement_delta must be positive")

    def step_params(self) -> EmdStepParams:
        return EmdStepParams(alpha=self.alpha, K=self.K)


@dataclass(frozen=True)
class DeformationField:
    """Per-point displacement p_i' - p_i from the latest candidate step."""

    displacements: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.displacements, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"displacements must be (N, d), got shape {arr.shape}")
        object.__setattr__(self, "displacements", arr)

    def __len__(self) -> int:
        return self.displacements.shape[0]

    def magnitudes(self) -> np.ndarray:
        """L1 length of each displacement (the placement objective weights)."""
        return np.abs(self.displacements).sum(axis=1)


@dataclass
class IterationRecord:
    """One outer MPC iteration: candidate, pose, horizon, and the verdict."""

    t: int
    reset: bool
    pose: ToolPose
    actions: np.ndarray
    candidate: np.ndarray
    emd_before: float
    emd_after: float
    accepted: bool
    diverged: bool = False

    def summary(self) -> dict:
        return {
            "t": self.t,
            "reset": self.reset,
            "pose": {
                "position": self.pose.position.tolist(),
                "roll": self.pose.roll,
                "gap": self.pose.gap,
            },
            "actions": np.asarray(self.actions).tolist(),
            "emd_before": self.emd_before,
            "emd_after": self.emd_after,
            "accepted": self.accepted,
            "diverged": self.diverged,
        }


@dataclass
class PlanTrace:
    """Complete record of one mpc_run, sufficient to score and replay it."""

    records: list[IterationRecord] = field(default_factory=list)
    emd_initial: float = 0.0
    emd_final: float = 0.0
    threshold: float = 0.0
    reached_threshold: bool = False
    final_positions: np.ndarray | None = None

    @property
    def reset_count(self) -> int:
        return sum(1 for r in self.records if not r.accepted)

    def accepted_emds(self) -> list[float]:
        return [r.emd_after for r in self.records if r.accepted]

    def to_json(self) -> str:
        payload = {
            "emd_initial": self.emd_initial,
            "emd_final": self.emd_final,
            "threshold": self.threshold,
            "reached_threshold": self.reached_threshold,
            "reset_count": self.reset_count,
            "iterations": [r.summary() for r in self.records],
        }
        if self.final_positions is not None:
            payload["final_positions"] = np.asarray(self.final_positions).tolist()
        return json.dumps(payload, indent=2)

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, PointCloud):
        return obj.points
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"expected a nonempty (N, d) cloud, got shape {arr.shape}")
    return arr


def _sim_config(cfg: PlannerConfig, dim: int) -> SimConfig:
    if cfg.sim is not None:
        if cfg.sim.dim != dim:
            raise ValueError(f"sim config is {cfg.sim.dim}-D but the cloud is {dim}-D")
        return cfg.sim
    return SimConfig(dim=dim)


def _placement_candidates(pts: np.ndarray, tool: ToolSpec,
                          cfg: PlannerConfig, sim: SimConfig) -> list[ToolPose]:
    """Horizontal grid over the dough's bounding box, one layer above it.

    The vertical clearance is the tool's half-height plus one grid cell, so
    every candidate starts just out of contact. Candidates are ordered
    x-major (then z in 3-D); ties in the objective resolve to the lowest
    index.
    """
    dim = pts.shape[1]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    y_place = hi[1] + tool.geometry.half_height() + sim.dx
    xs = np.linspace(lo[0], hi[0], cfg.placement_grid)
    zs = np.linspace(lo[2], hi[2], cfg.placement_grid) if dim == 3 else [0.0]
    poses = []
    for x in xs:
        for z in zs:
            poses.append(ToolPose(position=np.array([x, y_place, z])))
    return poses


def _placement_objective(pts: np.ndarray, field_: DeformationField,
                         tool: ToolSpec, pose: ToolPose, delta: float) -> float:
    """sum_i ||p_i' - p_i||_1 / (sdf(p_i) + delta): deformation mass
    discounted by distance from the candidate tool surface."""
    phi = tool_sdf_values(tool, pose, pts)
    return float(np.sum(field_.magnitudes() / (phi + delta)))


def _resolve_delta(pts: np.ndarray, cfg: PlannerConfig) -> float:
    if cfg.placement_delta is not None:
        return cfg.placement_delta
    span = pts.max(axis=0) - pts.min(axis=0)
    diag = float(np.linalg.norm(span))
    # Degenerate single-point clouds still need a positive offset.
    return 0.05 * diag if diag > 0 else 1e-3


def select_initial_position(pc, field_: DeformationField, tool: ToolSpec,
                            cfg: PlannerConfig,
                            exclude: set[int] | None = None) -> ToolPose:
    """Place the tool over the region the transport field wants moved most.

    Scores every grid candidate with the deformation-over-distance
    objective and returns the argmax (first index on ties). `exclude`
    skips previously tried grid slots so repeated resets explore new
    ground.
    """
    pts = _as_points(pc)
    if len(field_) != pts.shape[0]:
        raise ValueError(
            f"field has {len(field_)} entries for {pts.shape[0]} points")
    sim = _sim_config(cfg, pts.shape[1])
    _, pose = _select_indexed(pts, field_, tool, cfg, sim, exclude or set())
    if pose is None:
        raise ValueError("placement grid is empty (all candidates excluded)")
    return pose


def _select_indexed(pts, field_, tool, cfg, sim, exclude):
    """Like select_initial_position but keeps grid indices for bookkeeping."""
    poses = _placement_candidates(pts, tool, cfg, sim)
    delta = _resolve_delta(pts, cfg)
    best_idx, best_score = None, -np.inf
    for i, p in enumerate(poses):
        if i in exclude:
            continue
        s = _placement_objective(pts, field_, tool, p, delta)
        if s > best_score:
            best_idx, best_score = i, s
    if best_idx is None:
        return None, None
    return best_idx, poses[best_idx]


def optimize_actions(state: SimState, candidate, tool: ToolSpec,
                     pose: ToolPose, cfg: PlannerConfig) -> ActionSequence:
    """Shooting optimization of one action horizon against a candidate cloud.

    Actions start at zero and take J Adam steps on the composite loss
    gradient, clamped to the configured action bound after every update.
    Returns the lowest-loss iterate seen (the zero initialization counts,
    so the result is never worse than doing nothing).
    """
    cand = _as_points(candidate)
    sim = _sim_config(cfg, state.dim)
    dof = len(tool.action_channels)
    a = np.zeros((cfg.L, dof))
    bound = sim.action_bound

    m = np.zeros_like(a)
    v = np.zeros_like(a)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_a, best_loss = a.copy(), np.inf
    for step in range(1, cfg.J + 1):
        loss, g = grad_actions(state, tool, pose, ActionSequence(a), cand,
                               sim, return_loss=True)
        if loss < best_loss:
            best_loss, best_a = loss, a.copy()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        a = a - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        a = np.clip(a, -bound, bound)

    # The last update produced an iterate whose loss was never measured.
    final = ActionSequence(a)
    end_state, _ = rollout(state, tool, pose, final, sim)
    end_pose = integrate_pose(pose, tool, final, sim)
    final_loss = composite_loss(end_state.positions, cand, tool, end_pose,
                                final, sim.loss_weights)
    if final_loss < best_loss:
        best_a = a
    return ActionSequence(best_a)


def mpc_run(s0: SimState, target, tool: ToolSpec, cfg: PlannerConfig,
            initial_pose: ToolPose | None = None) -> PlanTrace:
    """Closed-loop planning: candidate step, (re)place, optimize, execute.

    Each outer iteration draws a reachable candidate from K transport
    steps, optimizes an L-row horizon toward it, executes, and keeps the
    result only if the measured transport distance to the target dropped.
    A failed horizon restores the pre-horizon state, flags a reset, and
    the next iteration re-places the tool (previously tried placements
    are skipped until something is accepted again). The loop ends when
    the distance falls below the stop threshold, the step budget or the
    consecutive-reset budget runs out, or the placement grid is
    exhausted; only the threshold case sets reached_threshold.

    By default the first iteration places the tool itself; passing
    initial_pose starts from a caller-chosen pose instead (useful for
    exercising the reset behavior from a deliberately bad start).
    """
    tgt = _as_points(target)
    state = s0.copy()
    if tgt.shape[1] != state.dim:
        raise ValueError(f"target is {tgt.shape[1]}-D but state is {state.dim}-D")
    sim = _sim_config(cfg, state.dim)

    # Resolve solver knobs once from the initial scene so every emd
    # comparison across the run uses identical parameters.
    if cfg.sinkhorn is not None:
        sp_step = transport.resolve_params(state.positions, tgt, cfg.sinkhorn)
    else:
        diam = transport.combined_diameter(state.positions, tgt)
        sp_step = SinkhornParams(epsilon=(0.05 * diam) ** 2,
                                 max_sinkhorn_iters=4000, dual_tolerance=1e-4)
    sp_score = SinkhornParams(epsilon=sp_step.epsilon,
                              max_sinkhorn_iters=2 * sp_step.max_sinkhorn_iters,
                              dual_tolerance=cfg.scoring_tolerance)
    ep = cfg.step_params()

    def emd_to_target(pts: np.ndarray) -> float:
        return transport.sinkhorn_divergence(pts, tgt, sp_score)

    trace = PlanTrace()
    emd_last = emd_to_target(state.positions)
    trace.emd_initial = emd_last
    tau = cfg.stop_threshold
    if tau is None:
        tau = max(cfg.stop_fraction * emd_last, _TAU_FLOOR)
    trace.threshold = tau

    if emd_last < tau:
        trace.emd_final = emd_last
        trace.reached_threshold = True
        trace.final_positions = state.positions.copy()
        return trace

    need_reset = initial_pose is None
    pose: ToolPose | None = initial_pose
    tried: set[int] = set()
    consecutive_resets = 0
    t = 0
    cached_candidate: np.ndarray | None = None

    while t < cfg.max_steps:
        # The state is unchanged after a rejected horizon, so its candidate
        # is identical; recomputing it would only burn solver time.
        if cached_candidate is None:
            cached_candidate = _as_points(
                transport.emd_step(state.positions, tgt, sp_step, ep))
        cand = cached_candidate
        field_ = DeformationField(cand - state.positions)

        reset_here = need_reset
        if need_reset:
            idx, new_pose = _select_indexed(state.positions, field_, tool,
                                            cfg, sim, tried)
            if idx is None:
                break
            tried.add(idx)
            pose = new_pose
            need_reset = False

        snapshot = state.copy()
        diverged = False
        try:
            acts = optimize_actions(state, cand, tool, pose, cfg)
            new_state, _ = rollout(state, tool, pose, acts, sim)
            new_pose = integrate_pose(pose, tool, acts, sim)
            emd_curr = emd_to_target(new_state.positions)
        except SimulationDivergedError:
            diverged = True
            acts = ActionSequence(np.zeros((cfg.L, len(tool.action_channels))))
            new_state, new_pose = snapshot, pose
            emd_curr = np.inf

        accepted = emd_curr <= emd_last and not diverged
        trace.records.append(IterationRecord(
            t=t, reset=reset_here, pose=pose, actions=np.asarray(acts.values),
            candidate=cand, emd_before=emd_last, emd_after=emd_curr,
            accepted=accepted, diverged=diverged))

        if not accepted:
            state = snapshot
            need_reset = True
            consecutive_resets += 1
            if consecutive_resets > cfg.max_resets:
                break
            continue

        state, pose = new_state, new_pose
        emd_last = emd_curr
        tried.clear()
        consecutive_resets = 0
        cached_candidate = None
        if emd_curr < tau:
            trace.reached_threshold = True
            break
        t += cfg.L

    trace.emd_final = emd_last
    trace.final_positions = state.positions.copy()
    return trace
