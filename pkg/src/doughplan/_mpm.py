"""Dimension-generic MLS-MPM kernels with reverse-mode gradients.

Explicit moving-least-squares material point method on a dense background
grid: quadratic B-spline transfers, APIC affine velocities, fixed-corotated
elasticity with a von Mises return map in Hencky-strain space, and kinematic
rigid tools coupled through grid-velocity projection with Coulomb friction.

Everything is written against JAX in float64 so a whole rollout is a pure
function of the action sequence, differentiable end to end. The matrix
decompositions (polar rotation, symmetric log/exp) are computed by fixed
Newton/series iterations rather than eigensolvers: eigendecompositions have
non-differentiable points at repeated singular values (F = I, the rest state,
is the worst case), while the iterative forms are smooth everywhere they
converge.

Kernels are specialized per (config, tool) signature and cached; see
build_kernels at the bottom.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import jax
import jax.numpy as jnp

jax.config.update("jax_enable_x64", True)

# Fixed iteration counts keep the kernels jittable; accuracy at these counts
# is checked against scipy oracles in the test suite.
_POLAR_ITERS = 7
_SQRT_ITERS = 7
_LOG_TERMS = 10
_EXP_TERMS = 9


def _inv(M):
    """Batched closed-form inverse for 2x2/3x3 (much faster than LAPACK here)."""
    d = M.shape[-1]
    if d == 2:
        a, b = M[..., 0, 0], M[..., 0, 1]
        c, e = M[..., 1, 0], M[..., 1, 1]
        det = a * e - b * c
        row0 = jnp.stack([e, -b], axis=-1)
        row1 = jnp.stack([-c, a], axis=-1)
        return jnp.stack([row0, row1], axis=-2) / det[..., None, None]
    if d == 3:
        m = M
        c00 = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
        c01 = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
        c02 = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
        c10 = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
        c11 = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
        c12 = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
        c20 = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
        c21 = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
        c22 = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        det = m[..., 0, 0] * c00 + m[..., 0, 1] * c01 + m[..., 0, 2] * c02
        adj = jnp.stack([
            jnp.stack([c00, c10, c20], axis=-1),
            jnp.stack([c01, c11, c21], axis=-1),
            jnp.stack([c02, c12, c22], axis=-1),
        ], axis=-2)
        return adj / det[..., None, None]
    return jnp.linalg.inv(M)


def _eye_like(F):
    return jnp.broadcast_to(jnp.eye(F.shape[-1], dtype=F.dtype), F.shape)


def polar_rotation(F):
    """Rotation factor of F (det > 0).

    2x2 has a closed form; 3x3 uses the Newton mean iteration, which is
    smooth everywhere it converges (unlike autodiff through an
    eigendecomposition, which breaks at repeated singular values).
    """
    if F.shape[-1] == 2:
        p = F[..., 0, 0] + F[..., 1, 1]
        q = F[..., 0, 1] - F[..., 1, 0]
        s = jnp.sqrt(p * p + q * q + 1e-30)
        cos, sin = p / s, q / s
        row0 = jnp.stack([cos, sin], axis=-1)
        row1 = jnp.stack([-sin, cos], axis=-1)
        return jnp.stack([row0, row1], axis=-2)
    R = F
    for _ in range(_POLAR_ITERS):
        R = 0.5 * (R + jnp.swapaxes(_inv(R), -1, -2))
    return R


def _sqrt_spd(A):
    """Principal square root of an SPD matrix.

    2x2 closed form: (A + sqrt(det) I) / sqrt(tr + 2 sqrt(det)); 3x3 falls
    back to the Denman-Beavers iteration.
    """
    if A.shape[-1] == 2:
        s = jnp.sqrt(A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0])
        t = jnp.sqrt(A[..., 0, 0] + A[..., 1, 1] + 2.0 * s)
        return (A + s[..., None, None] * _eye_like(A)) / t[..., None, None]
    Y, Z = A, _eye_like(A)
    for _ in range(_SQRT_ITERS):
        Yn = 0.5 * (Y + _inv(Z))
        Z = 0.5 * (Z + _inv(Y))
        Y = Yn
    return Y

def log_spd(S):
    """Matrix logarithm of an SPD matrix near identity.

    Three square-root stages pull the spectrum toward 1, where the Mercator
    series converges fast; the result is scaled back by 8.
    """
    W = _sqrt_spd(_sqrt_spd(_sqrt_spd(S)))
    A = W - _eye_like(S)
    term = A
    out = A
    for n in range(2, _LOG_TERMS + 1):
        term = term @ A
        out = out + ((-1.0) ** (n + 1) / n) * term
    return 8.0 * out


def exp_sym(H):
    """Matrix exponential of a small symmetric matrix.

    Taylor series on H/4 followed by two squarings; accurate to roundoff
    for the Hencky strains seen in practice (norm well below 1).
    """
    B = H / 4.0
    out = _eye_like(H) + B
    term = B
    for n in range(2, _EXP_TERMS + 1):
        term = term @ B / n
        out = out + term
    out = out @ out
    return out @ out


def von_mises_return(F, mu, yield_stress):
    """Project the trial deformation gradient back onto the yield surface.

    Works in Hencky space: F = R S, H = log S; deviatoric stress is
    2*mu*dev(H), and deviatoric magnitudes beyond yield_stress/(2*mu) are
    radially returned. Returns (projected F, plastic increment). The
    non-yield branch passes F through exactly so purely elastic motion is
    untouched by series truncation.
    """
    d = F.shape[-1]
    R = polar_rotation(F)
    S = jnp.swapaxes(R, -1, -2) @ F
    S = 0.5 * (S + jnp.swapaxes(S, -1, -2))
    H = log_spd(S)
    tr = jnp.trace(H, axis1=-2, axis2=-1)
    dev = H - (tr / d)[..., None, None] * _eye_like(H)
    # Safe norm: keeps the gradient finite when dev == 0 (rest state).
    n2 = jnp.sum(dev * dev, axis=(-2, -1))
    norm = jnp.sqrt(n2 + 1e-30)
    dgamma = norm - yield_stress / (2.0 * mu)
    scale = jnp.where(dgamma > 0.0, dgamma / norm, 0.0)
    H_proj = H - scale[..., None, None] * dev
    F_proj = R @ exp_sym(H_proj)
    yielded = (dgamma > 0.0)[..., None, None]
    F_new = jnp.where(yielded, F_proj, F)
    return F_new, jnp.where(dgamma > 0.0, dgamma, 0.0)


def _safe_normalize(v):
    n = jnp.sqrt(jnp.sum(v * v, axis=-1, keepdims=True) + 1e-30)
    return v / n


def make_tool_functions(kind, params, dim):
    """Signed distance and rigid surface velocity for one tool kind.

    Poses are packed as [center(dim), roll, gap]; rates use the same layout.
    Geometry is axis-aligned in canonical orientation: capsule axis along z
    (a disc in 2-D), knife box thin along x, gripper plates offset along x,
    pole axis along y (a disc in 2-D). Roll spins a capsule about its axis;
    gap is the gripper plate separation.
    """
    params = tuple(float(p) for p in params)

    if kind == "capsule":
        radius, half_len = params

        def sdf(pose, p):
            q = p - pose[:dim]
            if dim == 3:
                t = jnp.clip(q[..., 2], -half_len, half_len)
                q = q - t[..., None] * jnp.array([0.0, 0.0, 1.0])
            return jnp.sqrt(jnp.sum(q * q, axis=-1) + 1e-30) - radius

        def velocity(pose, rates, p):
            q = p - pose[:dim]
            roll = rates[dim]
            if dim == 3:
                spin = roll * jnp.stack(
                    [-q[..., 1], q[..., 0], jnp.zeros_like(q[..., 0])], axis=-1)
            else:
                spin = roll * jnp.stack([-q[..., 1], q[..., 0]], axis=-1)
            return rates[:dim] + spin

    elif kind in ("box", "plate_pair"):
        if kind == "box":
            half = jnp.array(params[:dim])
            offsets = (0.0,)
        else:
            half = jnp.array(params[:dim])
            offsets = (-1.0, 1.0)

        def _box_sdf(q):
            a = jnp.abs(q) - half
            outside = jnp.sqrt(jnp.sum(jnp.maximum(a, 0.0) ** 2, axis=-1) + 1e-30)
            inside = jnp.minimum(jnp.max(a, axis=-1), 0.0)
            return outside + inside

        if kind == "box":

            def sdf(pose, p):
                return _box_sdf(p - pose[:dim])

            def velocity(pose, rates, p):
                return jnp.broadcast_to(rates[:dim], p.shape)

        else:
            half_x = params[0]

            def _plate_centers(pose):
                shift = 0.5 * pose[dim + 1] + half_x
                e0 = jnp.zeros(dim).at[0].set(1.0)
                return pose[:dim] - shift * e0, pose[:dim] + shift * e0

            def sdf(pose, p):
                lo, hi = _plate_centers(pose)
                return jnp.minimum(_box_sdf(p - lo), _box_sdf(p - hi))

            def velocity(pose, rates, p):
                lo, hi = _plate_centers(pose)
                e0 = jnp.zeros(dim).at[0].set(1.0)
                open_v = 0.5 * rates[dim + 1] * e0
                nearer_hi = _box_sdf(p - hi) < _box_sdf(p - lo)
                plate_v = jnp.where(nearer_hi[..., None], open_v, -open_v)
                return rates[:dim] + plate_v

    elif kind == "cylinder":
        radius, half_h = params

        def sdf(pose, p):
            q = p - pose[:dim]
            if dim == 3:
                dr = jnp.sqrt(q[..., 0] ** 2 + q[..., 2] ** 2 + 1e-30) - radius
                dy = jnp.abs(q[..., 1]) - half_h
                pair = jnp.stack([dr, dy], axis=-1)
                outside = jnp.sqrt(jnp.sum(jnp.maximum(pair, 0.0) ** 2, axis=-1) + 1e-30)
                inside = jnp.minimum(jnp.max(pair, axis=-1), 0.0)
                return outside + inside
            return jnp.sqrt(jnp.sum(q * q, axis=-1) + 1e-30) - radius

        def velocity(pose, rates, p):
            return jnp.broadcast_to(rates[:dim], p.shape)

    else:
        raise ValueError(f"unknown tool geometry kind: {kind}")

    return sdf, velocity


@lru_cache(maxsize=64)
def build_kernels(sig):
    """Compile the per-(config, tool) simulation entry points.

    sig is a flat hashable signature produced by physics.py:
      (dim, grid_res, dt, substeps, E, nu, yield_stress, gravity,
       ground_friction, contact_width_cells, velocity_cap,
       tool_kind, tool_params, tool_friction, channel_map)
    channel_map maps action columns onto pose-rate slots and is None for
    tool-free simulation.

    Returns a dict with:
      run_row(carry, action_row) -> (carry, positions)   one action step
      rollout(carry, actions) -> (carry, per-row positions)
      loss_grad(carry, actions, candidate, weights) -> (loss, grad)
      tool_sdf(pose, points) -> signed distances (None when tool-free)
    carry = (x, v, F, C, plastic, mass, volume, pose).
    """
    (dim, grid_res, dt, substeps, E, nu, yield_stress, gravity,
     ground_friction, contact_cells, velocity_cap,
     tool_kind, tool_params, tool_friction, channel_map) = sig

    dx = 1.0 / grid_res
    inv_dx = float(grid_res)
    mu0 = E / (2.0 * (1.0 + nu))
    lam0 = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    wall = 3  # cells of velocity boundary on every face
    contact_band = contact_cells * dx
    n_nodes = grid_res + 1
    grid_shape = (n_nodes,) * dim
    offsets = list(itertools.product(range(3), repeat=dim))
    gvec = jnp.zeros(dim).at[1].set(-gravity)

    if tool_kind is not None:
        sdf_fn, vel_fn = make_tool_functions(tool_kind, tool_params, dim)
        # Action columns -> pose-rate slots; -1 marks a dropped column
        # (e.g. the z velocity channel when running in 2-D).
        rate_rows = []
        for slot in range(dim + 2):
            row = [1.0 if channel_map[c] == slot else 0.0
                   for c in range(len(channel_map))]
            rate_rows.append(row)
        rate_matrix = jnp.array(rate_rows)

        axes = jnp.meshgrid(*(jnp.arange(n_nodes) * dx,) * dim, indexing="ij")
        node_pos = jnp.stack([a.reshape(-1) for a in axes], axis=-1)
        sdf_grad = jax.vmap(jax.grad(lambda p, pose: sdf_fn(pose, p)),
                            in_axes=(0, None))
    else:
        sdf_fn = vel_fn = None
        rate_matrix = None
        node_pos = None

    def _apply_tool(vel_flat, pose, rates):
        phi = sdf_fn(pose, node_pos)
        normal = _safe_normalize(sdf_grad(node_pos, pose))
        v_tool = vel_fn(pose, rates, node_pos)
        rel = vel_flat - v_tool
        vn = jnp.sum(rel * normal, axis=-1)
        vt = rel - vn[:, None] * normal
        vt_norm = jnp.sqrt(jnp.sum(vt * vt, axis=-1) + 1e-30)
        # Coulomb: cancel the approaching normal component and bleed
        # tangential speed in proportion to the normal impulse. Both parts
        # vanish at vn = 0, so no explicit contact gate is needed and the
        # node velocities stay continuous in the tool pose (keeps FD and
        # adjoint gradients consistent).
        scale = jnp.clip(1.0 + tool_friction * vn / vt_norm, 0.0, 1.0)
        delta = -jnp.minimum(vn, 0.0)[:, None] * normal + (scale - 1.0)[:, None] * vt
        # Fade across the band outside; rigidly attach deep inside, where
        # the SDF normal direction is unreliable.
        fade = jnp.clip(1.0 - phi / contact_band, 0.0, 1.0)
        deep = jnp.clip(-phi / contact_band, 0.0, 1.0)
        v_new = vel_flat + fade[:, None] * delta
        return v_new + deep[:, None] * (v_tool - v_new)

    def _apply_walls(vel):
        # Side and top faces: clamp the inward-normal component (free slip).
        # The floor uses Coulomb friction so tools can drag dough across it.
        for axis in range(dim):
            idx = jnp.arange(n_nodes)
            shape = [1] * dim
            shape[axis] = n_nodes
            coord = idx.reshape(shape)
            lo = coord < wall
            hi = coord > grid_res - wall
            va = vel[..., axis]
            if axis == 1:
                vt = vel - va[..., None] * jnp.eye(dim)[1]
                vt_norm = jnp.sqrt(jnp.sum(vt * vt, axis=-1) + 1e-30)
                scale = jnp.maximum(0.0, 1.0 + ground_friction * va / vt_norm)
                floor_v = vt * scale[..., None]
                hit = lo & (va < 0.0)
                vel = jnp.where(hit[..., None], floor_v, vel)
                va = vel[..., axis]
            else:
                vel = vel.at[..., axis].set(jnp.where(lo & (va < 0.0), 0.0, va))
                va = vel[..., axis]
            vel = vel.at[..., axis].set(jnp.where(hi & (va > 0.0), 0.0, va))
        return vel

    def _substep(x, v, F, C, plastic, mass, volume, pose, rates):
        base = jnp.floor(x * inv_dx - 0.5).astype(jnp.int32)
        base = jnp.clip(base, 0, grid_res - 2)
        fx = x * inv_dx - base
        w = [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2]

        R = polar_rotation(F)
        J = jnp.linalg.det(F)
        tau = 2.0 * mu0 * (F - R) @ jnp.swapaxes(F, -1, -2)
        tau = tau + (lam0 * J * (J - 1.0))[:, None, None] * _eye_like(F)
        stress = (-dt * 4.0 * inv_dx * inv_dx) * volume[:, None, None] * tau
        affine = stress + mass[:, None, None] * C

        grid_v = jnp.zeros(grid_shape + (dim,))
        grid_m = jnp.zeros(grid_shape)
        mv = mass[:, None] * v
        for off in offsets:
            weight = w[off[0]][:, 0]
            for k in range(1, dim):
                weight = weight * w[off[k]][:, k]
            dpos = (jnp.array(off, dtype=x.dtype) - fx) * dx
            idx = tuple(base[:, k] + off[k] for k in range(dim))
            grid_v = grid_v.at[idx].add(weight[:, None] * (mv + jnp.einsum("nij,nj->ni", affine, dpos)))
            grid_m = grid_m.at[idx].add(weight * mass)

        gm = grid_m.reshape(-1)
        gv = grid_v.reshape(-1, dim)
        occupied = gm > 0.0
        vel = jnp.where(occupied[:, None], gv / jnp.maximum(gm, 1e-30)[:, None] + dt * gvec, 0.0)
        if sdf_fn is not None:
            vel = _apply_tool(vel, pose, rates)
        vel = _apply_walls(vel.reshape(grid_shape + (dim,)))

        new_v = jnp.zeros_like(v)
        new_C = jnp.zeros_like(C)
        for off in offsets:
            weight = w[off[0]][:, 0]
            for k in range(1, dim):
                weight = weight * w[off[k]][:, k]
            dpos = (jnp.array(off, dtype=x.dtype) - fx) * dx
            idx = tuple(base[:, k] + off[k] for k in range(dim))
            vn = vel[idx]
            new_v = new_v + weight[:, None] * vn
            new_C = new_C + (4.0 * inv_dx * inv_dx) * weight[:, None, None] * jnp.einsum(
                "ni,nj->nij", vn, dpos)

        x_new = x + dt * new_v
        F_trial = (_eye_like(F) + dt * new_C) @ F
        F_new, dgamma = von_mises_return(F_trial, mu0, yield_stress)
        pose_new = pose + dt * rates
        if tool_kind == "plate_pair":
            pose_new = pose_new.at[dim + 1].set(jnp.maximum(pose_new[dim + 1], 0.0))
        return x_new, new_v, F_new, new_C, plastic + dgamma, pose_new

    def run_row(carry, action_row):
        x, v, F, C, plastic, mass, volume, pose = carry
        if rate_matrix is not None:
            rates = rate_matrix @ action_row
        else:
            rates = jnp.zeros(dim + 2)

        def body(inner, _):
            x, v, F, C, plastic, pose = inner
            x, v, F, C, plastic, pose = _substep(
                x, v, F, C, plastic, mass, volume, pose, rates)
            return (x, v, F, C, plastic, pose), None

        inner0 = (x, v, F, C, plastic, pose)
        (x, v, F, C, plastic, pose), _ = jax.lax.scan(
            body, inner0, None, length=substeps)
        return (x, v, F, C, plastic, mass, volume, pose), x

    run_row_chk = jax.checkpoint(run_row)

    def rollout(carry, actions):
        return jax.lax.scan(run_row, carry, actions)

    def loss_fn(actions, carry, candidate, weights):
        final, _ = jax.lax.scan(run_row_chk, carry, actions)
        x_fin, pose_fin = final[0], final[7]
        p2p = jnp.sum(jnp.abs(x_fin - candidate))
        if sdf_fn is not None:
            prox = jnp.maximum(jnp.min(sdf_fn(pose_fin, x_fin)), 0.0)
        else:
            prox = 0.0
        reg = jnp.mean(jnp.sum(actions ** 2, axis=-1))
        return weights[0] * p2p + weights[1] * prox + weights[2] * reg

    kernels = {
        "run_row": jax.jit(run_row),
        "rollout": jax.jit(rollout),
        "loss_grad": jax.jit(jax.value_and_grad(loss_fn)),
        "loss": jax.jit(loss_fn),
        "tool_sdf": (jax.jit(sdf_fn) if sdf_fn is not None else None),
        "velocity_cap": velocity_cap,
    }
    return kernels
