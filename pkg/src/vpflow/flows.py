"""Planar normalizing flows: single units, chains, and exact transformed densities.

Each unit is f(z) = z + u * tanh(w.z + b), with log-Jacobian-determinant
ln|1 + u.phi(z)| where phi(z) = (1 - tanh^2(w.z + b)) w, computable in O(d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


class FlowError(ValueError):
    """Raised for dimension mismatches or numerically singular Jacobians."""


@dataclass(frozen=True)
class PlanarFlowParams:
    u: np.ndarray
    w: np.ndarray
    b: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        if u.shape != w.shape or u.ndim != 1:
            raise FlowError(f"u and w must be 1-D of equal length, got {u.shape}, {w.shape}")
        if not (np.isfinite(u).all() and np.isfinite(w).all() and np.isfinite(self.b)):
            raise FlowError("non-finite flow parameter")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return len(self.u)


@dataclass(frozen=True)
class FlowChain:
    units: tuple[PlanarFlowParams, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        for k, unit in enumerate(self.units):
            if unit.dim != self.dim:
                raise FlowError(f"unit {k} has dimension {unit.dim}, chain expects {self.dim}")

    def __len__(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class LatentState:
    z0: np.ndarray
    z_final: np.ndarray
    sum_log_det: float | np.ndarray


def _softplus(a):
    return np.logaddexp(0.0, a)


def ensure_invertible(params: PlanarFlowParams) -> PlanarFlowParams:
    """Project u so that w.u >= -1, guaranteeing the tanh unit is a bijection.

    Uses u_hat = u + (m(a) - a) w / |w|^2 with a = w.u and
    m(a) = -1 + softplus(a).  Parameters already satisfying the constraint
    are returned unchanged, which makes the projection idempotent.  The
    softplus is floored at 1e-7 so the projected dot product stays a safe
    margin above -1 even when softplus(a) underflows.
    A zero w gives a constant-shift flow that is trivially invertible.
    """
    w_sq = float(params.w @ params.w)
    if w_sq == 0.0:
        return params
    a = float(params.w @ params.u)
    if a >= -1.0 + 1e-12:
        return params
    m = -1.0 + max(float(_softplus(a)), 1e-7)
    u_hat = params.u + (m - a) * params.w / w_sq
    return PlanarFlowParams(u_hat, params.w, params.b)


def planar_forward(z: np.ndarray, params: PlanarFlowParams):
    """Apply one planar unit.  Accepts a single d-vector or an (n, d) batch.

    Returns (z_out, log_det); log_det is a scalar for a single vector and an
    (n,) array for a batch.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[1] != params.dim:
        raise FlowError(f"z has dimension {zb.shape[1]}, unit expects {params.dim}")
    pre = zb @ params.w + params.b
    h = np.tanh(pre)
    z_out = zb + np.outer(h, params.u)
    # phi(z) = h'(pre) w;  det = 1 + u.phi(z)
    det = 1.0 + (1.0 - h**2) * (params.u @ params.w)
    if np.any(np.abs(det) < 1e-12):
        raise FlowError("numerically singular Jacobian; run ensure_invertible first")
    log_det = np.log(np.abs(det))
    if single:
        return z_out[0], float(log_det[0])
    return z_out, log_det


def chain_forward(z0: np.ndarray, chain: FlowChain) -> LatentState:
    """Compose the chain's units in declared order, accumulating log-dets."""
    z0 = np.asarray(z0, dtype=np.float64)
    z = z0
    total = 0.0 if z0.ndim == 1 else np.zeros(len(z0))
    for k, unit in enumerate(chain.units):
        try:
            z, log_det = planar_forward(z, unit)
        except FlowError as err:
            raise FlowError(f"unit {k}: {err}") from err
        total = total + log_det
    return LatentState(z0=z0, z_final=z, sum_log_det=total)


def standard_normal_log_density(z: np.ndarray) -> float | np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * (z**2).sum(axis=-1) - 0.5 * d * np.log(2.0 * np.pi)


def transformed_log_density(z0: np.ndarray, base_log_q0, chain: FlowChain):
    """Log-density of the pushed-forward variable at chain(z0)."""
    state = chain_forward(z0, chain)
    return base_log_q0 - state.sum_log_det


def export_density_grid(chain: FlowChain, bounds=(-4.0, 4.0), resolution: int = 100) -> np.ndarray:
    """Push a regular 2-D grid of base points through the chain.

    Returns an (resolution^2, 3) array of rows (zx, zy, density) where
    (zx, zy) is the transformed grid point and density the exact
    pushed-forward density there, with a standard-normal base.
    """
    if chain.dim != 2:
        raise FlowError(f"density grid export requires dimension 2, got {chain.dim}")
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    z0 = np.column_stack([gx.ravel(), gy.ravel()])
    state = chain_forward(z0, chain)
    log_q = standard_normal_log_density(z0) - state.sum_log_det
    return np.column_stack([state.z_final, np.exp(log_q)])


def write_density_grid_csv(grid: np.ndarray, path) -> None:
    np.savetxt(Path(path), grid, delimiter=",", header="zx,zy,density", comments="", fmt="%.10g")


# ---------------------------------------------------------------------------
# Torch chain used inside the model (same math, differentiable)
# ---------------------------------------------------------------------------


class PlanarFlowChain(nn.Module):
    """Stack of planar flow units acting on batched latent vectors.

    The invertibility projection of `ensure_invertible` is applied inside
    every forward pass, so unconstrained parameters always realise a
    bijection during training.  As in the functional version, it only
    rewrites u when w.u < -1, which keeps the near-identity
    initialization an actual near-identity map.
    """

    def __init__(self, dim: int, n_steps: int, init_scale: float = 0.01):
        super().__init__()
        self.dim = dim
        self.n_steps = n_steps
        self.u = nn.Parameter(torch.randn(n_steps, dim) * init_scale)
        self.w = nn.Parameter(torch.randn(n_steps, dim) * init_scale)
        self.b = nn.Parameter(torch.zeros(n_steps))

    def _constrained_u(self, k: int) -> torch.Tensor:
        u, w = self.u[k], self.w[k]
        w_sq = (w * w).sum()
        if w_sq.item() == 0.0:
            return u
        a = w @ u
        m = -1.0 + torch.nn.functional.softplus(a).clamp_min(1e-7)
        projected = u + (m - a) * w / w_sq
        return torch.where(a >= -1.0 + 1e-12, u, projected)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (z_final, sum_log_det) for a (batch, dim) input."""
        sum_log_det = z.new_zeros(z.shape[0])
        for k in range(self.n_steps):
            u_hat = self._constrained_u(k)
            pre = z @ self.w[k] + self.b[k]
            h = torch.tanh(pre)
            z = z + h.unsqueeze(-1) * u_hat
            det = 1.0 + (1.0 - h**2) * (u_hat @ self.w[k])
            sum_log_det = sum_log_det + torch.log(det.abs().clamp_min(1e-12))
        return z, sum_log_det

    def to_flow_chain(self) -> FlowChain:
        """Export constrained parameters as an immutable numpy chain."""
        units = []
        with torch.no_grad():
            for k in range(self.n_steps):
                u = self.u[k].double().numpy().copy()
                w = self.w[k].double().numpy().copy()
                units.append(ensure_invertible(PlanarFlowParams(u, w, float(self.b[k]))))
        return FlowChain(tuple(units), self.dim)
