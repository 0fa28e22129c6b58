"""Cohort evaluation: generalisation, specificity, volume variability, latent activity.

All standard deviations use the population (1/N) convention.
Reconstructions use the posterior mean (noise = 0), so every metric here is
deterministic for a fixed model and dataset.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .mesh import SurfaceMesh, TriangleTopology, enclosed_volume
from .model import CvaeNfModel
from .training import reconstruction_errors


class EvaluationError(ValueError):
    """Raised for empty cohorts or mismatched shapes."""


@dataclass
class CohortMetrics:
    generalisation_mm: tuple[float, float]  # (mean, std)
    specificity_mm: tuple[float, float]
    volume_variability_mm3: float
    activity: np.ndarray

    def to_dict(self) -> dict:
        return {
            "generalisation_mm": {
                "mean": self.generalisation_mm[0],
                "std": self.generalisation_mm[1],
            },
            "specificity_mm": {
                "mean": self.specificity_mm[0],
                "std": self.specificity_mm[1],
            },
            "volume_variability_mm3": self.volume_variability_mm3,
            "activity": [float(a) for a in self.activity],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _reconstruct(model, positions: np.ndarray, covariates: np.ndarray | None) -> np.ndarray:
    """Posterior-mean reconstructions; `model` may also be a plain callable stub."""
    if isinstance(model, CvaeNfModel):
        model.eval()
        x = torch.from_numpy(np.asarray(positions, dtype=np.float32))
        c = (
            torch.from_numpy(np.asarray(covariates, dtype=np.float32))
            if (covariates is not None and model.config.conditional)
            else None
        )
        with torch.no_grad():
            out = []
            for start in range(0, len(x), 64):
                xb = x[start : start + 64]
                cb = c[start : start + 64] if c is not None else None
                recon, *_ = model(
                    xb, cb, noise=torch.zeros(len(xb), model.config.latent_dim)
                )
                out.append(recon.numpy())
        return np.concatenate(out).astype(np.float64)
    return np.asarray(model(positions, covariates), dtype=np.float64)


def generalisation_error(
    model, positions: np.ndarray, covariates: np.ndarray | None = None
) -> tuple[float, float]:
    """Mean +- std (mm) over test meshes of the mean-vertex reconstruction distance."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise EvaluationError("empty test set")
    recon = _reconstruct(model, positions, covariates)
    per_mesh = np.linalg.norm(positions - recon, axis=2).mean(axis=1)
    return float(per_mesh.mean()), float(per_mesh.std())


def specificity_error(
    generated: np.ndarray, real: np.ndarray
) -> tuple[float, float]:
    """Per generated mesh: distance to its nearest neighbour in the real cohort."""
    generated = np.asarray(generated, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if len(generated) == 0 or len(real) == 0:
        raise EvaluationError("empty cohort")
    if generated.shape[1:] != real.shape[1:]:
        raise EvaluationError(
            f"cohort vertex shapes differ: {generated.shape[1:]} vs {real.shape[1:]}"
        )
    minima = np.empty(len(generated))
    for i, g in enumerate(generated):
        dists = np.linalg.norm(real - g[None], axis=2).mean(axis=1)
        minima[i] = dists.min()
    return float(minima.mean()), float(minima.std())


def cohort_volumes(cohort, topology: TriangleTopology | None = None) -> np.ndarray:
    """Enclosed volumes for a list of meshes or a (N, n, 3) positions array."""
    if topology is not None:
        cohort = [SurfaceMesh(topology, p) for p in np.asarray(cohort, dtype=np.float64)]
    return np.array([enclosed_volume(m) for m in cohort])


def volume_variability(cohort, topology: TriangleTopology | None = None) -> float:
    """Population standard deviation of enclosed volumes across the cohort."""
    volumes = cohort_volumes(cohort, topology)
    if len(volumes) < 2:
        raise EvaluationError("need at least 2 meshes for volume variability")
    return float(volumes.std())


def latent_activity(
    model, positions: np.ndarray, covariates: np.ndarray | None = None
) -> np.ndarray:
    """Per-dimension variance over the dataset of posterior-mean latent codes."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        raise EvaluationError("need at least 2 meshes for latent activity")
    if isinstance(model, CvaeNfModel):
        model.eval()
        x = torch.from_numpy(positions.astype(np.float32))
        c = (
            torch.from_numpy(np.asarray(covariates, dtype=np.float32))
            if (covariates is not None and model.config.conditional)
            else None
        )
        with torch.no_grad():
            mus = []
            for start in range(0, len(x), 64):
                cb = c[start : start + 64] if c is not None else None
                mu, _ = model.encode(x[start : start + 64], cb)
                mus.append(mu.numpy())
        mu = np.concatenate(mus).astype(np.float64)
    else:
        mu = np.asarray(model(positions, covariates), dtype=np.float64)
    return mu.var(axis=0)


# ---------------------------------------------------------------------------
# PCA point-distribution model baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaSsm:
    mean_shape: np.ndarray  # (3n,)
    modes: np.ndarray  # (3n, k), orthonormal columns
    eigenvalues: np.ndarray  # (k,), nonincreasing
    n_vertices: int


def fit_pca_ssm(positions: np.ndarray, k: int) -> PcaSsm:
    """PCA over stacked vertex coordinates of corresponded meshes."""
    positions = np.asarray(positions, dtype=np.float64)
    n_samples, n_vertices, _ = positions.shape
    if n_samples < k + 1:
        raise EvaluationError(f"need at least {k + 1} meshes to fit {k} modes")
    flat = positions.reshape(n_samples, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    # Thin SVD; eigenvalues of the (1/N) covariance are s^2 / N.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > 1e-10 * s[0]).sum()) if len(s) else 0
    if k > rank:
        raise EvaluationError(f"requested {k} modes but data rank is {rank}")
    return PcaSsm(
        mean_shape=mean,
        modes=vt[:k].T,
        eigenvalues=(s[:k] ** 2) / n_samples,
        n_vertices=n_vertices,
    )


def pca_reconstruct(ssm: PcaSsm, positions: np.ndarray) -> np.ndarray:
    """Project onto the retained modes and map back to vertex coordinates."""
    positions = np.asarray(positions, dtype=np.float64)
    single = positions.ndim == 2
    flat = positions.reshape(1 if single else len(positions), -1)
    coeffs = (flat - ssm.mean_shape) @ ssm.modes
    recon = ssm.mean_shape + coeffs @ ssm.modes.T
    recon = recon.reshape(-1, ssm.n_vertices, 3)
    return recon[0] if single else recon


def pca_sample(ssm: PcaSsm, rng: np.random.Generator | int, n_samples: int = 1) -> np.ndarray:
    """Draw shapes with mode coefficients b ~ N(0, diag(eigenvalues))."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    b = rng.standard_normal((n_samples, len(ssm.eigenvalues))) * np.sqrt(ssm.eigenvalues)
    flat = ssm.mean_shape + b @ ssm.modes.T
    return flat.reshape(n_samples, ssm.n_vertices, 3)


# ---------------------------------------------------------------------------
# Kernel density summaries for subgroup volume distributions
# ---------------------------------------------------------------------------


def subgroup_volume_density(
    volumes: np.ndarray,
    labels,
    bandwidth: float,
    grid_size: int = 200,
) -> dict:
    """Gaussian KDE of enclosed volumes per subgroup, on a shared grid.

    Groups with fewer than 2 members are skipped with a warning.  A
    bandwidth floor of 1e-6 keeps degenerate (constant) groups finite.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    labels = np.asarray(labels)
    if len(volumes) != len(labels):
        raise EvaluationError("labels must partition the cohort")
    bandwidth = max(float(bandwidth), 1e-6)
    pad = 3.0 * bandwidth
    grid = np.linspace(volumes.min() - pad, volumes.max() + pad, grid_size)
    result: dict = {"grid": grid, "groups": {}}
    for group in np.unique(labels):
        vals = volumes[labels == group]
        if len(vals) < 2:
            warnings.warn(f"group {group!r} has fewer than 2 members; skipped")
            continue
        diffs = (grid[:, None] - vals[None, :]) / bandwidth
        density = np.exp(-0.5 * diffs**2).sum(axis=1) / (
            len(vals) * bandwidth * np.sqrt(2.0 * np.pi)
        )
        result["groups"][str(group)] = density
    return result


def write_density_csv(density: dict, path) -> None:
    groups = sorted(density["groups"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume"] + [f"density_{g}" for g in groups])
        for i, v in enumerate(density["grid"]):
            writer.writerow([repr(float(v))] + [repr(float(density["groups"][g][i])) for g in groups])


def write_activity_csv(activity: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dimension", "activity"])
        for i, a in enumerate(activity):
            writer.writerow([i, repr(float(a))])
