"""Estimator-style wrappers so the shape models compose with sklearn pipelines."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .evaluation import PcaSsm, fit_pca_ssm, pca_reconstruct, pca_sample
from .hierarchy import build_sampling_hierarchy
from .mesh import TriangleTopology
from .model import CvaeNfModel, ModelConfig, sample_population
from .training import TrainConfig, standardize_covariates, train


def check_positions(X, n_vertices: int | None = None) -> np.ndarray:
    """Validate a stack of corresponded vertex arrays, returning (N, n, 3)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] % 3:
            raise ValueError("flat shape vectors must have length divisible by 3")
        X = X.reshape(len(X), -1, 3)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"expected (N, n_vertices, 3) positions, got {X.shape}")
    if n_vertices is not None and X.shape[1] != n_vertices:
        raise ValueError(f"expected {n_vertices} vertices, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("non-finite vertex coordinate")
    return X


class PcaShapeModel(TransformerMixin, BaseEstimator):
    """Point-distribution model: PCA over stacked vertex coordinates.

    transform maps meshes to mode coefficients; inverse_transform maps
    coefficients back to vertex arrays; sample draws new shapes with
    b ~ N(0, diag(eigenvalues)).
    """

    def __init__(self, n_modes: int = 16):
        self.n_modes = n_modes

    def fit(self, X, y=None):
        X = check_positions(X)
        self.ssm_: PcaSsm = fit_pca_ssm(X, self.n_modes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "ssm_"):
            raise NotFittedError("PcaShapeModel is not fitted")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_positions(X, self.ssm_.n_vertices)
        flat = X.reshape(len(X), -1)
        return (flat - self.ssm_.mean_shape) @ self.ssm_.modes

    def inverse_transform(self, coeffs) -> np.ndarray:
        self._check_fitted()
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
        flat = self.ssm_.mean_shape + coeffs @ self.ssm_.modes.T
        return flat.reshape(len(coeffs), self.ssm_.n_vertices, 3)

    def reconstruct(self, X) -> np.ndarray:
        self._check_fitted()
        return pca_reconstruct(self.ssm_, check_positions(X, self.ssm_.n_vertices))

    def sample(self, n_samples: int = 1, random_state=0) -> np.ndarray:
        self._check_fitted()
        return pca_sample(self.ssm_, np.random.default_rng(random_state), n_samples)


class FlowShapeSynthesizer(BaseEstimator):
    """Conditional flow VAE behind a fit/transform/sample surface.

    X is a stack of corresponded vertex arrays sharing `topology`; C holds
    raw covariates (standardized internally from the fitted data).  With
    flow_steps=0 and conditional=False this is a vanilla graph VAE.
    """

    def __init__(
        self,
        topology: TriangleTopology | None = None,
        latent_dim: int = 16,
        encoder_features=(16, 32, 32, 64, 64),
        sampling_factor: int = 4,
        cheb_order: int = 6,
        flow_steps: int = 5,
        conditional: bool = True,
        epochs: int = 1000,
        warmup_epochs: int = 100,
        learning_rate: float = 1e-3,
        batch_size: int = 16,
        kl_objective: str = "flowed_mc",
        recon_sigma: float = 1.0,
        seed: int = 0,
    ):
        self.topology = topology
        self.latent_dim = latent_dim
        self.encoder_features = encoder_features
        self.sampling_factor = sampling_factor
        self.cheb_order = cheb_order
        self.flow_steps = flow_steps
        self.conditional = conditional
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.kl_objective = kl_objective
        self.recon_sigma = recon_sigma
        self.seed = seed

    def fit(self, X, C=None):
        if self.topology is None:
            raise ValueError("topology must be provided before fitting")
        X = check_positions(X, self.topology.n_vertices)
        config = ModelConfig(
            latent_dim=self.latent_dim,
            encoder_features=tuple(self.encoder_features),
            sampling_factor=self.sampling_factor,
            cheb_order=self.cheb_order,
            flow_steps=self.flow_steps,
            conditional=self.conditional,
            n_covariates=0 if C is None else np.asarray(C).shape[1],
        )
        if self.conditional and C is None:
            raise ValueError("conditional model requires covariates C")
        hierarchy = build_sampling_hierarchy(
            self.topology, X[0], self.sampling_factor, config.n_blocks
        )
        torch.manual_seed(self.seed)
        self.model_ = CvaeNfModel(config, hierarchy)
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            kl_objective=self.kl_objective,
            recon_sigma=self.recon_sigma,
            seed=self.seed,
        )
        if C is not None:
            C_std, self.covariate_mean_, self.covariate_std_ = standardize_covariates(C)
            tc = torch.from_numpy(C_std).float()
        else:
            self.covariate_mean_ = self.covariate_std_ = None
            tc = None
        self.history_ = train(
            self.model_, torch.from_numpy(X).float(), tc, train_config
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("FlowShapeSynthesizer is not fitted")

    def _standardize(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        return (C - self.covariate_mean_) / self.covariate_std_

    def transform(self, X, C=None) -> np.ndarray:
        """Posterior-mean latent codes for corresponded meshes."""
        self._check_fitted()
        X = check_positions(X, self.topology.n_vertices)
        self.model_.eval()
        c = None
        if self.conditional:
            c = torch.from_numpy(self._standardize(C)).float()
        with torch.no_grad():
            mu, _ = self.model_.encode(torch.from_numpy(X).float(), c)
        return mu.numpy().astype(np.float64)

    def sample(self, C=None, n_samples: int | None = None, random_state=0) -> np.ndarray:
        """Decode prior draws into vertex arrays, one per covariate row."""
        self._check_fitted()
        c_std = self._standardize(C) if (self.conditional and C is not None) else None
        meshes = sample_population(
            self.model_, c_std, np.random.default_rng(random_state), n_samples=n_samples
        )
        return np.stack([m.positions for m in meshes])
