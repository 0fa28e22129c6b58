"""Conditional flow VAE over fixed-topology surface meshes.

Encoder and decoder are mirrored stacks of residual Chebyshev
graph-convolution blocks with hierarchical down/up-sampling.  Covariates
condition the encoder by AdaIN-style scaling of hidden features and the
decoder by concatenation with the latent code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flows import PlanarFlowChain
from .hierarchy import SamplingHierarchy, load_hierarchy, save_hierarchy
from .mesh import MeshError, SurfaceMesh, TriangleTopology


@dataclass
class ModelConfig:
    latent_dim: int = 16
    encoder_features: tuple[int, ...] = (16, 32, 32, 64, 64)
    sampling_factor: int = 4
    cheb_order: int = 6
    flow_steps: int = 5
    n_covariates: int = 14
    conditional: bool = True
    scaler_hidden: int = 64

    def __post_init__(self):
        self.encoder_features = tuple(int(f) for f in self.encoder_features)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.encoder_features:
            raise ValueError("encoder_features must be nonempty")

    @property
    def n_blocks(self) -> int:
        return len(self.encoder_features)

    @property
    def decoder_features(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_features))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_features"] = list(self.encoder_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "encoder_features" else v) for k, v in d.items()})


class ChebConv(nn.Module):
    """Spectral graph convolution via the Chebyshev recurrence.

    T0 = X, T1 = L X, Tk = 2 L T(k-1) - T(k-2); output = sum_k Tk Wk + bias.
    K = 1 reduces to a pointwise linear map.
    """

    def __init__(self, in_channels: int, out_channels: int, order: int):
        super().__init__()
        if order < 1:
            raise ValueError("Chebyshev order must be >= 1")
        self.order = order
        self.weight = nn.Parameter(torch.empty(order, in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor, laplacian: torch.Tensor) -> torch.Tensor:
        # x: (batch, n, F_in); laplacian: dense (n, n)
        t_prev, t_cur = None, x
        out = torch.einsum("bnf,fg->bng", x, self.weight[0])
        for k in range(1, self.order):
            if k == 1:
                t_next = torch.einsum("nm,bmf->bnf", laplacian, x)
            else:
                t_next = 2.0 * torch.einsum("nm,bmf->bnf", laplacian, t_cur) - t_prev
            out = out + torch.einsum("bnf,fg->bng", t_next, self.weight[k])
            t_prev, t_cur = t_cur, t_next
        return out + self.bias


class ResidualChebBlock(nn.Module):
    """Two Chebyshev convolutions with batch norm and ELU, plus a skip path."""

    def __init__(self, in_channels: int, out_channels: int, order: int):
        super().__init__()
        self.conv1 = ChebConv(in_channels, out_channels, order)
        self.bn1 = nn.BatchNorm1d(out_channels)
        self.conv2 = ChebConv(out_channels, out_channels, order)
        self.bn2 = nn.BatchNorm1d(out_channels)
        self.skip = (
            nn.Linear(in_channels, out_channels, bias=False)
            if in_channels != out_channels
            else nn.Identity()
        )

    def _bn(self, bn: nn.BatchNorm1d, x: torch.Tensor) -> torch.Tensor:
        b, n, f = x.shape
        return bn(x.reshape(b * n, f)).reshape(b, n, f)

    def forward(self, x: torch.Tensor, laplacian: torch.Tensor) -> torch.Tensor:
        h = F.elu(self._bn(self.bn1, self.conv1(x, laplacian)))
        h = F.elu(self._bn(self.bn2, self.conv2(h, laplacian)))
        return h + self.skip(x)


class CovariateScaler(nn.Module):
    """AdaIN-style conditioning: covariates -> per-channel scale and shift.

    The final layer is zero-initialised so conditioning starts as the
    identity modulation (gamma = 1, beta = 0).
    """

    def __init__(self, n_covariates: int, n_channels: int, hidden: int):
        super().__init__()
        self.n_channels = n_channels
        self.net = nn.Sequential(
            nn.Linear(n_covariates, hidden),
            nn.ELU(),
            nn.Linear(hidden, 2 * n_channels),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, hidden: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # hidden: (batch, n, F); c: (batch, n_covariates)
        mean = hidden.mean(dim=1, keepdim=True)
        std = hidden.std(dim=1, keepdim=True, unbiased=False)
        normalized = (hidden - mean) / (std + 1e-5)
        raw = self.net(c)
        gamma = 1.0 + raw[:, : self.n_channels]
        beta = raw[:, self.n_channels :]
        return gamma.unsqueeze(1) * normalized + beta.unsqueeze(1)


def _up_gather(up: sp.csr_matrix) -> tuple[torch.Tensor, torch.Tensor]:
    """Represent an up-matrix (<=3 nnz per row) as gather indices + weights."""
    up = sp.csr_matrix(up)
    n_fine = up.shape[0]
    idx = np.zeros((n_fine, 3), dtype=np.int64)
    wts = np.zeros((n_fine, 3), dtype=np.float32)
    for i in range(n_fine):
        cols = up.indices[up.indptr[i] : up.indptr[i + 1]]
        vals = up.data[up.indptr[i] : up.indptr[i + 1]]
        if len(cols) > 3:
            raise MeshError("up-matrix row with more than 3 nonzeros")
        idx[i, : len(cols)] = cols
        wts[i, : len(cols)] = vals
    return torch.from_numpy(idx), torch.from_numpy(wts)


class CvaeNfModel(nn.Module):
    """Graph-convolutional conditional VAE with a planar flow posterior."""

    def __init__(self, config: ModelConfig, hierarchy: SamplingHierarchy):
        super().__init__()
        if hierarchy.n_levels < config.n_blocks:
            raise ValueError(
                f"hierarchy has {hierarchy.n_levels} levels, "
                f"model needs {config.n_blocks}"
            )
        self.config = config
        self.hierarchy = hierarchy
        self.trained = False

        counts = hierarchy.vertex_counts()
        n_blocks = config.n_blocks
        for k in range(n_blocks + 1):
            lap = torch.from_numpy(hierarchy.laplacians[k].toarray()).float()
            self.register_buffer(f"laplacian_{k}", lap)
        for k in range(n_blocks):
            kept = torch.from_numpy(
                np.asarray(sp.csr_matrix(hierarchy.downs[k]).indices, dtype=np.int64)
            )
            self.register_buffer(f"down_kept_{k}", kept)
            idx, wts = _up_gather(hierarchy.ups[k])
            self.register_buffer(f"up_idx_{k}", idx)
            self.register_buffer(f"up_wts_{k}", wts)

        feats = config.encoder_features
        enc_in = (3,) + feats[:-1]
        self.encoder_blocks = nn.ModuleList(
            ResidualChebBlock(enc_in[k], feats[k], config.cheb_order)
            for k in range(n_blocks)
        )
        if config.conditional:
            self.encoder_scalers = nn.ModuleList(
                CovariateScaler(config.n_covariates, feats[k], config.scaler_hidden)
                for k in range(n_blocks)
            )
        else:
            self.encoder_scalers = None

        self.n_coarse = counts[n_blocks]
        flat = self.n_coarse * feats[-1]
        self.mu_head = nn.Linear(flat, config.latent_dim)
        self.log_sigma_head = nn.Linear(flat, config.latent_dim)

        dec_feats = config.decoder_features
        dec_input = config.latent_dim + (config.n_covariates if config.conditional else 0)
        self.decoder_input = nn.Linear(dec_input, self.n_coarse * dec_feats[0])
        dec_in = (dec_feats[0],) + dec_feats[:-1]
        self.decoder_blocks = nn.ModuleList(
            ResidualChebBlock(dec_in[k], dec_feats[k], config.cheb_order)
            for k in range(n_blocks)
        )
        self.output_layer = nn.Linear(dec_feats[-1], 3)

        self.flows = (
            PlanarFlowChain(config.latent_dim, config.flow_steps)
            if config.flow_steps > 0
            else None
        )

    # -- sampling operators ------------------------------------------------

    def _down(self, x: torch.Tensor, level: int) -> torch.Tensor:
        kept = getattr(self, f"down_kept_{level}")
        return x[:, kept, :]

    def _up(self, x: torch.Tensor, level: int) -> torch.Tensor:
        idx = getattr(self, f"up_idx_{level}")
        wts = getattr(self, f"up_wts_{level}")
        gathered = x[:, idx.reshape(-1), :].reshape(x.shape[0], idx.shape[0], 3, -1)
        return (gathered * wts.to(x.dtype).unsqueeze(0).unsqueeze(-1)).sum(dim=2)

    # -- core passes -------------------------------------------------------

    def _check_covariates(self, c: torch.Tensor | None, batch: int) -> torch.Tensor | None:
        if not self.config.conditional:
            return None
        if c is None:
            raise ValueError("model is conditional; covariates required")
        if c.shape != (batch, self.config.n_covariates):
            raise ValueError(
                f"covariates shape {tuple(c.shape)} does not match "
                f"({batch}, {self.config.n_covariates})"
            )
        return c

    def encode(self, x: torch.Tensor, c: torch.Tensor | None = None):
        """x: (batch, n_vertices, 3) -> (mu, log_sigma), each (batch, latent_dim)."""
        if x.shape[1] != self.hierarchy.vertex_counts()[0]:
            raise MeshError(
                f"mesh has {x.shape[1]} vertices, model expects "
                f"{self.hierarchy.vertex_counts()[0]}"
            )
        c = self._check_covariates(c, x.shape[0])
        h = x
        for k, block in enumerate(self.encoder_blocks):
            h = block(h, getattr(self, f"laplacian_{k}"))
            if self.encoder_scalers is not None:
                h = self.encoder_scalers[k](h, c)
            h = self._down(h, k)
        flat = h.reshape(h.shape[0], -1)
        mu = self.mu_head(flat)
        log_sigma = torch.clamp(self.log_sigma_head(flat), -10.0, 10.0)
        return mu, log_sigma

    @staticmethod
    def reparameterize(mu: torch.Tensor, log_sigma: torch.Tensor, noise: torch.Tensor):
        return mu + torch.exp(log_sigma) * noise

    def decode(self, z: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        """z: (batch, latent_dim) -> vertex positions (batch, n_vertices, 3)."""
        c = self._check_covariates(c, z.shape[0])
        code = torch.cat([z, c], dim=1) if c is not None else z
        h = self.decoder_input(code).reshape(z.shape[0], self.n_coarse, -1)
        n_blocks = self.config.n_blocks
        for j, block in enumerate(self.decoder_blocks):
            level = n_blocks - 1 - j
            h = self._up(h, level)
            h = block(h, getattr(self, f"laplacian_{level}"))
        return self.output_layer(h)

    def forward(
        self,
        x: torch.Tensor,
        c: torch.Tensor | None = None,
        noise: torch.Tensor | None = None,
    ):
        """Full pass: encode -> reparameterize -> flow chain -> decode.

        Returns (reconstruction, z0, z_final, sum_log_det, mu, log_sigma).
        """
        mu, log_sigma = self.encode(x, c)
        if noise is None:
            noise = torch.randn_like(mu)
        z0 = self.reparameterize(mu, log_sigma, noise)
        if self.flows is not None:
            z_final, sum_log_det = self.flows(z0)
        else:
            z_final, sum_log_det = z0, z0.new_zeros(z0.shape[0])
        recon = self.decode(z_final, c)
        return recon, z0, z_final, sum_log_det, mu, log_sigma


def sample_population(
    model: CvaeNfModel,
    covariates: np.ndarray | None,
    rng: np.random.Generator | int,
    n_samples: int | None = None,
    require_trained: bool = True,
) -> list[SurfaceMesh]:
    """Decode prior draws z ~ N(0, I) into meshes, one per covariate row.

    Flows act on the posterior only; generation decodes untransformed
    standard-normal draws, matching the prior of the KL term.
    """
    if require_trained and not model.trained:
        raise RuntimeError("model has not been trained; pass require_trained=False to override")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if covariates is not None:
        covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        n = len(covariates)
    else:
        if n_samples is None:
            raise ValueError("n_samples required for an unconditional model")
        n = n_samples
    z = rng.standard_normal((n, model.config.latent_dim))
    model.eval()
    with torch.no_grad():
        c = (
            torch.from_numpy(covariates).float()
            if (covariates is not None and model.config.conditional)
            else None
        )
        positions = model.decode(torch.from_numpy(z).float(), c).numpy()
    topo = model.hierarchy.topologies[0]
    return [SurfaceMesh(topo, p.astype(np.float64)) for p in positions]


# ---------------------------------------------------------------------------
# Checkpointing: weight blob + JSON sidecar + hierarchy manifest
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: CvaeNfModel,
    directory,
    covariate_schema: list[str] | None = None,
    covariate_mean: np.ndarray | None = None,
    covariate_std: np.ndarray | None = None,
    epoch: int | None = None,
    extra: dict | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    save_hierarchy(model.hierarchy, directory / "hierarchy")
    meta = {
        "config": model.config.to_dict(),
        "covariate_schema": covariate_schema,
        "covariate_mean": None if covariate_mean is None else list(map(float, covariate_mean)),
        "covariate_std": None if covariate_std is None else list(map(float, covariate_std)),
        "epoch": epoch,
        "trained": model.trained,
    }
    if extra:
        meta.update(extra)
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(directory) -> tuple[CvaeNfModel, dict]:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    config = ModelConfig.from_dict(meta["config"])
    hierarchy = load_hierarchy(directory / "hierarchy")
    model = CvaeNfModel(config, hierarchy)
    state = torch.load(directory / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    model.trained = bool(meta.get("trained", False))
    model.eval()
    return model, meta
