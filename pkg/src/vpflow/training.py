"""ELBO objective with KL warm-up, dataset splitting, and the optimization loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .model import CvaeNfModel, save_checkpoint

LOG_2PI = math.log(2.0 * math.pi)

METRICS_HEADER = [
    "epoch",
    "total",
    "recon_nll",
    "kl_term",
    "sum_log_det",
    "beta",
    "val_generalisation_mm",
]


class TrainingError(RuntimeError):
    """Raised when optimization diverges or inputs are inconsistent."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1000
    weight_decay: float = 1e-2
    warmup_epochs: int = 100
    kl_objective: str = "flowed_mc"  # or "analytic_q0"
    recon_sigma: float = 1.0
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kl_objective not in ("flowed_mc", "analytic_q0"):
            raise ValueError(f"unknown kl_objective: {self.kl_objective}")
        if self.recon_sigma <= 0:
            raise ValueError("recon_sigma must be positive")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must be <= epochs")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon_nll: float
    kl_term: float
    sum_log_det: float


def kl_warmup(epoch: int, warmup_epochs: int) -> float:
    """Linear KL weight ramp: 0 at epoch 0, 1 from `warmup_epochs` onwards."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if warmup_epochs == 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_dataset(n: int, ratios=(422, 59, 1879), seed: int = 0) -> DatasetSplit:
    """Deterministic shuffled split; rounding remainder goes to train."""
    if n < 3:
        raise ValueError("need at least 3 samples to split")
    ratios = np.asarray(ratios, dtype=np.float64)
    if (ratios <= 0).any():
        raise ValueError("ratios must be positive")
    ratios = ratios / ratios.sum()
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split produces an empty subset")
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        train=np.sort(perm[:n_train]),
        validation=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
    )


def standardize_covariates(values: np.ndarray, mean=None, std=None):
    """Zero-mean unit-variance scaling; statistics from the training split only."""
    values = np.asarray(values, dtype=np.float64)
    if mean is None:
        mean = values.mean(axis=0)
        std = values.std(axis=0)
    std = np.where(np.asarray(std) < 1e-8, 1.0, std)
    return (values - mean) / std, np.asarray(mean), np.asarray(std)


def _gaussian_log_prob(z, mu, log_sigma):
    return (
        -0.5 * ((z - mu) / torch.exp(log_sigma)) ** 2 - log_sigma - 0.5 * LOG_2PI
    ).sum(dim=1)


def _prior_log_prob(z):
    return (-0.5 * z**2 - 0.5 * LOG_2PI).sum(dim=1)


def elbo_loss(
    model: CvaeNfModel,
    x: torch.Tensor,
    c: torch.Tensor | None,
    beta: float,
    config: TrainConfig,
    noise: torch.Tensor | None = None,
) -> LossBreakdown:
    """Negative modified ELBO for one batch (per-sample mean).

    Reconstruction likelihood is isotropic Gaussian with scale
    `recon_sigma` mm.  Under "flowed_mc" the KL term is the single-sample
    Monte-Carlo estimate ln q0(z0) - sum_log_det - ln p(zK); under
    "analytic_q0" it is the closed-form KL(q0 || N(0, I)) minus the mean
    log-det, which coincides in expectation when no flows are present.
    """
    if not 0.0 <= beta <= 1.0 + 1e-12:
        raise ValueError("beta must lie in [0, 1]")
    recon, z0, z_final, sum_log_det, mu, log_sigma = model(x, c, noise)
    recon_nll = (0.5 * (x - recon) ** 2 / config.recon_sigma**2).sum(dim=(1, 2))
    if config.kl_objective == "flowed_mc":
        kl = _gaussian_log_prob(z0, mu, log_sigma) - sum_log_det - _prior_log_prob(z_final)
    else:
        kl_analytic = 0.5 * (
            torch.exp(2.0 * log_sigma) + mu**2 - 1.0 - 2.0 * log_sigma
        ).sum(dim=1)
        kl = kl_analytic - sum_log_det
    total = recon_nll.mean() + beta * kl.mean()
    for name, term in (("recon_nll", recon_nll), ("kl_term", kl), ("total", total)):
        if not torch.isfinite(term).all():
            raise TrainingError(f"non-finite loss term: {name}")
    return LossBreakdown(
        total=total,
        recon_nll=float(recon_nll.mean().detach()),
        kl_term=float(kl.mean().detach()),
        sum_log_det=float(sum_log_det.mean().detach()),
    )


def reconstruction_errors(
    model: CvaeNfModel, x: torch.Tensor, c: torch.Tensor | None, batch_size: int = 64
) -> np.ndarray:
    """Per-mesh mean vertex distance (mm) of posterior-mean reconstructions."""
    model.eval()
    errors = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            cb = c[start : start + batch_size] if c is not None else None
            recon, *_ = model(xb, cb, noise=torch.zeros(len(xb), model.config.latent_dim))
            errors.append(torch.linalg.norm(xb - recon, dim=2).mean(dim=1).numpy())
    return np.concatenate(errors)


def train(
    model: CvaeNfModel,
    train_x: torch.Tensor,
    train_c: torch.Tensor | None,
    config: TrainConfig,
    val_x: torch.Tensor | None = None,
    val_c: torch.Tensor | None = None,
    out_dir=None,
    checkpoint_meta: dict | None = None,
    start_epoch: int = 0,
    log_every: int | None = None,
) -> list[dict]:
    """Optimize the model in place; returns the per-epoch metrics history.

    When `out_dir` is given, writes metrics.csv plus best-validation and
    final checkpoints.  Fully seeded: two runs with the same config and
    inputs produce identical histories.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    n = len(train_x)
    if n == 0:
        raise TrainingError("empty training set")
    history: list[dict] = []
    best_val = math.inf
    consecutive_failures = 0
    checkpoint_meta = checkpoint_meta or {}

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        model.train()
        beta = kl_warmup(epoch, config.warmup_epochs)
        perm = rng.permutation(n)
        epoch_terms = np.zeros(4)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = train_x[idx]
            cb = train_c[idx] if train_c is not None else None
            try:
                loss = elbo_loss(model, xb, cb, beta, config)
            except TrainingError:
                consecutive_failures += 1
                if consecutive_failures >= 3:
                    raise TrainingError(
                        f"non-finite loss for 3 consecutive steps at epoch {epoch} "
                        f"(beta={beta:.3f}, lr={config.learning_rate})"
                    ) from None
                optimizer.zero_grad(set_to_none=True)
                continue
            consecutive_failures = 0
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_terms += [
                float(loss.total.detach()),
                loss.recon_nll,
                loss.kl_term,
                loss.sum_log_det,
            ]
            n_batches += 1
        epoch_terms /= max(n_batches, 1)

        val_err = math.nan
        if val_x is not None and len(val_x):
            val_err = float(reconstruction_errors(model, val_x, val_c).mean())
        record = {
            "epoch": epoch,
            "total": float(epoch_terms[0]),
            "recon_nll": float(epoch_terms[1]),
            "kl_term": float(epoch_terms[2]),
            "sum_log_det": float(epoch_terms[3]),
            "beta": float(beta),
            "val_generalisation_mm": val_err,
        }
        history.append(record)
        if log_every and (epoch % log_every == 0):
            print(
                f"epoch {epoch}: total={record['total']:.4f} "
                f"recon={record['recon_nll']:.4f} kl={record['kl_term']:.4f} "
                f"beta={beta:.2f} val={val_err:.4f}"
            )
        if out_dir is not None and not math.isnan(val_err) and val_err < best_val:
            best_val = val_err
            model.trained = True
            save_checkpoint(model, out_dir / "checkpoint_best", epoch=epoch, **checkpoint_meta)

    model.trained = True
    if out_dir is not None:
        save_checkpoint(
            model, out_dir / "checkpoint_final", epoch=config.epochs - 1, **checkpoint_meta
        )
        write_metrics_csv(history, out_dir / "metrics.csv")
    return history


def write_metrics_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for record in history:
            writer.writerow({k: _fmt(record[k]) for k in METRICS_HEADER})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
