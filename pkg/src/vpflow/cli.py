"""Command-line surface: synth, train, eval, sample, manipulate.

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure.
Every command writes a manifest.json next to its outputs.
"""

from __future__ import annotations

import datetime
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .dataset import (
    Cohort,
    DatasetError,
    load_cohort,
    read_covariates_csv,
    split_merged_positions,
    split_merged_topology,
    write_dataset,
)
from .evaluation import (
    EvaluationError,
    fit_pca_ssm,
    generalisation_error,
    latent_activity,
    pca_reconstruct,
    pca_sample,
    specificity_error,
    subgroup_volume_density,
    volume_variability,
    write_activity_csv,
    write_density_csv,
)
from .flows import FlowError
from .hierarchy import build_sampling_hierarchy
from .mesh import MeshError, SurfaceMesh, enclosed_volume, save_mesh
from .model import CvaeNfModel, ModelConfig, load_checkpoint, sample_population, save_checkpoint
from .synthdata import SynthError, SynthSpec, generate_population
from .training import (
    TrainConfig,
    TrainingError,
    split_dataset,
    standardize_covariates,
    train,
)

_USAGE_ERRORS = (
    SynthError,
    DatasetError,
    MeshError,
    EvaluationError,
    ValueError,
    KeyError,
    FileNotFoundError,
    json.JSONDecodeError,
)
_NUMERICAL_ERRORS = (TrainingError, FlowError, FloatingPointError)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _NUMERICAL_ERRORS as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(3)
        except _USAGE_ERRORS as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(2)

    return wrapper


def _write_manifest(out_dir: Path, command: str, **fields) -> None:
    manifest = {
        "command": command,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **fields,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3:
        raise ValueError(f"ratios must be a:b:c, got {text!r}")
    return tuple(parts)


@click.group()
def main():
    """Conditional flow VAE for virtual anatomical populations."""


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@main.command("synth")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the spec's seed.")
@guarded
def cmd_synth(spec_file, out, seed):
    """Generate a synthetic shell-pair cohort from a JSON spec."""
    spec = SynthSpec.from_json(spec_file)
    if seed is not None:
        spec.seed = seed
    records = generate_population(spec)
    out_dir = Path(out)
    write_dataset(records, spec.covariates, out_dir)
    with open(out_dir / "synth_spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    _write_manifest(
        out_dir,
        "synth",
        config_path=str(spec_file),
        seed=spec.seed,
        inputs=[str(spec_file)],
        outputs=["meshes/", "covariates.csv", "ground_truth.csv"],
        n_subjects=spec.n_subjects,
    )
    click.echo(f"wrote {len(records)} subjects to {out_dir}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return cfg


@main.command("train")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--warmup-epochs", type=int, default=None)
@click.option("--flow-steps", type=int, default=None)
@click.option("--kl-objective", type=click.Choice(["flowed_mc", "analytic_q0"]), default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--features", type=str, default=None, help="Comma-separated encoder widths.")
@click.option("--cheb-order", type=int, default=None)
@click.option("--factor", type=int, default=None, help="Down/up-sampling factor.")
@click.option("--unconditional", is_flag=True, help="Ignore covariates (vanilla VAE).")
@click.option("--ratios", type=str, default="422:59:1879")
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@click.option("--log-every", type=int, default=None)
@guarded
def cmd_train(
    data_dir,
    out,
    config_path,
    seed,
    epochs,
    batch_size,
    warmup_epochs,
    flow_steps,
    kl_objective,
    latent_dim,
    features,
    cheb_order,
    factor,
    unconditional,
    ratios,
    resume_path,
    log_every,
):
    """Train the flow VAE on a cohort directory."""
    cfg_file = _load_config_file(config_path)
    model_cfg = dict(cfg_file.get("model", {}))
    train_cfg = dict(cfg_file.get("train", {}))
    for key, value in {
        "latent_dim": latent_dim,
        "flow_steps": flow_steps,
        "cheb_order": cheb_order,
        "sampling_factor": factor,
    }.items():
        if value is not None:
            model_cfg[key] = value
    if features is not None:
        model_cfg["encoder_features"] = tuple(int(f) for f in features.split(","))
    if unconditional:
        model_cfg["conditional"] = False
    for key, value in {
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "warmup_epochs": warmup_epochs,
        "kl_objective": kl_objective,
    }.items():
        if value is not None:
            train_cfg[key] = value

    cohort = load_cohort(data_dir)
    X = cohort.merged_positions()
    ratios = _parse_ratios(ratios)

    out_dir = Path(out)
    start_epoch = 0
    if resume_path is not None:
        model, meta = load_checkpoint(resume_path)
        config = model.config
        train_config = TrainConfig(**{**meta.get("train_config", {}), **train_cfg})
        split = split_dataset(len(X), tuple(meta["split_ratios"]), meta["split_seed"])
        mean = np.asarray(meta["covariate_mean"]) if meta["covariate_mean"] else None
        std = np.asarray(meta["covariate_std"]) if meta["covariate_std"] else None
        start_epoch = (meta.get("epoch") or 0) + 1
    else:
        model_cfg.setdefault("n_covariates", cohort.covariates.shape[1])
        config = ModelConfig(**model_cfg)
        train_config = TrainConfig(**train_cfg)
        split = split_dataset(len(X), ratios, train_config.seed)
        mean = std = None
        reference = X[split.train].mean(axis=0)
        hierarchy = build_sampling_hierarchy(
            cohort.merged_topology(), reference, config.sampling_factor, config.n_blocks
        )
        torch.manual_seed(train_config.seed)
        model = CvaeNfModel(config, hierarchy)

    if config.conditional:
        if cohort.covariates.shape[1] != config.n_covariates:
            raise DatasetError(
                f"covariates.csv has {cohort.covariates.shape[1]} columns, "
                f"model expects {config.n_covariates}"
            )
        _, mean, std = standardize_covariates(
            cohort.covariates[split.train], mean=mean, std=std
        )
        C_std, _, _ = standardize_covariates(cohort.covariates, mean=mean, std=std)
        tc = torch.from_numpy(C_std).float()
    else:
        tc = None

    tx = torch.from_numpy(X).float()
    checkpoint_meta = {
        "covariate_schema": cohort.schema if config.conditional else None,
        "covariate_mean": mean if config.conditional else None,
        "covariate_std": std if config.conditional else None,
        "extra": {
            "n_endo_vertices": cohort.n_endo_vertices(),
            "split_ratios": list(ratios),
            "split_seed": train_config.seed,
            "train_config": train_config.to_dict(),
        },
    }
    train(
        model,
        tx[split.train],
        tc[split.train] if tc is not None else None,
        train_config,
        val_x=tx[split.validation],
        val_c=tc[split.validation] if tc is not None else None,
        out_dir=out_dir,
        checkpoint_meta=checkpoint_meta,
        start_epoch=start_epoch,
        log_every=log_every,
    )
    _write_manifest(
        out_dir,
        "train",
        config_path=config_path,
        seed=train_config.seed,
        inputs=[str(data_dir)],
        outputs=["metrics.csv", "checkpoint_best/", "checkpoint_final/"],
        checkpoint_id="checkpoint_final",
        epochs=train_config.epochs,
    )
    click.echo(f"trained to epoch {train_config.epochs - 1}; outputs in {out_dir}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_compare(text: str) -> int:
    # "pca:k=16" -> 16
    if not text.startswith("pca:k="):
        raise ValueError(f"unsupported --compare spec: {text!r} (expected pca:k=N)")
    return int(text.split("=", 1)[1])


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--compare", "compare_spec", type=str, default=None)
@click.option("--n-generated", type=int, default=1000)
@click.option("--seed", type=int, default=0)
@guarded
def cmd_eval(checkpoint, data_dir, out, compare_spec, n_generated, seed):
    """Evaluate a checkpoint: generalisation, specificity, variability, activity."""
    model, meta = load_checkpoint(checkpoint)
    cohort = load_cohort(data_dir)
    X = cohort.merged_positions()
    if X.shape[1] != model.hierarchy.vertex_counts()[0]:
        raise MeshError(
            f"data has {X.shape[1]} merged vertices, checkpoint expects "
            f"{model.hierarchy.vertex_counts()[0]}"
        )
    split = split_dataset(len(X), tuple(meta["split_ratios"]), meta["split_seed"])
    n_endo = meta["n_endo_vertices"]
    endo_topo, _ = split_merged_topology(cohort.merged_topology(), n_endo)

    if model.config.conditional:
        mean = np.asarray(meta["covariate_mean"])
        std = np.asarray(meta["covariate_std"])
        C_std, _, _ = standardize_covariates(cohort.covariates, mean=mean, std=std)
    else:
        C_std = None

    X_test = X[split.test]
    C_test = C_std[split.test] if C_std is not None else None
    gen_mean, gen_std = generalisation_error(model, X_test, C_test)
    activity = latent_activity(model, X_test, C_test)

    rng = np.random.default_rng(seed)
    if C_test is not None:
        row_idx = rng.integers(0, len(X_test), size=n_generated)
        gen_cov = C_test[row_idx]
    else:
        gen_cov = None
    generated = sample_population(model, gen_cov, rng, n_samples=n_generated)
    gen_positions = np.stack([m.positions for m in generated])
    spec_mean, spec_std = specificity_error(gen_positions, X_test)
    gen_endo = split_merged_positions(gen_positions, n_endo)[0]
    vol_var = volume_variability(gen_endo, endo_topo)
    bpvols = np.array(
        [enclosed_volume(SurfaceMesh(endo_topo, p)) for p in gen_endo]
    )

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "generalisation_mm": {"mean": gen_mean, "std": gen_std},
        "specificity_mm": {"mean": spec_mean, "std": spec_std},
        "volume_variability_mm3": vol_var,
        "activity": [float(a) for a in activity],
    }

    rows = [
        {
            "method": "cvae_nf" if model.config.flow_steps else "cvae",
            "reconstruction_mean": gen_mean,
            "reconstruction_std": gen_std,
            "specificity_mean": spec_mean,
            "specificity_std": spec_std,
            "volume_variability": vol_var,
        }
    ]
    if compare_spec is not None:
        k = _parse_compare(compare_spec)
        ssm = fit_pca_ssm(X[split.train], k)
        pca_recon = pca_reconstruct(ssm, X_test)
        per_mesh = np.linalg.norm(X_test - pca_recon, axis=2).mean(axis=1)
        pca_gen = pca_sample(ssm, np.random.default_rng(seed), n_generated)
        pca_spec_mean, pca_spec_std = specificity_error(pca_gen, X_test)
        pca_vol = volume_variability(
            split_merged_positions(pca_gen, n_endo)[0], endo_topo
        )
        rows.append(
            {
                "method": f"pca_k{k}",
                "reconstruction_mean": float(per_mesh.mean()),
                "reconstruction_std": float(per_mesh.std()),
                "specificity_mean": pca_spec_mean,
                "specificity_std": pca_spec_std,
                "volume_variability": pca_vol,
            }
        )

    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        import csv as _csv

        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    write_activity_csv(activity, out_dir / "activity.csv")

    # KDE over generated BPVols, grouped by gender when available.
    if gen_cov is not None and "gender" in cohort.schema:
        gidx = cohort.schema.index("gender")
        raw_gender = gen_cov[:, gidx] * std[gidx] + mean[gidx]
        labels = (raw_gender > 0.5).astype(int)
    else:
        labels = np.zeros(len(bpvols), dtype=int)
    bandwidth = max(bpvols.std() / 5.0, 1e-6)
    density = subgroup_volume_density(bpvols, labels, bandwidth)
    write_density_csv(density, out_dir / "bpvol_kde.csv")

    _write_manifest(
        out_dir,
        "eval",
        seed=seed,
        inputs=[str(checkpoint), str(data_dir)],
        outputs=["metrics.json", "metrics.csv", "activity.csv", "bpvol_kde.csv"],
        checkpoint_id=str(checkpoint),
    )
    click.echo(json.dumps(report["generalisation_mm"]))


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


@main.command("sample")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("covariates_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_per_row", type=int, default=1, help="Samples per covariate row.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@guarded
def cmd_sample(checkpoint, covariates_csv, n_per_row, seed, out):
    """Generate meshes conditioned on each covariate row."""
    model, meta = load_checkpoint(checkpoint)
    ids, schema, values = read_covariates_csv(covariates_csv)
    if model.config.conditional:
        if schema != meta["covariate_schema"]:
            raise DatasetError(
                f"covariate columns {schema} do not match checkpoint schema "
                f"{meta['covariate_schema']}"
            )
        mean = np.asarray(meta["covariate_mean"])
        std = np.asarray(meta["covariate_std"])
        values_std, _, _ = standardize_covariates(values, mean=mean, std=std)
        cov = np.repeat(values_std, n_per_row, axis=0)
    else:
        cov = None
    sample_ids = [f"{sid}_{k}" for sid in ids for k in range(n_per_row)]

    rng = np.random.default_rng(seed)
    meshes = sample_population(
        model, cov, rng, n_samples=len(ids) * n_per_row
    )
    n_endo = meta["n_endo_vertices"]
    endo_topo, epi_topo = split_merged_topology(
        model.hierarchy.topologies[0], n_endo
    )
    out_dir = Path(out)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out_dir / "volumes.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["id", "bpvol", "myovol"])
        for sid, mesh in zip(sample_ids, meshes):
            endo_pos, epi_pos = split_merged_positions(mesh.positions, n_endo)
            endo = SurfaceMesh(endo_topo, endo_pos)
            epi = SurfaceMesh(epi_topo, epi_pos)
            save_mesh(endo, mesh_dir / f"{sid}_endo.ply")
            save_mesh(epi, mesh_dir / f"{sid}_epi.ply")
            bpvol = enclosed_volume(endo)
            writer.writerow([sid, repr(bpvol), repr(enclosed_volume(epi) - bpvol)])
    _write_manifest(
        out_dir,
        "sample",
        seed=seed,
        inputs=[str(checkpoint), str(covariates_csv)],
        outputs=["meshes/", "volumes.csv"],
        checkpoint_id=str(checkpoint),
        n_samples=len(sample_ids),
    )
    click.echo(f"wrote {len(sample_ids)} samples to {out_dir}")


# ---------------------------------------------------------------------------
# manipulate
# ---------------------------------------------------------------------------


@main.command("manipulate")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--subject", type=str, default=None, help="Subject id; defaults to the first.")
@click.option("--attribute", required=True, type=str)
@click.option("--range", "sweep_range", required=True, type=str, help="Sweep as a:b (raw units).")
@click.option("--steps", type=int, default=11)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@guarded
def cmd_manipulate(checkpoint, data_dir, subject, attribute, sweep_range, steps, out):
    """Sweep one covariate for a real subject with its latent code fixed."""
    model, meta = load_checkpoint(checkpoint)
    if not model.config.conditional:
        raise ValueError("manipulate requires a conditional model")
    cohort = load_cohort(data_dir)
    if attribute not in cohort.schema:
        raise KeyError(f"unknown attribute {attribute!r}; schema: {cohort.schema}")
    if subject is None:
        index = 0
    else:
        try:
            index = cohort.ids.index(subject)
        except ValueError:
            raise KeyError(f"unknown subject id {subject!r}") from None
    parts = sweep_range.split(":")
    if len(parts) != 2:
        raise ValueError(f"--range must be a:b, got {sweep_range!r}")
    lo, hi = float(parts[0]), float(parts[1])

    mean = np.asarray(meta["covariate_mean"])
    std = np.asarray(meta["covariate_std"])
    X = cohort.merged_positions()[index : index + 1]
    raw_c = cohort.covariates[index].copy()
    c_std, _, _ = standardize_covariates(raw_c[None], mean=mean, std=std)

    model.eval()
    with torch.no_grad():
        recon, z0, z_final, *_ = model(
            torch.from_numpy(X).float(),
            torch.from_numpy(c_std).float(),
            noise=torch.zeros(1, model.config.latent_dim),
        )

    attr_idx = cohort.schema.index(attribute)
    sweep_values = np.linspace(lo, hi, steps)
    n_endo = meta["n_endo_vertices"]
    endo_topo, epi_topo = split_merged_topology(model.hierarchy.topologies[0], n_endo)

    out_dir = Path(out)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([attribute, "bpvol", "myovol"])
        for k, value in enumerate(sweep_values):
            swept = raw_c.copy()
            swept[attr_idx] = value
            swept_std, _, _ = standardize_covariates(swept[None], mean=mean, std=std)
            with torch.no_grad():
                positions = model.decode(
                    z_final, torch.from_numpy(swept_std).float()
                ).numpy()[0].astype(np.float64)
            endo_pos, epi_pos = split_merged_positions(positions, n_endo)
            endo = SurfaceMesh(endo_topo, endo_pos)
            epi = SurfaceMesh(epi_topo, epi_pos)
            save_mesh(endo, mesh_dir / f"sweep_{k:03d}_endo.ply")
            save_mesh(epi, mesh_dir / f"sweep_{k:03d}_epi.ply")
            bpvol = enclosed_volume(endo)
            writer.writerow(
                [repr(float(value)), repr(bpvol), repr(enclosed_volume(epi) - bpvol)]
            )
    _write_manifest(
        out_dir,
        "manipulate",
        seed=None,
        inputs=[str(checkpoint), str(data_dir)],
        outputs=["meshes/", "sweep.csv"],
        checkpoint_id=str(checkpoint),
        attribute=attribute,
        range=[lo, hi],
        steps=steps,
    )
    click.echo(f"wrote sweep of {steps} steps to {out_dir}")


if __name__ == "__main__":
    main()
