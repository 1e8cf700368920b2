"""Command-line surface: corpus generation, GAN training/sampling,
projection denoising, FID, classifier, ablations, and the reader study.

Every command that writes artifacts also drops a `run.json` config echo
with input fingerprints, so a run can be reproduced bit-identically from
its output directory at a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import augment as augment_mod
from . import classifier as clf_mod
from . import corpus as corpus_mod
from . import fid as fid_mod
from . import gan as gan_mod
from . import phantom as phantom_mod
from . import plots
from . import projection as proj_mod
from . import study as study_mod


def _seed_default(seed: int | None) -> int:
    if seed is not None:
        return seed
    return int(os.environ.get("PRLX_SEED", "0"))


def _fingerprint(path: Path) -> str:
    digest = hashlib.sha256()
    if path.is_dir():
        for child in sorted(path.rglob("*")):
            if child.is_file():
                digest.update(child.name.encode())
                digest.update(child.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def _write_echo(out_dir: Path, command: str, params: dict,
                inputs: dict[str, str | Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {
        "command": command,
        "version": __version__,
        "params": {k: str(v) if isinstance(v, Path) else v
                   for k, v in params.items()},
        "input_fingerprints": {name: _fingerprint(Path(p))
                               for name, p in inputs.items()},
    }
    (out_dir / "run.json").write_text(json.dumps(echo, indent=1,
                                                 sort_keys=True) + "\n")


def _fail(message: str) -> None:
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(1)


@click.group()
@click.version_option(__version__)
def main():
    """Rare-class lesion rebalancing toolkit."""


@main.command("phantom")
@click.option("--n-rim", type=int, default=260, show_default=True)
@click.option("--n-nonrim", type=int, default=520, show_default=True)
@click.option("--n-ambiguous", type=int, default=177, show_default=True)
@click.option("--multi-contrast", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
def phantom_cmd(n_rim, n_nonrim, n_ambiguous, multi_contrast, seed, out_dir):
    """Generate a phantom lesion corpus with paper-shaped splits."""
    seed = _seed_default(seed)
    try:
        manifest = phantom_mod.generate_corpus(
            n_rim, n_nonrim, n_ambiguous, multi_contrast, seed, out_dir)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    _write_echo(out_dir, "phantom",
                dict(n_rim=n_rim, n_nonrim=n_nonrim, n_ambiguous=n_ambiguous,
                     multi_contrast=multi_contrast, seed=seed), {})
    stats = corpus_mod.class_stats(manifest)
    click.echo(json.dumps({"counts": stats.counts,
                           "imbalance_ratio": stats.imbalance_ratio}))


@main.group("gan")
def gan_group():
    """Generative model training and sampling."""


@gan_group.command("train")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--features", "features_path",
              type=click.Path(path_type=Path), required=True,
              help="Frozen feature extractor (see `prlx fid fit`).")
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--steps", type=int, default=20000, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--conditional", is_flag=True)
@click.option("--channels", type=int, default=1, show_default=True)
@click.option("--fid-interval", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=None)
def gan_train(corpus_dir, features_path, out_dir, steps, batch_size,
              conditional, channels, fid_interval, seed):
    """Train the style-based GAN (unconditional: rim class only)."""
    seed = _seed_default(seed)
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        extractor = fid_mod.load_extractor(features_path)
        config = gan_mod.GanTrainConfig(
            total_steps=steps, batch_size=batch_size, conditional=conditional,
            channels=channels, fid_eval_interval=fid_interval, seed=seed)
        result = gan_mod.train(config, manifest, corpus_dir, extractor,
                               out_dir, progress=True)
    except (ValueError, OSError, RuntimeError) as exc:
        _fail(str(exc))
    _write_echo(out_dir, "gan train",
                dict(asdict(config)), {"corpus": corpus_dir,
                                       "features": features_path})
    plots.save_training_curves(
        {"conditional" if conditional else "standard": result.curve},
        out_dir / "fid_curve.png")
    click.echo(json.dumps({"best_fid": result.best_fid,
                           "initial_fid": result.initial_fid,
                           "best_checkpoint": str(result.best_checkpoint)}))


@gan_group.command("sample")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--label", type=click.Choice(["rim", "nonrim"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
def gan_sample(ckpt_path, n, label, seed, out_dir):
    """Sample patches with stored latent provenance."""
    seed = _seed_default(seed)
    try:
        ckpt = gan_mod.load_checkpoint(ckpt_path)
        samples = gan_mod.sample(ckpt, n, seed=seed, label=label)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, patch in enumerate(samples.patches):
        corpus_mod.write_patch(patch, out_dir / f"sample-{i:05d}.qpat")
    np.savez(out_dir / "latents.npz", z=samples.z, w=samples.w)
    _write_echo(out_dir, "gan sample", dict(n=n, label=label, seed=seed),
                {"ckpt": ckpt_path})
    plots.save_patch_grid(samples.patches[:32], out_dir / "samples.png")
    click.echo(json.dumps({"n": n, "out": str(out_dir)}))


@main.command("project")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--features", "features_path",
              type=click.Path(path_type=Path), required=True)
@click.option("--in", "corpus_dir", type=click.Path(path_type=Path),
              required=True, help="Corpus whose ambiguous records to denoise.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--iters", type=int, default=1000, show_default=True)
@click.option("--alpha", type=float, default=1e5, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--limit", type=int, default=None,
              help="Denoise only the first N ambiguous records.")
@click.option("--seed", type=int, default=None)
def project_cmd(ckpt_path, features_path, corpus_dir, out_dir, iters, alpha,
                lr, limit, seed):
    """Batch latent-projection denoising of ambiguous records."""
    seed = _seed_default(seed)
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        ckpt = gan_mod.load_checkpoint(ckpt_path)
        extractor = fid_mod.load_extractor(features_path)
        config = proj_mod.ProjectionConfig(iterations=iters, alpha=alpha,
                                           lr_init=lr, seed=seed)
        recs = manifest.select(label="ambiguous", split="train")
        if limit is not None:
            recs = recs[:limit]
        if not recs:
            raise ValueError("no ambiguous train records to denoise")
        patches = corpus_mod.load_patches(manifest, corpus_dir, recs)
        results = proj_mod.project_batch(patches, ckpt, config, extractor)
    except (ValueError, OSError, RuntimeError) as exc:
        _fail(str(exc))

    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(manifest.records)
    for rec, res in zip(recs, results):
        rec_id = f"denoised-{rec.id}"
        rel = f"{rec_id}.qpat"
        corpus_mod.write_patch(res.x_hat, out_dir / rel)
        trace_lines = [
            f"{i} {total:.6e}" for i, total in enumerate(res.objective_trace)]
        (out_dir / f"{rec_id}.trace.txt").write_text(
            "\n".join(trace_lines) + "\n")
        records.append(corpus_mod.LesionRecord(
            id=rec_id, file=os.path.relpath(out_dir / rel, corpus_dir),
            label="rim", split="train", source="denoised", parent_id=rec.id,
            seed_or_latent_ref=f"proj:{seed}"))
    merged = corpus_mod.Manifest(channels=manifest.channels, records=records,
                                 version=manifest.version)
    corpus_mod.save_manifest(merged, out_dir / "manifest.json")
    _write_echo(out_dir, "project",
                dict(iters=iters, alpha=alpha, lr=lr, seed=seed, limit=limit),
                {"ckpt": ckpt_path, "features": features_path,
                 "corpus": corpus_dir / "manifest.json"})
    plots.save_patch_grid(
        np.stack([r.x_hat for r in results[:32]]), out_dir / "denoised.png")
    click.echo(json.dumps({
        "n_denoised": len(results),
        "mean_final_perceptual": float(np.mean(
            [r.final_perceptual for r in results]))}))


def _load_patch_set(path: Path, select: str | None) -> np.ndarray:
    """A corpus dir (with manifest.json, optionally filtered) or a
    directory of bare .qpat files."""
    if (path / "manifest.json").exists():
        manifest = corpus_mod.load_manifest(path / "manifest.json")
        kwargs = {}
        if select:
            for clause in select.split(","):
                key, value = clause.split("=", 1)
                if key not in ("label", "split", "source"):
                    raise ValueError(f"bad selector key {key!r}")
                kwargs[key] = value
        return corpus_mod.load_patches(manifest, path,
                                       manifest.select(**kwargs))
    files = sorted(path.glob("*.qpat"))
    if not files:
        raise ValueError(f"{path}: no manifest.json and no .qpat files")
    return np.stack([corpus_mod.read_patch(f) for f in files])


@main.group("fid")
def fid_group():
    """Frechet-distance evaluation in the learned feature space."""


@fid_group.command("fit")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--seed", type=int, default=None)
def fid_fit(corpus_dir, out_path, seed):
    """Fit and freeze the domain feature extractor."""
    seed = _seed_default(seed)
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        extractor = fid_mod.fit_feature_net(manifest, corpus_dir, seed=seed)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    fid_mod.save_extractor(extractor, out_path)
    click.echo(json.dumps({"hash": extractor.content_hash,
                           "out": str(out_path)}))


@fid_group.command("compute")
@click.option("--a", "path_a", type=click.Path(path_type=Path), required=True)
@click.option("--b", "path_b", type=click.Path(path_type=Path), required=True)
@click.option("--a-select", default=None, help="e.g. label=rim,split=train")
@click.option("--b-select", default=None)
@click.option("--features", "features_path",
              type=click.Path(path_type=Path), required=True)
def fid_compute(path_a, path_b, a_select, b_select, features_path):
    """Domain FID between two patch sets."""
    try:
        extractor = fid_mod.load_extractor(features_path)
        stats_a = fid_mod.stats_for_patches(
            _load_patch_set(path_a, a_select), extractor)
        stats_b = fid_mod.stats_for_patches(
            _load_patch_set(path_b, b_select), extractor)
        value = fid_mod.frechet_distance(stats_a, stats_b)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({"fid": value, "n_a": stats_a.n, "n_b": stats_b.n,
                           "extractor": extractor.content_hash}))


@main.group("clf")
def clf_group():
    """Rim/non-rim classifier."""


@clf_group.command("train")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--epochs", type=int, default=25, show_default=True)
@click.option("--seed", type=int, default=None)
def clf_train(corpus_dir, out_path, epochs, seed):
    seed = _seed_default(seed)
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        config = clf_mod.ClassifierConfig(epochs=epochs, seed=seed,
                                          channels=manifest.channels)
        ckpt = clf_mod.train_classifier(manifest, corpus_dir, config)
    except (ValueError, OSError, RuntimeError) as exc:
        _fail(str(exc))
    clf_mod.save_classifier(ckpt, out_path)
    click.echo(json.dumps({"final_loss": ckpt.learning_curve[-1][1],
                           "out": str(out_path)}))


@clf_group.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path),
              required=True)
def clf_eval(ckpt_path, corpus_dir):
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        ckpt = clf_mod.load_classifier(ckpt_path)
        metrics = clf_mod.evaluate(ckpt, manifest, corpus_dir)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({
        "accuracy": metrics.accuracy, "precision": metrics.precision,
        "sensitivity": metrics.sensitivity,
        "counts": {"tp": metrics.tp, "fp": metrics.fp,
                   "fn": metrics.fn, "tn": metrics.tn},
        "undefined": metrics.undefined}))


@clf_group.command("cam")
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--patch", "patch_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--class-index", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
def clf_cam(ckpt_path, patch_path, class_index, out_dir):
    """Grad-CAM for one patch; writes the map and an overlay figure."""
    try:
        ckpt = clf_mod.load_classifier(ckpt_path)
        patch = corpus_mod.read_patch(patch_path)
        cam = clf_mod.gradcam(ckpt, patch, class_index)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_patch(cam.values[None].astype(np.float32),
                           out_dir / "cam.qpat")
    plots.save_cam_overlay(patch, cam.values, out_dir / "cam.png")
    click.echo(json.dumps({"all_zero": cam.all_zero,
                           "class_index": cam.class_index,
                           "out": str(out_dir)}))


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              required=True, help="JSON ablation config.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
def ablate_cmd(config_path, out_dir):
    """Run the augmentation ablation grid and render its report."""
    try:
        doc = json.loads(Path(config_path).read_text())
        strategies = [augment_mod.AugmentationStrategy(**s)
                      for s in doc["strategies"]]
        clf_config = clf_mod.ClassifierConfig(**doc.get("classifier", {}))
        config = augment_mod.AblationConfig(
            strategies=strategies, seeds=doc["seeds"],
            manifest_path=doc["manifest_path"],
            corpus_root=doc["corpus_root"], classifier=clf_config,
            extractor_path=doc.get("extractor_path"))
        report = augment_mod.run_ablation(config, progress=True)
    except (KeyError, ValueError, OSError, RuntimeError) as exc:
        _fail(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(report.render())
    rows_doc = [asdict(row) for row in report.rows]
    (out_dir / "ablation.json").write_text(json.dumps(rows_doc, indent=1,
                                                      sort_keys=True) + "\n")
    plots.save_ablation_figure(report, out_dir / "ablation.png")
    if report.fid_table is not None:
        (out_dir / "fid_table.txt").write_text(report.fid_table.render())
        plots.save_fid_table_figure(report.fid_table,
                                    out_dir / "fid_table.png")
    _write_echo(out_dir, "ablate", doc, {"config": config_path})
    click.echo(report.render())


@main.group("study")
def study_group():
    """Blinded reader study."""


@study_group.command("build")
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path),
              required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--n-real", type=int, default=55, show_default=True)
@click.option("--n-synthetic", type=int, default=55, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path),
              required=True)
def study_build(corpus_dir, ckpt_path, n_real, n_synthetic, seed, out_dir):
    """Assemble a blinded real+synthetic item set."""
    seed = _seed_default(seed)
    try:
        manifest = corpus_mod.load_manifest(corpus_dir / "manifest.json")
        ckpt = gan_mod.load_checkpoint(ckpt_path)
        study_mod.build_study(manifest, corpus_dir, ckpt, out_dir,
                              n_real=n_real, n_synthetic=n_synthetic,
                              seed=seed)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    _write_echo(out_dir, "study build",
                dict(n_real=n_real, n_synthetic=n_synthetic, seed=seed),
                {"corpus": corpus_dir / "manifest.json", "ckpt": ckpt_path})
    click.echo(json.dumps({"items": n_real + n_synthetic,
                           "out": str(out_dir)}))


@study_group.command("serve")
@click.option("--study-dir", type=click.Path(path_type=Path), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8702, show_default=True)
def study_serve(study_dir, host, port):
    """Serve the blinded study API (and the frontend if built alongside)."""
    import uvicorn

    try:
        app = study_mod.create_app(study_dir)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    uvicorn.run(app, host=host, port=port)


@study_group.command("report")
@click.option("--study-dir", type=click.Path(path_type=Path), required=True)
def study_report_cmd(study_dir):
    try:
        store = study_mod.StudyStore(study_dir)
        report = study_mod.study_report(store)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(report, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
