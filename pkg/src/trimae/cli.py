"""Operator entry points: curate triplets, pretrain, finetune, evaluate,
run ablation sweeps, validate manifests, and build demo data.

Configuration comes from an optional JSON config file ({"model": {...},
"train": {...}}) with explicit flags winning over file values. Every command
honors --seed. Exit codes: 0 success, 1 validation/config error, 2 runtime
failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .adapters import resolve_captioner, resolve_scorer, resolve_text_encoder
from .data import Manifest, read_manifest, write_manifest
from .metrics import accuracy, format_table, mean_average_precision
from .model import ModelConfig, TriModalAutoencoder, load_checkpoint
from .synthetic import (
    load_corpus,
    load_labeled_pairs,
    make_labeled_pairs,
    make_synthetic_videos,
    write_corpus,
    write_labels,
)
from .training import (
    Task,
    TrainConfig,
    TrainMode,
    TrainingTriplet,
    evaluate_retrieval,
    finetune as run_finetune,
    load_training_triplets,
    predict_scores,
    pretrain as run_pretrain,
    run_ablation_filter_k,
    run_ablation_lambda2,
)
from .triplets import build_triplets, filter_top_k
from .validation import ConfigError, ValidationError

MODE_CHOICES = {"avt": TrainMode.PRETRAIN_AVT, "av": TrainMode.PRETRAIN_AV}


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return obj


def _train_config(file_obj: dict, mode: TrainMode, **flags) -> TrainConfig:
    kwargs = dict(file_obj.get("train", {}))
    for key, value in flags.items():
        if value is not None:
            kwargs[key] = value
    kwargs["mode"] = mode
    return TrainConfig(**kwargs)


def _model_config(file_obj: dict, triplets, seed: int | None) -> ModelConfig:
    kwargs = dict(file_obj.get("model", {}))
    if triplets and "audio_shape" not in kwargs:
        kwargs["audio_shape"] = tuple(triplets[0].audio.shape)
    if triplets and "frame_shape" not in kwargs:
        kwargs["frame_shape"] = tuple(triplets[0].frame.shape)
    if triplets and "audio_patch" not in kwargs:
        kwargs["audio_patch"] = _default_patch(kwargs["audio_shape"][:2])
    if triplets and "visual_patch" not in kwargs:
        kwargs["visual_patch"] = _default_patch(kwargs["frame_shape"][:2])
    if seed is not None:
        kwargs["seed"] = seed
    return ModelConfig(**kwargs)


def _default_patch(shape: tuple[int, int]) -> tuple[int, int]:
    """Largest divisor <= 16 that still leaves at least ~4 patches per axis,
    so inferred configs never produce degenerate one-patch grids."""

    def best(n: int) -> int:
        top = min(16, max(1, n // 4))
        for p in range(top, 0, -1):
            if n % p == 0:
                return p
        return 1

    return (best(shape[0]), best(shape[1]))


def _load_triplet_sets(manifest_paths, corpus: str | None, use_best_frame: bool, seed: int) -> list[TrainingTriplet]:
    triplets: list[TrainingTriplet] = []
    seen: set[str] = set()
    for mpath in manifest_paths:
        manifest = read_manifest(mpath)
        base = Path(corpus) if corpus else Path(mpath).parent
        for trip in load_training_triplets(manifest, base_dir=base, use_best_frame=use_best_frame, seed=seed):
            if trip.sample_id in seen:
                raise ValidationError(f"duplicate sample id across manifests: {trip.sample_id!r}")
            seen.add(trip.sample_id)
            triplets.append(trip)
    return triplets


@click.group()
def cli():
    """Tri-modal masked-autoencoder toolkit."""


@cli.command("generate-triplets")
@click.option("--corpus", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of per-video .npz files.")
@click.option("--captioner", "captioner_name", default="stub", show_default=True, help="Registered captioner name.")
@click.option("--scorer", "scorer_name", default="stub", show_default=True, help="Registered audio-text scorer name.")
@click.option("--k-percent", default=100.0, show_default=True, type=float, help="Keep the top k percent by score.")
@click.option("--fps", default=1.0, show_default=True, type=float, help="Frame sampling rate used for captioning.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--output", required=True, type=click.Path(dir_okay=False), help="Manifest output path.")
@click.option("--workers", default=None, type=int, help="Worker pool size (default: machine parallelism).")
@click.option("--source-dataset", default="", help="Dataset name recorded in the manifest header.")
@click.option("--journal", default=None, type=click.Path(dir_okay=False), help="Progress journal for resumable runs.")
def cmd_generate_triplets(corpus, captioner_name, scorer_name, k_percent, fps, seed, output, workers, source_dataset, journal):
    """Caption frames, score captions against audio, keep the best per video,
    then filter to the top k percent."""
    captioner = resolve_captioner(captioner_name, seed=seed)
    scorer = resolve_scorer(scorer_name, seed=seed)
    videos = load_corpus(corpus)
    if not videos:
        raise ValidationError(f"corpus {corpus} holds no .npz video files")
    videos = [_resample_frames(v, fps) for v in videos]
    manifest = build_triplets(
        videos,
        captioner,
        scorer,
        source_dataset=source_dataset or Path(corpus).name,
        journal_path=journal,
        workers=workers or os.cpu_count() or 1,
        frame_rate_fps=fps,
    )
    filtered = filter_top_k(_rebase_refs(manifest, Path(corpus), Path(output).parent), k_percent)
    write_manifest(filtered, output)
    scores = [r.score for r in filtered.records]
    click.echo(f"videos in: {len(videos)}")
    click.echo(f"records out: {len(filtered)} (k={k_percent}%)")
    click.echo(
        "score quantiles: min {:.4f} / median {:.4f} / max {:.4f}".format(
            min(scores), float(np.median(scores)), max(scores)
        )
    )


def _rebase_refs(manifest: Manifest, corpus_dir: Path, manifest_dir: Path) -> Manifest:
    """Rewrite record refs so they resolve relative to the manifest file."""
    from dataclasses import replace as dc_replace

    def rebase(ref: str) -> str:
        path = Path(ref)
        if path.is_absolute():
            return ref
        return os.path.relpath(corpus_dir / path, manifest_dir)

    records = [dc_replace(r, audio_ref=rebase(r.audio_ref), frame_ref=rebase(r.frame_ref)) for r in manifest.records]
    return Manifest(
        records=tuple(records),
        source_dataset=manifest.source_dataset,
        generator_version=manifest.generator_version,
        filter_k_percent=manifest.filter_k_percent,
        source_record_count=manifest.source_record_count,
        frame_rate_fps=manifest.frame_rate_fps,
    )


def _resample_frames(video, fps: float):
    """Pick the frame nearest each 1/fps tick; identity when rates match."""
    from .triplets import VideoSample

    if fps <= 0:
        raise ValidationError(f"--fps must be > 0, got {fps}")
    times = np.asarray([f.timestamp_s for f in video.frames])
    duration = float(times.max())
    ticks = np.arange(0.0, duration + 1e-9, 1.0 / fps)
    chosen = sorted({int(np.argmin(np.abs(times - t))) for t in ticks})
    return VideoSample(
        video_id=video.video_id,
        frames=tuple(video.frames[i] for i in chosen),
        audio=video.audio,
        audio_ref=video.audio_ref,
        frame_ref=video.frame_ref,
    )


@cli.command("pretrain")
@click.option("--manifest", "manifests", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False), help="Training manifest(s); several are concatenated.")
@click.option("--corpus", default=None, type=click.Path(exists=True, file_okay=False), help="Base directory for manifest refs (default: each manifest's directory).")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False), help="JSON config file; flags override it.")
@click.option("--mode", default="avt", type=click.Choice(sorted(MODE_CHOICES)), show_default=True, help="avt = tri-modal objective, av = audio-visual baseline.")
@click.option("--checkpoint-out", required=True, type=click.Path(dir_okay=False))
@click.option("--log-out", default=None, type=click.Path(dir_okay=False), help="Training log (JSON lines).")
@click.option("--text-encoder", "text_encoder_name", default="hash", show_default=True)
@click.option("--steps", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--learning-rate", default=None, type=float)
@click.option("--lambda1", default=None, type=float)
@click.option("--lambda2", default=None, type=float)
@click.option("--tau", default=None, type=float)
@click.option("--seed", default=None, type=int)
def cmd_pretrain(manifests, corpus, config_path, mode, checkpoint_out, log_out, text_encoder_name, steps, batch_size, learning_rate, lambda1, lambda2, tau, seed):
    """Pretrain on triplet manifests and write the final checkpoint."""
    file_obj = _load_config_file(config_path)
    train_cfg = _train_config(
        file_obj,
        MODE_CHOICES[mode],
        steps=steps,
        batch_size=batch_size,
        learning_rate=learning_rate,
        lambda1=lambda1,
        lambda2=lambda2,
        tau=tau,
        seed=seed,
    )
    triplets = _load_triplet_sets(manifests, corpus, train_cfg.use_best_frame, train_cfg.seed)
    model_cfg = _model_config(file_obj, triplets, seed)
    model = TriModalAutoencoder(model_cfg)
    encoder = None
    if train_cfg.mode is TrainMode.PRETRAIN_AVT:
        encoder = resolve_text_encoder(text_encoder_name, dim=model_cfg.d_t)
    records = run_pretrain(model, triplets, train_cfg, text_encoder=encoder, checkpoint_out=checkpoint_out, log_path=log_out)
    click.echo(f"training set: {len(triplets)} triplets")
    click.echo(f"steps: {len(records)}")
    click.echo(f"initial total loss: {records[0].loss.total:.6f}")
    click.echo(f"final total loss: {records[-1].loss.total:.6f}")
    click.echo(f"checkpoint: {checkpoint_out}")


@cli.command("finetune")
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False), help="Pretrained checkpoint to start from (default: random init).")
@click.option("--labeled", required=True, type=click.Path(exists=True, file_okay=False), help="Labeled dataset directory (npz files + labels.json).")
@click.option("--task", required=True, type=click.Choice([t.value for t in Task]))
@click.option("--out", "checkpoint_out", required=True, type=click.Path(dir_okay=False))
@click.option("--n-classes", default=None, type=int, help="Class count (default: inferred from labels).")
@click.option("--steps", default=100, show_default=True, type=int)
@click.option("--batch-size", default=8, show_default=True, type=int)
@click.option("--learning-rate", default=0.0005, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_finetune(checkpoint, labeled, task, checkpoint_out, n_classes, steps, batch_size, learning_rate, seed):
    """Fine-tune with labels, then report the training-set metric."""
    task_enum = Task(task)
    pairs = load_labeled_pairs(labeled, task)
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
    else:
        first = pairs[0]
        model = TriModalAutoencoder(
            ModelConfig(
                audio_shape=first.audio.shape,
                frame_shape=first.frame.shape,
                audio_patch=_default_patch(first.audio.shape),
                visual_patch=_default_patch(first.frame.shape[:2]),
                seed=seed,
            )
        )
    inferred = _infer_n_classes(pairs, task_enum)
    config = TrainConfig(learning_rate=learning_rate, batch_size=batch_size, steps=steps, seed=seed, mode=TrainMode.FINETUNE)
    run_finetune(model, pairs, config, task_enum, n_classes or inferred, checkpoint_out=checkpoint_out)
    metric_name, value = _classification_metric(model, pairs, task_enum)
    click.echo(f"fine-tuned on {len(pairs)} pairs for {steps} steps")
    click.echo(f"training-set {metric_name}: {value:.4f}")
    click.echo(f"checkpoint: {checkpoint_out}")


def _infer_n_classes(pairs, task: Task) -> int:
    if task is Task.MULTICLASS:
        return int(max(int(p.label) for p in pairs)) + 1
    return int(np.asarray(pairs[0].label).shape[0])


def _classification_metric(model, pairs, task: Task) -> tuple[str, float]:
    scores = predict_scores(model, pairs)
    if task is Task.MULTICLASS:
        labels = np.asarray([int(p.label) for p in pairs])
        return "accuracy", accuracy(scores.argmax(axis=1), labels)
    labels = np.stack([np.asarray(p.label) for p in pairs])
    return "mAP", mean_average_precision(scores, labels)


@cli.command("eval-retrieval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False), help="Evaluation manifest.")
@click.option("--corpus", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--k", "k_list", default="1,5,10", show_default=True, help="Comma-separated K values.")
@click.option("--gallery-size", default=None, type=int, help="Subsample the eval set to this many items (seeded).")
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_eval_retrieval(checkpoint, manifest, corpus, k_list, gallery_size, seed):
    """Report audio-to-visual and visual-to-audio recall@K."""
    model, _ = load_checkpoint(checkpoint)
    pairs = _load_triplet_sets([manifest], corpus, True, seed)
    if not pairs:
        raise ValidationError("eval set is empty")
    if gallery_size is not None:
        if not 1 <= gallery_size <= len(pairs):
            raise ValidationError(f"--gallery-size {gallery_size} outside [1, {len(pairs)}]")
        chosen = np.random.default_rng(seed).choice(len(pairs), size=gallery_size, replace=False)
        pairs = [pairs[i] for i in sorted(int(i) for i in chosen)]
    ks = _parse_ints(k_list)
    metrics = evaluate_retrieval(model, pairs, ks)
    ks = sorted(metrics["a2v"])
    headers = ["direction"] + [f"r@{k}" for k in ks]
    rows = [[direction] + [metrics[direction][k] for k in ks] for direction in ("a2v", "v2a")]
    click.echo(format_table(headers, rows), nl=False)


@cli.command("eval-classify")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Fine-tuned checkpoint (classifier included).")
@click.option("--labeled", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--task", required=True, type=click.Choice([t.value for t in Task]))
def cmd_eval_classify(checkpoint, labeled, task):
    """Report mAP (multilabel) or accuracy (multiclass) on a labeled set."""
    model, _ = load_checkpoint(checkpoint)
    if model.classifier is None:
        raise ConfigError("checkpoint has no classification head; run finetune first")
    pairs = load_labeled_pairs(labeled, task)
    metric_name, value = _classification_metric(model, pairs, Task(task))
    click.echo(format_table([metric_name], [[value]]), nl=False)


@cli.command("ablate-lambda2")
@click.option("--manifest", "manifests", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--values", default="0.001,0.005,0.01,0.05,0.1", show_default=True, help="Comma-separated text-loss weights to sweep.")
@click.option("--k", "k_list", default="1,5,10", show_default=True)
@click.option("--steps", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--output", default=None, type=click.Path(dir_okay=False), help="Also write the table here.")
def cmd_ablate_lambda2(manifests, corpus, config_path, values, k_list, steps, batch_size, seed, output):
    """Sweep the text-alignment loss weight; one pretrain + eval per value."""
    file_obj = _load_config_file(config_path)
    train_cfg = _train_config(file_obj, TrainMode.PRETRAIN_AVT, steps=steps, batch_size=batch_size, seed=seed)
    triplets = _load_triplet_sets(manifests, corpus, train_cfg.use_best_frame, train_cfg.seed)
    model_cfg = _model_config(file_obj, triplets, seed)
    encoder = resolve_text_encoder("hash", dim=model_cfg.d_t)
    headers, rows = run_ablation_lambda2(
        _parse_floats(values), model_cfg, train_cfg, triplets, encoder, ks=_parse_ints(k_list)
    )
    table = format_table(headers, rows)
    if output:
        Path(output).write_text(table, encoding="utf-8")
    click.echo(table, nl=False)


@cli.command("ablate-filter-k")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False), help="Unfiltered manifest to filter at each level.")
@click.option("--corpus", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--ks", default="10,30,50,100", show_default=True, help="Comma-separated top-k percent levels.")
@click.option("--k", "k_list", default="1,5,10", show_default=True)
@click.option("--steps", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--output", default=None, type=click.Path(dir_okay=False))
def cmd_ablate_filter_k(manifest, corpus, config_path, ks, k_list, steps, batch_size, seed, output):
    """Sweep the top-k filter level; one pretrain + eval per level."""
    file_obj = _load_config_file(config_path)
    train_cfg = _train_config(file_obj, TrainMode.PRETRAIN_AVT, steps=steps, batch_size=batch_size, seed=seed)
    full = read_manifest(manifest)
    base = Path(corpus) if corpus else Path(manifest).parent
    loader = lambda m: load_training_triplets(m, base_dir=base, use_best_frame=train_cfg.use_best_frame, seed=train_cfg.seed)
    probe = loader(full)
    model_cfg = _model_config(file_obj, probe, seed)
    encoder = resolve_text_encoder("hash", dim=model_cfg.d_t)
    headers, rows = run_ablation_filter_k(
        _parse_floats(ks), full, loader, model_cfg, train_cfg, encoder, eval_pairs=probe, ks=_parse_ints(k_list)
    )
    table = format_table(headers, rows)
    if output:
        Path(output).write_text(table, encoding="utf-8")
    click.echo(table, nl=False)


@cli.command("validate-manifest")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def cmd_validate_manifest(path):
    """Parse and validate a manifest file."""
    manifest = read_manifest(path)
    click.echo(f"OK: {len(manifest)} records (source={manifest.source_dataset!r}, k={manifest.filter_k_percent})")


@cli.command("make-demo-data")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Corpus output directory.")
@click.option("--n-videos", default=16, show_default=True, type=int)
@click.option("--frames-per-video", default=3, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--audio-shape", default="64,16", show_default=True)
@click.option("--frame-shape", default="32,32,3", show_default=True)
@click.option("--labeled-out", default=None, type=click.Path(file_okay=False), help="Also write a labeled demo set here.")
@click.option("--n-classes", default=4, show_default=True, type=int)
@click.option("--task", default="multiclass", type=click.Choice([t.value for t in Task]), show_default=True)
def cmd_make_demo_data(out, n_videos, frames_per_video, seed, audio_shape, frame_shape, labeled_out, n_classes, task):
    """Write a small synthetic corpus (and optionally a labeled set)."""
    a_shape = tuple(_parse_ints(audio_shape))
    f_shape = tuple(_parse_ints(frame_shape))
    videos = make_synthetic_videos(
        n_videos, seed=seed, audio_shape=a_shape, frame_shape=f_shape, frames_per_video=frames_per_video
    )
    write_corpus(videos, out)
    click.echo(f"wrote {n_videos} videos to {out}")
    if labeled_out:
        pairs = make_labeled_pairs(n_videos, n_classes, task=task, seed=seed, audio_shape=a_shape, frame_shape=f_shape)
        write_labels(pairs, labeled_out, task)
        click.echo(f"wrote {len(pairs)} labeled pairs to {labeled_out}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except (ValidationError, ConfigError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.Abort:
        return 2
    except Exception as exc:  # runtime failure
        click.echo(f"runtime failure: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
