"""Pretraining and fine-tuning loops, dataset plumbing, and the ablation
harnesses.

Training is logically sequential over steps. In deterministic mode torch is
pinned to one thread and every random draw (model init, epoch shuffling,
per-sample masks) derives from explicit seeds, so identical
(config, data, seed) reruns produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adapters import TextEncoder
from .data import FrameImage, Manifest, MaskSpec, Modality, Spectrogram
from .losses import (
    LossBreakdown,
    combine_terms,
    contrastive_av,
    info_nce,
    multiclass_loss,
    multilabel_loss,
    recon_loss,
    total_loss,
)
from .model import (
    ModelConfig,
    PooledEmbedding,
    TriModalAutoencoder,
    save_checkpoint,
    text_encode,
)
from .patches import apply_mask, pad_with_mask_tokens, patchify, sample_mask
from .validation import ValidationError, require


class TrainMode(str, Enum):
    PRETRAIN_AVT = "pretrain_avt"  # tri-modal objective (text terms active)
    PRETRAIN_AV = "pretrain_av"  # bi-modal baseline: lambda2 path absent, captions never read
    FINETUNE = "finetune"


class Task(str, Enum):
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 8
    steps: int = 200
    lambda1: float = 0.01
    lambda2: float = 0.01
    tau: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0
    mode: TrainMode = TrainMode.PRETRAIN_AVT
    deterministic: bool = True
    use_best_frame: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        require(self.learning_rate > 0.0, "TrainConfig: learning_rate must be > 0")
        require(self.batch_size >= 2, "TrainConfig: batch_size must be >= 2 (contrastive negatives)")
        require(self.steps >= 1, "TrainConfig: steps must be >= 1")
        require(self.tau > 0.0, "TrainConfig: tau must be > 0")
        require(self.lambda1 >= 0.0 and self.lambda2 >= 0.0, "TrainConfig: loss weights must be >= 0")
        require(self.weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0")

    def to_json_obj(self) -> dict:
        obj = {k: getattr(self, k) for k in self.__dataclass_fields__}
        obj["mode"] = self.mode.value
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    loss: LossBreakdown
    wall_ms: int

    def to_json_obj(self) -> dict:
        return {"step": self.step, "loss": self.loss.to_json_obj(), "wall_ms": self.wall_ms}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainLogRecord":
        return cls(step=int(obj["step"]), loss=LossBreakdown.from_json_obj(obj["loss"]), wall_ms=int(obj["wall_ms"]))


@dataclass(frozen=True)
class TrainingTriplet:
    """One in-memory training unit: audio, chosen frame, caption."""

    sample_id: str
    audio: Spectrogram
    frame: FrameImage
    caption: str


@dataclass(frozen=True)
class LabeledPair:
    """One labeled audio-visual pair for fine-tuning/classification."""

    sample_id: str
    audio: Spectrogram
    frame: FrameImage
    label: int | np.ndarray


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def write_train_log(records: Sequence[TrainLogRecord], path: str | Path) -> None:
    steps = [r.step for r in records]
    require(steps == sorted(set(steps)), "train log: steps must be strictly increasing")
    lines = [json.dumps(r.to_json_obj(), sort_keys=True, separators=(",", ":")) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_train_log(path: str | Path) -> list[TrainLogRecord]:
    out = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if raw.strip():
            out.append(TrainLogRecord.from_json_obj(json.loads(raw)))
    return out


# -- manifest/corpus plumbing -------------------------------------------------


def _resolve_ref(ref: str, base_dir: Path | None) -> Path:
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def load_training_triplets(
    manifest: Manifest,
    base_dir: str | Path | None = None,
    use_best_frame: bool = True,
    seed: int = 0,
) -> list[TrainingTriplet]:
    """Materialize manifest records into in-memory triplets.

    Array files are .npz with keys 'audio' (T, F), 'frames' (K, H, W, C) and
    'timestamps' (K,). The frame is the one nearest the record's best-caption
    timestamp, or a seeded uniform draw when use_best_frame is off.
    """
    base = Path(base_dir) if base_dir is not None else None
    out: list[TrainingTriplet] = []
    for record in manifest.records:
        with np.load(_resolve_ref(record.audio_ref, base)) as blob:
            audio = Spectrogram(values=blob["audio"], sample_id=record.video_id)
            frames = np.asarray(blob["frames"])
            timestamps = np.asarray(blob["timestamps"], dtype=np.float64)
        if use_best_frame:
            idx = int(np.argmin(np.abs(timestamps - record.frame_timestamp_s)))
        else:
            rng = np.random.default_rng(derive_seed(seed, hash(record.video_id) & 0x7FFFFFFF))
            idx = int(rng.integers(0, frames.shape[0]))
        frame = FrameImage(values=frames[idx], timestamp_s=float(timestamps[idx]), sample_id=record.video_id)
        out.append(TrainingTriplet(sample_id=record.video_id, audio=audio, frame=frame, caption=record.caption))
    return out


# -- pretraining --------------------------------------------------------------


def _forward_sample(model: TriModalAutoencoder, audio: Spectrogram, frame: FrameImage, mask_a: MaskSpec, mask_v: MaskSpec):
    """One sample through mask -> encode -> three cross passes -> decode."""
    cfg = model.config
    for mask, label in ((mask_a, "audio"), (mask_v, "visual")):
        require(
            mask.n_masked < mask.n_total,
            f"mask leaves no visible {label} patches (ratio {mask.ratio} of {mask.n_total}); "
            "lower the mask ratio or use finer patches",
        )
    audio.validate_shape(cfg.audio_shape)
    frame.validate_shape(cfg.frame_shape)
    audio_seq = patchify(audio, cfg.audio_patch)
    visual_seq = patchify(frame, cfg.visual_patch)

    vis_a = apply_mask(audio_seq, mask_a)
    vis_v = apply_mask(visual_seq, mask_v)
    a_tokens = model.encode_audio(vis_a, vis_a.visible_indices)
    v_tokens = model.encode_visual(vis_v, vis_v.visible_indices)

    a_bar = model.cross_modal_pool(a_tokens).normalize()
    v_bar = model.cross_modal_pool(v_tokens).normalize()

    joint = model.cross_modal_joint(v_tokens, a_tokens)
    z_pad_a = pad_with_mask_tokens(joint.audio_part(), mask_a, model.mask_token_audio)
    z_pad_v = pad_with_mask_tokens(joint.visual_part(), mask_v, model.mask_token_visual)
    xhat_a, xhat_v = model.decode(z_pad_a, z_pad_v)

    dtype = xhat_a.dtype
    rec = recon_loss(
        torch.as_tensor(audio.values, dtype=dtype),
        xhat_a,
        mask_a,
        torch.as_tensor(frame.values, dtype=dtype),
        xhat_v,
        mask_v,
        audio_patch=cfg.audio_patch,
        visual_patch=cfg.visual_patch,
        normalize_targets=cfg.norm_patch_targets,
    )
    return rec, a_bar, v_bar


def pretrain_step(
    batch: Sequence[TrainingTriplet],
    model: TriModalAutoencoder,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    step_index: int,
    text_encoder: TextEncoder | None = None,
) -> LossBreakdown:
    """One optimizer update on a batch of triplets; returns the loss terms."""
    require(config.mode in (TrainMode.PRETRAIN_AVT, TrainMode.PRETRAIN_AV), "pretrain_step: wrong mode")
    require(len(batch) >= 2, "pretrain_step: batch must have >= 2 samples")
    cfg = model.config
    dtype = model.mask_token_audio.dtype

    rec_terms = []
    a_bars, v_bars = [], []
    for i, triplet in enumerate(batch):
        mask_a = sample_mask(cfg.n_audio_patches, cfg.mask_ratio_audio, derive_seed(config.seed, step_index, i, 0))
        mask_v = sample_mask(cfg.n_visual_patches, cfg.mask_ratio_visual, derive_seed(config.seed, step_index, i, 1))
        rec_i, a_bar, v_bar = _forward_sample(model, triplet.audio, triplet.frame, mask_a, mask_v)
        rec_terms.append(rec_i)
        a_bars.append(a_bar)
        v_bars.append(v_bar)

    rec = torch.stack(rec_terms).mean()
    a_mat = torch.stack([e.vector for e in a_bars])
    v_mat = torch.stack([e.vector for e in v_bars])
    av = contrastive_av(a_mat, v_mat, tau=config.tau)

    if config.mode is TrainMode.PRETRAIN_AVT:
        if text_encoder is None:
            raise ValidationError("pretrain_step: tri-modal mode requires a text encoder")
        t_mat = torch.stack([text_encode(text_encoder, t.caption, dtype=dtype).vector for t in batch])
        a_proj = torch.stack([model.project_to_text_space(e).vector for e in a_bars])
        v_proj = torch.stack([model.project_to_text_space(e).vector for e in v_bars])
        a2t = info_nce(a_proj, t_mat, tau=config.tau)
        v2t = info_nce(v_proj, t_mat, tau=config.tau)
        total = combine_terms(rec, av, a2t, v2t, config.lambda1, config.lambda2)
        parts = (rec.item(), av.item(), a2t.item(), v2t.item())
    else:
        total = combine_terms(rec, av, 0.0, 0.0, config.lambda1, 0.0)
        parts = (rec.item(), av.item(), 0.0, 0.0)

    for name, value in zip(("recon", "av", "a2t", "v2t"), parts):
        if not np.isfinite(value):
            raise RuntimeError(
                f"pretrain_step: non-finite loss term {name!r}={value} at step {step_index} "
                f"(all terms: recon={parts[0]}, av={parts[1]}, a2t={parts[2]}, v2t={parts[3]})"
            )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    lambda2 = config.lambda2 if config.mode is TrainMode.PRETRAIN_AVT else 0.0
    return total_loss(parts, config.lambda1, lambda2)


def _epoch_batches(n_items: int, batch_size: int, steps: int, seed: int):
    """Seeded without-replacement batch index stream, reshuffled per epoch."""
    produced = 0
    epoch = 0
    while produced < steps:
        order = np.random.default_rng(derive_seed(seed, epoch)).permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield order[start : start + batch_size].tolist()
            produced += 1
            if produced >= steps:
                return
        epoch += 1


def pretrain(
    model: TriModalAutoencoder,
    triplets: Sequence[TrainingTriplet],
    config: TrainConfig,
    text_encoder: TextEncoder | None = None,
    checkpoint_out: str | Path | None = None,
    log_path: str | Path | None = None,
) -> list[TrainLogRecord]:
    """Run the pretraining loop and optionally persist checkpoint and log."""
    require(config.mode in (TrainMode.PRETRAIN_AVT, TrainMode.PRETRAIN_AV), "pretrain: wrong mode")
    require(len(triplets) >= 2, "pretrain: need at least 2 triplets")
    if config.deterministic:
        torch.set_num_threads(1)
    batch_size = min(config.batch_size, len(triplets))

    frozen_before = text_encoder.checksum() if text_encoder is not None else None
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    records: list[TrainLogRecord] = []
    for step_index, batch_idx in enumerate(_epoch_batches(len(triplets), batch_size, config.steps, config.seed)):
        started = time.perf_counter()
        batch = [triplets[j] for j in batch_idx]
        breakdown = pretrain_step(batch, model, optimizer, config, step_index, text_encoder)
        wall_ms = int((time.perf_counter() - started) * 1000)
        records.append(TrainLogRecord(step=step_index, loss=breakdown, wall_ms=wall_ms))

    if text_encoder is not None and text_encoder.checksum() != frozen_before:
        raise RuntimeError("pretrain: text encoder state changed during training")
    if checkpoint_out is not None:
        save_checkpoint(model, checkpoint_out, extra={"train_config": config.to_json_obj()})
    if log_path is not None:
        write_train_log(records, log_path)
    return records


# -- fine-tuning ---------------------------------------------------------------


def _encode_full(model: TriModalAutoencoder, audio: Spectrogram, frame: FrameImage):
    """Unmasked modality encodings (mask ratio 0)."""
    cfg = model.config
    audio.validate_shape(cfg.audio_shape)
    frame.validate_shape(cfg.frame_shape)
    audio_seq = patchify(audio, cfg.audio_patch)
    visual_seq = patchify(frame, cfg.visual_patch)
    vis_a = apply_mask(audio_seq, MaskSpec.from_indices((), cfg.n_audio_patches))
    vis_v = apply_mask(visual_seq, MaskSpec.from_indices((), cfg.n_visual_patches))
    a_tokens = model.encode_audio(vis_a, vis_a.visible_indices)
    v_tokens = model.encode_visual(vis_v, vis_v.visible_indices)
    return a_tokens, v_tokens


def _full_visible_forward(model: TriModalAutoencoder, audio: Spectrogram, frame: FrameImage):
    """Unmasked encode -> joint pass."""
    a_tokens, v_tokens = _encode_full(model, audio, frame)
    return model.cross_modal_joint(v_tokens, a_tokens)


def _check_labels(batch: Sequence[LabeledPair], task: Task, n_classes: int) -> torch.Tensor:
    if task is Task.MULTICLASS:
        labels = []
        for pair in batch:
            if not np.isscalar(pair.label) and np.asarray(pair.label).ndim != 0:
                raise ValidationError(f"finetune: multiclass expects integer labels, got {pair.label!r}")
            label = int(pair.label)
            require(0 <= label < n_classes, f"finetune: label {label} outside [0, {n_classes})")
            labels.append(label)
        return torch.as_tensor(labels, dtype=torch.long)
    rows = []
    for pair in batch:
        vec = np.asarray(pair.label)
        if vec.shape != (n_classes,):
            raise ValidationError(
                f"finetune: multilabel expects ({n_classes},) label vectors, got shape {vec.shape}"
            )
        rows.append(vec.astype(np.float64))
    return torch.as_tensor(np.stack(rows))


def finetune_step(
    batch: Sequence[LabeledPair],
    model: TriModalAutoencoder,
    optimizer: torch.optim.Optimizer,
    task: Task,
) -> float:
    """One supervised update on full (unmasked) inputs."""
    require(len(batch) >= 1, "finetune_step: empty batch")
    if model.classifier is None:
        raise ValidationError("finetune_step: classifier not configured; call ensure_classifier")
    n_classes = model.classifier.out_features
    targets = _check_labels(batch, task, n_classes)
    logits = torch.stack([model.classifier_head(_full_visible_forward(model, p.audio, p.frame)) for p in batch])
    loss = multiclass_loss(logits, targets) if task is Task.MULTICLASS else multilabel_loss(logits, targets)
    if not np.isfinite(loss.item()):
        raise RuntimeError(f"finetune_step: non-finite classification loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def finetune(
    model: TriModalAutoencoder,
    pairs: Sequence[LabeledPair],
    config: TrainConfig,
    task: Task,
    n_classes: int,
    checkpoint_out: str | Path | None = None,
) -> list[float]:
    """Fine-tune all non-text parameters with the classification head on top."""
    require(len(pairs) >= 1, "finetune: need at least one labeled pair")
    if config.deterministic:
        torch.set_num_threads(1)
    model.ensure_classifier(n_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    batch_size = max(1, min(config.batch_size, len(pairs)))
    losses: list[float] = []
    for batch_idx in _epoch_batches(len(pairs), batch_size, config.steps, config.seed):
        batch = [pairs[j] for j in batch_idx]
        losses.append(finetune_step(batch, model, optimizer, task))
    if checkpoint_out is not None:
        save_checkpoint(model, checkpoint_out, extra={"train_config": config.to_json_obj(), "task": task.value})
    return losses


def predict_scores(model: TriModalAutoencoder, pairs: Sequence[LabeledPair | TrainingTriplet]) -> np.ndarray:
    """Classifier logits for each pair, shape (N, n_classes)."""
    if model.classifier is None:
        raise ValidationError("predict_scores: classifier not configured")
    with torch.no_grad():
        rows = [model.classifier_head(_full_visible_forward(model, p.audio, p.frame)).numpy() for p in pairs]
    return np.stack(rows)


# -- retrieval embeddings -------------------------------------------------------


def encode_pairs(model, pairs: Sequence) -> tuple[list[PooledEmbedding], list[PooledEmbedding]]:
    """Unit-norm pooled embeddings for retrieval, computed on full inputs."""
    audio_out: list[PooledEmbedding] = []
    visual_out: list[PooledEmbedding] = []
    with torch.no_grad():
        for pair in pairs:
            a_tokens, v_tokens = _encode_full(model, pair.audio, pair.frame)
            a_bar = model.cross_modal_pool(a_tokens).normalize()
            v_bar = model.cross_modal_pool(v_tokens).normalize()
            audio_out.append(PooledEmbedding(a_bar.vector, Modality.AUDIO, True, pair.sample_id))
            visual_out.append(PooledEmbedding(v_bar.vector, Modality.VISUAL, True, pair.sample_id))
    return audio_out, visual_out


def evaluate_retrieval(model, pairs: Sequence, ks: Sequence[int] = (1, 5, 10)) -> dict[str, dict[int, float]]:
    """Audio-to-visual and visual-to-audio recall@K over aligned pairs."""
    from .metrics import build_similarity, recall_at_k

    require(len(pairs) >= 1, "evaluate_retrieval: empty eval set")
    audio_embs, visual_embs = encode_pairs(model, pairs)
    ks = [k for k in ks if k <= len(pairs)]
    require(len(ks) >= 1, "evaluate_retrieval: every K exceeds the gallery size")
    sim_a2v = build_similarity(audio_embs, visual_embs)
    sim_v2a = build_similarity(visual_embs, audio_embs)
    return {
        "a2v": {k: recall_at_k(sim_a2v, k) for k in ks},
        "v2a": {k: recall_at_k(sim_v2a, k) for k in ks},
    }


# -- ablation harnesses ----------------------------------------------------------


def _retrieval_row(metrics: dict[str, dict[int, float]], ks: Sequence[int]) -> list:
    row: list = []
    for direction in ("a2v", "v2a"):
        for k in ks:
            row.append(metrics[direction].get(k, float("nan")))
    return row


def ablation_headers(ks: Sequence[int], key: str) -> list[str]:
    return [key] + [f"{direction}_r@{k}" for direction in ("a2v", "v2a") for k in ks]


def run_ablation_lambda2(
    values: Sequence[float],
    model_config: ModelConfig,
    train_config: TrainConfig,
    triplets: Sequence[TrainingTriplet],
    text_encoder: TextEncoder,
    eval_pairs: Sequence | None = None,
    ks: Sequence[int] = (1, 5, 10),
) -> tuple[list[str], list[list]]:
    """One full pretrain + retrieval eval per candidate text-loss weight.

    All runs share the same seeds; a run that aborts marks its row 'failed'
    and the sweep continues.
    """
    require(len(values) >= 1, "run_ablation_lambda2: no values")
    ks = [k for k in ks if k <= len(eval_pairs if eval_pairs is not None else triplets)]
    require(len(ks) >= 1, "run_ablation_lambda2: every K exceeds the eval set size")
    rows: list[list] = []
    for value in values:
        try:
            cfg = replace(train_config, lambda2=float(value), mode=TrainMode.PRETRAIN_AVT)
            model = TriModalAutoencoder(model_config)
            pretrain(model, triplets, cfg, text_encoder=text_encoder)
            metrics = evaluate_retrieval(model, eval_pairs if eval_pairs is not None else triplets, ks)
            rows.append([f"{value:g}"] + _retrieval_row(metrics, ks))
        except Exception:
            rows.append([f"{value:g}"] + ["failed"] * (2 * len(ks)))
    return ablation_headers(ks, "lambda2"), rows


def run_ablation_filter_k(
    k_percents: Sequence[float],
    manifest: Manifest,
    triplet_loader: Callable[[Manifest], Sequence[TrainingTriplet]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    text_encoder: TextEncoder,
    eval_pairs: Sequence | None = None,
    ks: Sequence[int] = (1, 5, 10),
) -> tuple[list[str], list[list]]:
    """Pretrain once per top-k filter level of the same unfiltered manifest.

    Every run is evaluated on the same set (given, or the full unfiltered
    corpus) so rows are comparable.
    """
    from .triplets import filter_top_k

    require(len(k_percents) >= 1, "run_ablation_filter_k: no filter levels")
    eval_set = list(eval_pairs) if eval_pairs is not None else list(triplet_loader(manifest))
    ks = [k for k in ks if k <= len(eval_set)]
    require(len(ks) >= 1, "run_ablation_filter_k: every K exceeds the eval set size")
    rows: list[list] = []
    for k_percent in k_percents:
        try:
            filtered = filter_top_k(manifest, float(k_percent))
            triplets = list(triplet_loader(filtered))
            model = TriModalAutoencoder(model_config)
            pretrain(model, triplets, train_config, text_encoder=text_encoder)
            metrics = evaluate_retrieval(model, eval_set, ks)
            rows.append([f"{k_percent:g}"] + _retrieval_row(metrics, ks))
        except Exception:
            rows.append([f"{k_percent:g}"] + ["failed"] * (2 * len(ks)))
    return ablation_headers(ks, "filter_k_percent"), rows
