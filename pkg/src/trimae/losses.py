"""Loss terms and their weighted combination.

Four terms enter the training objective: masked reconstruction, in-batch
audio-visual contrastive alignment, and two text-alignment InfoNCE terms
(audio-to-text, visual-to-text). All contrastive terms use the symmetric
two-direction form over the batch cosine-similarity matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import FrameImage, MaskSpec, Spectrogram
from .patches import split_patches
from .validation import ValidationError, check_unit_rows, require

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.05
DEFAULT_LAMBDA1 = 0.01
DEFAULT_LAMBDA2 = 0.01

BREAKDOWN_TOL = 1e-9


def _as_tensor(x, name: str) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if t.ndim != 2:
        raise ValidationError(f"{name}: expected a (B, d) batch, got shape {tuple(t.shape)}")
    return t


def info_nce_from_similarities(sim: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over a precomputed similarity matrix.

    Row i's positive is column i; every other entry in the row (and column)
    is a negative. Both softmax directions are averaged.
    """
    require(tau > 0.0, f"temperature must be > 0, got {tau}")
    logits = sim / tau
    diag = torch.arange(sim.shape[0])
    row_term = -torch.log_softmax(logits, dim=1)[diag, diag].mean()
    col_term = -torch.log_softmax(logits, dim=0)[diag, diag].mean()
    return 0.5 * (row_term + col_term)


def info_nce(x_batch, y_batch, tau: float = DEFAULT_TAU, norm_tol: float = 1e-4) -> torch.Tensor:
    """Symmetric in-batch InfoNCE between two aligned batches of unit vectors.

    Index i of each batch is the positive pair; the loss is the average of
    the x->y and y->x temperature-scaled softmax cross-entropies.
    """
    x = _as_tensor(x_batch, "x_batch")
    y = _as_tensor(y_batch, "y_batch")
    if x.shape != y.shape:
        raise ValidationError(f"info_nce: batch shapes differ, {tuple(x.shape)} vs {tuple(y.shape)}")
    require(x.shape[0] >= 2, f"info_nce: need B >= 2 for in-batch negatives, got B={x.shape[0]}")
    check_unit_rows(x, "x_batch", tol=norm_tol)
    check_unit_rows(y, "y_batch", tol=norm_tol)
    return info_nce_from_similarities(x @ y.T, tau)


def contrastive_av(a_batch, v_batch, tau: float = DEFAULT_TAU, norm_tol: float = 1e-4) -> torch.Tensor:
    """Audio-visual in-batch contrastive loss (symmetric InfoNCE form)."""
    return info_nce(a_batch, v_batch, tau=tau, norm_tol=norm_tol)


def _masked_patch_mse(target_patches, pred_patches, mask: MaskSpec, label: str) -> torch.Tensor:
    if target_patches.shape != pred_patches.shape:
        raise ValidationError(
            f"recon_loss: {label} target patches {tuple(target_patches.shape)} vs "
            f"prediction {tuple(pred_patches.shape)}"
        )
    if mask.n_total != target_patches.shape[0]:
        raise ValidationError(
            f"recon_loss: {label} mask covers {mask.n_total} patches, input has {target_patches.shape[0]}"
        )
    if mask.n_masked == 0:
        logger.warning("recon_loss: empty masked set for %s, contributing 0", label)
        return torch.zeros((), dtype=pred_patches.dtype)
    idx = torch.as_tensor(mask.masked_indices, dtype=torch.long)
    diff = pred_patches[idx] - target_patches[idx]
    return (diff ** 2).mean(dim=1).mean()


def _input_space_patches(x, patch_shape) -> torch.Tensor:
    values = x.values if isinstance(x, (Spectrogram, FrameImage)) else x
    if not isinstance(values, torch.Tensor):
        values = torch.as_tensor(np.asarray(values), dtype=torch.float64)
    flat, _ = split_patches(values, patch_shape)
    return flat


def _normalize_target_patches(patches: torch.Tensor) -> torch.Tensor:
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / (var + 1e-6) ** 0.5


def recon_loss(
    x_a,
    xhat_a,
    omega_a: MaskSpec,
    x_v,
    xhat_v,
    omega_v: MaskSpec,
    audio_patch: tuple[int, int] = (16, 16),
    visual_patch: tuple[int, int] = (16, 16),
    normalize_targets: bool = False,
) -> torch.Tensor:
    """Masked-patch reconstruction error in input space.

    Both the original and the reconstruction are patchified; per modality the
    loss is the mean over masked patches of each patch's mean squared element
    error, and the two modality terms are summed. Unmasked patches never
    contribute, so the loss is exactly invariant to reconstruction values
    outside the masked sets.

    Accepts Spectrogram/FrameImage domain objects or raw arrays/tensors.
    With normalize_targets the target patches are standardized per patch
    before comparison (the predictions are not).
    """
    a_t = _input_space_patches(x_a, audio_patch)
    a_p = _input_space_patches(xhat_a, audio_patch)
    v_t = _input_space_patches(x_v, visual_patch)
    v_p = _input_space_patches(xhat_v, visual_patch)
    if normalize_targets:
        a_t = _normalize_target_patches(a_t)
        v_t = _normalize_target_patches(v_t)
    return _masked_patch_mse(a_t, a_p, omega_a, "audio") + _masked_patch_mse(v_t, v_p, omega_v, "visual")


def recon_loss_patches(
    audio_target_patches,
    audio_pred_patches,
    audio_mask: MaskSpec,
    visual_target_patches,
    visual_pred_patches,
    visual_mask: MaskSpec,
) -> torch.Tensor:
    """recon_loss variant over already-patchified (N, P) matrices."""
    a_t = _as_tensor(audio_target_patches, "audio_target_patches")
    a_p = _as_tensor(audio_pred_patches, "audio_pred_patches")
    v_t = _as_tensor(visual_target_patches, "visual_target_patches")
    v_p = _as_tensor(visual_pred_patches, "visual_pred_patches")
    return _masked_patch_mse(a_t, a_p, audio_mask, "audio") + _masked_patch_mse(
        v_t, v_p, visual_mask, "visual"
    )


def multiclass_loss(logits, labels) -> torch.Tensor:
    """Softmax cross-entropy over (B, C) logits and integer labels."""
    t = _as_tensor(logits, "logits")
    y = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.cross_entropy(t, y)


def multilabel_loss(logits, targets) -> torch.Tensor:
    """Independent per-class binary cross-entropy over (B, C) logits."""
    t = _as_tensor(logits, "logits")
    y = torch.as_tensor(targets, dtype=t.dtype)
    if y.shape != t.shape:
        raise ValidationError(f"multilabel_loss: targets {tuple(y.shape)} vs logits {tuple(t.shape)}")
    return torch.nn.functional.binary_cross_entropy_with_logits(t, y)


def combine_terms(rec, c, a2t, v2t, lambda1: float, lambda2: float):
    """total = rec + lambda1 * c + lambda2 * (a2t + v2t); works on floats and tensors."""
    return rec + lambda1 * c + lambda2 * (a2t + v2t)


@dataclass(frozen=True)
class LossBreakdown:
    """The four loss terms, their weights, and the combined objective."""

    recon: float
    av: float
    a2t: float
    v2t: float
    lambda1: float
    lambda2: float
    total: float

    def __post_init__(self):
        for name in ("recon", "av", "a2t", "v2t", "total", "lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"LossBreakdown: term {name!r} is non-finite ({value})")
        require(self.recon >= 0.0, "LossBreakdown: recon must be >= 0")
        require(self.lambda1 >= 0.0 and self.lambda2 >= 0.0, "LossBreakdown: weights must be >= 0")
        expected = combine_terms(self.recon, self.av, self.a2t, self.v2t, self.lambda1, self.lambda2)
        if abs(expected - self.total) > BREAKDOWN_TOL:
            raise ValidationError(
                f"LossBreakdown: total {self.total} != recombined {expected} (tol {BREAKDOWN_TOL})"
            )

    def to_json_obj(self) -> dict:
        return {
            "recon": self.recon,
            "av": self.av,
            "a2t": self.a2t,
            "v2t": self.v2t,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "total": self.total,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "LossBreakdown":
        return cls(**{k: float(obj[k]) for k in ("recon", "av", "a2t", "v2t", "lambda1", "lambda2", "total")})


def total_loss(parts: tuple[float, float, float, float], lambda1: float, lambda2: float) -> LossBreakdown:
    """Combine the four scalar terms into a validated LossBreakdown.

    With lambda2 = 0 this degenerates to the bi-modal (audio-visual only)
    objective.
    """
    rec, c, a2t, v2t = (float(p) for p in parts)
    for name, value in (("rec", rec), ("c", c), ("a2t", a2t), ("v2t", v2t)):
        if not math.isfinite(value):
            raise ValidationError(f"total_loss: term {name!r} is non-finite ({value})")
    total = float(combine_terms(rec, c, a2t, v2t, lambda1, lambda2))
    return LossBreakdown(recon=rec, av=c, a2t=a2t, v2t=v2t, lambda1=lambda1, lambda2=lambda2, total=total)
