"""Patchification, random masking, masked-input assembly, and mask-token padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FrameImage, MaskSpec, Modality, PatchSequence, Spectrogram, round_half_up
from .validation import ValidationError, require


def split_patches(values, patch_shape: tuple[int, int]):
    """Cut a (T, F) or (H, W, C) array into row-major flattened patches.

    Pure reindexing, so it is exact and works on numpy arrays and torch
    tensors alike. Returns (patches, grid).
    """
    ph, pw = patch_shape
    require(ph >= 1 and pw >= 1, f"split_patches: patch shape {patch_shape} must be positive")
    shape = tuple(values.shape)
    if len(shape) == 2:
        t, f = shape
        if t % ph or f % pw:
            raise ValidationError(f"split_patches: input shape {shape} not divisible by patch {patch_shape}")
        rows, cols = t // ph, f // pw
        # (T, F) -> (rows, ph, cols, pw) -> (rows, cols, ph, pw) -> (N, ph*pw)
        x = values.reshape(rows, ph, cols, pw)
        x = x.permute(0, 2, 1, 3) if hasattr(x, "permute") else x.transpose(0, 2, 1, 3)
        return x.reshape(rows * cols, ph * pw), (rows, cols)
    if len(shape) == 3:
        h, w, c = shape
        if h % ph or w % pw:
            raise ValidationError(f"split_patches: input shape {shape} not divisible by patch {patch_shape}")
        rows, cols = h // ph, w // pw
        x = values.reshape(rows, ph, cols, pw, c)
        x = x.permute(0, 2, 1, 3, 4) if hasattr(x, "permute") else x.transpose(0, 2, 1, 3, 4)
        return x.reshape(rows * cols, ph * pw * c), (rows, cols)
    raise ValidationError(f"split_patches: expected 2-d or 3-d input, got shape {shape}")


def patchify(inp: Spectrogram | FrameImage, patch_shape: tuple[int, int] = (16, 16)) -> PatchSequence:
    """Split an input into a row-major grid of flattened patches.

    Lossless: unpatchify inverts it exactly.
    """
    if isinstance(inp, Spectrogram):
        flat, grid = split_patches(inp.values, patch_shape)
        return PatchSequence(
            patches=flat,
            grid=grid,
            modality=Modality.AUDIO,
            patch_shape=patch_shape,
            channels=1,
            sample_id=inp.sample_id,
        )
    if isinstance(inp, FrameImage):
        flat, grid = split_patches(inp.values, patch_shape)
        return PatchSequence(
            patches=flat,
            grid=grid,
            modality=Modality.VISUAL,
            patch_shape=patch_shape,
            channels=inp.values.shape[2],
            sample_id=inp.sample_id,
            timestamp_s=inp.timestamp_s,
        )
    raise TypeError(f"patchify: unsupported input type {type(inp).__name__}")


def fold_patches(patches, grid: tuple[int, int], patch_shape: tuple[int, int], channels: int):
    """Inverse of the patchify reshape; works on numpy arrays and torch tensors."""
    rows, cols = grid
    ph, pw = patch_shape
    if patches.shape[0] != rows * cols:
        raise ValidationError(f"fold_patches: grid {grid} implies {rows * cols} patches, got {patches.shape[0]}")
    if channels == 1:
        x = patches.reshape(rows, cols, ph, pw)
        x = x.permute(0, 2, 1, 3) if hasattr(x, "permute") else x.transpose(0, 2, 1, 3)
        return x.reshape(rows * ph, cols * pw)
    x = patches.reshape(rows, cols, ph, pw, channels)
    x = x.permute(0, 2, 1, 3, 4) if hasattr(x, "permute") else x.transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * ph, cols * pw, channels)


def unpatchify(seq: PatchSequence) -> Spectrogram | FrameImage:
    """Exact inverse of patchify, reproducing the source object."""
    values = fold_patches(np.asarray(seq.patches), seq.grid, seq.patch_shape, seq.channels)
    if seq.modality is Modality.AUDIO:
        return Spectrogram(values=values, sample_id=seq.sample_id)
    return FrameImage(values=values, timestamp_s=seq.timestamp_s or 0.0, sample_id=seq.sample_id)


def sample_mask(n_total: int, ratio: float, seed: int) -> MaskSpec:
    """Draw round(ratio * n_total) indices uniformly without replacement.

    Deterministic for a fixed (n_total, ratio, seed).
    """
    require(n_total >= 1, "sample_mask: n_total must be >= 1")
    require(0.0 <= ratio < 1.0, f"sample_mask: ratio must lie in [0, 1), got {ratio}")
    n_masked = round_half_up(ratio * n_total)
    rng = np.random.default_rng(seed)
    masked = rng.choice(n_total, size=n_masked, replace=False)
    return MaskSpec(masked_indices=tuple(sorted(int(i) for i in masked)), n_total=n_total, ratio=ratio)


@dataclass(frozen=True)
class VisiblePatches:
    """The unmasked patch subset plus the index list needed to re-insert it."""

    patches: np.ndarray
    visible_indices: tuple[int, ...]
    n_total: int
    modality: Modality

    @property
    def n_visible(self) -> int:
        return len(self.visible_indices)


def apply_mask(patches: PatchSequence, mask: MaskSpec) -> VisiblePatches:
    """Drop masked patches, preserving the relative order of the visible ones."""
    if mask.n_total != patches.n_patches:
        raise ValidationError(
            f"apply_mask: mask covers {mask.n_total} patches but sequence has {patches.n_patches}"
        )
    visible = mask.visible_indices
    return VisiblePatches(
        patches=patches.patches[list(visible)],
        visible_indices=visible,
        n_total=mask.n_total,
        modality=patches.modality,
    )


def pad_with_mask_tokens(tokens, mask: MaskSpec, mask_token):
    """Scatter visible tokens back to their original positions, filling the
    masked positions with copies of the learnable mask token.

    Works on numpy arrays and torch tensors; fully functional, so gradients
    flow to both the tokens and the mask token.
    """
    visible = np.asarray(mask.visible_indices, dtype=np.int64)
    masked = np.asarray(mask.masked_indices, dtype=np.int64)
    if tokens.shape[0] != len(visible):
        raise ValidationError(
            f"pad_with_mask_tokens: {tokens.shape[0]} tokens but {len(visible)} visible positions"
        )
    order = np.argsort(np.concatenate([visible, masked]), kind="stable")
    if hasattr(tokens, "detach"):  # torch path
        import torch

        fill = mask_token.reshape(1, -1).expand(len(masked), -1)
        stacked = torch.cat([tokens, fill.to(tokens.dtype)], dim=0)
        return stacked[torch.from_numpy(order)]
    fill = np.broadcast_to(np.asarray(mask_token).reshape(1, -1), (len(masked), tokens.shape[1]))
    return np.concatenate([tokens, fill], axis=0)[order]
