"""Shared domain types and the manifest persistence layer.

All types are immutable value objects; arrays they hold are treated as
read-only. Manifests are stored as line-delimited JSON: one header object
on the first line, one record object per following line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .validation import (
    ManifestParseError,
    ValidationError,
    check_finite,
    check_in_range,
    check_shape,
    require,
)

DEFAULT_AUDIO_SHAPE = (1024, 128)
DEFAULT_FRAME_SHAPE = (224, 224, 3)

MANIFEST_FORMAT = "avt-manifest/1"
SCORE_DECIMALS = 6


class Modality(str, Enum):
    AUDIO = "audio"
    VISUAL = "visual"
    TEXT = "text"
    JOINT = "joint"


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel magnitude spectrogram, time steps x frequency bins."""

    values: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValidationError(f"Spectrogram: expected 2-d values, got shape {self.values.shape}")
        check_finite(self.values, "Spectrogram.values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def validate_shape(self, expected: tuple[int, int]) -> None:
        check_shape(self.values, expected, f"Spectrogram({self.sample_id!r})")


@dataclass(frozen=True)
class FrameImage:
    """Single video frame, height x width x channels, intensities in [0, 1]."""

    values: np.ndarray
    timestamp_s: float = 0.0
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 3:
            raise ValidationError(f"FrameImage: expected 3-d values, got shape {self.values.shape}")
        check_finite(self.values, "FrameImage.values")
        check_in_range(self.values, 0.0, 1.0, "FrameImage.values")
        require(self.timestamp_s >= 0.0, "FrameImage: timestamp_s must be >= 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    def validate_shape(self, expected: tuple[int, int, int]) -> None:
        check_shape(self.values, expected, f"FrameImage({self.sample_id!r})")


@dataclass(frozen=True)
class PatchSequence:
    """Row-major patch grid flattened to an (N, P) matrix.

    Carries enough geometry (patch shape, channel count, source id) that
    unpatchify can reproduce the source object exactly.
    """

    patches: np.ndarray
    grid: tuple[int, int]
    modality: Modality
    patch_shape: tuple[int, int]
    channels: int
    sample_id: str = ""
    timestamp_s: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "patches", np.asarray(self.patches))
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "patch_shape", tuple(self.patch_shape))
        if self.modality not in (Modality.AUDIO, Modality.VISUAL):
            raise ValidationError(f"PatchSequence: modality must be audio or visual, got {self.modality}")
        if self.patches.ndim != 2:
            raise ValidationError(f"PatchSequence: expected 2-d patches, got shape {self.patches.shape}")
        rows, cols = self.grid
        if rows * cols != self.patches.shape[0]:
            raise ValidationError(
                f"PatchSequence: grid {self.grid} implies {rows * cols} patches, got {self.patches.shape[0]}"
            )
        expected_p = self.patch_shape[0] * self.patch_shape[1] * self.channels
        if expected_p != self.patches.shape[1]:
            raise ValidationError(
                f"PatchSequence: patch_shape {self.patch_shape} x {self.channels} channels implies "
                f"P={expected_p}, got {self.patches.shape[1]}"
            )

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class MaskSpec:
    """The masked-index set with its complement implied.

    The binary-mask form (1 at visible positions, 0 at masked) is derived on
    demand; the index set is canonical.
    """

    masked_indices: tuple[int, ...]
    n_total: int
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "masked_indices", tuple(int(i) for i in self.masked_indices))
        require(self.n_total >= 1, "MaskSpec: n_total must be >= 1")
        require(0.0 <= self.ratio < 1.0, "MaskSpec: ratio must lie in [0, 1)")
        idx = self.masked_indices
        require(len(set(idx)) == len(idx), "MaskSpec: masked indices must be unique")
        if idx:
            require(min(idx) >= 0 and max(idx) < self.n_total, "MaskSpec: indices out of range")
        expected = round_half_up(self.ratio * self.n_total)
        require(
            len(idx) == expected,
            f"MaskSpec: |masked| = {len(idx)} but ratio {self.ratio} of {self.n_total} rounds to {expected}",
        )

    @classmethod
    def from_indices(cls, masked_indices: Iterable[int], n_total: int) -> "MaskSpec":
        idx = tuple(sorted(int(i) for i in masked_indices))
        return cls(masked_indices=idx, n_total=n_total, ratio=len(idx) / n_total)

    @property
    def n_masked(self) -> int:
        return len(self.masked_indices)

    @property
    def visible_indices(self) -> tuple[int, ...]:
        masked = set(self.masked_indices)
        return tuple(i for i in range(self.n_total) if i not in masked)

    def keep_mask(self) -> np.ndarray:
        """Binary vector: 1 at visible positions, 0 at masked positions."""
        mask = np.ones(self.n_total, dtype=np.int64)
        mask[list(self.masked_indices)] = 0
        return mask


def round_half_up(x: float) -> int:
    """Deterministic half-up rounding, e.g. 2.5 -> 3."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class TripletRecord:
    """One curated audio/frame/caption unit with its alignment score."""

    video_id: str
    audio_ref: str
    frame_ref: str
    frame_timestamp_s: float
    caption: str
    score: float

    def __post_init__(self):
        require(bool(self.video_id), "TripletRecord: video_id must be nonempty")
        require(bool(self.caption), f"TripletRecord({self.video_id!r}): caption must be nonempty")
        object.__setattr__(self, "score", round(float(self.score), SCORE_DECIMALS))
        if not -1.0 <= self.score <= 1.0:
            raise ValidationError(
                f"TripletRecord({self.video_id!r}): score {self.score} outside [-1, 1]"
            )
        require(self.frame_timestamp_s >= 0.0, f"TripletRecord({self.video_id!r}): negative timestamp")

    def to_json_obj(self) -> dict:
        return {
            "video_id": self.video_id,
            "audio_ref": self.audio_ref,
            "frame_ref": self.frame_ref,
            "frame_timestamp_s": self.frame_timestamp_s,
            "caption": self.caption,
            "score": self.score,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TripletRecord":
        missing = {"video_id", "audio_ref", "frame_ref", "frame_timestamp_s", "caption", "score"} - set(obj)
        if missing:
            raise ValidationError(f"TripletRecord: missing fields {sorted(missing)}")
        return cls(
            video_id=str(obj["video_id"]),
            audio_ref=str(obj["audio_ref"]),
            frame_ref=str(obj["frame_ref"]),
            frame_timestamp_s=float(obj["frame_timestamp_s"]),
            caption=str(obj["caption"]),
            score=float(obj["score"]),
        )


def canonical_record_order(records: Iterable[TripletRecord]) -> tuple[TripletRecord, ...]:
    """Score descending, then video_id ascending."""
    return tuple(sorted(records, key=lambda r: (-r.score, r.video_id)))


@dataclass(frozen=True)
class Manifest:
    """Ordered collection of triplet records plus provenance metadata."""

    records: tuple[TripletRecord, ...]
    source_dataset: str = ""
    generator_version: str = ""
    filter_k_percent: float | None = None
    source_record_count: int | None = None
    frame_rate_fps: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.video_id in seen:
                raise ValidationError(f"Manifest: duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
        keys = [(-r.score, r.video_id) for r in self.records]
        if keys != sorted(keys):
            raise ValidationError("Manifest: records not in (score desc, video_id asc) order")
        if self.filter_k_percent is not None:
            require(0.0 < self.filter_k_percent <= 100.0, "Manifest: filter_k_percent outside (0, 100]")
            if self.source_record_count is not None:
                expected = kept_count(self.source_record_count, self.filter_k_percent)
                require(
                    len(self.records) == expected,
                    f"Manifest: {len(self.records)} records inconsistent with "
                    f"filter_k_percent={self.filter_k_percent} of {self.source_record_count}",
                )

    def __len__(self) -> int:
        return len(self.records)

    def header_obj(self) -> dict:
        header: dict = {
            "format": MANIFEST_FORMAT,
            "source_dataset": self.source_dataset,
            "generator_version": self.generator_version,
            "filter_k_percent": self.filter_k_percent,
        }
        if self.source_record_count is not None:
            header["source_record_count"] = self.source_record_count
        if self.frame_rate_fps is not None:
            header["frame_rate_fps"] = self.frame_rate_fps
        return header

    @classmethod
    def from_records(
        cls,
        records: Iterable[TripletRecord],
        source_dataset: str = "",
        generator_version: str = "",
        **meta,
    ) -> "Manifest":
        return cls(
            records=canonical_record_order(records),
            source_dataset=source_dataset,
            generator_version=generator_version,
            **meta,
        )


def kept_count(n_records: int, k_percent: float) -> int:
    """floor(N * k / 100), but never 0 when the input is nonempty."""
    if n_records == 0:
        return 0
    return max(1, int(np.floor(n_records * k_percent / 100.0)))


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_manifest(manifest: Manifest, destination: str | Path) -> None:
    """Write a manifest as header line + one record per line.

    Output is byte-identical for identical input.

    Raises:
        ValidationError: if the manifest violates its invariants.
        OSError: on I/O failure, with the destination path in the message.
    """
    manifest.validate()
    path = Path(destination)
    lines = [_dump_line(manifest.header_obj())]
    lines.extend(_dump_line(rec.to_json_obj()) for rec in manifest.records)
    text = "\n".join(lines) + "\n"
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"failed to write manifest to {path}: {exc}") from exc


def read_manifest(source: str | Path) -> Manifest:
    """Read and validate a manifest written by write_manifest.

    Raises:
        ManifestParseError: on malformed lines (carries the line number).
        ValidationError: on records violating invariants, naming the record.
    """
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to read manifest from {path}: {exc}") from exc

    # split on "\n" only: JSON leaves exotic separators like U+0085 unescaped
    # inside captions, and str.splitlines() would break records on them
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestParseError(f"{path}: empty file, expected a header line", line=1)

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{path}: invalid header JSON ({exc.msg})", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestParseError(f"{path}: missing or unknown format marker", line=1)

    records: list[TripletRecord] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{path}: invalid record JSON ({exc.msg})", line=lineno) from exc
        try:
            records.append(TripletRecord.from_json_obj(obj))
        except (ValidationError, ValueError, TypeError) as exc:
            raise ValidationError(f"{path} line {lineno}: {exc}") from exc

    fk = header.get("filter_k_percent")
    src_count = header.get("source_record_count")
    fps = header.get("frame_rate_fps")
    return Manifest(
        records=tuple(records),
        source_dataset=str(header.get("source_dataset", "")),
        generator_version=str(header.get("generator_version", "")),
        filter_k_percent=None if fk is None else float(fk),
        source_record_count=None if src_count is None else int(src_count),
        frame_rate_fps=None if fps is None else float(fps),
    )


def concatenate_manifests(manifests: Sequence[Manifest]) -> Manifest:
    """Merge already-filtered manifests into one training manifest.

    Duplicate video ids across inputs are rejected; filter metadata does not
    carry over (the merge is a new, unfiltered collection).
    """
    require(len(manifests) >= 1, "concatenate_manifests: need at least one manifest")
    all_records: list[TripletRecord] = []
    for m in manifests:
        all_records.extend(m.records)
    names = [m.source_dataset for m in manifests if m.source_dataset]
    return Manifest.from_records(
        all_records,
        source_dataset="+".join(names),
        generator_version=manifests[0].generator_version,
    )
