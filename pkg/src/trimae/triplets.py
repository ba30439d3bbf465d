"""Triplet curation pipeline: caption sampled frames, score each caption
against the video's audio, keep the best caption per video, and filter the
corpus to the top-k percent by score."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapters import AudioTextScorer, Captioner
from .data import (
    FrameImage,
    Manifest,
    Spectrogram,
    TripletRecord,
    canonical_record_order,
    kept_count,
)
from .validation import ValidationError, require

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A video could not be processed at all (every frame failed)."""


@dataclass(frozen=True)
class ScoredCaption:
    caption: str
    frame_timestamp_s: float
    score: float

    def __post_init__(self):
        if not -1.0 <= self.score <= 1.0:
            raise ValidationError(f"ScoredCaption: score {self.score} outside [-1, 1]")


@dataclass(frozen=True)
class VideoSample:
    """One corpus unit: pre-decoded frames at sampled timestamps plus audio."""

    video_id: str
    frames: tuple[FrameImage, ...]
    audio: Spectrogram
    audio_ref: str = ""
    frame_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        require(bool(self.video_id), "VideoSample: video_id must be nonempty")


def caption_frames(frames: Sequence[FrameImage], captioner: Captioner) -> list[tuple[float, str]]:
    """One caption per frame, in frame order.

    Frames whose captioning fails are skipped with a log entry; empty captions
    are dropped with a warning. If no frame yields a caption, the whole video
    is considered failed.
    """
    require(len(frames) >= 1, "caption_frames: need at least one frame")
    out: list[tuple[float, str]] = []
    failures = 0
    for frame in frames:
        try:
            text = captioner.caption(frame)
        except Exception as exc:
            failures += 1
            logger.info("captioner failed on frame t=%.3fs (%s); skipping", frame.timestamp_s, exc)
            continue
        if not text:
            logger.warning("captioner returned empty caption at t=%.3fs; dropping", frame.timestamp_s)
            continue
        out.append((frame.timestamp_s, text))
    if not out:
        raise PipelineError(f"all {len(frames)} frames failed captioning ({failures} adapter errors)")
    return out


def select_best_caption(
    audio: Spectrogram,
    candidates: Sequence[tuple[float, str]],
    scorer: AudioTextScorer,
) -> ScoredCaption:
    """Score every candidate against the audio and return the argmax.

    Ties break by earliest timestamp, then lexicographic caption order.
    """
    require(len(candidates) >= 1, "select_best_caption: no candidate captions")
    best: ScoredCaption | None = None
    for timestamp, caption in candidates:
        scored = ScoredCaption(caption=caption, frame_timestamp_s=timestamp, score=scorer.score(audio, caption))
        if best is None or (-scored.score, scored.frame_timestamp_s, scored.caption) < (
            -best.score,
            best.frame_timestamp_s,
            best.caption,
        ):
            best = scored
    assert best is not None
    return best


def _journal_load(path: Path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    if not path.exists():
        return entries
    with path.open("r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            entries[obj["video_id"]] = obj
    return entries


def build_triplets(
    corpus: Iterable[VideoSample],
    captioner: Captioner,
    scorer: AudioTextScorer,
    source_dataset: str = "",
    journal_path: str | Path | None = None,
    workers: int = 1,
    frame_rate_fps: float | None = None,
) -> Manifest:
    """Produce one record per successfully processed video, unfiltered.

    Per-video failures are logged and excluded. When a journal path is given,
    completed videos are recorded there and skipped on rerun, so an
    interrupted run can resume without duplicate work and still produce the
    identical manifest.
    """
    videos = list(corpus)
    require(len(videos) >= 1, "build_triplets: corpus is empty")
    seen_ids = set()
    for video in videos:
        require(video.video_id not in seen_ids, f"build_triplets: duplicate video_id {video.video_id!r}")
        seen_ids.add(video.video_id)

    journal = Path(journal_path) if journal_path is not None else None
    done = _journal_load(journal) if journal is not None else {}
    lock = threading.Lock()

    def journal_write(obj: dict) -> None:
        if journal is None:
            return
        line = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        with lock:
            with journal.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def process(video: VideoSample) -> dict:
        try:
            candidates = caption_frames(video.frames, captioner)
            best = select_best_caption(video.audio, candidates, scorer)
            record = TripletRecord(
                video_id=video.video_id,
                audio_ref=video.audio_ref,
                frame_ref=video.frame_ref,
                frame_timestamp_s=best.frame_timestamp_s,
                caption=best.caption,
                score=best.score,
            )
            entry = {"video_id": video.video_id, "status": "ok", "record": record.to_json_obj()}
        except Exception as exc:
            logger.warning("video %s failed: %s", video.video_id, exc)
            entry = {"video_id": video.video_id, "status": "failed", "error": str(exc)}
        journal_write(entry)
        return entry

    pending = [v for v in videos if v.video_id not in done]
    if workers > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(process, pending))
    else:
        fresh = [process(v) for v in pending]

    entries = dict(done)
    for entry in fresh:
        entries[entry["video_id"]] = entry

    records = [
        TripletRecord.from_json_obj(entry["record"])
        for entry in entries.values()
        if entry["status"] == "ok"
    ]
    generator_version = f"{captioner.name}-{captioner.version}+{scorer.name}-{scorer.version}"
    return Manifest.from_records(
        records,
        source_dataset=source_dataset,
        generator_version=generator_version,
        frame_rate_fps=frame_rate_fps,
    )


def filter_top_k(manifest: Manifest, k_percent: float) -> Manifest:
    """Keep the highest-scoring floor(N*k/100) records (at least one).

    Deterministic under the canonical (score desc, video_id asc) order, so
    boundary ties resolve by video_id and the result is invariant to the
    input record order.
    """
    require(0.0 < k_percent <= 100.0, f"filter_top_k: k_percent {k_percent} outside (0, 100]")
    ordered = canonical_record_order(manifest.records)
    keep = kept_count(len(ordered), k_percent)
    return Manifest(
        records=ordered[:keep],
        source_dataset=manifest.source_dataset,
        generator_version=manifest.generator_version,
        filter_k_percent=k_percent,
        source_record_count=len(ordered),
        frame_rate_fps=manifest.frame_rate_fps,
    )


def random_subsample(manifest: Manifest, k_percent: float, seed: int) -> Manifest:
    """Uniform random baseline for the top-k filter: same kept count, chosen
    without replacement, deterministic per seed."""
    require(0.0 < k_percent <= 100.0, f"random_subsample: k_percent {k_percent} outside (0, 100]")
    ordered = canonical_record_order(manifest.records)
    keep = kept_count(len(ordered), k_percent)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ordered), size=keep, replace=False)
    records = [ordered[i] for i in sorted(int(i) for i in chosen)]
    return Manifest(
        records=canonical_record_order(records),
        source_dataset=manifest.source_dataset,
        generator_version=manifest.generator_version,
        filter_k_percent=k_percent,
        source_record_count=len(ordered),
        frame_rate_fps=manifest.frame_rate_fps,
    )
