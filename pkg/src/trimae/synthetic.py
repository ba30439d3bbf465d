"""Deterministic synthetic corpora for tests, demos, and the CLI walkthrough.

Each synthetic "video" carries a latent sign-pattern drawn from the corners
of a small hypercube. The audio spectrogram expresses the latent as level
bands over time; every frame expresses it as brightness stripes over width;
a low-amplitude sinusoidal texture (inferable from visible patches) gives the
reconstruction task something nontrivial but fully learnable. Matched
audio/frame pairs therefore share easily-decodable structure, while
``paired=False`` scrambles the correspondence for chance-level calibration.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .data import FrameImage, Spectrogram
from .training import LabeledPair, TrainingTriplet
from .triplets import VideoSample

TOY_AUDIO_SHAPE = (64, 16)
TOY_FRAME_SHAPE = (32, 32, 3)


def _corner_latents(n: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    corners = np.asarray(list(itertools.product([-1.0, 1.0], repeat=latent_dim)))
    rng.shuffle(corners)
    reps = int(np.ceil(n / len(corners)))
    return np.tile(corners, (reps, 1))[:n]


def _banded_audio(z: np.ndarray, shape: tuple[int, int], texture_freq: int) -> np.ndarray:
    t, f = shape
    audio = np.zeros((t, f))
    for band, rows in enumerate(np.array_split(np.arange(t), z.size)):
        audio[rows, :] = 0.8 * z[band]
    phase = np.linspace(0.0, 2.0 * np.pi, t)[:, None]
    return audio + 0.1 * np.sin(phase * texture_freq)


def _striped_frame(z: np.ndarray, shape: tuple[int, int, int], texture_freq: int, phase_shift: float) -> np.ndarray:
    h, w, c = shape
    frame = np.zeros((h, w, c))
    for stripe, cols in enumerate(np.array_split(np.arange(w), z.size)):
        frame[:, cols, :] = 0.5 + 0.35 * z[stripe]
    phase = np.linspace(0.0, 2.0 * np.pi, h)[:, None, None]
    return np.clip(frame + 0.05 * np.sin(phase * texture_freq + phase_shift), 0.0, 1.0)


def make_synthetic_videos(
    n_videos: int,
    seed: int = 0,
    audio_shape: tuple[int, int] = TOY_AUDIO_SHAPE,
    frame_shape: tuple[int, int, int] = TOY_FRAME_SHAPE,
    frames_per_video: int = 3,
    latent_dim: int = 4,
    paired: bool = True,
) -> list[VideoSample]:
    """Latent-driven corpus; with paired=False the audio and frame latents
    are assigned by independent permutations (for chance-level checks)."""
    rng = np.random.default_rng(seed)
    audio_latents = _corner_latents(n_videos, latent_dim, rng)
    if paired:
        frame_latents = audio_latents
    else:
        frame_latents = audio_latents[rng.permutation(n_videos)]

    videos: list[VideoSample] = []
    for i in range(n_videos):
        vid = f"video{i:04d}"
        texture_freq = 1 + i % 4
        audio = Spectrogram(values=_banded_audio(audio_latents[i], audio_shape, texture_freq), sample_id=vid)
        frames = tuple(
            FrameImage(
                values=_striped_frame(frame_latents[i], frame_shape, texture_freq, 0.4 * j),
                timestamp_s=float(j),
                sample_id=vid,
            )
            for j in range(frames_per_video)
        )
        videos.append(
            VideoSample(video_id=vid, frames=frames, audio=audio, audio_ref=f"{vid}.npz", frame_ref=f"{vid}.npz")
        )
    return videos


def write_corpus(videos: list[VideoSample], directory: str | Path) -> Path:
    """Persist videos as one .npz per video (keys: audio, frames, timestamps)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for video in videos:
        np.savez(
            directory / f"{video.video_id}.npz",
            audio=video.audio.values,
            frames=np.stack([f.values for f in video.frames]),
            timestamps=np.asarray([f.timestamp_s for f in video.frames]),
        )
    return directory


def load_corpus(directory: str | Path) -> list[VideoSample]:
    """Read every .npz video file in a corpus directory, sorted by id."""
    directory = Path(directory)
    videos: list[VideoSample] = []
    for path in sorted(directory.glob("*.npz")):
        vid = path.stem
        with np.load(path) as blob:
            audio = Spectrogram(values=blob["audio"], sample_id=vid)
            frames = tuple(
                FrameImage(values=frame, timestamp_s=float(t), sample_id=vid)
                for frame, t in zip(blob["frames"], blob["timestamps"])
            )
        videos.append(
            VideoSample(video_id=vid, frames=frames, audio=audio, audio_ref=path.name, frame_ref=path.name)
        )
    return videos


def make_synthetic_triplets(
    n: int,
    seed: int = 0,
    audio_shape: tuple[int, int] = TOY_AUDIO_SHAPE,
    frame_shape: tuple[int, int, int] = TOY_FRAME_SHAPE,
    paired: bool = True,
) -> list[TrainingTriplet]:
    """In-memory triplets with distinct per-video captions."""
    videos = make_synthetic_videos(
        n, seed=seed, audio_shape=audio_shape, frame_shape=frame_shape, frames_per_video=1, paired=paired
    )
    return [
        TrainingTriplet(
            sample_id=v.video_id,
            audio=v.audio,
            frame=v.frames[0],
            caption=f"synthetic scene number {i} from clip {v.video_id}",
        )
        for i, v in enumerate(videos)
    ]


def make_labeled_pairs(
    n: int,
    n_classes: int,
    task: str = "multiclass",
    seed: int = 0,
    audio_shape: tuple[int, int] = TOY_AUDIO_SHAPE,
    frame_shape: tuple[int, int, int] = TOY_FRAME_SHAPE,
) -> list[LabeledPair]:
    """Class-conditioned pairs: each class owns a latent prototype, so labels
    are learnable from either modality."""
    rng = np.random.default_rng(seed)
    latent_dim = max(3, int(np.ceil(np.log2(max(n_classes, 2)))) + 1)
    prototypes = _corner_latents(n_classes, latent_dim, rng)

    pairs: list[LabeledPair] = []
    for i in range(n):
        cls = int(rng.integers(0, n_classes))
        latent = prototypes[cls] + 0.1 * rng.standard_normal(latent_dim)
        texture_freq = 1 + cls % 4
        sid = f"pair{i:04d}"
        audio = Spectrogram(values=_banded_audio(latent, audio_shape, texture_freq), sample_id=sid)
        frame = FrameImage(values=_striped_frame(latent, frame_shape, texture_freq, 0.0), timestamp_s=0.0, sample_id=sid)
        if task == "multiclass":
            label: int | np.ndarray = cls
        else:
            vec = np.zeros(n_classes)
            vec[cls] = 1.0
            vec[int(rng.integers(0, n_classes))] = 1.0
            label = vec
        pairs.append(LabeledPair(sample_id=sid, audio=audio, frame=frame, label=label))
    return pairs


def write_labels(pairs: list[LabeledPair], directory: str | Path, task: str) -> Path:
    """Write pairs as a corpus dir plus labels.json (id -> label)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = {}
    for pair in pairs:
        np.savez(
            directory / f"{pair.sample_id}.npz",
            audio=pair.audio.values,
            frames=pair.frame.values[None],
            timestamps=np.asarray([pair.frame.timestamp_s]),
        )
        labels[pair.sample_id] = (
            int(pair.label) if task == "multiclass" else np.asarray(pair.label).astype(int).tolist()
        )
    (directory / "labels.json").write_text(json.dumps(labels, sort_keys=True, indent=1), encoding="utf-8")
    return directory


def load_labeled_pairs(directory: str | Path, task: str) -> list[LabeledPair]:
    """Inverse of write_labels."""
    directory = Path(directory)
    labels = json.loads((directory / "labels.json").read_text(encoding="utf-8"))
    pairs: list[LabeledPair] = []
    for sample_id in sorted(labels):
        with np.load(directory / f"{sample_id}.npz") as blob:
            audio = Spectrogram(values=blob["audio"], sample_id=sample_id)
            frame = FrameImage(
                values=blob["frames"][0], timestamp_s=float(blob["timestamps"][0]), sample_id=sample_id
            )
        raw = labels[sample_id]
        label = int(raw) if task == "multiclass" else np.asarray(raw, dtype=np.float64)
        pairs.append(LabeledPair(sample_id=sample_id, audio=audio, frame=frame, label=label))
    return pairs
