"""Adapter interfaces for the external models the pipeline depends on, plus
the deterministic stubs used in tests and demos.

Three roles: a captioner (image -> sentence), an audio-text scorer
(audio, sentence -> similarity in [-1, 1]), and a frozen text encoder
(sentence -> unit vector). Production deployments register wrappers around
real captioning / audio-text models; everything here must be deterministic
for fixed inputs and version.

Stub construction, so fixtures are reproducible:

* ``hash_embedding(key)`` seeds a PCG64 generator with SHA-256(seed:key) and
  draws a standard-normal vector, normalized to unit length.
* The stub captioner buckets the frame's mean brightness and contrast, names
  the dominant color channel, and appends a short content hash, so distinct
  frames get distinct captions and identical frames identical ones.
* The stub scorer embeds the audio (by sample id, falling back to a digest of
  the raw array) and the caption (sum of per-token hash embeddings) in a
  shared hash space and returns their cosine similarity.
* The stub text encoder is the same token-sum construction at the configured
  output width; distinct token multisets give distinct vectors.
"""

from __future__ import annotations

import abc
import hashlib
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout

import numpy as np

from .data import FrameImage, Spectrogram
from .validation import ConfigError, require


class Captioner(abc.ABC):
    name: str
    version: str

    @abc.abstractmethod
    def caption(self, frame: FrameImage) -> str:
        """One sentence describing the frame; deterministic for fixed input."""


class AudioTextScorer(abc.ABC):
    name: str
    version: str

    @abc.abstractmethod
    def score(self, audio: Spectrogram, text: str) -> float:
        """Audio/text semantic similarity in [-1, 1]; deterministic."""


class TextEncoder(abc.ABC):
    name: str
    version: str
    dim: int

    @abc.abstractmethod
    def embed(self, text: str) -> np.ndarray:
        """Sentence embedding of shape (dim,); deterministic."""

    def checksum(self) -> str:
        """Digest of the adapter's identity and internal state; frozen
        adapters must return the same value before and after any training."""
        payload = f"{type(self).__name__}:{self.name}:{self.version}:{self.dim}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def hash_embedding(key: str, dim: int, seed: int = 0) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def _tokenize(text: str) -> list[str]:
    tokens = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            tokens.append("".join(word))
            word = []
    if word:
        tokens.append("".join(word))
    return tokens


def token_sum_embedding(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Normalized sum of per-token hash embeddings; multiset-sensitive."""
    tokens = _tokenize(text)
    require(bool(tokens), f"token_sum_embedding: no tokens in {text!r}")
    total = np.zeros(dim)
    for tok in tokens:
        total += hash_embedding(tok, dim, seed)
    norm = np.linalg.norm(total)
    if norm < 1e-12:
        # astronomically unlikely cancellation; fall back to hashing the whole string
        return hash_embedding(text, dim, seed)
    return total / norm


_BRIGHTNESS = ["dark", "dim", "soft", "bright", "glaring"]
_CONTRAST = ["flat", "smooth", "textured", "busy"]
_CHANNELS = ["red", "green", "blue", "gray"]


class StubCaptioner(Captioner):
    """Caption derived from frame statistics plus a short content hash."""

    def __init__(self, seed: int = 0):
        self.name = "stub"
        self.version = "1"
        self.seed = seed

    def caption(self, frame: FrameImage) -> str:
        values = frame.values
        mean = float(values.mean())
        std = float(values.std())
        brightness = _BRIGHTNESS[min(int(mean * len(_BRIGHTNESS)), len(_BRIGHTNESS) - 1)]
        contrast = _CONTRAST[min(int(std * 2 * len(_CONTRAST)), len(_CONTRAST) - 1)]
        if values.shape[2] >= 3:
            channel_means = values.reshape(-1, values.shape[2]).mean(axis=0)
            spread = float(channel_means.max() - channel_means.min())
            channel = _CHANNELS[int(np.argmax(channel_means[:3]))] if spread > 1e-3 else _CHANNELS[3]
        else:
            channel = _CHANNELS[3]
        digest = hashlib.sha256(np.round(values, 4).tobytes()).hexdigest()[:6]
        return f"a {brightness} {contrast} scene with {channel} tones pattern {digest}"


class HashAudioTextScorer(AudioTextScorer):
    """Cosine similarity of hash embeddings of (audio identity, caption)."""

    def __init__(self, seed: int = 0, dim: int = 64):
        self.name = "stub"
        self.version = "1"
        self.seed = seed
        self.dim = dim

    def _audio_key(self, audio: Spectrogram) -> str:
        if audio.sample_id:
            return f"audio:{audio.sample_id}"
        return "audio:" + hashlib.sha256(audio.values.tobytes()).hexdigest()

    def score(self, audio: Spectrogram, text: str) -> float:
        a = hash_embedding(self._audio_key(audio), self.dim, self.seed)
        t = token_sum_embedding(text, self.dim, self.seed)
        value = float(np.dot(a, t))
        return max(-1.0, min(1.0, value))


class HashTextEncoder(TextEncoder):
    """Frozen stand-in for a pretrained sentence encoder."""

    def __init__(self, dim: int = 32, seed: int = 0):
        self.name = "hash-text"
        self.version = "1"
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        return token_sum_embedding(text, self.dim, self.seed)

    def checksum(self) -> str:
        payload = f"{self.name}:{self.version}:{self.dim}:{self.seed}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResilientCaptioner(Captioner):
    """Client-side policy wrapper for captioners backed by external services."""

    def __init__(self, inner: Captioner, retries: int = 2, timeout_s: float = 30.0):
        self.inner = inner
        self.retries = retries
        self.timeout_s = timeout_s
        self.name = inner.name
        self.version = inner.version

    def caption(self, frame: FrameImage) -> str:
        return call_with_retries(lambda: self.inner.caption(frame), retries=self.retries, timeout_s=self.timeout_s)


class ResilientScorer(AudioTextScorer):
    """Client-side policy wrapper for scorers backed by external services."""

    def __init__(self, inner: AudioTextScorer, retries: int = 2, timeout_s: float = 30.0):
        self.inner = inner
        self.retries = retries
        self.timeout_s = timeout_s
        self.name = inner.name
        self.version = inner.version

    def score(self, audio: Spectrogram, text: str) -> float:
        return call_with_retries(lambda: self.inner.score(audio, text), retries=self.retries, timeout_s=self.timeout_s)


def call_with_retries(fn, retries: int = 2, timeout_s: float = 30.0):
    """Run fn with a wall-clock timeout, retrying up to `retries` extra times."""
    last_error: Exception | None = None
    for _ in range(retries + 1):
        with ThreadPoolExecutor(max_workers=1) as pool:
            future = pool.submit(fn)
            try:
                return future.result(timeout=timeout_s)
            except FutureTimeout:
                last_error = TimeoutError(f"adapter call exceeded {timeout_s}s")
                future.cancel()
            except Exception as exc:  # adapter-side failure; retry
                last_error = exc
    assert last_error is not None
    raise last_error


CAPTIONERS = {"stub": StubCaptioner}
SCORERS = {"stub": HashAudioTextScorer}
TEXT_ENCODERS = {"hash": HashTextEncoder}


def _resolve(registry: dict, kind: str, name: str, **kwargs):
    if name not in registry:
        raise ConfigError(f"unknown {kind} {name!r}; available: {sorted(registry)}")
    return registry[name](**kwargs)


def resolve_captioner(name: str, **kwargs) -> Captioner:
    return _resolve(CAPTIONERS, "captioner", name, **kwargs)


def resolve_scorer(name: str, **kwargs) -> AudioTextScorer:
    return _resolve(SCORERS, "scorer", name, **kwargs)


def resolve_text_encoder(name: str, **kwargs) -> TextEncoder:
    return _resolve(TEXT_ENCODERS, "text encoder", name, **kwargs)


def register_captioner(name: str, factory) -> None:
    CAPTIONERS[name] = factory


def register_scorer(name: str, factory) -> None:
    SCORERS[name] = factory


def register_text_encoder(name: str, factory) -> None:
    TEXT_ENCODERS[name] = factory
