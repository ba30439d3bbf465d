"""Neural backbone: modality encoders, shared cross-modal encoder with three
pass modes, cross-modal decoder, text-embedding hookup, projection heads, and
checkpoint I/O.

Everything runs per-sample (token matrices without a batch axis); the trainer
loops over samples, which at desk scale is fast and keeps shapes obvious.
Positional encodings are fixed sinusoids held in buffers, so a model whose
parameters are all zero reduces every encoder to "positions in, positions out"
via the residual paths — several tests rely on that.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Modality
from .patches import VisiblePatches, fold_patches
from .validation import ConfigError, ValidationError, require

CHECKPOINT_FORMAT = "avt-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and input-geometry settings.

    Defaults are desk-scale for everything the source material leaves open
    (widths, depths, heads) and full-scale for the input geometry.
    """

    d: int = 64
    d_t: int = 32
    encoder_depth: int = 2
    cross_depth: int = 1
    decoder_depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    audio_shape: tuple[int, int] = (1024, 128)
    frame_shape: tuple[int, int, int] = (224, 224, 3)
    audio_patch: tuple[int, int] = (16, 16)
    visual_patch: tuple[int, int] = (16, 16)
    mask_ratio_audio: float = 0.75
    mask_ratio_visual: float = 0.75
    projection_activation: str = "gelu"
    norm_patch_targets: bool = False
    n_classes: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "d_t", "encoder_depth", "cross_depth", "decoder_depth", "heads"):
            require(getattr(self, name) >= 1, f"ModelConfig: {name} must be positive")
        require(self.d % self.heads == 0, f"ModelConfig: d={self.d} not divisible by heads={self.heads}")
        require(self.d % 2 == 0, "ModelConfig: d must be even for sinusoidal positions")
        for name in ("audio_shape", "frame_shape", "audio_patch", "visual_patch"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        t, f = self.audio_shape
        ph, pw = self.audio_patch
        require(t % ph == 0 and f % pw == 0, f"ModelConfig: audio_shape {self.audio_shape} not divisible by patch {self.audio_patch}")
        h, w, _ = self.frame_shape
        vh, vw = self.visual_patch
        require(h % vh == 0 and w % vw == 0, f"ModelConfig: frame_shape {self.frame_shape} not divisible by patch {self.visual_patch}")
        require(0.0 <= self.mask_ratio_audio < 1.0, "ModelConfig: mask_ratio_audio outside [0, 1)")
        require(0.0 <= self.mask_ratio_visual < 1.0, "ModelConfig: mask_ratio_visual outside [0, 1)")
        require(self.projection_activation in ("gelu", "identity"), "ModelConfig: unknown projection_activation")
        if self.n_classes is not None:
            require(self.n_classes >= 2, "ModelConfig: n_classes must be >= 2 when set")

    @property
    def audio_grid(self) -> tuple[int, int]:
        return self.audio_shape[0] // self.audio_patch[0], self.audio_shape[1] // self.audio_patch[1]

    @property
    def visual_grid(self) -> tuple[int, int]:
        return self.frame_shape[0] // self.visual_patch[0], self.frame_shape[1] // self.visual_patch[1]

    @property
    def n_audio_patches(self) -> int:
        rows, cols = self.audio_grid
        return rows * cols

    @property
    def n_visual_patches(self) -> int:
        rows, cols = self.visual_grid
        return rows * cols

    @property
    def audio_patch_dim(self) -> int:
        return self.audio_patch[0] * self.audio_patch[1]

    @property
    def visual_patch_dim(self) -> int:
        return self.visual_patch[0] * self.visual_patch[1] * self.frame_shape[2]

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        kwargs = dict(obj)
        for name in ("audio_shape", "frame_shape", "audio_patch", "visual_patch"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass(frozen=True)
class TokenSequence:
    """Encoded tokens for one modality, with their source patch positions."""

    tokens: torch.Tensor
    modality: Modality
    positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if self.tokens.ndim != 2:
            raise ValidationError(f"TokenSequence: expected (N, d) tokens, got {tuple(self.tokens.shape)}")
        if len(self.positions) != self.tokens.shape[0]:
            raise ValidationError("TokenSequence: positions must align with tokens")


@dataclass(frozen=True)
class JointTokens:
    """Cross-modal joint pass output: visual tokens first, then audio."""

    tokens: torch.Tensor
    visual_positions: tuple[int, ...]
    audio_positions: tuple[int, ...]

    @property
    def n_visual(self) -> int:
        return len(self.visual_positions)

    @property
    def n_audio(self) -> int:
        return len(self.audio_positions)

    def modality_tags(self) -> tuple[Modality, ...]:
        return (Modality.VISUAL,) * self.n_visual + (Modality.AUDIO,) * self.n_audio

    def visual_part(self) -> torch.Tensor:
        return self.tokens[: self.n_visual]

    def audio_part(self) -> torch.Tensor:
        return self.tokens[self.n_visual :]


@dataclass(frozen=True)
class PooledEmbedding:
    """A pooled d-vector (or d_t after projection) for one modality."""

    vector: torch.Tensor
    modality: Modality
    normalized: bool = False
    sample_id: str = ""

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValidationError(f"PooledEmbedding: expected a vector, got {tuple(self.vector.shape)}")
        if self.normalized:
            norm = float(torch.linalg.vector_norm(self.vector.detach().to(torch.float64)))
            if abs(norm - 1.0) > 1e-6:
                raise ValidationError(f"PooledEmbedding: flagged normalized but norm = {norm}")

    def normalize(self) -> "PooledEmbedding":
        norm = torch.linalg.vector_norm(self.vector)
        if float(norm.detach()) < 1e-12:
            raise ValidationError("PooledEmbedding: cannot normalize a zero vector")
        return PooledEmbedding(self.vector / norm, self.modality, normalized=True, sample_id=self.sample_id)

    def numpy(self) -> np.ndarray:
        return self.vector.detach().cpu().numpy()


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table, one row per patch index."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (heads, N, head_dim)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).permute(1, 0, 2).reshape(n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block; norm parameters can be selected per pass variant."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, variants: Sequence[str] = ("default",)):
        super().__init__()
        hidden = int(d * mlp_ratio)
        self.norm1 = nn.ModuleDict({k: nn.LayerNorm(d) for k in variants})
        self.norm2 = nn.ModuleDict({k: nn.LayerNorm(d) for k in variants})
        self.attn = SelfAttention(d, heads)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor, variant: str = "default") -> torch.Tensor:
        x = x + self.attn(self.norm1[variant](x))
        x = x + self.mlp(self.norm2[variant](x))
        return x


class ModalityEncoder(nn.Module):
    """Patch projection + fixed positions + modality embedding + blocks."""

    def __init__(self, patch_dim: int, n_patches: int, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(patch_dim, cfg.d)
        self.modality_embed = nn.Parameter(torch.zeros(cfg.d))
        self.register_buffer(
            "pos", torch.from_numpy(sinusoidal_positions(n_patches, cfg.d)).to(torch.float32)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)
        )

    def forward(self, visible_patches: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = self.proj(visible_patches) + self.pos[positions] + self.modality_embed
        for blk in self.blocks:
            x = blk(x)
        return x


class CrossModalEncoder(nn.Module):
    """One parameter set shared by the audio-only, visual-only, and joint
    passes; only the normalization parameters are selected per modality."""

    VARIANTS = ("audio", "visual", "joint")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, cfg.mlp_ratio, variants=self.VARIANTS)
            for _ in range(cfg.cross_depth)
        )

    def forward(self, x: torch.Tensor, mode: str) -> torch.Tensor:
        if mode not in self.VARIANTS:
            raise TypeError(f"CrossModalEncoder: unknown pass mode {mode!r}")
        for blk in self.blocks:
            x = blk(x, variant=mode)
        return x

    def shared_parameter_names(self) -> list[str]:
        """Names of parameters used identically by every pass mode."""
        return [n for n, _ in self.named_parameters() if ".norm1." not in n and ".norm2." not in n]


class CrossModalDecoder(nn.Module):
    """Shallow shared decoder mapping padded tokens to flattened patches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)
        )
        self.register_buffer(
            "pos_audio", torch.from_numpy(sinusoidal_positions(cfg.n_audio_patches, cfg.d)).to(torch.float32)
        )
        self.register_buffer(
            "pos_visual", torch.from_numpy(sinusoidal_positions(cfg.n_visual_patches, cfg.d)).to(torch.float32)
        )
        self.modality_embed_audio = nn.Parameter(torch.zeros(cfg.d))
        self.modality_embed_visual = nn.Parameter(torch.zeros(cfg.d))
        self.pred_audio = nn.Linear(cfg.d, cfg.audio_patch_dim)
        self.pred_visual = nn.Linear(cfg.d, cfg.visual_patch_dim)

    def forward(self, audio_full: torch.Tensor, visual_full: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = audio_full + self.pos_audio + self.modality_embed_audio
        v = visual_full + self.pos_visual + self.modality_embed_visual
        x = torch.cat([v, a], dim=0)
        for blk in self.blocks:
            x = blk(x)
        n_visual = visual_full.shape[0]
        return self.pred_audio(x[n_visual:]), self.pred_visual(x[:n_visual])


class ProjectionHead(nn.Module):
    """Two affine layers with one nonlinearity, mapping d to the text width."""

    def __init__(self, d: int, d_t: int, activation: str = "gelu"):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d_t)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc1(x)
        if self.activation == "gelu":
            h = torch.nn.functional.gelu(h)
        return self.fc2(h)


class TriModalAutoencoder(nn.Module):
    """The full backbone. Holds both modality encoders, the shared
    cross-modal encoder, the decoder with its per-modality mask tokens, the
    two text-space projection heads, and (after finetune setup) the
    classification head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.audio_encoder = ModalityEncoder(config.audio_patch_dim, config.n_audio_patches, config)
        self.visual_encoder = ModalityEncoder(config.visual_patch_dim, config.n_visual_patches, config)
        self.cross = CrossModalEncoder(config)
        self.decoder = CrossModalDecoder(config)
        self.mask_token_audio = nn.Parameter(torch.zeros(config.d))
        self.mask_token_visual = nn.Parameter(torch.zeros(config.d))
        self.proj_audio_text = ProjectionHead(config.d, config.d_t, config.projection_activation)
        self.proj_visual_text = ProjectionHead(config.d, config.d_t, config.projection_activation)
        self.classifier: nn.Linear | None = None
        self._init_weights()
        if config.n_classes is not None:
            self.ensure_classifier(config.n_classes)

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        for p in (self.mask_token_audio, self.mask_token_visual):
            nn.init.normal_(p, std=0.02)
        for enc in (self.audio_encoder, self.visual_encoder):
            nn.init.normal_(enc.modality_embed, std=0.02)
        nn.init.normal_(self.decoder.modality_embed_audio, std=0.02)
        nn.init.normal_(self.decoder.modality_embed_visual, std=0.02)

    # -- encoder passes ---------------------------------------------------

    def _encode(self, visible: VisiblePatches, positions, encoder, modality: Modality) -> TokenSequence:
        if visible.modality is not modality:
            raise TypeError(f"encode_{modality.value}: got {visible.modality.value} patches")
        pos = tuple(int(p) for p in positions)
        if len(pos) != visible.n_visible:
            raise ValidationError(
                f"encode_{modality.value}: {len(pos)} positions for {visible.n_visible} patches"
            )
        dtype = encoder.proj.weight.dtype
        patches_t = torch.as_tensor(np.asarray(visible.patches), dtype=dtype)
        tokens = encoder(patches_t, torch.as_tensor(pos, dtype=torch.long))
        return TokenSequence(tokens=tokens, modality=modality, positions=pos)

    def encode_audio(self, visible: VisiblePatches, positions) -> TokenSequence:
        """One token per visible audio patch."""
        return self._encode(visible, positions, self.audio_encoder, Modality.AUDIO)

    def encode_visual(self, visible: VisiblePatches, positions) -> TokenSequence:
        """One token per visible frame patch."""
        return self._encode(visible, positions, self.visual_encoder, Modality.VISUAL)

    # -- cross-modal passes -----------------------------------------------

    def cross_modal_pool(self, tokens: TokenSequence) -> PooledEmbedding:
        """Single-modality cross-encoder pass followed by a mean pool."""
        if tokens.modality not in (Modality.AUDIO, Modality.VISUAL):
            raise TypeError(f"cross_modal_pool: expected a single-modality sequence, got {tokens.modality}")
        require(tokens.tokens.shape[0] >= 1, "cross_modal_pool: empty token sequence")
        encoded = self.cross(tokens.tokens, mode=tokens.modality.value)
        return PooledEmbedding(vector=encoded.mean(dim=0), modality=tokens.modality, normalized=False)

    def cross_modal_joint(self, visual: TokenSequence, audio: TokenSequence) -> JointTokens:
        """Joint pass over the concatenated [visual; audio] token sequence."""
        if visual.modality is not Modality.VISUAL or audio.modality is not Modality.AUDIO:
            raise TypeError("cross_modal_joint: expects (visual, audio) token sequences in that order")
        if visual.tokens.shape[1] != audio.tokens.shape[1]:
            raise ValidationError(
                f"cross_modal_joint: width mismatch {visual.tokens.shape[1]} vs {audio.tokens.shape[1]}"
            )
        joint = self.cross(torch.cat([visual.tokens, audio.tokens], dim=0), mode="joint")
        return JointTokens(tokens=joint, visual_positions=visual.positions, audio_positions=audio.positions)

    # -- decoding -----------------------------------------------------------

    def decode(self, z_padded_audio: torch.Tensor, z_padded_visual: torch.Tensor):
        """Map full-length padded token streams to input-space reconstructions."""
        cfg = self.config
        if z_padded_audio.shape[0] != cfg.n_audio_patches:
            raise ValidationError(
                f"decode: audio stream has {z_padded_audio.shape[0]} tokens, expected {cfg.n_audio_patches}"
            )
        if z_padded_visual.shape[0] != cfg.n_visual_patches:
            raise ValidationError(
                f"decode: visual stream has {z_padded_visual.shape[0]} tokens, expected {cfg.n_visual_patches}"
            )
        pred_audio, pred_visual = self.decoder(z_padded_audio, z_padded_visual)
        xhat_audio = fold_patches(pred_audio, cfg.audio_grid, cfg.audio_patch, 1)
        xhat_visual = fold_patches(pred_visual, cfg.visual_grid, cfg.visual_patch, cfg.frame_shape[2])
        return xhat_audio, xhat_visual

    # -- text alignment ------------------------------------------------------

    def project_to_text_space(self, emb: PooledEmbedding) -> PooledEmbedding:
        """Map an audio or visual embedding into the text-embedding space."""
        if emb.modality is Modality.AUDIO:
            head = self.proj_audio_text
        elif emb.modality is Modality.VISUAL:
            head = self.proj_visual_text
        else:
            raise TypeError(f"project_to_text_space: cannot project {emb.modality.value} embeddings")
        out = PooledEmbedding(vector=head(emb.vector), modality=emb.modality, sample_id=emb.sample_id)
        return out.normalize()

    # -- classification ------------------------------------------------------

    def ensure_classifier(self, n_classes: int) -> None:
        require(n_classes >= 2, "ensure_classifier: n_classes must be >= 2")
        if self.classifier is not None:
            if self.classifier.out_features != n_classes:
                raise ConfigError(
                    f"classifier already configured for {self.classifier.out_features} classes, got {n_classes}"
                )
            return
        dtype = self.mask_token_audio.dtype
        self.classifier = nn.Linear(self.config.d, n_classes).to(dtype)
        nn.init.xavier_uniform_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)
        self.config = replace_config(self.config, n_classes=n_classes)

    def classifier_head(self, joint: JointTokens) -> torch.Tensor:
        """Mean-pool the joint tokens and apply the single affine layer."""
        if self.classifier is None:
            raise ConfigError("classifier_head: n_classes not configured; call ensure_classifier first")
        return self.classifier(joint.tokens.mean(dim=0))


def replace_config(cfg: ModelConfig, **changes) -> ModelConfig:
    obj = cfg.to_json_obj()
    obj.update(changes)
    return ModelConfig.from_json_obj(obj)


def text_encode(adapter, caption: str, dtype: torch.dtype = torch.float32) -> PooledEmbedding:
    """Sentence-level embedding from a frozen text-encoder adapter, unit-norm."""
    require(bool(caption), "text_encode: caption must be nonempty")
    vec = np.asarray(adapter.embed(caption), dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError(f"text_encode: adapter returned shape {vec.shape}, expected a vector")
    emb = PooledEmbedding(vector=torch.from_numpy(vec).to(dtype), modality=Modality.TEXT)
    return emb.normalize()


# -- checkpoint I/O ----------------------------------------------------------
#
# Layout: one UTF-8 JSON header line, then the raw little-endian bytes of each
# parameter, C-contiguous, in the order listed in the header. Nothing in the
# file depends on wall-clock time, so identical models produce identical bytes.


def save_checkpoint(model: TriModalAutoencoder, path: str | Path, extra: dict | None = None) -> None:
    entries = []
    buffers = []
    for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        arr = param.detach().cpu().numpy()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        buffers.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_json_obj(),
        "seed": model.config.seed,
        "params": entries,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    Path(path).write_bytes(blob + b"".join(buffers))


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    header = json.loads(line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a recognized checkpoint (format marker missing)")
    return header


def load_checkpoint(path: str | Path) -> tuple[TriModalAutoencoder, dict]:
    """Rebuild a model from a checkpoint, returning (model, header)."""
    header = read_checkpoint_header(path)
    config = ModelConfig.from_json_obj(header["config"])
    model = TriModalAutoencoder(config)
    _load_params(model, path, header)
    return model, header


def load_checkpoint_into(model: TriModalAutoencoder, path: str | Path) -> dict:
    """Load parameters into an existing model; the configs must match exactly."""
    header = read_checkpoint_header(path)
    stored = ModelConfig.from_json_obj(header["config"])
    if stored != model.config:
        diffs = [
            f"{k}: checkpoint={sv!r} model={mv!r}"
            for (k, sv), (_, mv) in zip(
                sorted(stored.to_json_obj().items()), sorted(model.config.to_json_obj().items())
            )
            if sv != mv
        ]
        raise ConfigError("checkpoint/model config mismatch: " + "; ".join(diffs))
    _load_params(model, path, header)
    return header


def _load_params(model: TriModalAutoencoder, path: str | Path, header: dict) -> None:
    with open(path, "rb") as fh:
        fh.readline()  # skip header line
        blob = fh.read()
    offset = 0
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["params"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing bytes after parameter payload")
    named = dict(model.named_parameters())
    missing = set(named) - set(tensors)
    unexpected = set(tensors) - set(named)
    if missing or unexpected:
        raise ConfigError(
            f"{path}: parameter names do not match model (missing={sorted(missing)}, unexpected={sorted(unexpected)})"
        )
    with torch.no_grad():
        for name, tensor in tensors.items():
            named[name].copy_(tensor.to(named[name].dtype))
