"""The two-stage detection network.

Stage 1 wires linear front-ends, two unimodal transformer encoders and a
joint decoder into a CTC phoneme recognizer. Stage 2 reuses that backbone,
inserts a modality compensation adapter between encoders and decoder, and
attaches a dual-label classifier built from a fake-composition block (FCD)
and a temporal-aggregation block (TAM), each reading a prepended token.

A missing modality is realized by zeroing that modality's feature rows at
the entry of the forward pass (the same mechanism modality dropout uses in
training), which keeps a single code path for every presence scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from . import features as F
from .errors import ConfigError, DataError, NumericError

MCA_MODES = ("none", "audio", "video")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; desk defaults, paper preset available."""

    d_model: int = 64
    n_heads: int = 4
    layers_audio_enc: int = 2
    layers_video_enc: int = 2
    layers_joint_dec: int = 2
    layers_fcd: int = 1
    layers_tam: int = 1
    n_phonemes: int = 40
    dropout_rate: float = 0.1
    mca_mode: str = "audio"
    audio_in_dim: int = F.AUDIO_GROUP_DIM
    video_in_dim: int = 64
    ffn_dim: int = 0  # 0 -> 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        for name in ("layers_audio_enc", "layers_video_enc", "layers_joint_dec",
                     "layers_fcd", "layers_tam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mca_mode not in MCA_MODES:
            raise ConfigError(f"mca_mode must be one of {MCA_MODES}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model

    @property
    def blank_id(self) -> int:
        return self.n_phonemes

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Layer counts and width of the published architecture."""
        base = dict(
            d_model=512,
            n_heads=8,
            layers_audio_enc=6,
            layers_video_enc=6,
            layers_joint_dec=6,
            layers_fcd=1,
            layers_tam=2,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PresenceMask:
    """Which modalities are available; at least one must be."""

    audio_present: bool = True
    video_present: bool = True

    def __post_init__(self):
        if not (self.audio_present or self.video_present):
            raise DataError("at least one modality must be present")

    @classmethod
    def from_name(cls, name: str) -> "PresenceMask":
        table = {
            "av": cls(True, True),
            "audio": cls(True, False),
            "video": cls(False, True),
        }
        if name not in table:
            raise ConfigError(f"unknown presence scenario {name!r} (use av, audio, video)")
        return table[name]

    @property
    def name(self) -> str:
        if self.audio_present and self.video_present:
            return "av"
        return "audio" if self.audio_present else "video"


PRESENCE_AV = PresenceMask(True, True)
PRESENCE_AUDIO_ONLY = PresenceMask(True, False)
PRESENCE_VIDEO_ONLY = PresenceMask(False, True)


@dataclass
class DetectionOutput:
    """Per-sample detection result."""

    p_audio_fake: float
    p_video_fake: float
    count_probs: np.ndarray  # (3,), sums to 1
    fused_real_score: float
    embedding: np.ndarray  # (d_model,), temporal-token output
    presence: PresenceMask
    unsupported: tuple[str, ...]  # modalities whose score lacks input support

    def to_dict(self) -> dict:
        return {
            "p_audio_fake": self.p_audio_fake,
            "p_video_fake": self.p_video_fake,
            "count_probs": [float(p) for p in self.count_probs],
            "fused_real_score": self.fused_real_score,
            "presence": self.presence.name,
            "unsupported": list(self.unsupported),
        }


def sinusoidal_positions(n: int, d_model: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Standard sin/cos positional table, (n, d_model)."""
    pos = torch.arange(n, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, d_model, 2, dtype=dtype, device=device)
    angles = pos * torch.exp(half * (-math.log(10000.0) / d_model))
    pe = torch.zeros(n, d_model, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : d_model // 2])
    return pe


def l2_normalize(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """x / max(||x||_2, eps) along the last dim; zero vectors map to zero."""
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.clamp(norm, min=eps)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise DataError(f"expected a (T, F) or (B, T, F) tensor, got shape {tuple(x.shape)}")


class EncoderStack(nn.Module):
    """Pre-norm transformer encoder stack with sinusoidal positions.

    Zero layers degenerate to input + positional encoding.
    """

    def __init__(self, n_layers: int, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model,
                n_heads,
                dim_feedforward=ffn_dim,
                dropout=dropout,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d_model) if n_layers > 0 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _as_batch(x)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype, device=x.device)
        for layer in self.layers:
            x = layer(x)
        if self.norm is not None:
            x = self.norm(x)
        return x.squeeze(0) if squeeze else x


class LinearFrontend(nn.Module):
    """Learned affine map from raw per-frame rows to d_model."""

    def __init__(self, in_dim: int, d_model: int, modality: str):
        super().__init__()
        self.modality = modality
        self.weight = nn.Parameter(torch.empty(in_dim, d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        fn = F.audio_frontend if self.modality == "audio" else F.video_frontend
        return fn(rows, self.weight, self.bias)


class ModalityCompensationAdapter(nn.Module):
    """Learned residual from the L2-normalized concatenation of both
    embeddings, added to one modality to counter modality dominance."""

    def __init__(self, d_model: int):
        super().__init__()
        self.residual = nn.Linear(2 * d_model, d_model)

    def forward(
        self, e_a: torch.Tensor, e_v: torch.Tensor, mode: str
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if mode not in MCA_MODES:
            raise ConfigError(f"mca mode must be one of {MCA_MODES}")
        if e_a.shape != e_v.shape:
            raise DataError("audio and video embeddings must have equal shapes")
        if mode == "none":
            return e_a, e_v
        if mode == "audio":
            comp = self.residual(torch.cat([l2_normalize(e_a), l2_normalize(e_v)], dim=-1))
            return e_a + comp, e_v
        comp = self.residual(torch.cat([l2_normalize(e_v), l2_normalize(e_a)], dim=-1))
        return e_a, e_v + comp


class JointDecoder(nn.Module):
    """Concatenates per-frame embeddings, projects down, runs a stack.

    A modality flagged absent contributes zero vectors at the concatenation.
    """

    def __init__(self, d_model: int, n_layers: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.proj = nn.Linear(2 * d_model, d_model)
        self.stack = EncoderStack(n_layers, d_model, n_heads, ffn_dim, dropout)

    def forward(
        self,
        c_a: torch.Tensor,
        c_v: torch.Tensor,
        audio_present: bool = True,
        video_present: bool = True,
    ) -> torch.Tensor:
        if not (audio_present or video_present):
            raise DataError("cannot decode with both modalities absent")
        if c_a.shape != c_v.shape:
            raise DataError("embedding sequences must have equal shapes")
        if not audio_present:
            c_a = torch.zeros_like(c_a)
        if not video_present:
            c_v = torch.zeros_like(c_v)
        return self.stack(self.proj(torch.cat([c_a, c_v], dim=-1)))


class DualLabelClassifier(nn.Module):
    """FCD + TAM with prepended fake-aware and temporal class tokens.

    After TAM, position 0 holds the temporal token (modality heads) and
    position 1 the fake-aware token (fake-count head).
    """

    def __init__(self, d_model: int, layers_fcd: int, layers_tam: int, n_heads: int,
                 ffn_dim: int, dropout: float):
        super().__init__()
        self.fake_token = nn.Parameter(torch.randn(d_model) * 0.02)
        self.temp_token = nn.Parameter(torch.randn(d_model) * 0.02)
        self.fcd = EncoderStack(layers_fcd, d_model, n_heads, ffn_dim, dropout)
        self.tam = EncoderStack(layers_tam, d_model, n_heads, ffn_dim, dropout)
        self.head_modality = nn.Sequential(
            nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, 2)
        )
        self.head_count = nn.Sequential(
            nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, 3)
        )

    def forward(self, decoded: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        decoded, squeeze = _as_batch(decoded)
        b = decoded.shape[0]
        fake = self.fake_token.to(decoded.dtype).expand(b, 1, -1)
        seq_temp = self.fcd(torch.cat([fake, decoded], dim=1))
        temp = self.temp_token.to(decoded.dtype).expand(b, 1, -1)
        seq = self.tam(torch.cat([temp, seq_temp], dim=1))
        modality_logits = self.head_modality(seq[:, 0])
        count_logits = self.head_count(seq[:, 1])
        embedding = seq[:, 0]
        if squeeze:
            return modality_logits.squeeze(0), count_logits.squeeze(0), embedding.squeeze(0)
        return modality_logits, count_logits, embedding


class DetectorModel(nn.Module):
    """Full network; submodules are grouped for stage-to-stage transfer."""

    BACKBONE_GROUPS = ("frontend_audio", "frontend_video", "encoder_audio",
                       "encoder_video", "joint")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.frontend_audio = LinearFrontend(c.audio_in_dim, c.d_model, "audio")
        self.frontend_video = LinearFrontend(c.video_in_dim, c.d_model, "video")
        self.encoder_audio = EncoderStack(c.layers_audio_enc, c.d_model, c.n_heads,
                                          c.ffn_dim, c.dropout_rate)
        self.encoder_video = EncoderStack(c.layers_video_enc, c.d_model, c.n_heads,
                                          c.ffn_dim, c.dropout_rate)
        self.mca = ModalityCompensationAdapter(c.d_model)
        self.joint = JointDecoder(c.d_model, c.layers_joint_dec, c.n_heads,
                                  c.ffn_dim, c.dropout_rate)
        self.avsr_head = nn.Linear(c.d_model, c.n_phonemes + 1)
        self.dlc = DualLabelClassifier(c.d_model, c.layers_fcd, c.layers_tam,
                                       c.n_heads, c.ffn_dim, c.dropout_rate)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {
            "frontend_audio": self.frontend_audio,
            "frontend_video": self.frontend_video,
            "encoder_audio": self.encoder_audio,
            "encoder_video": self.encoder_video,
            "joint": self.joint,
            "avsr_head": self.avsr_head,
            "mca": self.mca,
            "dlc": self.dlc,
        }

    # -- spec-level ops ----------------------------------------------------

    def encode(self, feature_rows: torch.Tensor, which: str) -> torch.Tensor:
        """Unimodal embedding sequence from front-end output rows."""
        if feature_rows.shape[-2] < 1:
            raise DataError("cannot encode an empty sequence")
        _check_finite(feature_rows, f"{which} features")
        enc = self.encoder_audio if which == "audio" else self.encoder_video
        return enc(feature_rows)

    def compensate(self, e_a: torch.Tensor, e_v: torch.Tensor, mode: str | None = None):
        return self.mca(e_a, e_v, self.config.mca_mode if mode is None else mode)

    def joint_decode(self, c_a: torch.Tensor, c_v: torch.Tensor,
                     presence: PresenceMask = PRESENCE_AV) -> torch.Tensor:
        return self.joint(c_a, c_v, presence.audio_present, presence.video_present)

    def avsr_logits(self, decoded: torch.Tensor) -> torch.Tensor:
        """Frame-wise phoneme logits; index n_phonemes is the CTC blank."""
        return self.avsr_head(decoded)

    def dlc_forward(self, decoded: torch.Tensor):
        return self.dlc(decoded)

    # -- composed forwards ---------------------------------------------------

    def _embed(self, audio_rows: torch.Tensor, video_rows: torch.Tensor):
        _check_finite(audio_rows, "audio features")
        _check_finite(video_rows, "video features")
        e_a = self.encoder_audio(self.frontend_audio(audio_rows))
        e_v = self.encoder_video(self.frontend_video(video_rows))
        return e_a, e_v

    def forward_avsr(self, audio_rows: torch.Tensor, video_rows: torch.Tensor) -> torch.Tensor:
        """Stage-1 forward: no adapter, both modalities, phoneme logits."""
        e_a, e_v = self._embed(audio_rows, video_rows)
        decoded = self.joint(e_a, e_v)
        return self.avsr_head(decoded)

    def forward_detect(self, audio_rows: torch.Tensor, video_rows: torch.Tensor,
                       presence: PresenceMask = PRESENCE_AV):
        """Stage-2 forward. An absent modality's rows are zeroed at entry,
        exactly like modality dropout during training; every downstream
        stage then runs the single shared code path."""
        if not presence.audio_present:
            audio_rows = torch.zeros_like(audio_rows)
        if not presence.video_present:
            video_rows = torch.zeros_like(video_rows)
        e_a, e_v = self._embed(audio_rows, video_rows)
        c_a, c_v = self.mca(e_a, e_v, self.config.mca_mode)
        decoded = self.joint(c_a, c_v)
        return self.dlc(decoded)

    def detect(self, audio_rows: torch.Tensor, video_rows: torch.Tensor,
               presence: PresenceMask = PRESENCE_AV) -> DetectionOutput:
        """Single-sample detection with fused score and export embedding."""
        modality_logits, count_logits, embedding = self.forward_detect(
            audio_rows, video_rows, presence
        )
        if modality_logits.dim() != 1:
            raise DataError("detect() expects a single (T, F) sample; use detect_batch")
        return self._build_output(modality_logits, count_logits, embedding, presence)

    def detect_batch(self, audio_rows: torch.Tensor, video_rows: torch.Tensor,
                     presence: PresenceMask = PRESENCE_AV) -> list[DetectionOutput]:
        modality_logits, count_logits, embedding = self.forward_detect(
            audio_rows, video_rows, presence
        )
        return [
            self._build_output(modality_logits[i], count_logits[i], embedding[i], presence)
            for i in range(modality_logits.shape[0])
        ]

    def _build_output(self, modality_logits, count_logits, embedding,
                      presence: PresenceMask) -> DetectionOutput:
        modality_logits = modality_logits.detach()
        count_logits = count_logits.detach()
        p_a = float(torch.sigmoid(modality_logits[0]))
        p_v = float(torch.sigmoid(modality_logits[1]))
        count = torch.softmax(count_logits, dim=-1)
        if presence.audio_present and presence.video_present:
            fused = (1.0 - p_a) * (1.0 - p_v)
        elif presence.audio_present:
            fused = 1.0 - p_a
        else:
            fused = 1.0 - p_v
        unsupported = tuple(
            m for m, ok in (("audio", presence.audio_present), ("video", presence.video_present))
            if not ok
        )
        return DetectionOutput(
            p_audio_fake=p_a,
            p_video_fake=p_v,
            count_probs=count.detach().cpu().numpy().astype(np.float64),
            fused_real_score=fused,
            embedding=embedding.detach().cpu().numpy().astype(np.float64),
            presence=presence,
            unsupported=unsupported,
        )
