"""Per-frame feature extraction: STFT spectrograms, 4:1 acoustic-to-visual
frame grouping, and the learned linear front-ends.

All acoustic timing assumes 16 kHz audio against 25 fps video, i.e. a 40 ms
window (640 samples) with a 10 ms hop (160 samples), giving 321 frequency
bins and exactly four acoustic frames per video frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .corpus import AVSample, SAMPLE_RATE, SAMPLES_PER_FRAME

WINDOW_SIZE = 640
HOP_SIZE = 160
N_BINS = WINDOW_SIZE // 2 + 1  # 321
FRAMES_PER_VIDEO_FRAME = 4
AUDIO_GROUP_DIM = FRAMES_PER_VIDEO_FRAME * N_BINS  # 1284


@dataclass
class Spectrogram:
    """Non-negative STFT magnitudes, (n_frames, 321)."""

    frames: np.ndarray
    sample_rate: int = SAMPLE_RATE
    window: int = WINDOW_SIZE
    hop: int = HOP_SIZE


@dataclass
class AlignedAudioFrames:
    """Acoustic frames grouped 4-at-a-time, (n_video_frames, 1284)."""

    rows: np.ndarray


@dataclass
class FeatureSeq:
    """Front-end output fed to an encoder, (n_video_frames, d_model)."""

    rows: torch.Tensor
    modality: str  # "audio" | "video"


def _hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_spectrogram(waveform: np.ndarray, log_spec: bool = False) -> Spectrogram:
    """Magnitude STFT with a Hann window; frame t covers samples
    [t*160, t*160 + 640), zero-padded at the tail.

    With log_spec the output is log1p of the magnitudes (still non-negative).
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise DataError("waveform must be one-dimensional")
    if len(waveform) < WINDOW_SIZE:
        raise DataError(
            f"waveform of {len(waveform)} samples is shorter than one {WINDOW_SIZE}-sample window"
        )
    if not np.isfinite(waveform).all():
        raise DataError("waveform contains non-finite values")

    n_frames = int(np.ceil(len(waveform) / HOP_SIZE))
    padded = np.zeros((n_frames - 1) * HOP_SIZE + WINDOW_SIZE, dtype=np.float64)
    padded[: len(waveform)] = waveform
    idx = np.arange(WINDOW_SIZE)[None, :] + HOP_SIZE * np.arange(n_frames)[:, None]
    frames = padded[idx] * _hann_window(WINDOW_SIZE)[None, :]
    mags = np.abs(np.fft.rfft(frames, axis=1))
    if log_spec:
        mags = np.log1p(mags)
    return Spectrogram(frames=mags)


def normalize_spectrogram(spect: Spectrogram) -> Spectrogram:
    """Per-utterance mean/std normalization over the whole magnitude matrix."""
    frames = spect.frames
    std = frames.std()
    frames = (frames - frames.mean()) / max(std, 1e-8)
    return Spectrogram(frames=frames, sample_rate=spect.sample_rate,
                       window=spect.window, hop=spect.hop)


def align_audio_frames(spect: Spectrogram, n_video_frames: int) -> AlignedAudioFrames:
    """Pad/truncate to 4 * n_video_frames acoustic frames, then concatenate
    consecutive groups of four into 1284-wide rows."""
    t_a = spect.frames.shape[0]
    target = FRAMES_PER_VIDEO_FRAME * n_video_frames
    if abs(t_a - target) > 4:
        raise DataError(
            f"{t_a} acoustic frames cannot align with {n_video_frames} video frames"
        )
    if t_a < target:
        pad = np.zeros((target - t_a, spect.frames.shape[1]), dtype=spect.frames.dtype)
        frames = np.concatenate([spect.frames, pad], axis=0)
    else:
        frames = spect.frames[:target]
    return AlignedAudioFrames(rows=frames.reshape(n_video_frames, AUDIO_GROUP_DIM))


def audio_frontend(aligned: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row-wise affine projection of grouped acoustic frames to d_model.

    Equivalent to a stride-4 width-4 1-D convolution over acoustic frames.
    weight is (1284, d_model), bias (d_model,).
    """
    if aligned.shape[-1] != weight.shape[0]:
        raise DataError(
            f"aligned rows of width {aligned.shape[-1]} do not match weight {tuple(weight.shape)}"
        )
    return aligned @ weight + bias


def video_frontend(video_rows: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row-wise affine projection of raw visual feature rows to d_model."""
    if video_rows.shape[-1] != weight.shape[0]:
        raise DataError(
            f"video rows of width {video_rows.shape[-1]} do not match weight {tuple(weight.shape)}"
        )
    return video_rows @ weight + bias


def prepare_sample(
    sample: AVSample, log_spec: bool = False, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Sample -> (aligned audio rows (T_v, 1284), video rows (T_v, D)) as float32."""
    spect = stft_spectrogram(sample.waveform, log_spec=log_spec)
    if normalize:
        spect = normalize_spectrogram(spect)
    aligned = align_audio_frames(spect, sample.n_frames)
    return aligned.rows.astype(np.float32), np.asarray(sample.video_rows, dtype=np.float32)
