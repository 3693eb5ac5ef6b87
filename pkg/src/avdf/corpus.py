"""Synthetic correlated audio-visual corpus.

Real samples encode one latent phoneme stream in both modalities: the audio
waveform carries a two-tone signature per frame and the video feature rows
carry a fixed random-projection embedding of the same per-frame phoneme id.
A fake modality is re-synthesized from an independently drawn phoneme stream,
so each fake signal is well-formed on its own but no longer correlates with
the other modality.

Phoneme ids are abstract integers in [0, C-1]; id frequencies follow a skewed
prior so that a stream drawn from the uniform fake distribution is also
statistically distinguishable from a genuine transcript within a single
modality (single-modality detection would otherwise be impossible).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError

SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = 640  # 40 ms of audio per 25 fps video frame

# Per-phoneme tone signature, expressed in 25 Hz DFT bins of one frame:
# the dominant tone sits at bin 16 + 2k, a half-amplitude companion at
# bin 120 + 4k. Both maps are injective and their ranges do not overlap.
TONE_BIN_BASE = (16, 120)
TONE_BIN_STEP = (2, 4)
TONE_AMPLITUDE = (1.0, 0.5)
_MAX_TONE_BIN = SAMPLES_PER_FRAME // 2

_EMBED_SEED = 20250  # fixed; the projection is shared by every corpus
_FILE_MAGIC = b"AVSM"
_FILE_VERSION = 1

CATEGORIES = ("RR", "RF", "FR", "FF")  # (audio, video) letters, R=real F=fake

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class PhonemeSeq:
    """A phoneme id sequence with its vocabulary size.

    Ids live in [0, n_phonemes-1]; the CTC blank (id == n_phonemes) is never
    a transcript symbol.
    """

    ids: tuple[int, ...]
    n_phonemes: int = 40

    def __post_init__(self):
        if len(self.ids) < 1:
            raise DataError("transcript must contain at least one phoneme")
        if any(not (0 <= i < self.n_phonemes) for i in self.ids):
            raise DataError(
                f"phoneme ids must lie in [0, {self.n_phonemes - 1}], got {self.ids}"
            )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DualLabel:
    """Independent per-modality fake flags; index 0 is audio, 1 is video."""

    audio_fake: int
    video_fake: int

    def __post_init__(self):
        if self.audio_fake not in (0, 1) or self.video_fake not in (0, 1):
            raise DataError("label flags must be 0 or 1")

    def fake_count(self) -> int:
        return self.audio_fake + self.video_fake

    def category(self) -> str:
        return ("R", "F")[self.audio_fake] + ("R", "F")[self.video_fake]

    def as_tuple(self) -> tuple[int, int]:
        return (self.audio_fake, self.video_fake)

    @classmethod
    def from_category(cls, category: str) -> "DualLabel":
        if category not in CATEGORIES:
            raise DataError(f"unknown label category {category!r}")
        return cls(int(category[0] == "F"), int(category[1] == "F"))


@dataclass(eq=False)
class AVSample:
    """One audio-visual clip: waveform, per-frame visual rows, transcript."""

    sample_id: str
    waveform: np.ndarray  # float32, (n_frames * 640,)
    video_rows: np.ndarray  # float32, (n_frames, video_dim)
    transcript: PhonemeSeq
    label: DualLabel
    seed: int

    @property
    def n_frames(self) -> int:
        return self.video_rows.shape[0]

    def validate(self) -> "AVSample":
        if self.video_rows.ndim != 2 or self.n_frames < 4:
            raise DataError("video rows must be (n_frames >= 4, video_dim)")
        if self.waveform.ndim != 1 or len(self.waveform) != self.n_frames * SAMPLES_PER_FRAME:
            raise DataError(
                f"waveform length must be n_frames * {SAMPLES_PER_FRAME}, "
                f"got {len(self.waveform)} for {self.n_frames} frames"
            )
        if not np.isfinite(self.waveform).all() or not np.isfinite(self.video_rows).all():
            raise DataError("sample contains non-finite values")
        return self


@dataclass
class CorpusSpec:
    """Generation parameters; corpus content is a pure function of this."""

    counts: tuple[int, int, int, int] = (200, 200, 200, 200)  # RR, RF, FR, FF
    min_frames: int = 8
    max_frames: int = 16
    n_phonemes: int = 40
    video_dim: int = 64
    noise_std: float = 0.05
    correlation_strength: float = 1.0
    master_seed: int = 0
    train_fraction: float = 0.85

    def __post_init__(self):
        if len(self.counts) != 4 or any(c < 0 for c in self.counts):
            raise ConfigError("counts must be four non-negative integers (RR, RF, FR, FF)")
        self.counts = tuple(int(c) for c in self.counts)
        if not (0.0 < self.correlation_strength <= 1.0):
            raise ConfigError("correlation_strength must lie in (0, 1]")
        if self.min_frames < 4 or self.max_frames < self.min_frames:
            raise ConfigError("need max_frames >= min_frames >= 4")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        tone_bins(self.n_phonemes - 1)  # raises if the vocabulary exceeds the tone map

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts),
            "min_frames": self.min_frames,
            "max_frames": self.max_frames,
            "n_phonemes": self.n_phonemes,
            "video_dim": self.video_dim,
            "noise_std": self.noise_std,
            "correlation_strength": self.correlation_strength,
            "master_seed": self.master_seed,
            "train_fraction": self.train_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {sorted(unknown)}")
        d = dict(d)
        if "counts" in d:
            d["counts"] = tuple(d["counts"])
        return cls(**d)


def tone_bins(phoneme_id: int) -> tuple[int, int]:
    """DFT bins (25 Hz units) of the two tones encoding a phoneme id."""
    b1 = TONE_BIN_BASE[0] + TONE_BIN_STEP[0] * phoneme_id
    b2 = TONE_BIN_BASE[1] + TONE_BIN_STEP[1] * phoneme_id
    if b2 > _MAX_TONE_BIN:
        raise ConfigError(
            f"phoneme id {phoneme_id} exceeds the tone map (max bin {_MAX_TONE_BIN})"
        )
    return b1, b2


def tone_frequencies(phoneme_id: int) -> tuple[float, float]:
    """Tone frequencies in Hz for a phoneme id."""
    b1, b2 = tone_bins(phoneme_id)
    hz = SAMPLE_RATE / SAMPLES_PER_FRAME
    return b1 * hz, b2 * hz


@lru_cache(maxsize=8)
def video_embedding_matrix(n_phonemes: int, video_dim: int) -> np.ndarray:
    """Fixed (n_phonemes, video_dim) random projection shared by all corpora."""
    rng = np.random.default_rng(np.random.SeedSequence([_EMBED_SEED, n_phonemes, video_dim]))
    mat = rng.standard_normal((n_phonemes, video_dim))
    mat.setflags(write=False)
    return mat


def frame_schedule(ids: tuple[int, ...], n_frames: int) -> np.ndarray:
    """Stretch a phoneme sequence uniformly over n_frames frames."""
    positions = (np.arange(n_frames) * len(ids)) // n_frames
    return np.asarray(ids, dtype=np.int64)[positions]


_TRANSITION_DEGREE = 4


@lru_cache(maxsize=8)
def phoneme_transition_map(n_phonemes: int) -> np.ndarray:
    """Fixed sparse phonotactic graph: each id has 4 successors, built from
    derangement permutations so in- and out-degree are both 4 and a random
    walk has an exactly uniform stationary distribution."""
    columns = []
    attempt = 0
    while len(columns) < _TRANSITION_DEGREE:
        rng = np.random.default_rng(
            np.random.SeedSequence([_EMBED_SEED, n_phonemes, 7, attempt])
        )
        perm = rng.permutation(n_phonemes)
        attempt += 1
        if not np.any(perm == np.arange(n_phonemes)):  # no self-transitions
            columns.append(perm)
    table = np.stack(columns, axis=1)
    table.setflags(write=False)
    return table


def sample_transcript(rng: np.random.Generator, n_phonemes: int, length: int) -> PhonemeSeq:
    """Draw a transcript as a random walk on the phonotactic graph.

    Real streams therefore obey the graph's transition structure while the
    uniform fake streams almost surely violate it; per-id marginals stay
    uniform, so there is no single-frame shortcut around the structure.
    """
    table = phoneme_transition_map(n_phonemes)
    ids = [int(rng.integers(n_phonemes))]
    for _ in range(length - 1):
        ids.append(int(table[ids[-1], rng.integers(_TRANSITION_DEGREE)]))
    return PhonemeSeq(tuple(ids), n_phonemes)


def _tone_frame(phoneme_id: int) -> np.ndarray:
    t = np.arange(SAMPLES_PER_FRAME, dtype=np.float64) / SAMPLE_RATE
    f1, f2 = tone_frequencies(phoneme_id)
    return TONE_AMPLITUDE[0] * np.sin(2 * math.pi * f1 * t) + TONE_AMPLITUDE[1] * np.sin(
        2 * math.pi * f2 * t
    )


def synthesize_sample(
    transcript: PhonemeSeq,
    label: DualLabel,
    spec: CorpusSpec,
    seed: int,
    n_frames: int | None = None,
    sample_id: str | None = None,
) -> AVSample:
    """Render one sample; bit-identical for identical arguments.

    A real modality follows the transcript's frame schedule; a fake modality
    follows an independent uniform stream of the same length. When n_frames
    is omitted it is drawn from the sample's own RNG stream.
    """
    if transcript.n_phonemes != spec.n_phonemes:
        raise ConfigError("transcript vocabulary does not match the corpus spec")
    rng = np.random.default_rng(seed)
    if n_frames is None:
        n_frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    if len(transcript) > n_frames:
        raise DataError(
            f"transcript of length {len(transcript)} cannot fit {n_frames} frames"
        )

    length = len(transcript)
    audio_ids = np.asarray(transcript.ids, dtype=np.int64)
    video_ids = audio_ids
    if label.audio_fake:
        audio_ids = rng.integers(0, spec.n_phonemes, size=length)
    if label.video_fake:
        video_ids = rng.integers(0, spec.n_phonemes, size=length)

    positions = (np.arange(n_frames) * length) // n_frames
    audio_sched = audio_ids[positions]
    video_sched = video_ids[positions]

    corr = spec.correlation_strength
    waveform = np.concatenate([corr * _tone_frame(int(k)) for k in audio_sched])
    waveform = waveform + spec.noise_std * rng.standard_normal(waveform.shape)

    embed = video_embedding_matrix(spec.n_phonemes, spec.video_dim)
    video_rows = corr * embed[video_sched]
    video_rows = video_rows + spec.noise_std * rng.standard_normal(video_rows.shape)

    if sample_id is None:
        sample_id = f"{label.category()}-{seed & 0xFFFFFFFF:08x}"
    return AVSample(
        sample_id=sample_id,
        waveform=waveform.astype(np.float32),
        video_rows=video_rows.astype(np.float32),
        transcript=transcript,
        label=label,
        seed=int(seed),
    ).validate()


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    label: DualLabel
    frames: int
    split: str

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "path": self.path,
            "label": list(self.label.as_tuple()),
            "frames": self.frames,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            sample_id=d["id"],
            path=d["path"],
            label=DualLabel(*d["label"]),
            frames=int(d["frames"]),
            split=d["split"],
        )


@dataclass
class CorpusManifest:
    """Index of a generated corpus; `root` is the directory holding it."""

    spec: CorpusSpec
    samples: list[ManifestEntry]
    root: Path
    version: int = MANIFEST_VERSION

    def entries(self, split: str | None = None) -> list[ManifestEntry]:
        if split is None:
            return list(self.samples)
        return [e for e in self.samples if e.split == split]

    def load_samples(self, split: str | None = None) -> list[AVSample]:
        return [read_sample(self.root / e.path) for e in self.entries(split)]

    def counts_by_category(self) -> dict[str, int]:
        out = {c: 0 for c in CATEGORIES}
        for e in self.samples:
            out[e.label.category()] += 1
        return out

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "spec": self.spec.to_dict(),
            "samples": [e.to_dict() for e in self.samples],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path: Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        _atomic_write_bytes(path, self.to_json().encode("utf-8"))
        return path

    @classmethod
    def load(cls, path: Path | str) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"no corpus manifest at {path}")
        doc = json.loads(path.read_text("utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
        return cls(
            spec=CorpusSpec.from_dict(doc["spec"]),
            samples=[ManifestEntry.from_dict(d) for d in doc["samples"]],
            root=path.parent,
        )


def _split_counts(counts: tuple[int, ...], fraction: float) -> list[int]:
    """Per-class train counts via largest remainder, hitting the global ratio."""
    total = sum(counts)
    target = int(round(total * fraction))
    exact = [c * fraction for c in counts]
    base = [math.floor(x) for x in exact]
    leftover = target - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:leftover]:
        if base[i] < counts[i]:
            base[i] += 1
    return base


def generate_corpus(spec: CorpusSpec, out_dir: Path | str) -> CorpusManifest:
    """Generate all samples plus a manifest under out_dir.

    Deterministic in spec.master_seed: per-sample RNG streams are derived
    from (master_seed, sample_index), so regeneration is byte-identical.
    """
    if sum(spec.counts) == 0:
        raise DataError("corpus spec requests zero samples")
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    index = 0
    per_class_ids: list[list[int]] = []
    for class_idx, category in enumerate(CATEGORIES):
        label = DualLabel.from_category(category)
        class_rows = []
        for _ in range(spec.counts[class_idx]):
            rng_t = np.random.default_rng(np.random.SeedSequence([spec.master_seed, index, 0]))
            n_frames = int(rng_t.integers(spec.min_frames, spec.max_frames + 1))
            max_len = max(2, n_frames // 2)
            length = int(rng_t.integers(2, max_len + 1))
            transcript = sample_transcript(rng_t, spec.n_phonemes, length)
            seed = int(
                np.random.SeedSequence([spec.master_seed, index, 1]).generate_state(
                    1, dtype=np.uint64
                )[0]
            )
            sample = synthesize_sample(
                transcript,
                label,
                spec,
                seed,
                n_frames=n_frames,
                sample_id=f"{category}-{index:05d}",
            )
            rel = f"samples/{sample.sample_id}.avs"
            write_sample(sample, out_dir / rel)
            entries.append(ManifestEntry(sample.sample_id, rel, label, n_frames, split=""))
            class_rows.append(len(entries) - 1)
            index += 1
        per_class_ids.append(class_rows)

    rng_split = np.random.default_rng(np.random.SeedSequence([spec.master_seed, 0xA11]))
    train_counts = _split_counts(spec.counts, spec.train_fraction)
    for class_rows, n_train in zip(per_class_ids, train_counts):
        order = rng_split.permutation(len(class_rows))
        for pos, row in enumerate(order):
            entries[class_rows[row]].split = "train" if pos < n_train else "test"

    manifest = CorpusManifest(spec=spec, samples=entries, root=out_dir)
    manifest.save()
    return manifest


def write_sample(sample: AVSample, path: Path | str) -> None:
    """Serialize to the fixed .avs binary layout (little-endian throughout)."""
    sample.validate()
    ids = np.asarray(sample.transcript.ids, dtype="<u2")
    if sample.transcript.n_phonemes > 0xFFFF:
        raise DataError("phoneme vocabulary exceeds u16 transcript encoding")
    id_bytes = sample.sample_id.encode("utf-8")
    header = struct.pack(
        "<4sB5IQH",
        _FILE_MAGIC,
        _FILE_VERSION,
        sample.n_frames,
        sample.transcript.n_phonemes,
        sample.video_rows.shape[1],
        len(sample.transcript),
        sample.label.audio_fake | (sample.label.video_fake << 1),
        sample.seed & 0xFFFFFFFFFFFFFFFF,
        len(id_bytes),
    )
    payload = b"".join(
        [
            header,
            id_bytes,
            np.ascontiguousarray(sample.waveform, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.video_rows, dtype="<f4").tobytes(),
            ids.tobytes(),
        ]
    )
    _atomic_write_bytes(Path(path), payload)


_HEADER_SIZE = struct.calcsize("<4sB5IQH")


def read_sample(path: Path | str) -> AVSample:
    """Inverse of write_sample; validates magic, version and payload size."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no sample file at {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, t_v, n_phonemes, video_dim, length, label_bits, seed, id_len = struct.unpack(
        "<4sB5IQH", raw[:_HEADER_SIZE]
    )
    if magic != _FILE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if label_bits > 3:
        raise CorruptionError(f"{path}: invalid label bits {label_bits}")
    expected = (
        _HEADER_SIZE
        + id_len
        + 4 * t_v * SAMPLES_PER_FRAME
        + 4 * t_v * video_dim
        + 2 * length
    )
    if len(raw) != expected:
        raise CorruptionError(
            f"{path}: payload size {len(raw)} does not match header (expected {expected})"
        )
    off = _HEADER_SIZE
    sample_id = raw[off : off + id_len].decode("utf-8")
    off += id_len
    n_wave = t_v * SAMPLES_PER_FRAME
    waveform = np.frombuffer(raw, dtype="<f4", count=n_wave, offset=off).copy()
    off += 4 * n_wave
    video = (
        np.frombuffer(raw, dtype="<f4", count=t_v * video_dim, offset=off)
        .reshape(t_v, video_dim)
        .copy()
    )
    off += 4 * t_v * video_dim
    ids = np.frombuffer(raw, dtype="<u2", count=length, offset=off)
    if not np.isfinite(waveform).all() or not np.isfinite(video).all():
        raise CorruptionError(f"{path}: non-finite payload values")
    try:
        transcript = PhonemeSeq(tuple(int(i) for i in ids), n_phonemes)
        label = DualLabel(label_bits & 1, (label_bits >> 1) & 1)
        return AVSample(sample_id, waveform, video, transcript, label, int(seed)).validate()
    except DataError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
