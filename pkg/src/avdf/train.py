"""Two-stage training engine.

Stage 1 (``pretrain_avsr``) fits the recognizer with CTC on real pairs only.
Stage 2 (``finetune_detection``) transfers the backbone, trains adapter and
dual-label classifier with modality dropout, and tracks validation OF1.

Runs are deterministic under a fixed seed: data order and modality dropout
draw from a dedicated numpy stream, torch owns init and layer dropout, and
checkpoints carry both RNG states so a resumed run is bit-reproducible.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import features, metrics
from .corpus import AVSample, CATEGORIES, DualLabel, PhonemeSeq
from .errors import ConfigError, CorruptionError, DataError, FormatError, NumericError
from .losses import ctc_loss, total_detection_loss
from .model import (
    PRESENCE_AV,
    DetectorModel,
    ModelConfig,
    PresenceMask,
)

STAGES = ("avsr", "detect")


@dataclass
class TrainConfig:
    """Optimization settings; desk defaults, paper preset available."""

    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 2000
    modality_dropout_prob: float = 0.2
    seed: int = 0
    stage: str = "detect"
    eval_every: int = 200
    early_stop_patience: int = 5  # evals without OF1 improvement; 0 disables
    grad_clip: float = 5.0
    ce_weight: float = 1.0
    aux_ctc_weight: float = 0.0
    log_spec: bool = False
    normalize_spec: bool = True
    freeze_backbone: bool = False
    log_every: int = 50
    dtype: str = "float32"
    torch_threads: int = 1  # tiny models train faster single-threaded

    def __post_init__(self):
        if not (0.0 <= self.modality_dropout_prob <= 0.5):
            raise ConfigError("modality_dropout_prob must lie in [0, 0.5]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=12, learning_rate=1e-5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class PreparedSample:
    """Feature tensors plus labels, ready for the model."""

    sample_id: str
    audio: torch.Tensor  # (T, 1284)
    video: torch.Tensor  # (T, video_dim)
    transcript: tuple[int, ...]
    label: DualLabel

    @property
    def n_frames(self) -> int:
        return self.audio.shape[0]


def prepare_samples(samples, config: TrainConfig) -> list[PreparedSample]:
    dtype = config.torch_dtype
    out = []
    for s in samples:
        audio, video = features.prepare_sample(
            s, log_spec=config.log_spec, normalize=config.normalize_spec
        )
        out.append(
            PreparedSample(
                sample_id=s.sample_id,
                audio=torch.from_numpy(audio).to(dtype),
                video=torch.from_numpy(video).to(dtype),
                transcript=s.transcript.ids,
                label=s.label,
            )
        )
    return out


def apply_modality_dropout(
    batch: list[PreparedSample], rho: float, rng: np.random.Generator
) -> tuple[list[PreparedSample], list[tuple[bool, bool]]]:
    """Zero the full feature sequence of one modality per sample with
    probability rho each, never both (both drawn -> redraw). Returns zeroed
    copies and per-sample (audio_masked, video_masked) loss masks."""
    if not (0.0 <= rho <= 0.5):
        raise ConfigError("dropout probability must lie in [0, 0.5]")
    dropped: list[PreparedSample] = []
    masks: list[tuple[bool, bool]] = []
    for item in batch:
        drop_a = drop_v = False
        if rho > 0.0:
            drop_a, drop_v = rng.random() < rho, rng.random() < rho
            while drop_a and drop_v:
                drop_a, drop_v = rng.random() < rho, rng.random() < rho
        if drop_a or drop_v:
            item = replace(
                item,
                audio=torch.zeros_like(item.audio) if drop_a else item.audio,
                video=torch.zeros_like(item.video) if drop_v else item.video,
            )
        dropped.append(item)
        masks.append((drop_a, drop_v))
    return dropped, masks


# --------------------------------------------------------------------------
# checkpoint format: magic, version, u64 header length, JSON header, blobs
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"AVDF"
_CKPT_VERSION = (1, 0)
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "|u1", "i64": "<i8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                np.dtype(np.uint8): "u8", np.dtype(np.int64): "i64"}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    stage: str
    step: int
    tensors: dict[str, np.ndarray]
    optimizer_steps: dict[str, float]
    train_config: dict | None
    numpy_rng: dict | None
    header: dict

    def state_dict_tensors(self) -> dict[str, np.ndarray]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}


def _numpy_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))


def _restore_numpy_rng(state: dict) -> np.random.Generator:
    state = copy.deepcopy(state)
    inner = state.get("state", {})
    for key, val in list(inner.items()):
        if isinstance(val, str):
            inner[key] = int(val)
    for key in ("has_uint32", "uinteger"):
        if key in state and isinstance(state[key], str):
            state[key] = int(state[key])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(
    path: Path | str,
    model: DetectorModel,
    stage: str,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
    train_config: TrainConfig | None = None,
    numpy_rng: np.random.Generator | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a self-describing checkpoint: JSON header + named raw blobs."""
    tensors: dict[str, np.ndarray] = {}
    for name, param in model.state_dict().items():
        tensors[f"model.{name}"] = param.detach().cpu().numpy()

    optimizer_steps: dict[str, float] = {}
    if optimizer is not None:
        name_by_param = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                pname = name_by_param[id(p)]
                tensors[f"optim.{pname}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
                tensors[f"optim.{pname}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
                optimizer_steps[pname] = float(state["step"])

    tensors["rng.torch"] = torch.get_rng_state().numpy()
    numpy_state = _numpy_rng_state(numpy_rng) if numpy_rng is not None else None

    digest = hashlib.sha256()
    digest.update(tensors["rng.torch"].tobytes())
    digest.update(json.dumps(numpy_state, sort_keys=True).encode())

    entries = []
    offset = 0
    order = sorted(tensors)
    for name in order:
        arr = tensors[name]
        dname = _DTYPE_NAMES[np.dtype(arr.dtype)]
        nbytes = arr.size * arr.itemsize
        entries.append(
            {"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset}
        )
        offset += nbytes

    header = {
        "format_version": list(_CKPT_VERSION),
        "stage": stage,
        "step": int(step),
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "optimizer_steps": optimizer_steps,
        "numpy_rng": numpy_state,
        "rng_digest": digest.hexdigest(),
        "tensors": entries,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header).encode("utf-8")
    blob = [
        _CKPT_MAGIC,
        struct.pack("<BBQ", *_CKPT_VERSION, len(header_bytes)),
        header_bytes,
    ]
    for name in order:
        arr = tensors[name]
        blob.append(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_NAMES[np.dtype(arr.dtype)]]).tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(blob))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if len(raw) < 14 or raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    major, minor, header_len = struct.unpack("<BBQ", raw[4:14])
    if major != _CKPT_VERSION[0]:
        raise FormatError(f"{path}: unsupported checkpoint major version {major}")
    header = json.loads(raw[14 : 14 + header_len].decode("utf-8"))
    base = 14 + header_len
    tensors = {}
    for entry in header["tensors"]:
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        end = start + count * np_dtype.itemsize
        if end > len(raw):
            raise CorruptionError(f"{path}: blob {entry['name']} exceeds file size")
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        stage=header["stage"],
        step=int(header["step"]),
        tensors=tensors,
        optimizer_steps=header.get("optimizer_steps", {}),
        train_config=header.get("train_config"),
        numpy_rng=header.get("numpy_rng"),
        header=header,
    )


def build_model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32) -> DetectorModel:
    model = DetectorModel(ckpt.model_config).to(dtype)
    state = {k: torch.from_numpy(v).to(dtype) for k, v in ckpt.state_dict_tensors().items()}
    model.load_state_dict(state)
    return model


_BACKBONE_FIELDS = (
    "d_model", "n_heads", "layers_audio_enc", "layers_video_enc",
    "layers_joint_dec", "n_phonemes", "audio_in_dim", "video_in_dim", "ffn_dim",
)


def _check_backbone_compatible(ckpt: Checkpoint, config: ModelConfig) -> None:
    for name in _BACKBONE_FIELDS:
        have, want = getattr(ckpt.model_config, name), getattr(config, name)
        if have != want:
            raise ConfigError(
                f"checkpoint {name}={have} does not match model config {name}={want}"
            )


def transfer_backbone(model: DetectorModel, ckpt: Checkpoint, include_avsr_head: bool = False) -> list[str]:
    """Copy pretrained backbone groups into a fresh model; returns the names copied."""
    _check_backbone_compatible(ckpt, model.config)
    groups = list(DetectorModel.BACKBONE_GROUPS)
    if include_avsr_head:
        groups.append("avsr_head")
    prefixes = tuple(g + "." for g in groups)
    source = ckpt.state_dict_tensors()
    state = model.state_dict()
    copied = []
    for name in state:
        if name.startswith(prefixes):
            if name not in source:
                raise ConfigError(f"checkpoint lacks backbone tensor {name}")
            state[name] = torch.from_numpy(source[name]).to(state[name].dtype)
            copied.append(name)
    model.load_state_dict(state)
    return copied


def _restore_optimizer(optimizer: torch.optim.Optimizer, model: DetectorModel, ckpt: Checkpoint) -> None:
    by_name = dict(model.named_parameters())
    for pname, step in ckpt.optimizer_steps.items():
        param = by_name[pname]
        optimizer.state[param] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim.{pname}.exp_avg"]).to(param.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.{pname}.exp_avg_sq"]).to(param.dtype),
        }


def _restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    if "rng.torch" in ckpt.tensors:
        torch.set_rng_state(torch.from_numpy(ckpt.tensors["rng.torch"].astype(np.uint8)))
    if ckpt.numpy_rng is not None:
        return _restore_numpy_rng(ckpt.numpy_rng)
    return None


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    model: DetectorModel
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    history: list[dict]
    checkpoint_path: Path | None
    log_path: Path | None


class _JsonlLog:
    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
        else:
            self._fh = None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


class _BatchSampler:
    """Deterministic shuffled epochs; partial trailing batches are deferred
    to the next epoch boundary. State is checkpointable so a resumed run
    continues mid-epoch exactly where the saved run stopped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm: list[int] = []
        self._pos = 0
        self.epoch = -1

    def next_batch(self) -> tuple[list[int], bool]:
        new_epoch = False
        if self._pos + self.batch_size > len(self._perm):
            self._perm = list(self.rng.permutation(self.n))
            self._pos = 0
            self.epoch += 1
            new_epoch = self.epoch > 0
        batch = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch, new_epoch

    def state(self) -> dict:
        return {"perm": [int(i) for i in self._perm], "pos": self._pos, "epoch": self.epoch}

    def set_state(self, state: dict) -> None:
        self._perm = [int(i) for i in state["perm"]]
        self._pos = int(state["pos"])
        self.epoch = int(state["epoch"])


def _group_by_length(indices: list[int], items: list[PreparedSample]) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(items[i].n_frames, []).append(i)
    return [groups[k] for k in sorted(groups)]


def greedy_decode(logits: torch.Tensor, blank: int) -> list[int]:
    """Frame argmax, collapse repeats, drop blanks."""
    path = logits.argmax(dim=-1).tolist()
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def _edit_distance(a: list[int], b: list[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def phoneme_error_rate(model: DetectorModel, prepared: list[PreparedSample], blank: int) -> float:
    """Mean greedy-decode edit distance over target length."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for item in _group_by_length(list(range(len(prepared))), prepared):
            audio = torch.stack([prepared[i].audio for i in item])
            video = torch.stack([prepared[i].video for i in item])
            logits = model.forward_avsr(audio, video)
            for row, i in enumerate(item):
                target = list(prepared[i].transcript)
                pred = greedy_decode(logits[row], blank)
                total += _edit_distance(pred, target) / max(1, len(target))
    model.train()
    return total / len(prepared)


def _make_optimizer(model: DetectorModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(
        params,
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
    )


def pretrain_avsr(
    train_samples: list[AVSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    resume: Checkpoint | None = None,
    per_subset: int = 64,
) -> TrainOutcome:
    """Stage 1: CTC recognition training on real pairs only."""
    reals = [s for s in train_samples if s.label.fake_count() == 0]
    if not reals:
        raise DataError("stage-1 pretraining needs real (RR) samples")
    config = replace(train_config, stage="avsr")

    if config.torch_threads > 0:
        torch.set_num_threads(config.torch_threads)
    torch.manual_seed(config.seed)
    model = DetectorModel(model_config).to(config.torch_dtype)
    optimizer = _make_optimizer(model, config)
    rng_data = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    start_step = 0
    if resume is not None:
        if resume.stage != "avsr":
            raise ConfigError(f"cannot resume avsr training from a {resume.stage} checkpoint")
        _check_backbone_compatible(resume, model_config)
        model = build_model_from_checkpoint(resume, config.torch_dtype)
        optimizer = _make_optimizer(model, config)
        _restore_optimizer(optimizer, model, resume)
        restored = _restore_rng(resume)
        if restored is not None:
            rng_data = restored
        start_step = resume.step

    prepared = prepare_samples(reals, config)
    infeasible = [p.sample_id for p in prepared if len(p.transcript) > p.n_frames]
    if infeasible:
        raise DataError(f"transcripts longer than frame count: {infeasible[:3]}")

    log = _JsonlLog(log_path)
    log.write({"stage": "avsr", "event": "config",
               "model": model_config.to_dict(), "train": config.to_dict(),
               "n_real": len(reals), "resumed_from": start_step or None})
    sampler = _BatchSampler(len(prepared), config.batch_size, rng_data)
    if resume is not None and "sampler" in resume.header.get("extra", {}):
        sampler.set_state(resume.header["extra"]["sampler"])
    blank = model_config.blank_id
    per_pool = prepared[: min(per_subset, len(prepared))]

    model.train()
    step = start_step
    while step < config.max_steps:
        batch, new_epoch = sampler.next_batch()
        if new_epoch:
            per = phoneme_error_rate(model, per_pool, blank)
            log.write({"stage": "avsr", "event": "epoch", "epoch": sampler.epoch,
                       "step": step, "per": per})
        losses = []
        for group in _group_by_length(batch, prepared):
            audio = torch.stack([prepared[i].audio for i in group])
            video = torch.stack([prepared[i].video for i in group])
            logits = model.forward_avsr(audio, video)
            for row, i in enumerate(group):
                losses.append(ctc_loss(logits[row], prepared[i].transcript))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite stage-1 loss at step {step + 1}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        step += 1
        if step % config.log_every == 0 or step == config.max_steps:
            log.write({"stage": "avsr", "event": "step", "step": step,
                       "loss_ctc": float(loss.detach())})

    ckpt_path = None
    if checkpoint_path is not None:
        ckpt_path = save_checkpoint(
            checkpoint_path, model, "avsr", step,
            optimizer=optimizer, train_config=config, numpy_rng=rng_data,
            extra={"sampler": sampler.state()},
        )
    log.close()
    return TrainOutcome(model, model_config, config, step, log.records, ckpt_path,
                        log.path)


def evaluate_model(
    model: DetectorModel,
    prepared: list[PreparedSample],
    scenarios=(PRESENCE_AV,),
    threshold: float = 0.5,
) -> dict[str, metrics.EvalReport]:
    """Batched scenario evaluation over prepared samples."""
    if not prepared:
        raise DataError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    reports = {}
    with torch.no_grad():
        for presence in scenarios:
            scored = []
            for group in _group_by_length(list(range(len(prepared))), prepared):
                audio = torch.stack([prepared[i].audio for i in group])
                video = torch.stack([prepared[i].video for i in group])
                outs = model.detect_batch(audio, video, presence)
                for row, i in enumerate(group):
                    out = outs[row]
                    scored.append(
                        metrics.ScoredSample(
                            sample_id=prepared[i].sample_id,
                            p_audio_fake=out.p_audio_fake,
                            p_video_fake=out.p_video_fake,
                            fused_real_score=out.fused_real_score,
                            label=prepared[i].label,
                            scenario=presence,
                            count_pred=int(np.argmax(out.count_probs)),
                        )
                    )
            reports[presence.name] = metrics.report_from_scores(scored, threshold)
    if was_training:
        model.train()
    return reports


def finetune_detection(
    train_samples: list[AVSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    init: Checkpoint | None = None,
    eval_samples: list[AVSample] | None = None,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainOutcome:
    """Stage 2: dual-label detection training with modality dropout.

    ``init`` transfers a pretrained backbone; adapter and classifier always
    start fresh. With eval samples, validation OF1 drives early stopping and
    the best state is what gets checkpointed.
    """
    present = {s.label.category() for s in train_samples}
    missing = [c for c in CATEGORIES if c not in present]
    if missing:
        raise DataError(f"stage-2 training needs all four label classes; missing {missing}")
    config = replace(train_config, stage="detect")

    if config.torch_threads > 0:
        torch.set_num_threads(config.torch_threads)
    torch.manual_seed(config.seed)
    model = DetectorModel(model_config).to(config.torch_dtype)
    optimizer = _make_optimizer(model, config)
    rng_data = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    start_step = 0
    transferred: list[str] = []
    if resume is not None:
        if resume.stage != "detect":
            raise ConfigError(f"cannot resume detection training from a {resume.stage} checkpoint")
        if resume.model_config.to_dict() != model_config.to_dict():
            raise ConfigError("resume checkpoint model config differs from requested config")
        model = build_model_from_checkpoint(resume, config.torch_dtype)
        optimizer = _make_optimizer(model, config)
        _restore_optimizer(optimizer, model, resume)
        restored = _restore_rng(resume)
        if restored is not None:
            rng_data = restored
        start_step = resume.step
    elif init is not None:
        if init.stage != "avsr":
            raise ConfigError(f"expected an avsr checkpoint for init, got {init.stage}")
        transferred = transfer_backbone(model, init, include_avsr_head=config.aux_ctc_weight > 0)

    if config.freeze_backbone:
        for group in DetectorModel.BACKBONE_GROUPS:
            for p in model.parameter_groups()[group].parameters():
                p.requires_grad_(False)
        optimizer = _make_optimizer(model, config)

    prepared = prepare_samples(train_samples, config)
    prepared_eval = prepare_samples(eval_samples, config) if eval_samples else None

    log = _JsonlLog(log_path)
    log.write({"stage": "detect", "event": "config",
               "model": model_config.to_dict(), "train": config.to_dict(),
               "n_train": len(prepared), "n_eval": len(prepared_eval or []),
               "init": "pretrained" if init is not None else ("resume" if resume else "fresh"),
               "transferred_tensors": len(transferred)})
    sampler = _BatchSampler(len(prepared), config.batch_size, rng_data)
    if resume is not None and "sampler" in resume.header.get("extra", {}):
        sampler.set_state(resume.header["extra"]["sampler"])

    best = None  # (of1, step, model_state, optim_state, torch_rng, numpy_rng_state)
    evals_since_best = 0
    stop = False

    model.train()
    step = start_step
    while step < config.max_steps and not stop:
        batch, _ = sampler.next_batch()
        items = [prepared[i] for i in batch]
        items, masks = apply_modality_dropout(items, config.modality_dropout_prob, rng_data)
        totals, bces, ces = [], [], []
        for group in _group_by_length(list(range(len(items))), items):
            audio = torch.stack([items[i].audio for i in group])
            video = torch.stack([items[i].video for i in group])
            e_a, e_v = model._embed(audio, video)
            c_a, c_v = model.mca(e_a, e_v, model_config.mca_mode)
            decoded = model.joint(c_a, c_v)
            mod_logits, count_logits, _ = model.dlc(decoded)
            for row, i in enumerate(group):
                breakdown = total_detection_loss(
                    mod_logits[row], count_logits[row], items[i].label,
                    loss_mask=masks[i], ce_weight=config.ce_weight,
                )
                total_i = breakdown.total
                if (
                    config.aux_ctc_weight > 0
                    and items[i].label.fake_count() == 0
                    and not any(masks[i])
                ):
                    total_i = total_i + config.aux_ctc_weight * ctc_loss(
                        model.avsr_head(decoded[row]), items[i].transcript
                    )
                totals.append(total_i)
                bces.append(breakdown.bce)
                ces.append(breakdown.ce)
        loss = torch.stack(totals).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite stage-2 loss at step {step + 1}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        step += 1

        if step % config.log_every == 0 or step == config.max_steps:
            log.write({"stage": "detect", "event": "step", "step": step,
                       "loss_total": float(loss.detach()),
                       "loss_bce": float(torch.stack(bces).detach().mean()),
                       "loss_ce": float(torch.stack(ces).detach().mean())})

        if prepared_eval and config.eval_every > 0 and step % config.eval_every == 0:
            report = evaluate_model(model, prepared_eval)["av"]
            log.write({"stage": "detect", "event": "eval", "step": step,
                       "report": report.to_dict()})
            if best is None or report.OF1 > best[0]:
                best = (
                    report.OF1,
                    step,
                    copy.deepcopy(model.state_dict()),
                    copy.deepcopy(optimizer.state_dict()),
                    torch.get_rng_state(),
                    _numpy_rng_state(rng_data),
                    sampler.state(),
                )
                evals_since_best = 0
            else:
                evals_since_best += 1
                if config.early_stop_patience > 0 and evals_since_best >= config.early_stop_patience:
                    log.write({"stage": "detect", "event": "early_stop", "step": step,
                               "best_step": best[1], "best_of1": best[0]})
                    stop = True

    if best is not None:
        model.load_state_dict(best[2])
        optimizer.load_state_dict(best[3])
        torch.set_rng_state(best[4])
        rng_data = _restore_numpy_rng(best[5])
        sampler.set_state(best[6])
        step = best[1]
        log.write({"stage": "detect", "event": "restore_best", "step": step,
                   "of1": best[0]})

    ckpt_path = None
    if checkpoint_path is not None:
        ckpt_path = save_checkpoint(
            checkpoint_path, model, "detect", step,
            optimizer=optimizer, train_config=config, numpy_rng=rng_data,
            extra={"sampler": sampler.state()},
        )
    log.close()
    return TrainOutcome(model, model_config, config, step, log.records, ckpt_path,
                        log.path)
