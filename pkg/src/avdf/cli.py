"""Operator CLI: corpus generation, two-stage training, evaluation,
single-sample prediction, ablation orchestration and embedding export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Every command echoes its fully resolved configuration to stderr
and embeds it in the artifacts it writes.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import metrics
from .config import REPORT_SCHEMA_VERSION, RunConfig, resolve_run_config
from .corpus import CorpusManifest, CorpusSpec, generate_corpus, read_sample
from .errors import ConfigError, DataError, NumericError
from .model import PresenceMask
from .train import (
    TrainConfig,
    build_model_from_checkpoint,
    evaluate_model,
    finetune_detection,
    load_checkpoint,
    prepare_samples,
    pretrain_avsr,
)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(4)

    return wrapper


def _write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _echo_resolved(config: RunConfig) -> None:
    click.echo(json.dumps({"resolved_config": config.to_dict()}), err=True)


def _load_manifest(corpus_dir: str) -> CorpusManifest:
    return CorpusManifest.load(Path(corpus_dir))


def _sync_model_config(config: RunConfig, spec: CorpusSpec, overrides: dict) -> RunConfig:
    """Derive data-bound model fields from the corpus, rejecting conflicts."""
    explicit = overrides.get("model", {})
    for key, corpus_val in (("n_phonemes", spec.n_phonemes), ("video_in_dim", spec.video_dim)):
        if explicit.get(key) not in (None, corpus_val) :
            raise ConfigError(
                f"model {key}={explicit[key]} conflicts with corpus value {corpus_val}"
            )
        setattr(config.model, key, corpus_val)
    return config


def _feature_train_config(ckpt) -> TrainConfig:
    if ckpt.train_config:
        return TrainConfig.from_dict(ckpt.train_config)
    return TrainConfig()


def _scenarios(names) -> list[PresenceMask]:
    return [PresenceMask.from_name(n) for n in names]


@click.group()
def main():
    """Audio-visual deepfake detection toolkit."""


@main.command("gen-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--n-per-class", type=int, default=None, help="Same count for all four classes.")
@click.option("--counts", type=str, default=None, help="Comma list: RR,RF,FR,FF.")
@click.option("--min-frames", type=int, default=None)
@click.option("--max-frames", type=int, default=None)
@click.option("--n-phonemes", type=int, default=None)
@click.option("--video-dim", type=int, default=None)
@click.option("--noise-std", type=float, default=None)
@click.option("--correlation-strength", type=float, default=None)
@click.option("--seed", type=int, default=None, help="Corpus master seed.")
@_handle_errors
def cmd_gen_corpus(out_dir, config_path, n_per_class, counts, min_frames, max_frames,
                   n_phonemes, video_dim, noise_std, correlation_strength, seed):
    """Generate a synthetic corpus plus manifest under --out."""
    corpus_over = {
        "min_frames": min_frames,
        "max_frames": max_frames,
        "n_phonemes": n_phonemes,
        "video_dim": video_dim,
        "noise_std": noise_std,
        "correlation_strength": correlation_strength,
        "master_seed": seed,
    }
    if counts is not None:
        parts = [int(x) for x in counts.split(",")]
        if len(parts) != 4:
            raise ConfigError("--counts needs four comma-separated integers")
        corpus_over["counts"] = parts
    elif n_per_class is not None:
        corpus_over["counts"] = [n_per_class] * 4
    config = resolve_run_config(config_path, overrides={"corpus": corpus_over})
    _echo_resolved(config)
    manifest = generate_corpus(config.corpus, out_dir)
    click.echo(json.dumps({
        "manifest": str(Path(out_dir) / "manifest.json"),
        "counts": manifest.counts_by_category(),
        "train": len(manifest.entries("train")),
        "test": len(manifest.entries("test")),
    }))


def _train_options(fn):
    for opt in reversed([
        click.option("--corpus", "corpus_dir", required=True, type=click.Path()),
        click.option("--out", "out_path", required=True, type=click.Path()),
        click.option("--config", "config_path", type=click.Path(), default=None),
        click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk"),
        click.option("--max-steps", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--learning-rate", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--d-model", type=int, default=None),
        click.option("--log", "log_path", type=click.Path(), default=None),
        click.option("--resume", "resume_path", type=click.Path(), default=None),
    ]):
        fn = opt(fn)
    return fn


def _resolve_train(config_path, preset, manifest, train_over, model_over):
    overrides = {
        "train": {k: v for k, v in train_over.items() if v is not None},
        "model": {k: v for k, v in model_over.items() if v is not None},
    }
    config = resolve_run_config(config_path, preset=preset, overrides=overrides)
    return _sync_model_config(config, manifest.spec, overrides)


@main.command("pretrain")
@_train_options
@_handle_errors
def cmd_pretrain(corpus_dir, out_path, config_path, preset, max_steps, batch_size,
                 learning_rate, seed, d_model, log_path, resume_path):
    """Stage-1 CTC recognition pretraining on the corpus' real pairs."""
    manifest = _load_manifest(corpus_dir)
    config = _resolve_train(
        config_path, preset, manifest,
        {"max_steps": max_steps, "batch_size": batch_size,
         "learning_rate": learning_rate, "seed": seed},
        {"d_model": d_model},
    )
    _echo_resolved(config)
    resume = load_checkpoint(resume_path) if resume_path else None
    out_path = Path(out_path)
    outcome = pretrain_avsr(
        manifest.load_samples("train"),
        config.model,
        config.train,
        log_path=log_path or out_path.with_suffix(out_path.suffix + ".log.jsonl"),
        checkpoint_path=out_path,
        resume=resume,
    )
    click.echo(json.dumps({"checkpoint": str(outcome.checkpoint_path),
                           "step": outcome.step,
                           "log": str(outcome.log_path)}))


@main.command("finetune")
@_train_options
@click.option("--init", "init_path", type=click.Path(), default=None,
              help="Stage-1 checkpoint to transfer the backbone from.")
@click.option("--mca-mode", type=click.Choice(["none", "audio", "video"]), default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--dropout-prob", type=float, default=None, help="Modality dropout probability.")
@click.option("--freeze-backbone", is_flag=True, default=False)
@_handle_errors
def cmd_finetune(corpus_dir, out_path, config_path, preset, max_steps, batch_size,
                 learning_rate, seed, d_model, log_path, resume_path, init_path,
                 mca_mode, eval_every, dropout_prob, freeze_backbone):
    """Stage-2 dual-label detection finetuning (fresh unless --init given)."""
    manifest = _load_manifest(corpus_dir)
    config = _resolve_train(
        config_path, preset, manifest,
        {"max_steps": max_steps, "batch_size": batch_size,
         "learning_rate": learning_rate, "seed": seed, "eval_every": eval_every,
         "modality_dropout_prob": dropout_prob,
         "freeze_backbone": freeze_backbone or None},
        {"d_model": d_model, "mca_mode": mca_mode},
    )
    _echo_resolved(config)
    init = load_checkpoint(init_path) if init_path else None
    resume = load_checkpoint(resume_path) if resume_path else None
    out_path = Path(out_path)
    outcome = finetune_detection(
        manifest.load_samples("train"),
        config.model,
        config.train,
        init=init,
        eval_samples=manifest.load_samples("test"),
        log_path=log_path or out_path.with_suffix(out_path.suffix + ".log.jsonl"),
        checkpoint_path=out_path,
        resume=resume,
    )
    click.echo(json.dumps({"checkpoint": str(outcome.checkpoint_path),
                           "step": outcome.step,
                           "log": str(outcome.log_path)}))


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default="reports.json")
@click.option("--scenario", type=click.Choice(["all", "av", "audio", "video"]), default="all")
@click.option("--split", type=click.Choice(["test", "train", "all"]), default="test")
@click.option("--threshold", type=float, default=0.5)
@_handle_errors
def cmd_eval(ckpt_path, corpus_dir, out_path, scenario, split, threshold):
    """Evaluate a detection checkpoint under presence scenarios."""
    manifest = _load_manifest(corpus_dir)
    ckpt = load_checkpoint(ckpt_path)
    model = build_model_from_checkpoint(ckpt)
    feat_config = _feature_train_config(ckpt)
    samples = manifest.load_samples(None if split == "all" else split)
    if not samples:
        raise DataError(f"no samples in split {split!r}")
    prepared = prepare_samples(samples, feat_config)
    names = ["av", "audio", "video"] if scenario == "all" else [scenario]
    reports = evaluate_model(model, prepared, scenarios=_scenarios(names), threshold=threshold)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint": str(ckpt_path),
        "corpus": str(corpus_dir),
        "split": split,
        "threshold": threshold,
        "model_config": ckpt.model_config.to_dict(),
        "reports": {name: rep.to_dict() for name, rep in reports.items()},
    }
    _write_json(Path(out_path), doc)
    click.echo(json.dumps({"reports": str(out_path), "scenarios": names}))


@main.command("predict")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--sample", "sample_path", required=True, type=click.Path())
@click.option("--presence", type=click.Choice(["av", "audio", "video"]), default="av")
@_handle_errors
def cmd_predict(ckpt_path, sample_path, presence):
    """Score one .avs sample file; prints a single JSON line."""
    ckpt = load_checkpoint(ckpt_path)
    model = build_model_from_checkpoint(ckpt)
    model.eval()
    sample = read_sample(sample_path)
    prepared = prepare_samples([sample], _feature_train_config(ckpt))[0]
    mask = PresenceMask.from_name(presence)
    with torch.no_grad():
        out = model.detect(prepared.audio, prepared.video, mask)
    doc = {"sample_id": sample.sample_id}
    doc.update(out.to_dict())
    for modality in out.unsupported:
        doc.pop(f"p_{modality}_fake", None)
    click.echo(json.dumps(doc))


@main.command("ablate")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--seeds", type=str, default="0,1,2")
@click.option("--mca-modes", type=str, default="none,audio,video")
@click.option("--pretrain-steps", type=int, default=400)
@click.option("--finetune-steps", type=int, default=400)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@_handle_errors
def cmd_ablate(corpus_dir, out_path, config_path, preset, seeds, mca_modes,
               pretrain_steps, finetune_steps, batch_size, learning_rate):
    """Run the {pretrain on/off} x {mca mode} x seeds grid and report
    per-cell detection metrics on the test split."""
    manifest = _load_manifest(corpus_dir)
    config = _resolve_train(
        config_path, preset, manifest,
        {"batch_size": batch_size, "learning_rate": learning_rate,
         "eval_every": 0, "early_stop_patience": 0},
        {},
    )
    _echo_resolved(config)
    seed_list = [int(s) for s in seeds.split(",") if s != ""]
    mode_list = [m.strip() for m in mca_modes.split(",") if m.strip()]
    for mode in mode_list:
        if mode not in ("none", "audio", "video"):
            raise ConfigError(f"unknown mca mode {mode!r}")
    if not seed_list or not mode_list:
        raise ConfigError("ablation grid is empty")

    train_samples = manifest.load_samples("train")
    test_samples = manifest.load_samples("test")
    from dataclasses import replace

    cells = []
    for seed in seed_list:
        pre_cfg = replace(config.train, max_steps=pretrain_steps, seed=seed)
        pre = pretrain_avsr(train_samples, config.model, pre_cfg)
        from .estimator import _checkpoint_in_memory

        init_ckpt = _checkpoint_in_memory(pre)
        for mode in mode_list:
            model_cfg = replace(config.model, mca_mode=mode)
            for use_pretrain in (True, False):
                fine_cfg = replace(config.train, max_steps=finetune_steps, seed=seed)
                outcome = finetune_detection(
                    train_samples, model_cfg, fine_cfg,
                    init=init_ckpt if use_pretrain else None,
                )
                prepared = prepare_samples(test_samples, fine_cfg)
                report = evaluate_model(outcome.model, prepared)["av"]
                cells.append({
                    "seed": seed,
                    "mca_mode": mode,
                    "pretrain": use_pretrain,
                    "OF1": report.OF1,
                    "CF1": report.CF1,
                    "WF1": report.WF1,
                    "AF1": report.AF1,
                    "VF1": report.VF1,
                    "AUC_audio": report.AUC_audio,
                    "AUC_video": report.AUC_video,
                })
                click.echo(json.dumps({"cell": cells[-1]}), err=True)

    def _mean(key, flag):
        vals = [c[key] for c in cells if c["pretrain"] is flag]
        return float(np.mean(vals)) if vals else None

    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "grid": {"seeds": seed_list, "mca_modes": mode_list,
                 "pretrain_steps": pretrain_steps, "finetune_steps": finetune_steps},
        "resolved_config": config.to_dict(),
        "cells": cells,
        "summary": {
            "mean_OF1_pretrain_on": _mean("OF1", True),
            "mean_OF1_pretrain_off": _mean("OF1", False),
            "mean_AUC_audio_pretrain_on": _mean("AUC_audio", True),
            "mean_AUC_audio_pretrain_off": _mean("AUC_audio", False),
        },
    }
    _write_json(Path(out_path), doc)
    click.echo(json.dumps({"report": str(out_path), "cells": len(cells)}))


@main.command("export-embeddings")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["test", "train", "all"]), default="test")
@_handle_errors
def cmd_export_embeddings(ckpt_path, corpus_dir, out_path, split):
    """CSV of (sample_id, RR/RF/FR/FF category, embedding vector) for the
    split, from the detector's temporal-token output."""
    manifest = _load_manifest(corpus_dir)
    ckpt = load_checkpoint(ckpt_path)
    model = build_model_from_checkpoint(ckpt)
    model.eval()
    samples = manifest.load_samples(None if split == "all" else split)
    if not samples:
        raise DataError(f"no samples in split {split!r}")
    prepared = prepare_samples(samples, _feature_train_config(ckpt))
    d_model = ckpt.model_config.d_model
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "category"] + [f"e{i}" for i in range(d_model)])
        with torch.no_grad():
            for sample, item in zip(samples, prepared):
                out = model.detect(item.audio, item.video)
                writer.writerow(
                    [sample.sample_id, sample.label.category()]
                    + [f"{v:.8g}" for v in out.embedding]
                )
    os.replace(tmp, out_path)
    click.echo(json.dumps({"csv": str(out_path), "rows": len(samples), "dim": d_model}))


if __name__ == "__main__":
    main()
