import json

import numpy as np
import pytest
import torch

from avdf.corpus import CorpusSpec, DualLabel, generate_corpus
from avdf.errors import ConfigError, DataError
from avdf.losses import ctc_loss_mean, total_detection_loss
from avdf.model import DetectorModel, ModelConfig
from avdf.train import (
    Checkpoint,
    TrainConfig,
    apply_modality_dropout,
    build_model_from_checkpoint,
    finetune_detection,
    greedy_decode,
    load_checkpoint,
    prepare_samples,
    pretrain_avsr,
    save_checkpoint,
    transfer_backbone,
    _make_optimizer,
)


def tiny_model_config(**overrides):
    base = dict(d_model=8, n_heads=2, layers_audio_enc=1, layers_video_enc=1,
                layers_joint_dec=1, layers_fcd=1, layers_tam=1, n_phonemes=12,
                dropout_rate=0.1, video_in_dim=6)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(**overrides):
    base = dict(batch_size=4, learning_rate=1e-3, max_steps=6, seed=0,
                eval_every=0, early_stop_patience=0, log_every=1)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    spec = CorpusSpec(counts=(6, 6, 6, 6), min_frames=8, max_frames=10,
                      n_phonemes=12, video_dim=6, noise_std=0.05, master_seed=11)
    manifest = generate_corpus(spec, tmp_path_factory.mktemp("corpus"))
    return manifest


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(modality_dropout_prob=0.7)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(stage="both")

    def test_paper_preset(self):
        config = TrainConfig.paper()
        assert config.batch_size == 12
        assert config.learning_rate == 1e-5
        assert (config.beta1, config.beta2, config.adam_eps) == (0.9, 0.999, 1e-8)

    def test_round_trip_rejects_unknown(self):
        config = tiny_train_config()
        assert TrainConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"bogus": 1})


class TestModalityDropout:
    def make_batch(self, tiny_corpus, n=4):
        samples = tiny_corpus.load_samples("train")[:n]
        return prepare_samples(samples, tiny_train_config())

    def test_zero_prob_is_identity(self, tiny_corpus):
        batch = self.make_batch(tiny_corpus)
        dropped, masks = apply_modality_dropout(batch, 0.0, np.random.default_rng(0))
        assert all(m == (False, False) for m in masks)
        for a, b in zip(batch, dropped):
            assert torch.equal(a.audio, b.audio)
            assert torch.equal(a.video, b.video)

    def test_never_drops_both(self, tiny_corpus):
        batch = self.make_batch(tiny_corpus, n=1) * 2000
        _, masks = apply_modality_dropout(batch, 0.5, np.random.default_rng(1))
        assert all(not (a and v) for a, v in masks)

    def test_conditional_drop_fraction(self, tiny_corpus):
        # P(audio dropped | not both) = rho/(1+rho) = 1/3 at rho = 0.5
        batch = self.make_batch(tiny_corpus, n=1) * 10000
        _, masks = apply_modality_dropout(batch, 0.5, np.random.default_rng(2))
        frac = np.mean([a for a, _ in masks])
        assert abs(frac - 1 / 3) < 0.02

    def test_dropped_features_are_zeroed_labels_untouched(self, tiny_corpus):
        batch = self.make_batch(tiny_corpus)
        rng = np.random.default_rng(3)
        dropped, masks = apply_modality_dropout(batch, 0.5, rng)
        for orig, item, (ma, mv) in zip(batch, dropped, masks):
            assert item.label == orig.label
            if ma:
                assert torch.all(item.audio == 0.0)
                assert torch.equal(item.video, orig.video)
            if mv:
                assert torch.all(item.video == 0.0)

    def test_all_audio_dropped_batch_has_zero_audio_head_gradient(self, tiny_corpus):
        torch.manual_seed(0)
        model = DetectorModel(tiny_model_config())
        batch = self.make_batch(tiny_corpus)
        items = [it for it in batch]
        losses = []
        for item in items:
            audio = torch.zeros_like(item.audio)
            mod, cnt, _ = model.forward_detect(audio, item.video)
            losses.append(total_detection_loss(mod, cnt, item.label,
                                               loss_mask=(True, False)).total)
        loss = torch.stack(losses).mean()
        model.zero_grad()
        loss.backward()
        audio_row = model.dlc.head_modality[-1].weight.grad[0]
        video_row = model.dlc.head_modality[-1].weight.grad[1]
        assert torch.all(audio_row == 0.0)
        assert not torch.all(video_row == 0.0)


class TestPretrain:
    def test_one_adam_step_decreases_ctc_loss(self, tiny_corpus):
        samples = [s for s in tiny_corpus.load_samples("train")
                   if s.label.fake_count() == 0][:4]
        prepared = prepare_samples(samples, tiny_train_config())

        def batch_loss(model):
            seqs, targets = [], []
            for item in prepared:
                logits = model.forward_avsr(item.audio.unsqueeze(0),
                                            item.video.unsqueeze(0))[0]
                seqs.append(logits)
                targets.append(item.transcript)
            return ctc_loss_mean(seqs, targets)

        decreased = False
        for lr in (1e-3, 1e-4, 1e-5):
            torch.manual_seed(0)
            model = DetectorModel(tiny_model_config(dropout_rate=0.0))
            optimizer = _make_optimizer(model, tiny_train_config(learning_rate=lr))
            before = batch_loss(model)
            optimizer.zero_grad()
            before.backward()
            optimizer.step()
            with torch.no_grad():
                after = float(batch_loss(model))
            if after < float(before.detach()):
                decreased = True
                break
        assert decreased

    def test_requires_real_samples(self, tiny_corpus):
        fakes = [s for s in tiny_corpus.load_samples("train") if s.label.fake_count() > 0]
        with pytest.raises(DataError):
            pretrain_avsr(fakes, tiny_model_config(), tiny_train_config())

    def test_deterministic_loss_curve(self, tiny_corpus):
        samples = tiny_corpus.load_samples("train")
        runs = []
        for _ in range(2):
            outcome = pretrain_avsr(samples, tiny_model_config(), tiny_train_config())
            runs.append([r for r in outcome.history if r.get("event") == "step"])
        assert runs[0] == runs[1]

    def test_logs_per_epoch_phoneme_error_rate(self, tiny_corpus):
        samples = tiny_corpus.load_samples("train")
        outcome = pretrain_avsr(samples, tiny_model_config(),
                                tiny_train_config(max_steps=8, batch_size=2))
        epochs = [r for r in outcome.history if r.get("event") == "epoch"]
        assert epochs and all("per" in r for r in epochs)

    def test_greedy_decode_collapses(self):
        logits = torch.full((5, 4), -10.0)
        for t, k in enumerate([0, 0, 3, 1, 1]):  # blank id 3
            logits[t, k] = 10.0
        assert greedy_decode(logits, blank=3) == [0, 1]


class TestCheckpointing:
    def test_round_trip_tensors_and_header(self, tmp_path):
        torch.manual_seed(0)
        model = DetectorModel(tiny_model_config())
        rng = np.random.default_rng(5)
        path = save_checkpoint(tmp_path / "m.ckpt", model, "avsr", 17,
                               train_config=tiny_train_config(), numpy_rng=rng)
        ckpt = load_checkpoint(path)
        assert ckpt.stage == "avsr"
        assert ckpt.step == 17
        assert ckpt.model_config.to_dict() == model.config.to_dict()
        rebuilt = build_model_from_checkpoint(ckpt)
        for k, v in model.state_dict().items():
            assert torch.equal(rebuilt.state_dict()[k], v), k

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        from avdf.errors import FormatError

        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_transfer_is_bitwise_and_leaves_heads_fresh(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        outcome = pretrain_avsr(samples, tiny_model_config(),
                                tiny_train_config(max_steps=3),
                                checkpoint_path=tmp_path / "pre.ckpt")
        ckpt = load_checkpoint(outcome.checkpoint_path)

        torch.manual_seed(0)
        pretrained = DetectorModel(tiny_model_config())
        copied = transfer_backbone(pretrained, ckpt)
        torch.manual_seed(0)
        fresh = DetectorModel(tiny_model_config())

        assert copied
        src = ckpt.state_dict_tensors()
        for name in copied:
            assert torch.equal(pretrained.state_dict()[name],
                               torch.from_numpy(src[name]))
        # same shapes everywhere; backbone values differ from fresh init
        diffs = [n for n in copied
                 if not torch.equal(pretrained.state_dict()[n], fresh.state_dict()[n])]
        assert diffs
        # adapter and classifier stay at fresh initialization
        for name in pretrained.state_dict():
            if name.startswith(("mca.", "dlc.")):
                assert torch.equal(pretrained.state_dict()[name], fresh.state_dict()[name])

    def test_transfer_rejects_mismatched_config(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        outcome = pretrain_avsr(samples, tiny_model_config(),
                                tiny_train_config(max_steps=2),
                                checkpoint_path=tmp_path / "pre.ckpt")
        ckpt = load_checkpoint(outcome.checkpoint_path)
        other = DetectorModel(tiny_model_config(d_model=16, n_heads=2))
        with pytest.raises(ConfigError):
            transfer_backbone(other, ckpt)

    def test_resume_is_bit_reproducible(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        model_config = tiny_model_config()

        full = finetune_detection(samples, model_config,
                                  tiny_train_config(max_steps=16),
                                  checkpoint_path=tmp_path / "full.ckpt")
        half = finetune_detection(samples, model_config,
                                  tiny_train_config(max_steps=8),
                                  checkpoint_path=tmp_path / "half.ckpt")
        resumed = finetune_detection(samples, model_config,
                                     tiny_train_config(max_steps=16),
                                     resume=load_checkpoint(half.checkpoint_path),
                                     checkpoint_path=tmp_path / "resumed.ckpt")
        for k, v in full.model.state_dict().items():
            assert torch.equal(resumed.model.state_dict()[k], v), k

    def test_resume_requires_matching_stage(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        outcome = pretrain_avsr(samples, tiny_model_config(),
                                tiny_train_config(max_steps=2),
                                checkpoint_path=tmp_path / "pre.ckpt")
        ckpt = load_checkpoint(outcome.checkpoint_path)
        with pytest.raises(ConfigError):
            finetune_detection(samples, tiny_model_config(), tiny_train_config(),
                               resume=ckpt)


class TestFinetune:
    def test_requires_all_four_classes(self, tiny_corpus):
        reals = [s for s in tiny_corpus.load_samples("train") if s.label.fake_count() == 0]
        with pytest.raises(DataError):
            finetune_detection(reals, tiny_model_config(), tiny_train_config())

    def test_fresh_and_pretrained_share_shapes_differ_in_backbone(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        pre = pretrain_avsr(samples, tiny_model_config(),
                            tiny_train_config(max_steps=4),
                            checkpoint_path=tmp_path / "pre.ckpt")
        ckpt = load_checkpoint(pre.checkpoint_path)

        train_config = tiny_train_config(max_steps=1)
        with_init = finetune_detection(samples, tiny_model_config(), train_config,
                                       init=ckpt)
        fresh = finetune_detection(samples, tiny_model_config(), train_config)
        sd_a, sd_b = with_init.model.state_dict(), fresh.model.state_dict()
        assert set(sd_a) == set(sd_b)
        assert all(sd_a[k].shape == sd_b[k].shape for k in sd_a)

    def test_two_runs_identical_history(self, tiny_corpus):
        samples = tiny_corpus.load_samples("train")
        test = tiny_corpus.load_samples("test")
        histories = []
        for _ in range(2):
            outcome = finetune_detection(
                samples, tiny_model_config(), tiny_train_config(max_steps=6, eval_every=3),
                eval_samples=test,
            )
            histories.append(outcome.history)
        assert histories[0] == histories[1]

    def test_freeze_backbone_keeps_backbone_constant(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        pre = pretrain_avsr(samples, tiny_model_config(),
                            tiny_train_config(max_steps=2),
                            checkpoint_path=tmp_path / "pre.ckpt")
        ckpt = load_checkpoint(pre.checkpoint_path)
        outcome = finetune_detection(
            samples, tiny_model_config(),
            tiny_train_config(max_steps=4, freeze_backbone=True), init=ckpt,
        )
        src = ckpt.state_dict_tensors()
        sd = outcome.model.state_dict()
        for name in sd:
            if name.startswith(tuple(g + "." for g in DetectorModel.BACKBONE_GROUPS)):
                assert torch.equal(sd[name], torch.from_numpy(src[name])), name

    def test_eval_history_and_early_stop_fields(self, tiny_corpus):
        samples = tiny_corpus.load_samples("train")
        test = tiny_corpus.load_samples("test")
        outcome = finetune_detection(
            samples, tiny_model_config(),
            tiny_train_config(max_steps=6, eval_every=2, early_stop_patience=2),
            eval_samples=test,
        )
        evals = [r for r in outcome.history if r.get("event") == "eval"]
        assert evals
        assert all("OF1" in r["report"] for r in evals)

    def test_jsonl_log_written(self, tiny_corpus, tmp_path):
        samples = tiny_corpus.load_samples("train")
        log_path = tmp_path / "run.log.jsonl"
        finetune_detection(samples, tiny_model_config(),
                           tiny_train_config(max_steps=3), log_path=log_path)
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert lines[0]["event"] == "config"
        assert any(l.get("event") == "step" for l in lines)
