import json

import numpy as np
import pytest

from avdf.corpus import (
    AVSample,
    CorpusManifest,
    CorpusSpec,
    DualLabel,
    PhonemeSeq,
    frame_schedule,
    generate_corpus,
    read_sample,
    sample_transcript,
    synthesize_sample,
    tone_bins,
    write_sample,
)
from avdf.errors import ConfigError, CorruptionError, DataError, FormatError

from oracles import decode_audio_frames, decode_video_frames


def make_sample(spec, label=(0, 0), seed=99, length=4, n_frames=10):
    rng = np.random.default_rng(5)
    transcript = sample_transcript(rng, spec.n_phonemes, length)
    return synthesize_sample(transcript, DualLabel(*label), spec, seed, n_frames=n_frames)


class TestTypes:
    def test_phoneme_seq_rejects_out_of_range(self):
        with pytest.raises(DataError):
            PhonemeSeq((0, 40), n_phonemes=40)
        with pytest.raises(DataError):
            PhonemeSeq((), n_phonemes=40)

    def test_dual_label_fake_count_and_category(self):
        assert DualLabel(0, 0).fake_count() == 0
        assert DualLabel(1, 0).fake_count() == 1
        assert DualLabel(1, 1).fake_count() == 2
        assert DualLabel(0, 1).category() == "RF"  # audio real, video fake
        assert DualLabel.from_category("FR") == DualLabel(1, 0)

    def test_corpus_spec_validation(self):
        with pytest.raises(ConfigError):
            CorpusSpec(correlation_strength=0.0)
        with pytest.raises(ConfigError):
            CorpusSpec(counts=(1, 2, 3))
        with pytest.raises(ConfigError):
            CorpusSpec(min_frames=2)

    def test_tone_map_is_injective_and_in_range(self):
        seen = set()
        for k in range(40):
            b1, b2 = tone_bins(k)
            assert b1 not in seen
            seen.add(b1)
            assert b2 <= 320

    def test_frame_schedule_stretches_uniformly(self):
        sched = frame_schedule((7, 3), 4)
        assert list(sched) == [7, 7, 3, 3]
        sched = frame_schedule((1, 2, 3), 9)
        assert list(sched) == [1, 1, 1, 2, 2, 2, 3, 3, 3]


class TestSynthesize:
    def test_same_seed_gives_identical_bytes(self, small_spec):
        a = make_sample(small_spec, label=(0, 0), seed=42)
        b = make_sample(small_spec, label=(0, 0), seed=42)
        assert a.waveform.tobytes() == b.waveform.tobytes()
        assert a.video_rows.tobytes() == b.video_rows.tobytes()

    def test_different_seeds_differ(self, small_spec):
        a = make_sample(small_spec, seed=1)
        b = make_sample(small_spec, seed=2)
        assert a.waveform.tobytes() != b.waveform.tobytes()

    def test_transcript_longer_than_frames_rejected(self, small_spec):
        rng = np.random.default_rng(0)
        transcript = sample_transcript(rng, 40, 12)
        with pytest.raises(DataError):
            synthesize_sample(transcript, DualLabel(0, 0), small_spec, 0, n_frames=8)

    def test_fake_audio_dominant_bins_disagree_with_schedule(self, clean_spec):
        # audio built from an independent stream must decode away from the
        # transcript schedule in well over half of the frames
        sample = make_sample(clean_spec, label=(1, 0), seed=11, length=5, n_frames=10)
        decoded = decode_audio_frames(sample.waveform, clean_spec.n_phonemes)
        sched = frame_schedule(sample.transcript.ids, sample.n_frames)
        assert np.mean(decoded != sched) > 0.5

    def test_real_audio_decodes_to_schedule_exactly(self, clean_spec):
        sample = make_sample(clean_spec, label=(0, 0), seed=13, length=5, n_frames=10)
        decoded = decode_audio_frames(sample.waveform, clean_spec.n_phonemes)
        sched = frame_schedule(sample.transcript.ids, sample.n_frames)
        assert np.array_equal(decoded, sched)

    def test_fake_video_is_exact_projection_of_independent_stream(self, clean_spec):
        # noise-free, full correlation: rows must be exact embedding rows,
        # and mismatch vs the transcript schedule ~ (C-1)/C per frame
        mismatches = 0
        frames = 0
        for seed in range(1000):
            sample = make_sample(clean_spec, label=(0, 1), seed=seed, length=4, n_frames=8)
            decoded = decode_video_frames(sample.video_rows, clean_spec)
            from avdf.corpus import video_embedding_matrix

            embed = video_embedding_matrix(clean_spec.n_phonemes, clean_spec.video_dim)
            np.testing.assert_array_equal(
                sample.video_rows, embed[decoded].astype(np.float32)
            )
            sched = frame_schedule(sample.transcript.ids, sample.n_frames)
            mismatches += int(np.sum(decoded != sched))
            frames += sample.n_frames
        rate = mismatches / frames
        expected = (clean_spec.n_phonemes - 1) / clean_spec.n_phonemes
        assert abs(rate - expected) < 0.01

    def test_real_pair_correlation_invariant(self, clean_spec):
        # label (0,0), zero noise: both modalities decode to the same ids
        for seed in (3, 17, 92):
            sample = make_sample(clean_spec, label=(0, 0), seed=seed, length=5, n_frames=10)
            audio_ids = decode_audio_frames(sample.waveform, clean_spec.n_phonemes)
            video_ids = decode_video_frames(sample.video_rows, clean_spec)
            assert np.array_equal(audio_ids, video_ids)
            assert np.array_equal(audio_ids, frame_schedule(sample.transcript.ids, 10))

    def test_fake_decorrelation_rate(self, clean_spec):
        # agreement between fake-audio decode and transcript schedule stays
        # near 1/C; spec bound is 2/C + 0.05 over >= 500 frames
        agree = 0
        frames = 0
        seed = 0
        while frames < 600:
            sample = make_sample(clean_spec, label=(1, 0), seed=seed, length=5, n_frames=12)
            decoded = decode_audio_frames(sample.waveform, clean_spec.n_phonemes)
            sched = frame_schedule(sample.transcript.ids, sample.n_frames)
            agree += int(np.sum(decoded == sched))
            frames += sample.n_frames
            seed += 1
        c = clean_spec.n_phonemes
        assert agree / frames <= 2 / c + 0.05


class TestIO:
    def test_round_trip_equality(self, small_spec, tmp_path):
        sample = make_sample(small_spec, label=(1, 1), seed=5)
        path = tmp_path / "x.avs"
        write_sample(sample, path)
        back = read_sample(path)
        assert back.sample_id == sample.sample_id
        assert back.seed == sample.seed
        assert back.label == sample.label
        assert back.transcript == sample.transcript
        np.testing.assert_array_equal(back.waveform, sample.waveform)
        np.testing.assert_array_equal(back.video_rows, sample.video_rows)

    def test_wrong_magic_raises_format_error(self, small_spec, tmp_path):
        sample = make_sample(small_spec)
        path = tmp_path / "x.avs"
        write_sample(sample, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_sample(path)

    def test_wrong_version_raises_format_error(self, small_spec, tmp_path):
        sample = make_sample(small_spec)
        path = tmp_path / "x.avs"
        write_sample(sample, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_sample(path)

    def test_truncated_payload_raises_corruption_error(self, small_spec, tmp_path):
        sample = make_sample(small_spec)
        path = tmp_path / "x.avs"
        write_sample(sample, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 17])
        with pytest.raises(CorruptionError):
            read_sample(path)

    def test_header_frame_count_mismatch_raises_corruption_error(self, small_spec, tmp_path):
        sample = make_sample(small_spec)
        path = tmp_path / "x.avs"
        write_sample(sample, path)
        raw = bytearray(path.read_bytes())
        # bump T_v in the header without touching the payload
        import struct

        t_v = struct.unpack_from("<I", raw, 5)[0]
        struct.pack_into("<I", raw, 5, t_v + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            read_sample(path)


class TestGenerateCorpus:
    def test_counts_and_split_sizes(self, small_spec, tmp_path):
        manifest = generate_corpus(small_spec, tmp_path / "corpus")
        assert len(manifest.samples) == 40
        assert manifest.counts_by_category() == {"RR": 10, "RF": 10, "FR": 10, "FF": 10}
        assert len(manifest.entries("train")) == 34
        assert len(manifest.entries("test")) == 6

    def test_split_ratio_is_85_15(self, small_spec, tmp_path):
        manifest = generate_corpus(small_spec, tmp_path / "corpus")
        train = len(manifest.entries("train"))
        assert train == round(0.85 * len(manifest.samples))

    def test_regeneration_is_byte_identical(self, small_spec, tmp_path):
        m1 = generate_corpus(small_spec, tmp_path / "c1")
        m2 = generate_corpus(small_spec, tmp_path / "c2")
        b1 = (tmp_path / "c1" / "manifest.json").read_bytes()
        b2 = (tmp_path / "c2" / "manifest.json").read_bytes()
        assert b1 == b2
        for e1, e2 in zip(m1.samples, m2.samples):
            assert (tmp_path / "c1" / e1.path).read_bytes() == (
                tmp_path / "c2" / e2.path
            ).read_bytes()

    def test_zero_samples_rejected(self, tmp_path):
        spec = CorpusSpec(counts=(0, 0, 0, 0))
        with pytest.raises(DataError):
            generate_corpus(spec, tmp_path / "c")

    def test_manifest_round_trip_and_schema(self, small_spec, tmp_path):
        generate_corpus(small_spec, tmp_path / "corpus")
        doc = json.loads((tmp_path / "corpus" / "manifest.json").read_text())
        assert set(doc) == {"version", "spec", "samples"}
        entry = doc["samples"][0]
        assert set(entry) == {"id", "path", "label", "frames", "split"}
        manifest = CorpusManifest.load(tmp_path / "corpus")
        loaded = manifest.load_samples("test")
        assert len(loaded) == 6
        assert all(isinstance(s, AVSample) for s in loaded)

    def test_all_classes_in_both_splits(self, small_spec, tmp_path):
        manifest = generate_corpus(small_spec, tmp_path / "corpus")
        for split in ("train", "test"):
            cats = {e.label.category() for e in manifest.entries(split)}
            assert cats == {"RR", "RF", "FR", "FF"}
