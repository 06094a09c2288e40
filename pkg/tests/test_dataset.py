"""Sequence format, synthetic generator oracle, flow cache, augmentation, split."""

import json

import numpy as np
import pytest
from PIL import Image

from tsnet.dataset import (
    AugmentConfig, DatasetError, attach_flow_cache, augment, load_sequence,
    make_samples, meta_hash, precompute_flows, stage_split,
)
from tsnet.optflow import FlowParams
from tsnet.synth import SynthConfig, synth_generate

FAST_FLOW = FlowParams(levels=1, window_size=7, iterations=2)


def small_cfg(**kw):
    base = dict(width=32, height=8, n_frames=6, seed=3, band_width=6.0,
                max_amplitude=4.0, n_motion_components=2)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def seq_dir(tmp_path):
    out = tmp_path / "data"
    synth_generate(small_cfg(), out)
    return out


class TestSynthGenerate:
    def test_outputs_exist(self, seq_dir):
        assert (seq_dir / "steering.csv").exists()
        assert (seq_dir / "meta.json").exists()
        assert len(list(seq_dir.glob("frame_*.png"))) == 6

    def test_static_centered_band_zero_angle(self, tmp_path):
        cfg = small_cfg(max_amplitude=0.0)
        _, angle = synth_generate(cfg, tmp_path / "static")
        np.testing.assert_array_equal(angle, np.zeros(6))

    def test_static_offset_band_label(self, tmp_path):
        cfg = small_cfg(max_amplitude=0.0, center_offset_px=4.0, k1=0.5)
        _, angle = synth_generate(cfg, tmp_path / "offset")
        np.testing.assert_allclose(angle, np.full(6, 2.0), rtol=0, atol=1e-12)

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth_generate(small_cfg(seed=42), a)
        synth_generate(small_cfg(seed=42), b)
        for pa in sorted(a.iterdir()):
            assert pa.read_bytes() == (b / pa.name).read_bytes()

    def test_band_excursion_rejected_at_config_time(self):
        with pytest.raises(ValueError, match="excursion"):
            SynthConfig(width=24, band_width=10.0, max_amplitude=12.0)

    def test_labels_rederivable_from_oracle_series(self, seq_dir):
        meta = json.loads((seq_dir / "meta.json").read_text())
        x = np.array(meta["oracle_series"])
        k1 = meta["synth"]["k1"]
        k2 = meta["synth"]["k2"]
        want = k1 * (x - meta["width"] / 2.0)
        want[1:] += k2 * np.diff(x)
        seq = load_sequence(seq_dir)
        np.testing.assert_array_equal(seq.angles(), want)

    def test_sensor_noise_deterministic_and_labels_clean(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        _, angle_a = synth_generate(small_cfg(noise_std=8.0), a)
        _, angle_b = synth_generate(small_cfg(noise_std=8.0), b)
        for pa in sorted(a.iterdir()):
            assert pa.read_bytes() == (b / pa.name).read_bytes()
        # Noise perturbs pixels only; the label series stays exact.
        _, angle_clean = synth_generate(small_cfg(), tmp_path / "clean")
        np.testing.assert_array_equal(angle_a, angle_clean)
        fa = np.asarray(Image.open(a / "frame_000000.png"))
        fc = np.asarray(Image.open(tmp_path / "clean" / "frame_000000.png"))
        assert (fa != fc).any()

    def test_clutter_shared_across_sequence_seeds(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth_generate(small_cfg(seed=1, max_amplitude=0.0,
                                 clutter=64.0, clutter_seed=7), a)
        synth_generate(small_cfg(seed=2, max_amplitude=0.0,
                                 clutter=64.0, clutter_seed=7), b)
        fa = np.asarray(Image.open(a / "frame_000000.png"))
        fb = np.asarray(Image.open(b / "frame_000000.png"))
        # Same backdrop, same static band position: identical frames.
        np.testing.assert_array_equal(fa, fb)
        # Clutter varies per column outside the band, not over time.
        later = np.asarray(Image.open(a / "frame_000005.png"))
        np.testing.assert_array_equal(fa, later)
        assert len(np.unique(fa[0, :, 0])) > 3

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError, match="noise_std"):
            small_cfg(noise_std=-1.0)


class TestLoadSequence:
    def test_round_trip(self, seq_dir):
        seq = load_sequence(seq_dir)
        assert seq.n_frames == 6
        assert (seq.width, seq.height) == (32, 8)
        assert seq.load_frame(0).shape == (8, 32, 3)

    def test_record_count_mismatch(self, seq_dir):
        csv = seq_dir / "steering.csv"
        lines = csv.read_text().strip().splitlines()
        csv.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetError, match="record count 5 != frame count 6"):
            load_sequence(seq_dir)

    def test_missing_frame_names_index(self, seq_dir):
        (seq_dir / "frame_000002.png").unlink()
        with pytest.raises(DatasetError, match="index 2"):
            load_sequence(seq_dir)

    def test_non_monotone_timestamps(self, seq_dir):
        csv = seq_dir / "steering.csv"
        lines = csv.read_text().strip().splitlines()
        parts = lines[3].split(",")
        parts[1] = "0.05"
        lines[3] = ",".join(parts)
        csv.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="increasing at index 2"):
            load_sequence(seq_dir)


class TestPrecomputeFlows:
    def test_file_count_and_meta(self, seq_dir):
        seq = load_sequence(seq_dir)
        cache = precompute_flows(seq, FAST_FLOW)
        assert len(list(cache.glob("flow_*.bin"))) == 5
        meta = json.loads((cache / "meta.json").read_text())
        assert meta["flow_max_magnitude"] > 0
        assert meta["n_flows"] == 5

    def test_static_scene_zero_flows(self, tmp_path):
        out = tmp_path / "static"
        synth_generate(small_cfg(max_amplitude=0.0, n_frames=3), out)
        seq = load_sequence(out)
        precompute_flows(seq, FAST_FLOW)
        for s in make_samples(seq):
            assert float(np.max(s.flow.magnitude())) < 1e-3

    def test_rerun_skips_existing(self, seq_dir):
        seq = load_sequence(seq_dir)
        cache = precompute_flows(seq, FAST_FLOW)
        stamps = {p.name: p.stat().st_mtime_ns for p in cache.iterdir()}
        precompute_flows(load_sequence(seq_dir), FAST_FLOW)
        for p in cache.iterdir():
            assert p.stat().st_mtime_ns == stamps[p.name], p.name

    def test_parallel_matches_serial(self, seq_dir, tmp_path):
        seq = load_sequence(seq_dir)
        c1 = precompute_flows(seq, FAST_FLOW, cache_dir=tmp_path / "serial", threads=1)
        c2 = precompute_flows(load_sequence(seq_dir), FAST_FLOW,
                              cache_dir=tmp_path / "par", threads=3)
        for p in sorted(c1.glob("flow_*.bin")):
            assert p.read_bytes() == (c2 / p.name).read_bytes()


class TestMakeSamples:
    def test_count_and_alignment(self, seq_dir):
        seq = load_sequence(seq_dir)
        precompute_flows(seq, FAST_FLOW)
        samples = make_samples(seq)
        assert len(samples) == seq.n_frames - 1
        assert samples[0].index == 1
        assert samples[0].target_aux == seq.records[0].angle_deg
        for s in samples:
            assert s.target_main == seq.records[s.index].angle_deg
            assert s.target_aux == seq.records[s.index - 1].angle_deg

    def test_incomplete_cache_rejected(self, seq_dir):
        seq = load_sequence(seq_dir)
        cache = precompute_flows(seq, FAST_FLOW)
        (cache / "flow_000003.bin").unlink()
        with pytest.raises(DatasetError, match="missing pair 3"):
            make_samples(load_sequence(seq_dir), cache_dir=cache)

    def test_missing_cache_meta_rejected(self, seq_dir, tmp_path):
        seq = load_sequence(seq_dir)
        with pytest.raises(DatasetError, match="meta.json"):
            attach_flow_cache(seq, tmp_path / "nowhere")


class TestAugment:
    @pytest.fixture
    def sample(self, seq_dir):
        seq = load_sequence(seq_dir)
        precompute_flows(seq, FAST_FLOW)
        return make_samples(seq)[2]

    def test_forced_double_flip_is_identity(self, sample):
        cfg = AugmentConfig(flip_prob=1.0, brightness=0.0, contrast_range=(1.0, 1.0))
        twice = augment(augment(sample, 1, cfg), 2, cfg)
        np.testing.assert_array_equal(twice.frame, sample.frame)
        np.testing.assert_array_equal(twice.flow.u, sample.flow.u)
        np.testing.assert_array_equal(twice.flow.v, sample.flow.v)
        np.testing.assert_array_equal(twice.flow_enc, sample.flow_enc)
        assert twice.target_main == sample.target_main
        assert twice.target_aux == sample.target_aux

    def test_flip_negates_targets(self, sample):
        sample.target_main = 5.0
        cfg = AugmentConfig(flip_prob=1.0, brightness=0.0, contrast_range=(1.0, 1.0))
        assert augment(sample, 0, cfg).target_main == -5.0

    def test_jitter_leaves_flow_bytes_untouched(self, sample):
        cfg = AugmentConfig(flip_prob=0.0)
        out = augment(sample, 9, cfg)
        assert out.flow_enc.tobytes() == sample.flow_enc.tobytes()

    def test_deterministic_given_seed(self, sample):
        a = augment(sample, 5)
        b = augment(sample, 5)
        np.testing.assert_array_equal(a.frame, b.frame)
        assert a.target_main == b.target_main


class TestStageSplit:
    def test_sixty_forty(self):
        a, b = stage_split(list(range(10)), 0.6)
        assert (len(a), len(b)) == (6, 4)

    def test_half(self):
        a, b = stage_split(list(range(4)), 0.5)
        assert (len(a), len(b)) == (2, 2)

    def test_order_and_partition(self):
        xs = list(range(17))
        a, b = stage_split(xs, 0.6)
        assert a + b == xs
        assert b[0] == a[-1] + 1

    def test_empty_side_rejected(self):
        with pytest.raises(DatasetError, match="empty side"):
            stage_split([1], 0.5)


def test_meta_hash_distinguishes_datasets(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_generate(small_cfg(seed=1), a)
    synth_generate(small_cfg(seed=2), b)
    assert meta_hash(a) != meta_hash(b)
    assert meta_hash(a) == meta_hash(a)
