"""Constant-Q transform: kernel geometry, the FFT path against direct
time-domain correlation, framing, and normalization."""

import numpy as np
import pytest

from tgcritic.audio import AudioClip
from tgcritic.cqt import (
    CqtConfigError,
    CqtMatrix,
    CqtParams,
    SampleRateError,
    ShortClipError,
    build_kernels,
    compute_cqt,
    frame_window,
    load_cqt_cache,
    normalize,
    save_cqt_cache,
)

rng = np.random.default_rng(2024)

PARAMS = CqtParams()
BANK = build_kernels(PARAMS)


def brute_force_magnitudes(samples, params, bank):
    """Direct correlation with the time-domain kernels, frame by frame."""
    n_fft = bank.fft_len
    half = n_fft // 2
    padded = np.concatenate([np.zeros(half), samples, np.zeros(half)])
    t_frames = 1 + samples.size // params.hop
    mags = np.zeros((t_frames, params.n_bins))
    for n in range(t_frames):
        frame = padded[n * params.hop:n * params.hop + n_fft]
        for k in range(params.n_bins):
            phi = bank.time_kernels[k]
            off = bank.kernel_offset(k)
            mags[n, k] = abs(np.vdot(phi, frame[off:off + phi.size]))
    return mags


class TestKernelGeometry:
    def test_bin_zero_is_e2(self):
        assert PARAMS.bin_frequency(0) == pytest.approx(440.0 * 2 ** (-29 / 12), rel=1e-12)
        assert PARAMS.bin_frequency(0) == pytest.approx(82.4069, abs=1e-4)

    def test_bin_24_one_octave_up(self):
        assert PARAMS.bin_frequency(24) == pytest.approx(2 * PARAMS.bin_frequency(0), rel=1e-12)

    def test_bin_95_geometric_formula(self):
        expect = PARAMS.f_min * 2.0 ** (95 / 24)
        assert PARAMS.bin_frequency(95) == pytest.approx(expect, rel=1e-12)
        assert PARAMS.bin_frequency(95) < PARAMS.sample_rate / 2

    def test_exact_geometric_ratio(self):
        freqs = PARAMS.bin_frequency(np.arange(96))
        np.testing.assert_allclose(freqs[1:] / freqs[:-1], 2.0 ** (1 / 24), rtol=1e-13)

    def test_q_factor(self):
        assert PARAMS.q_factor == pytest.approx(1.0 / (2 ** (1 / 24) - 1), rel=1e-12)
        assert PARAMS.q_factor == pytest.approx(34.13, abs=0.01)

    def test_kernels_l1_normalized(self):
        for k in (0, 40, 95):
            assert np.sum(np.abs(BANK.time_kernels[k])) == pytest.approx(1.0, rel=1e-12)

    def test_fft_budget_guard(self):
        with pytest.raises(CqtConfigError):
            build_kernels(CqtParams(sample_rate=16000, f_min=10.0, n_bins=96))


class TestComputeCqt:
    def test_frame_count_for_8192ms(self):
        clip = AudioClip(rng.uniform(-0.3, 0.3, 131072), 16000, "t")
        out = compute_cqt(clip, PARAMS, BANK)
        assert out.frames == 257
        assert out.bins == 96
        cropped = frame_window(out, 0, 256)
        assert cropped.frames == 256

    def test_sine_argmax_bin_58(self):
        sr = 16000
        x = 0.5 * np.sin(2 * np.pi * 440.0 * np.arange(sr) / sr)
        out = compute_cqt(AudioClip(x, sr, "sine"), PARAMS, BANK)
        half_frames = BANK.fft_len // 2 // PARAMS.hop
        interior = range(half_frames, out.frames - half_frames)
        argmax = out.values.argmax(axis=1)
        assert all(argmax[i] == 58 for i in interior)
        assert 58 == round(24 * np.log2(440.0 / PARAMS.bin_frequency(0)))

    def test_silence_hits_compression_floor(self):
        clip = AudioClip(np.zeros(16000), 16000, "s")
        out = compute_cqt(clip, PARAMS, BANK)
        np.testing.assert_array_equal(out.values, np.zeros_like(out.values))

    def test_matches_brute_force_correlation(self):
        x = rng.uniform(-0.5, 0.5, 16000)
        out = compute_cqt(AudioClip(x, 16000, "r"), PARAMS, BANK)
        mag_fft = np.expm1(out.values) * PARAMS.log_eps
        mag_bf = brute_force_magnitudes(x, PARAMS, BANK)
        rel = np.max(np.abs(mag_fft - mag_bf)) / mag_bf.max()
        assert rel < 1e-6

    def test_chirp_argmax_monotone(self):
        sr = 16000
        dur = 4.0
        f0, f1 = PARAMS.bin_frequency(0), PARAMS.bin_frequency(0) * 16
        t = np.arange(int(sr * dur)) / sr
        phase = 2 * np.pi * f0 * dur / np.log(f1 / f0) * (np.exp(t / dur * np.log(f1 / f0)) - 1)
        x = 0.5 * np.sin(phase)
        out = compute_cqt(AudioClip(x, sr, "chirp"), PARAMS, BANK)
        half_frames = BANK.fft_len // 2 // PARAMS.hop
        traj = out.values.argmax(axis=1)[half_frames:out.frames - half_frames]
        assert np.all(np.diff(traj) >= 0)
        assert traj[-1] > traj[0]

    def test_wrong_sample_rate(self):
        with pytest.raises(SampleRateError):
            compute_cqt(AudioClip(np.zeros(44100) + 0.1, 44100, "x"), PARAMS, BANK)

    def test_too_short_clip(self):
        with pytest.raises(ShortClipError):
            compute_cqt(AudioClip(np.zeros(4000) + 0.1, 16000, "x"), PARAMS, BANK)


class TestFrameWindow:
    def test_identity_crop(self):
        m = CqtMatrix(rng.uniform(0, 5, (256, 96)), 512 / 16000)
        out = frame_window(m, 0, 256)
        np.testing.assert_array_equal(out.values, m.values)

    def test_interior_crop(self):
        m = CqtMatrix(rng.uniform(0, 5, (512, 96)), 512 / 16000)
        out = frame_window(m, 64, 256)
        np.testing.assert_array_equal(out.values, m.values[64:320])

    def test_random_crops_match_slicing(self):
        m = CqtMatrix(rng.uniform(0, 5, (300, 96)), 512 / 16000)
        for _ in range(20):
            start = int(rng.integers(0, 300 - 50))
            length = int(rng.integers(1, 300 - start))
            np.testing.assert_array_equal(
                frame_window(m, start, length).values, m.values[start:start + length]
            )

    def test_out_of_range(self):
        m = CqtMatrix(rng.uniform(0, 5, (100, 96)), 512 / 16000)
        with pytest.raises(IndexError):
            frame_window(m, 50, 51)


class TestNormalize:
    def test_all_zero_maps_to_zero(self):
        m = CqtMatrix(np.zeros((64, 96)), 512 / 16000)
        np.testing.assert_array_equal(normalize(m).values, np.zeros((64, 96)))

    def test_constant_maps_to_zero(self):
        m = CqtMatrix(np.full((64, 96), 3.3), 512 / 16000)
        np.testing.assert_array_equal(normalize(m).values, np.zeros((64, 96)))

    def test_zero_mean_unit_variance(self):
        m = CqtMatrix(rng.uniform(0, 8, (128, 96)), 512 / 16000)
        out = normalize(m)
        assert abs(out.values.mean()) < 1e-9
        assert abs(out.values.var() - 1.0) < 1e-6

    def test_loudness_scaling_preserves_argmax(self):
        x = rng.uniform(-0.09, 0.09, 32000)
        quiet = compute_cqt(AudioClip(x, 16000, "q"), PARAMS, BANK)
        loud = compute_cqt(AudioClip(x * 10, 16000, "l"), PARAMS, BANK)
        np.testing.assert_array_equal(
            normalize(quiet).values.argmax(axis=1), normalize(loud).values.argmax(axis=1)
        )


class TestCache:
    def test_round_trip(self, tmp_path):
        m = CqtMatrix(rng.uniform(0, 8, (257, 96)).astype(np.float32).astype(np.float64),
                      512 / 16000)
        save_cqt_cache(tmp_path / "c.cqt", m)
        back = load_cqt_cache(tmp_path / "c.cqt")
        np.testing.assert_array_equal(back.values, m.values)
        assert back.hop_seconds == m.hop_seconds

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.cqt"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(ValueError):
            load_cqt_cache(p)
