"""WAV ingestion, resampling, and windowing."""

import struct
import wave

import numpy as np
import pytest

from tgcritic.audio import (
    AudioClip,
    ClipTooShortError,
    MalformedWavError,
    UnsupportedCodecError,
    load_wav,
    resample,
    slice_windows,
    write_wav,
)

rng = np.random.default_rng(31337)


def _write_pcm16(path, rate, frames):
    """frames: int16 array shaped (n,) or (n, channels)."""
    frames = np.asarray(frames, dtype="<i2")
    channels = 1 if frames.ndim == 1 else frames.shape[1]
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(frames.tobytes())


def _write_float32(path, rate, samples):
    samples = np.asarray(samples, dtype="<f4")
    body = samples.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, rate, rate * 4, 4, 32)
    header += b"data" + struct.pack("<I", len(body))
    path.write_bytes(header + body)


class TestLoadWav:
    def test_stereo_averaged_to_mono(self, tmp_path):
        left = (rng.integers(-3000, 3000, 44100)).astype(np.int16)
        right = (rng.integers(-3000, 3000, 44100)).astype(np.int16)
        _write_pcm16(tmp_path / "st.wav", 44100, np.stack([left, right], axis=1))
        clip = load_wav(tmp_path / "st.wav")
        assert clip.samples.shape == (44100,)
        assert clip.sample_rate == 44100
        expect = (left.astype(np.float64) + right) / 2.0 / 32768.0
        np.testing.assert_allclose(clip.samples, expect, atol=1e-12)

    def test_all_zero_file(self, tmp_path):
        _write_pcm16(tmp_path / "z.wav", 16000, np.zeros(1000, dtype=np.int16))
        clip = load_wav(tmp_path / "z.wav")
        np.testing.assert_array_equal(clip.samples, np.zeros(1000))

    def test_full_scale_scaling_convention(self, tmp_path):
        # cross-checked against the stdlib wave reader
        path = tmp_path / "fs.wav"
        _write_pcm16(path, 8000, np.full(100, 32767, dtype=np.int16))
        clip = load_wav(path)
        np.testing.assert_allclose(clip.samples, 32767 / 32768, atol=1e-15)
        with wave.open(str(path), "rb") as w:
            raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        np.testing.assert_array_equal(clip.samples * 32768.0, raw.astype(np.float64))

    def test_float32_payload(self, tmp_path):
        x = rng.uniform(-0.5, 0.5, 500).astype(np.float32)
        _write_float32(tmp_path / "f.wav", 22050, x)
        clip = load_wav(tmp_path / "f.wav")
        np.testing.assert_allclose(clip.samples, x.astype(np.float64), atol=1e-9)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "absent.wav")

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(MalformedWavError):
            load_wav(p)

    def test_unsupported_codec(self, tmp_path):
        p = tmp_path / "u.wav"
        body = b"\x00" * 64
        header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
        header += b"fmt " + struct.pack("<IHHIIHH", 16, 7, 1, 8000, 8000, 1, 8)  # mu-law
        header += b"data" + struct.pack("<I", len(body))
        p.write_bytes(header + body)
        with pytest.raises(UnsupportedCodecError):
            load_wav(p)

    def test_round_trip_with_writer(self, tmp_path):
        x = rng.integers(-20000, 20000, 3000).astype(np.int16) / 32768.0
        clip = AudioClip(x, 16000, "rt")
        write_wav(tmp_path / "rt.wav", clip)
        back = load_wav(tmp_path / "rt.wav")
        np.testing.assert_array_equal(back.samples, x)


class TestResample:
    def test_length_ratio(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 44100), 44100, "a")
        out = resample(clip, 16000)
        assert out.samples.size == 16000
        assert out.sample_rate == 16000

    def test_identity_passthrough_bit_exact(self):
        x = rng.uniform(-0.9, 0.9, 5000)
        out = resample(AudioClip(x, 16000, "a"), 16000)
        np.testing.assert_array_equal(out.samples, x)

    def test_sine_against_analytic(self):
        sr = 48000
        x = 0.5 * np.sin(2 * np.pi * 440 * np.arange(sr) / sr)
        out = resample(AudioClip(x, sr, "s"), 16000)
        ref = 0.5 * np.sin(2 * np.pi * 440 * np.arange(out.samples.size) / 16000)
        edge = 400
        assert np.max(np.abs(out.samples[edge:-edge] - ref[edge:-edge])) < 1e-3

    def test_idempotent_at_target_rate(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 32000), 32000, "a")
        once = resample(clip, 16000)
        twice = resample(once, 16000)
        np.testing.assert_array_equal(once.samples, twice.samples)

    def test_energy_preserved_below_7khz(self):
        sr = 48000
        n = 2 * sr
        x = np.zeros(n)
        for f in (500, 1800, 3500, 5200, 6200, 6900):
            x += 0.1 * np.sin(2 * np.pi * f * np.arange(n) / sr + rng.uniform(0, 6))
        out = resample(AudioClip(x, sr, "e"), 16000)
        mid_in = x[sr // 2:-sr // 2]
        mid_out = out.samples[8000:-8000]
        e_in = np.sum(mid_in**2) / sr / (mid_in.size / sr)
        e_out = np.sum(mid_out**2) / 16000 / (mid_out.size / 16000)
        assert abs(e_out / e_in - 1.0) < 0.01

    def test_nonpositive_rate(self):
        with pytest.raises(ValueError):
            resample(AudioClip(np.zeros(10) + 0.1, 16000, "a"), 0)


class TestSliceWindows:
    def test_ten_seconds_gives_eight_windows(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 160000), 16000, "t")
        wins = slice_windows(clip, 3.0, 1.0)
        assert len(wins) == 8
        assert all(w.samples.size == 48000 for w in wins)

    def test_exact_window_boundary(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 48000), 16000, "t")
        assert len(slice_windows(clip, 3.0, 1.0)) == 1

    def test_fractional_duration(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 72000), 16000, "t")  # 4.5 s
        wins = slice_windows(clip, 3.0, 1.0)
        assert len(wins) == 2
        np.testing.assert_array_equal(wins[1].samples, clip.samples[16000:64000])

    def test_too_short_raises(self):
        clip = AudioClip(rng.uniform(-0.5, 0.5, 47999), 16000, "t")
        with pytest.raises(ClipTooShortError):
            slice_windows(clip, 3.0, 1.0)

    def test_count_matches_enumeration(self):
        for _ in range(25):
            n = int(rng.integers(48000, 400000))
            win = float(rng.uniform(0.5, 4.0))
            hop = float(rng.uniform(0.2, 2.0))
            clip = AudioClip(np.zeros(n) + 0.1, 16000, "t")
            win_n = int(round(win * 16000))
            hop_n = int(round(hop * 16000))
            if n < win_n:
                with pytest.raises(ClipTooShortError):
                    slice_windows(clip, win, hop)
                continue
            brute = sum(1 for s in range(0, n, hop_n) if s + win_n <= n)
            assert len(slice_windows(clip, win, hop)) == brute


class TestAudioClip:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            AudioClip(np.array([0.0, 1.5]), 16000, "x")

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            AudioClip(np.array([]), 16000, "x")
