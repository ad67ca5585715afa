"""Audio loading, resampling, and windowing.

Everything downstream consumes 16 kHz mono clips with samples in [-1, 1].
The WAV reader is deliberately small: RIFF/WAVE with 16-bit PCM or 32-bit
IEEE-float payloads, mono or stereo. Stereo is averaged to mono.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

TARGET_RATE = 16000

# Polyphase anti-alias filter: windowed sinc under a Kaiser window. 192 taps
# per phase keeps the transition band inside [7 kHz, 8 kHz] at 16 kHz out.
KAISER_BETA = 8.6
TAPS_PER_PHASE = 192


class MalformedWavError(ValueError):
    """File is not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(ValueError):
    """Container is valid but the payload encoding is not supported."""


class ClipTooShortError(ValueError):
    """Clip shorter than one analysis window."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("clip must hold at least one sample")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if np.any(np.abs(self.samples) > 1.0 + 1e-12):
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read a WAV file as a mono clip; stereo channels are averaged."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"not a RIFF/WAVE file: {path}")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError("fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise MalformedWavError("data chunk truncated")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWavError(f"missing fmt or data chunk: {path}")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels} channels not supported")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise MalformedWavError("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedCodecError(
            f"format {audio_format} at {bits} bits not supported (want PCM16 or float32)"
        )
    if samples.size == 0:
        raise MalformedWavError("empty data chunk")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples, int(sample_rate), source_id=str(path))


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(body))
    Path(path).write_bytes(header + body)


def resample(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Band-limited resample to `target_rate` (windowed-sinc polyphase).

    Output length is round(n * target / source). Resampling to the clip's
    own rate returns the samples bit-identically.
    """
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if clip.samples.size == 0:
        raise ValueError("empty clip")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), target_rate, clip.source_id)

    g = gcd(clip.sample_rate, target_rate)
    up = target_rate // g
    down = clip.sample_rate // g
    numtaps = TAPS_PER_PHASE * up + 1
    cutoff = min(1.0 / up, 1.0 / down)
    h = firwin(numtaps, cutoff, window=("kaiser", KAISER_BETA))
    out = resample_poly(clip.samples, up, down, window=h)
    n_out = int(round(clip.samples.size * target_rate / clip.sample_rate))
    out = out[:n_out]
    out = np.clip(out, -1.0, 1.0)
    return AudioClip(out, target_rate, clip.source_id)


def slice_windows(clip: AudioClip, win_seconds: float, hop_seconds: float) -> list[AudioClip]:
    """Cut the clip into fixed windows starting at 0, hop, 2*hop, ...

    Window count is floor((t - win) / hop) + 1. A clip shorter than one
    window raises ClipTooShortError; the caller decides any padding policy.
    """
    if win_seconds <= 0 or hop_seconds <= 0:
        raise ValueError("window and hop must be positive")
    win_n = int(round(win_seconds * clip.sample_rate))
    hop_n = int(round(hop_seconds * clip.sample_rate))
    n = clip.samples.size
    if n < win_n:
        raise ClipTooShortError(
            f"clip of {clip.duration:.3f}s shorter than {win_seconds}s window"
        )
    count = (n - win_n) // hop_n + 1
    windows = []
    for i in range(count):
        start = i * hop_n
        windows.append(
            AudioClip(
                clip.samples[start:start + win_n].copy(),
                clip.sample_rate,
                source_id=f"{clip.source_id}#w{i}",
            )
        )
    return windows
