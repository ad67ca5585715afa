"""Constant-Q transform with geometrically spaced bins.

96 bins, 24 per octave, from E2 (four octaves), hop 512 at 16 kHz. Frames
are centered at n*hop via zero-padding, so a clip of n samples yields
T = 1 + n//hop frames. The transform runs as one FFT per frame multiplied
against sparsified spectral kernels; that equals direct time-domain
correlation with the (Hann-windowed, L1-normalized) complex kernels by
Parseval, which the tests exploit as an oracle.

Values are log-compressed magnitudes: log(1 + |X| / 1e-4).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix

from .audio import AudioClip

E2_HZ = 440.0 * 2.0 ** (-29.0 / 12.0)

CACHE_MAGIC = b"TGCQ"
CACHE_DTYPE_F32 = 1

MAX_FFT_LEN = 1 << 15


class CqtConfigError(ValueError):
    pass


class SampleRateError(ValueError):
    pass


class ShortClipError(ValueError):
    pass


@dataclass(frozen=True)
class CqtParams:
    sample_rate: int = 16000
    hop: int = 512
    n_bins: int = 96
    bins_per_octave: int = 24
    f_min: float = E2_HZ
    log_eps: float = 1e-4

    def __post_init__(self):
        if min(self.sample_rate, self.hop, self.n_bins, self.bins_per_octave) <= 0:
            raise CqtConfigError("all CQT parameters must be positive")
        if self.bin_frequency(self.n_bins - 1) >= self.sample_rate / 2:
            raise CqtConfigError("highest bin reaches past Nyquist")

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def bin_frequency(self, k) -> float:
        return self.f_min * 2.0 ** (np.asarray(k) / self.bins_per_octave)

    def kernel_length(self, k) -> int:
        return int(np.ceil(self.q_factor * self.sample_rate / self.bin_frequency(k)))

    def digest(self) -> str:
        return (
            f"sr{self.sample_rate}_hop{self.hop}_b{self.n_bins}"
            f"_bpo{self.bins_per_octave}_f{self.f_min:.6f}_e{self.log_eps:g}"
        )


@dataclass
class CqtMatrix:
    """Log-compressed magnitude grid, shaped (frames, bins)."""

    values: np.ndarray
    hop_seconds: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("CQT values must be 2-d (frames, bins)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("CQT values must be finite")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


class KernelBank:
    """Immutable per-bin kernels: time-domain and sparse spectral forms."""

    def __init__(self, params: CqtParams, sparsity_threshold: float = 1e-9):
        self.params = params
        longest = params.kernel_length(0)
        fft_len = 1
        while fft_len < longest:
            fft_len *= 2
        if fft_len > MAX_FFT_LEN:
            raise CqtConfigError(
                f"kernel of {longest} samples exceeds FFT budget {MAX_FFT_LEN}"
            )
        self.fft_len = fft_len
        self.time_kernels = []
        spectral = np.zeros((params.n_bins, fft_len), dtype=np.complex128)
        for k in range(params.n_bins):
            n_k = params.kernel_length(k)
            window = np.hanning(n_k)
            idx = np.arange(n_k) - (n_k - 1) / 2.0
            kernel = window * np.exp(
                2j * np.pi * params.bin_frequency(k) * idx / params.sample_rate
            )
            kernel /= np.sum(np.abs(kernel))
            self.time_kernels.append(kernel)
            padded = np.zeros(fft_len, dtype=np.complex128)
            off = (fft_len - n_k) // 2
            padded[off:off + n_k] = kernel
            spectral[k] = np.fft.fft(padded)
        mags = np.abs(spectral)
        keep = mags >= sparsity_threshold * mags.max(axis=1, keepdims=True)
        self.spectral_conj = csr_matrix(np.where(keep, np.conj(spectral), 0.0))

    def kernel_offset(self, k: int) -> int:
        return (self.fft_len - len(self.time_kernels[k])) // 2


def build_kernels(params: CqtParams) -> KernelBank:
    return KernelBank(params)


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def compute_cqt(clip: AudioClip, params: CqtParams, bank: KernelBank | None = None) -> CqtMatrix:
    """Transform a clip into its log-compressed constant-Q magnitude grid."""
    if clip.sample_rate != params.sample_rate:
        raise SampleRateError(
            f"clip at {clip.sample_rate} Hz, CQT configured for {params.sample_rate} Hz"
        )
    if bank is None:
        bank = build_kernels(params)
    n = clip.samples.size
    if n < params.kernel_length(0):
        raise ShortClipError(
            f"clip of {n} samples shorter than longest kernel "
            f"({params.kernel_length(0)} samples)"
        )
    fft_len = bank.fft_len
    half = fft_len // 2
    padded = np.concatenate([np.zeros(half), clip.samples, np.zeros(half)])
    t_frames = frame_count(n, params.hop)
    frames = np.empty((t_frames, fft_len), dtype=np.float64)
    for i in range(t_frames):
        start = i * params.hop
        frames[i] = padded[start:start + fft_len]
    spectra = np.fft.fft(frames, axis=1)
    coeffs = bank.spectral_conj.dot(spectra.T).T / fft_len
    mags = np.abs(coeffs)
    values = np.log1p(mags / params.log_eps)
    return CqtMatrix(values, params.hop / params.sample_rate)


def frame_window(cqt: CqtMatrix, start_frame: int, length: int = 256) -> CqtMatrix:
    """Contiguous crop of `length` frames starting at `start_frame`."""
    if start_frame < 0 or length < 1 or start_frame + length > cqt.frames:
        raise IndexError(
            f"crop [{start_frame}, {start_frame + length}) outside 0..{cqt.frames}"
        )
    return CqtMatrix(cqt.values[start_frame:start_frame + length].copy(), cqt.hop_seconds)


def normalize_values(values: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """log(1 + v/eps) then per-matrix standardization; constants map to 0."""
    v = np.log1p(values / eps)
    std = v.std()
    if std < 1e-12:
        return np.zeros_like(v)
    v -= v.mean()
    v /= std
    return v


def normalize(cqt: CqtMatrix, eps: float = 1e-4) -> CqtMatrix:
    """Log-compress and standardize to zero mean / unit variance.

    Constant inputs (all values equal) map to all-zeros.
    """
    return CqtMatrix(normalize_values(cqt.values, eps), cqt.hop_seconds)


def save_cqt_cache(path, cqt: CqtMatrix) -> None:
    """Binary cache: 16-byte header (magic, T, bins, dtype code) + f32 rows."""
    header = CACHE_MAGIC + struct.pack("<III", cqt.frames, cqt.bins, CACHE_DTYPE_F32)
    Path(path).write_bytes(header + cqt.values.astype("<f4").tobytes())


def load_cqt_cache(path, hop_seconds: float = 512 / 16000) -> CqtMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise ValueError(f"not a CQT cache file: {path}")
    t_frames, bins, dtype_code = struct.unpack("<III", raw[4:16])
    if dtype_code != CACHE_DTYPE_F32:
        raise ValueError(f"unknown cache dtype code {dtype_code}")
    expect = 16 + 4 * t_frames * bins
    if len(raw) != expect:
        raise ValueError(f"cache size {len(raw)} != expected {expect}")
    values = np.frombuffer(raw[16:], dtype="<f4").reshape(t_frames, bins)
    return CqtMatrix(values.astype(np.float64), hop_seconds)
