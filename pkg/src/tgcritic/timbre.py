"""Timbre embeddings: per-window vectors, validity filtering, aggregation.

A timbregram holds one 256-dim embedding per 3-second window (hop 1 s), so
a t-second clip yields t-2 rows. Windows whose voiced-frame fraction falls
below 70% are flagged invalid and excluded from normalization statistics
and from the final mean||variance aggregate (512 dims).

Embeddings come from a pluggable provider. The bundled stub is a
deterministic spectral-statistics embedder; adapters can also ingest
pre-computed embeddings from JSON-lines files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, slice_windows

EMBED_DIM = 256
WINDOW_SECONDS = 3.0
HOP_SECONDS = 1.0
WINDOW_RATE = 16000
VALID_VOICING = 0.70

# Raw spectral statistics laid out in the stub's feature vector.
N_BANDS = 32
STATS_DIM = 3 * N_BANDS + 12
_FLATNESS_SLICE = slice(3 * N_BANDS + 8, 3 * N_BANDS + 12)

TIMBRE_PROJECTION_SEED = 0x7C0A5

_VAD_FRAME = 400  # 25 ms at 16 kHz
_VAD_HOP = 160  # 10 ms
_VAD_FLOOR_DB = -35.0


class WindowError(ValueError):
    """Embedding window has the wrong length or rate."""


class NoValidRowsError(ValueError):
    """Every row of the timbregram failed the voicing filter."""


@dataclass
class TimbreEmbedding:
    vector: np.ndarray
    window_start: float
    valid: bool

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must be ({EMBED_DIM},), got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding must be finite")


@dataclass
class Timbregram:
    rows: list

    def __post_init__(self):
        starts = [r.window_start for r in self.rows]
        if starts != sorted(starts):
            raise ValueError("rows must be ordered by window start")

    def __len__(self):
        return len(self.rows)

    def valid_matrix(self) -> np.ndarray:
        vecs = [r.vector for r in self.rows if r.valid]
        if not vecs:
            raise NoValidRowsError("no valid rows in timbregram")
        return np.stack(vecs)


@dataclass
class TimbreVector:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (2 * EMBED_DIM,):
            raise ValueError(f"timbre vector must be ({2 * EMBED_DIM},)")
        if np.any(self.vector[EMBED_DIM:] < -1e-12):
            raise ValueError("variance half must be nonnegative")

    @property
    def mean(self) -> np.ndarray:
        return self.vector[:EMBED_DIM]

    @property
    def variance(self) -> np.ndarray:
        return self.vector[EMBED_DIM:]


def zero_timbre_vector() -> TimbreVector:
    """Fallback input for clips with no usable timbre windows."""
    return TimbreVector(np.zeros(2 * EMBED_DIM))


def _check_window(window: AudioClip):
    if window.sample_rate != WINDOW_RATE:
        raise WindowError(f"window must be at {WINDOW_RATE} Hz, got {window.sample_rate}")
    if window.samples.size != int(WINDOW_SECONDS * WINDOW_RATE):
        raise WindowError(
            f"window must be exactly {WINDOW_SECONDS}s "
            f"({int(WINDOW_SECONDS * WINDOW_RATE)} samples), got {window.samples.size}"
        )


def voicing_ratio(window: AudioClip) -> float:
    """Fraction of 25 ms frames (10 ms hop) within 35 dB of the loudest frame.

    Digital silence returns 0.
    """
    x = window.samples
    if x.size < _VAD_FRAME:
        frames = x[None, :]
    else:
        n_frames = 1 + (x.size - _VAD_FRAME) // _VAD_HOP
        idx = np.arange(n_frames)[:, None] * _VAD_HOP + np.arange(_VAD_FRAME)
        frames = x[idx]
    rms = np.sqrt(np.mean(frames**2, axis=1))
    peak = rms.max()
    if peak < 1e-9:
        return 0.0
    threshold = peak * 10.0 ** (_VAD_FLOOR_DB / 20.0)
    return float(np.mean(rms > threshold))


def spectral_stats(window: AudioClip) -> np.ndarray:
    """Raw statistics vector behind the stub embedder (108 dims).

    Layout: 32 log-energy band means, 32 log-energy band variances,
    32 rectified spectral-flux band means, then centroid/rolloff ratios for
    4 sub-windows followed by flatness for the same 4 sub-windows.
    """
    _check_window(window)
    x = window.samples
    frame, hop = 512, 256
    n_frames = 1 + (x.size - frame) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame)
    frames = x[idx] * np.hanning(frame)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # (n_frames, 257)
    spec = power[:, 1:]  # drop DC -> 256 bins
    bands = spec.reshape(n_frames, N_BANDS, -1).mean(axis=2)

    log_bands = np.log(bands + 1e-30)
    feat_mean = log_bands.mean(axis=0)
    feat_var = log_bands.var(axis=0)
    flux = np.maximum(bands[1:] - bands[:-1], 0.0)
    feat_flux = flux.mean(axis=0)

    centroids, rolloffs, flatnesses = [], [], []
    bin_frac = np.arange(1, 257) / 256.0
    for chunk in np.array_split(spec, 4, axis=0):
        p = chunk.mean(axis=0)
        total = p.sum()
        if total < 1e-30:
            centroids.append(0.0)
            rolloffs.append(0.0)
            flatnesses.append(0.0)
            continue
        centroids.append(float((bin_frac * p).sum() / total))
        cum = np.cumsum(p)
        roll_idx = min(int(np.searchsorted(cum, 0.85 * total)), bin_frac.size - 1)
        rolloffs.append(float(bin_frac[roll_idx]))
        flatnesses.append(float(np.exp(np.mean(np.log(p + 1e-30))) / (p.mean() + 1e-30)))
    return np.concatenate([feat_mean, feat_var, feat_flux, centroids, rolloffs, flatnesses])


def _projection_matrix() -> np.ndarray:
    rng = np.random.default_rng(TIMBRE_PROJECTION_SEED)
    a = rng.standard_normal((EMBED_DIM, EMBED_DIM))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


class StubEmbedder:
    """Deterministic stand-in for a pretrained timbre embedding model.

    Spectral statistics are zero-padded to 256 dims and rotated by a fixed
    seeded orthogonal matrix, so identical windows always map to identical
    vectors and no training is involved.
    """

    def __init__(self):
        self._projection = _projection_matrix()

    def embed(self, window: AudioClip) -> np.ndarray:
        stats = spectral_stats(window)
        padded = np.zeros(EMBED_DIM)
        padded[:STATS_DIM] = stats
        return self._projection @ padded


class JsonlEmbeddings:
    """Pre-computed embeddings: one JSON object per window.

    Each line carries {"start_s": float, "valid": bool, "vec": [256 floats]}.
    """

    def __init__(self, path):
        self.rows = load_timbregram_jsonl(path).rows
        self._by_start = {round(r.window_start, 6): r for r in self.rows}

    def embed_at(self, start_s: float) -> TimbreEmbedding:
        key = round(start_s, 6)
        if key not in self._by_start:
            raise KeyError(f"no precomputed embedding at {start_s}s")
        return self._by_start[key]


def build_timbregram(clip: AudioClip, provider) -> Timbregram:
    """One embedding row per 3 s window (hop 1 s); rows failing the 70%
    voicing criterion are flagged invalid."""
    windows = slice_windows(clip, WINDOW_SECONDS, HOP_SECONDS)
    rows = []
    for i, window in enumerate(windows):
        vec = provider.embed(window)
        rows.append(
            TimbreEmbedding(
                vector=vec,
                window_start=i * HOP_SECONDS,
                valid=voicing_ratio(window) >= VALID_VOICING,
            )
        )
    return Timbregram(rows)


def minmax_normalize(gram: Timbregram) -> Timbregram:
    """Per-dimension min-max over the valid rows; flat dimensions map to 0."""
    stats = gram.valid_matrix()
    lo = stats.min(axis=0)
    hi = stats.max(axis=0)
    span = hi - lo
    flat = span < 1e-300
    span = np.where(flat, 1.0, span)
    rows = []
    for r in gram.rows:
        v = (r.vector - lo) / span
        v[flat] = 0.0
        rows.append(TimbreEmbedding(v, r.window_start, r.valid))
    return Timbregram(rows)


def aggregate(gram: Timbregram) -> TimbreVector:
    """Mean (dims 0-255) and population variance (dims 256-511) over the
    valid rows."""
    stats = gram.valid_matrix()
    return TimbreVector(np.concatenate([stats.mean(axis=0), stats.var(axis=0)]))


def clip_timbre_vector(clip: AudioClip, provider) -> TimbreVector:
    """Full per-clip pipeline: timbregram, min-max normalize, aggregate."""
    return aggregate(minmax_normalize(build_timbregram(clip, provider)))


def save_timbregram_jsonl(path, gram: Timbregram) -> None:
    with open(path, "w") as fh:
        for r in gram.rows:
            fh.write(
                json.dumps(
                    {"start_s": r.window_start, "valid": bool(r.valid), "vec": r.vector.tolist()}
                )
                + "\n"
            )


def load_timbregram_jsonl(path) -> Timbregram:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rows.append(TimbreEmbedding(np.array(obj["vec"]), float(obj["start_s"]), bool(obj["valid"])))
    return Timbregram(rows)


def save_timbre_vector_json(path, tv: TimbreVector, meta=None) -> None:
    obj = {"vector": tv.vector.tolist()}
    if meta:
        obj.update(meta)
    Path(path).write_text(json.dumps(obj))


def load_timbre_vector_json(path) -> TimbreVector:
    obj = json.loads(Path(path).read_text())
    return TimbreVector(np.array(obj["vector"]))
