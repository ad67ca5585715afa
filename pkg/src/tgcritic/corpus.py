"""Synthetic singing corpus with hidden ground truth.

Each sample is an 8.192 s harmonic "vocal" whose hidden quality class
drives per-note pitch error, background noise floor, and amplitude
instability. Metadata (intonation/rhythm scores, likes, comments) is a
noisy monotone function of quality, with likes/comments additionally
driven by a popularity confounder that is independent of quality — so
metadata alone cannot label the pool reliably.

Generation is fully deterministic in (master_seed, sample index): the same
seed always yields a byte-identical corpus, and audio can be regenerated
lazily instead of being held in memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip

QUALITY_CLASSES = ("A", "M", "I")
LABEL_TO_INDEX = {"A": 0, "M": 1, "I": 2}

SAMPLE_RATE = 16000
AUDIO_SAMPLES = 131072  # 8.192 s -> 257 CQT frames at hop 512
N_NOTES = 10
NOTE_SAMPLES = AUDIO_SAMPLES // N_NOTES

CLASS_PROFILES = {
    "A": {"pitch_sigma_cents": 8.0, "snr_db": 45.0, "amp_wobble": 0.04},
    "M": {"pitch_sigma_cents": 40.0, "snr_db": 28.0, "amp_wobble": 0.16},
    "I": {"pitch_sigma_cents": 95.0, "snr_db": 14.0, "amp_wobble": 0.40},
}

_QUALITY_LEVEL = {"A": 1.0, "M": 0.5, "I": 0.0}


@dataclass
class MetadataRecord:
    sample_id: str
    intonation_score: float
    rhythm_score: float
    likes: int
    comments: int
    popularity_confounder: float

    def __post_init__(self):
        if self.likes < 0 or self.comments < 0:
            raise ValueError("counts must be nonnegative")
        for v in (self.intonation_score, self.rhythm_score, self.popularity_confounder):
            if not np.isfinite(v):
                raise ValueError("metadata values must be finite")


@dataclass
class LabeledSample:
    sample_id: str
    metadata: MetadataRecord
    audio_path: str | None = None
    label: str | None = None
    label_source: str | None = None

    def __post_init__(self):
        if (self.label is None) != (self.label_source is None):
            raise ValueError("label and label_source must be set together")
        if self.label is not None and self.label not in QUALITY_CLASSES:
            raise ValueError(f"unknown label {self.label!r}")


def midi_to_hz(midi) -> float:
    return 440.0 * 2.0 ** ((np.asarray(midi) - 69) / 12.0)


def _smooth_noise(rng, n, control_every, scale):
    """Piecewise-linear noise from control points spaced `control_every`."""
    n_ctrl = max(2, n // control_every + 2)
    ctrl = rng.normal(0.0, scale, n_ctrl)
    return np.interp(np.arange(n), np.arange(n_ctrl) * control_every, ctrl)


def synth_vocal(seed, quality):
    """Generate one clip; returns (samples, note_midis).

    Pitch: a random walk of equal-tempered notes, each sung with a
    per-note error ~ N(0, class sigma cents) plus a 5.5 Hz / 6 cent
    vibrato. Timbre: five harmonics with 1/h^1.1 roll-off. The class also
    sets the additive-noise SNR and a slow amplitude wobble.
    """
    rng = np.random.default_rng(seed)
    profile = CLASS_PROFILES[quality]

    midis = [int(rng.integers(52, 68))]
    for _ in range(N_NOTES - 1):
        step = int(rng.integers(-4, 5))
        midis.append(int(np.clip(midis[-1] + step, 50, 70)))
    cents_err = rng.normal(0.0, profile["pitch_sigma_cents"], N_NOTES)

    def per_sample(values):
        tiled = np.repeat(values, NOTE_SAMPLES)
        return np.pad(tiled, (0, AUDIO_SAMPLES - tiled.size), mode="edge")

    t = np.arange(AUDIO_SAMPLES) / SAMPLE_RATE
    f0 = per_sample(midi_to_hz(np.array(midis)))
    cents = per_sample(cents_err)
    vibrato = 6.0 * np.sin(2 * np.pi * 5.5 * t + rng.uniform(0, 2 * np.pi))
    freq = f0 * 2.0 ** ((cents + vibrato) / 1200.0)
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE

    wave = np.zeros(AUDIO_SAMPLES)
    for h in range(1, 6):
        wave += h ** (-1.1) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # per-note level + attack/decay ramps (10 ms), then a slow wobble
    ramp = np.minimum(np.arange(NOTE_SAMPLES) / (0.010 * SAMPLE_RATE), 1.0)
    note_env = ramp * ramp[::-1]
    levels = np.clip(1.0 + profile["amp_wobble"] * rng.normal(0, 1, N_NOTES), 0.35, 1.8)
    envelope = per_sample(levels) * np.pad(
        np.tile(note_env, N_NOTES), (0, AUDIO_SAMPLES - N_NOTES * NOTE_SAMPLES), mode="edge"
    )
    envelope *= 1.0 + profile["amp_wobble"] * np.tanh(
        _smooth_noise(rng, AUDIO_SAMPLES, SAMPLE_RATE // 4, 1.0)
    )
    wave *= envelope

    signal_rms = np.sqrt(np.mean(wave**2))
    noise = rng.normal(0.0, 1.0, AUDIO_SAMPLES)
    noise *= signal_rms * 10.0 ** (-profile["snr_db"] / 20.0) / np.sqrt(np.mean(noise**2))
    wave += noise
    wave *= 0.85 / np.max(np.abs(wave))
    return wave, midis


def _make_metadata(rng, sample_id, quality) -> MetadataRecord:
    s = _QUALITY_LEVEL[quality]
    conf = rng.normal()
    return MetadataRecord(
        sample_id=sample_id,
        intonation_score=float(np.clip(55.0 + 35.0 * s + rng.normal(0, 14.0), 0, 100)),
        rhythm_score=float(np.clip(58.0 + 27.0 * s + rng.normal(0, 16.0), 0, 100)),
        likes=int(rng.poisson(np.exp(2.0 + 1.2 * s + 0.9 * conf))),
        comments=int(rng.poisson(np.exp(0.7 + 1.0 * s + 0.9 * conf))),
        popularity_confounder=float(conf),
    )


class SynthCorpus:
    """Seed set (manually labeled) plus unlabeled pool with hidden truth."""

    def __init__(self, master_seed, seed_set, pool, hidden, audio_seeds):
        self.master_seed = master_seed
        self.seed_set = seed_set
        self.pool = pool
        self.hidden = hidden  # sample_id -> true class (pool and seed)
        self._audio_seeds = audio_seeds

    def audio(self, sample_id) -> AudioClip:
        seed, quality = self._audio_seeds[sample_id]
        samples, _ = synth_vocal(seed, quality)
        return AudioClip(samples, SAMPLE_RATE, source_id=sample_id)

    def note_grid(self, sample_id):
        """Nominal (start_s, end_s, midi) grid, without the sung errors."""
        seed, quality = self._audio_seeds[sample_id]
        _, midis = synth_vocal(seed, quality)
        dt = NOTE_SAMPLES / SAMPLE_RATE
        return [(i * dt, (i + 1) * dt, m) for i, m in enumerate(midis)]

    @property
    def all_samples(self):
        return list(self.seed_set) + list(self.pool)


def synth_corpus(master_seed: int, n_seed: int = 90, n_pool: int = 900) -> SynthCorpus:
    """Deterministic corpus: `n_seed` labeled rows and `n_pool` hidden ones."""
    if n_seed < 3:
        raise ValueError("need at least one seed sample per class")
    seed_set, pool = [], []
    hidden, audio_seeds = {}, {}
    for i in range(n_seed + n_pool):
        quality = QUALITY_CLASSES[i % 3]
        in_seed = i < n_seed
        sample_id = f"{'seed' if in_seed else 'pool'}-{i:05d}"
        meta_seed, audio_seed = np.random.SeedSequence((master_seed, i)).spawn(2)
        record = _make_metadata(np.random.default_rng(meta_seed), sample_id, quality)
        hidden[sample_id] = quality
        audio_seeds[sample_id] = (audio_seed, quality)
        if in_seed:
            seed_set.append(
                LabeledSample(sample_id, record, label=quality, label_source="manual")
            )
        else:
            pool.append(LabeledSample(sample_id, record))
    return SynthCorpus(master_seed, seed_set, pool, hidden, audio_seeds)


# -- manifest files ----------------------------------------------------------


def save_manifest(samples, path) -> None:
    """JSON-lines: {sample_id, audio_path, label, label_source, metadata{...}}."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "sample_id": s.sample_id,
                        "audio_path": s.audio_path,
                        "label": s.label,
                        "label_source": s.label_source,
                        "metadata": {
                            "intonation_score": s.metadata.intonation_score,
                            "rhythm_score": s.metadata.rhythm_score,
                            "likes": s.metadata.likes,
                            "comments": s.metadata.comments,
                            "popularity_confounder": s.metadata.popularity_confounder,
                        },
                    }
                )
                + "\n"
            )


def load_manifest(path) -> list:
    samples = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        md = obj["metadata"]
        samples.append(
            LabeledSample(
                sample_id=obj["sample_id"],
                metadata=MetadataRecord(
                    sample_id=obj["sample_id"],
                    intonation_score=md["intonation_score"],
                    rhythm_score=md["rhythm_score"],
                    likes=md["likes"],
                    comments=md["comments"],
                    popularity_confounder=md.get("popularity_confounder", 0.0),
                ),
                audio_path=obj.get("audio_path"),
                label=obj.get("label"),
                label_source=obj.get("label_source"),
            )
        )
    return samples
