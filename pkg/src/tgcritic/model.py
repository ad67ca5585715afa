"""The two-branch singing quality network.

The high-resolution branch keeps a full-time-resolution stream alongside
T/2 and T/4 streams. Each of three stages convolves every stream (3x3,
ELU), halves the frequency axis (96 -> 48 -> 24 -> 12), and then exchanges
information across streams (rescale along time, concatenate, 1x1 conv,
ELU). After the stages, the streams are merged at full resolution, the
(T, 12, 64) map is flattened to (T, 768), a length-5 1D convolution brings
it to 64 channels, and global average pooling yields a 64-dim vector.

The timbre branch maps the 512-dim mean||variance timbre vector through
two dense+ELU layers to 64 dims. The fusion head concatenates both
vectors, applies dense+ELU, and classifies into three quality classes
with a final dense+softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import nn
from .cqt import CqtMatrix, frame_window, normalize

N_CLASSES = 3
WINDOW_FRAMES = 256
CURVE_HOP_FRAMES = 64
RESHAPE_WIDTH = 768


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HrConfig:
    """High-resolution branch layout.

    The product of `freq_pool` must take `input_bins` down to
    `input_bins / prod(freq_pool)` bins such that bins * fusion_channels
    equals the fixed reshape width of 768.
    """

    time_scales: tuple = (1, 2, 4)
    stage_channels: tuple = (16, 32, 64)
    freq_pool: tuple = (2, 2, 2)
    convs_per_scale: int = 2
    input_bins: int = 96
    fusion_channels: int = 64
    conv1d_kernel: int = 5
    conv1d_channels: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != len(self.freq_pool):
            raise ModelConfigError("one pooling factor per stage required")
        if self.convs_per_scale < 1:
            raise ModelConfigError("need at least one conv per scale")
        final_bins = self.input_bins
        for p in self.freq_pool:
            if final_bins % p != 0:
                raise ModelConfigError("frequency axis must divide evenly per stage")
            final_bins //= p
        if final_bins * self.fusion_channels != RESHAPE_WIDTH:
            raise ModelConfigError(
                f"final bins ({final_bins}) x fusion channels "
                f"({self.fusion_channels}) must equal {RESHAPE_WIDTH}"
            )
        for d in self.time_scales:
            if WINDOW_FRAMES % d != 0:
                raise ModelConfigError(f"scale divisor {d} must divide {WINDOW_FRAMES}")

    @property
    def final_bins(self) -> int:
        return self.input_bins // prod(self.freq_pool)


@dataclass(frozen=True)
class ModelConfig:
    hr: HrConfig = field(default_factory=HrConfig)
    timbre_hidden: int = 256
    head_hidden: int = 64
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "hr": {
                    "time_scales": list(self.hr.time_scales),
                    "stage_channels": list(self.hr.stage_channels),
                    "freq_pool": list(self.hr.freq_pool),
                    "convs_per_scale": self.hr.convs_per_scale,
                    "input_bins": self.hr.input_bins,
                    "fusion_channels": self.hr.fusion_channels,
                    "conv1d_kernel": self.hr.conv1d_kernel,
                    "conv1d_channels": self.hr.conv1d_channels,
                },
                "timbre_hidden": self.timbre_hidden,
                "head_hidden": self.head_hidden,
                "seed": self.seed,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        obj = json.loads(text)
        hr = obj["hr"]
        return ModelConfig(
            hr=HrConfig(
                time_scales=tuple(hr["time_scales"]),
                stage_channels=tuple(hr["stage_channels"]),
                freq_pool=tuple(hr["freq_pool"]),
                convs_per_scale=hr["convs_per_scale"],
                input_bins=hr["input_bins"],
                fusion_channels=hr["fusion_channels"],
                conv1d_kernel=hr["conv1d_kernel"],
                conv1d_channels=hr["conv1d_channels"],
            ),
            timbre_hidden=obj["timbre_hidden"],
            head_hidden=obj["head_hidden"],
            seed=obj["seed"],
        )


@dataclass(frozen=True)
class ClassProbs:
    """Probability triple over (awesome, mediocre, inferior)."""

    p_awesome: float
    p_mediocre: float
    p_inferior: float

    def __post_init__(self):
        vals = (self.p_awesome, self.p_mediocre, self.p_inferior)
        if any(v < -1e-12 or v > 1 + 1e-12 for v in vals):
            raise ValueError("probabilities must lie in [0,1]")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {sum(vals)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_awesome, self.p_mediocre, self.p_inferior])

    @staticmethod
    def from_array(a) -> "ClassProbs":
        """Build from a softmax output; renormalizes away float32 rounding."""
        a = np.asarray(a, dtype=np.float64)
        total = a.sum()
        if not 0.99 < total < 1.01:
            raise ValueError(f"not a probability triple (sum {total})")
        a = a / total
        return ClassProbs(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class EvaluationCurve:
    """Per-window class probabilities over a full recording."""

    points: list  # (window_start_frame, ClassProbs)
    hop_seconds: float = 512 / 16000

    def __post_init__(self):
        starts = [s for s, _ in self.points]
        if starts != sorted(starts):
            raise ValueError("curve points must be ordered by start frame")

    def __len__(self):
        return len(self.points)

    def probs_matrix(self) -> np.ndarray:
        return np.stack([p.as_array() for _, p in self.points])


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class TgCritic:
    """Built model: parameters plus the forward graph."""

    def __init__(self, config: ModelConfig | None = None, dtype=np.float64):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = np.random.default_rng(self.config.seed)
        hr = self.config.hr

        cin = 1
        bins = hr.input_bins
        for s, (cout, pool) in enumerate(zip(hr.stage_channels, hr.freq_pool)):
            for v in range(len(hr.time_scales)):
                c_prev = cin
                for j in range(hr.convs_per_scale):
                    self._add_conv2d(rng, f"hr/stage{s}/scale{v}/conv{j}", c_prev, cout)
                    c_prev = cout
                n_sources = len(hr.time_scales) * cout
                self._add_conv1x1(rng, f"hr/stage{s}/scale{v}/exchange", n_sources, cout)
            cin = cout
            bins //= pool
        self._add_conv1x1(
            rng, "hr/final_fusion", len(hr.time_scales) * cin, hr.fusion_channels
        )
        self._add_param(
            rng,
            "hr/conv1d/w",
            (hr.conv1d_kernel, RESHAPE_WIDTH, hr.conv1d_channels),
            fan_in=hr.conv1d_kernel * RESHAPE_WIDTH,
        )
        self._add_bias("hr/conv1d/b", hr.conv1d_channels)

        th = self.config.timbre_hidden
        self._add_param(rng, "timbre/dense0/w", (512, th), fan_in=512)
        self._add_bias("timbre/dense0/b", th)
        self._add_param(rng, "timbre/dense1/w", (th, 64), fan_in=th)
        self._add_bias("timbre/dense1/b", 64)

        hh = self.config.head_hidden
        self._add_param(rng, "head/dense0/w", (128, hh), fan_in=128)
        self._add_bias("head/dense0/b", hh)
        # Small classifier init: a fresh model predicts near-uniformly while
        # still passing gradient to the trunk on the first step.
        wname = "head/dense1/w"
        self.params[wname] = nn.Parameter(
            0.01 * rng.standard_normal((hh, N_CLASSES)).astype(self.dtype), wname
        )
        self._add_bias("head/dense1/b", N_CLASSES)

    def _add_param(self, rng, name, shape, fan_in):
        self.params[name] = nn.Parameter(
            _he_uniform(rng, shape, fan_in, self.dtype), name
        )

    def _add_bias(self, name, size):
        self.params[name] = nn.Parameter(np.zeros(size, dtype=self.dtype), name)

    def _add_conv2d(self, rng, prefix, cin, cout):
        self._add_param(rng, f"{prefix}/w", (3, 3, cin, cout), fan_in=9 * cin)
        self._add_bias(f"{prefix}/b", cout)

    def _add_conv1x1(self, rng, prefix, cin, cout):
        self._add_param(rng, f"{prefix}/w", (1, 1, cin, cout), fan_in=cin)
        self._add_bias(f"{prefix}/b", cout)

    # -- forward pieces ----------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def multiscale_stage(self, feats, stage):
        """One stage: per-scale convs, frequency pooling, cross-scale exchange."""
        hr = self.config.hr
        pool = hr.freq_pool[stage]
        convolved = []
        for v, feat in enumerate(feats):
            h = feat
            h = nn.elu(nn.conv2d(h, self._p(f"hr/stage{stage}/scale{v}/conv0/w"),
                                 self._p(f"hr/stage{stage}/scale{v}/conv0/b")))
            h = nn.avg_pool(h, "freq", pool)
            for j in range(1, hr.convs_per_scale):
                h = nn.elu(nn.conv2d(h, self._p(f"hr/stage{stage}/scale{v}/conv{j}/w"),
                                     self._p(f"hr/stage{stage}/scale{v}/conv{j}/b")))
            convolved.append(h)
        outputs = []
        divisors = hr.time_scales
        for v in range(len(divisors)):
            gathered = []
            for u, src in enumerate(convolved):
                ratio = divisors[v] // divisors[u] if divisors[v] >= divisors[u] else 0
                if divisors[u] == divisors[v]:
                    gathered.append(src)
                elif divisors[v] > divisors[u]:
                    gathered.append(nn.avg_pool(src, "time", ratio))
                else:
                    gathered.append(nn.upsample_nearest(src, divisors[u] // divisors[v]))
            merged = nn.concat(gathered, axis=-1)
            out = nn.elu(nn.conv1x1(merged, self._p(f"hr/stage{stage}/scale{v}/exchange/w"),
                                    self._p(f"hr/stage{stage}/scale{v}/exchange/b")))
            outputs.append(out)
        return outputs

    def hr_forward(self, cqt):
        """CQT window(s) (T,96,1) or (B,T,96,1) -> 64-dim vector(s)."""
        x = nn.as_tensor(cqt, dtype=self.dtype)
        if not isinstance(cqt, nn.Tensor):
            x.requires_grad = False  # data input, no gradient needed
        batched = x.ndim == 4
        t_frames = x.shape[1] if batched else x.shape[0]
        if t_frames % 4 != 0:
            raise nn.ShapeError(f"time frames must be a multiple of 4, got {t_frames}")
        if x.shape[-1] != 1 or x.shape[-2] != self.config.hr.input_bins:
            raise nn.ShapeError(f"expected (...,{self.config.hr.input_bins},1), got {x.shape}")
        hr = self.config.hr
        feats = [x]
        for a, b in zip(hr.time_scales, hr.time_scales[1:]):
            feats.append(nn.avg_pool(feats[-1], "time", b // a))
        for stage in range(len(hr.stage_channels)):
            feats = self.multiscale_stage(feats, stage)
        full = [feats[0]]
        for v in range(1, len(feats)):
            full.append(nn.upsample_nearest(feats[v], hr.time_scales[v]))
        merged = nn.concat(full, axis=-1)
        fused = nn.elu(nn.conv1x1(merged, self._p("hr/final_fusion/w"),
                                  self._p("hr/final_fusion/b")))
        if batched:
            flat_shape = (fused.shape[0], t_frames, RESHAPE_WIDTH)
        else:
            flat_shape = (t_frames, RESHAPE_WIDTH)
        flat = nn.reshape(fused, flat_shape)
        seq = nn.elu(nn.conv1d(flat, self._p("hr/conv1d/w"), self._p("hr/conv1d/b")))
        return nn.global_avg_pool(seq)

    def timbre_forward(self, vec):
        """Timbre vector(s) (512,) or (B,512) -> 64-dim vector(s)."""
        v = nn.as_tensor(vec, dtype=self.dtype)
        if not isinstance(vec, nn.Tensor):
            v.requires_grad = False
        if v.shape[-1] != 512:
            raise nn.ShapeError(f"timbre vector must be 512-dim, got {v.shape}")
        h = nn.elu(nn.dense(v, self._p("timbre/dense0/w"), self._p("timbre/dense0/b")))
        return nn.elu(nn.dense(h, self._p("timbre/dense1/w"), self._p("timbre/dense1/b")))

    def classify(self, hr_vec, timbre_vec):
        """Fuse the two 64-dim vectors into class probabilities."""
        merged = nn.concat([hr_vec, timbre_vec], axis=-1)
        h = nn.elu(nn.dense(merged, self._p("head/dense0/w"), self._p("head/dense0/b")))
        logits = nn.dense(h, self._p("head/dense1/w"), self._p("head/dense1/b"))
        return nn.softmax(logits)

    def forward_tensor(self, cqt, timbre_vec):
        return self.classify(self.hr_forward(cqt), self.timbre_forward(timbre_vec))

    def forward(self, cqt_window, timbre_vector) -> ClassProbs:
        """Single-window inference to a probability triple."""
        values = cqt_window.values if isinstance(cqt_window, CqtMatrix) else np.asarray(cqt_window)
        if values.ndim == 2:
            values = values[:, :, None]
        tv = timbre_vector.vector if hasattr(timbre_vector, "vector") else timbre_vector
        probs = self.forward_tensor(values, tv)
        return ClassProbs.from_array(probs.data.astype(np.float64))

    # -- bookkeeping ---------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values() if p.trainable)

    def branch_params(self, prefix):
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def set_trainable(self, prefix, flag):
        for p in self.branch_params(prefix):
            p.trainable = flag

    def state_bytes(self, prefix="") -> bytes:
        return b"".join(
            p.data.tobytes() for name, p in sorted(self.params.items())
            if name.startswith(prefix)
        )

    def clone_state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def restore_state(self, state):
        for name, arr in state.items():
            self.params[name].data = arr.copy()

    # -- song-level inference ------------------------------------------------

    def evaluation_curve(self, full_cqt: CqtMatrix, timbre_vector) -> EvaluationCurve:
        """Slide 256-frame windows (hop 64) over the full CQT; the song-level
        timbre vector is shared across windows."""
        if full_cqt.frames < WINDOW_FRAMES:
            raise ValueError(
                f"need at least {WINDOW_FRAMES} frames, got {full_cqt.frames}"
            )
        starts = list(range(0, full_cqt.frames - WINDOW_FRAMES + 1, CURVE_HOP_FRAMES))
        windows = np.stack(
            [
                normalize(frame_window(full_cqt, s, WINDOW_FRAMES)).values[:, :, None]
                for s in starts
            ]
        )
        tv = timbre_vector.vector if hasattr(timbre_vector, "vector") else timbre_vector
        tiles = np.tile(np.asarray(tv), (len(starts), 1))
        probs = self.forward_tensor(windows, tiles).data.astype(np.float64)
        points = [(s, ClassProbs.from_array(p)) for s, p in zip(starts, probs)]
        return EvaluationCurve(points, full_cqt.hop_seconds)


def song_probs(curve: EvaluationCurve) -> ClassProbs:
    """Arithmetic mean of the per-window probability triples."""
    if len(curve) == 0:
        raise ValueError("empty evaluation curve")
    return ClassProbs.from_array(curve.probs_matrix().mean(axis=0))


def save_model(model: TgCritic, path, extra=None):
    meta = {"config": json.loads(model.config.to_json()), "seed": model.config.seed}
    if extra:
        meta.update(extra)
    return nn.save_checkpoint(path, {n: p.data for n, p in model.params.items()}, extra=meta)


def load_model(path, dtype=np.float64) -> TgCritic:
    tensors, manifest = nn.load_checkpoint(path)
    config = ModelConfig.from_json(json.dumps(manifest["config"]))
    model = TgCritic(config, dtype=dtype)
    for name, param in model.params.items():
        if name not in tensors:
            raise nn.CheckpointError(f"checkpoint missing parameter {name!r}")
        if tuple(tensors[name].shape) != param.data.shape:
            raise nn.CheckpointError(f"shape mismatch for {name!r}")
        param.data = tensors[name].astype(model.dtype)
    return model
