"""Network architecture: shape laws, branch behavior, fusion, curves,
parameter accounting, checkpoints, and the full-graph gradient check."""

import numpy as np
import pytest

from tgcritic import nn
from tgcritic.cqt import CqtMatrix
from tgcritic.model import (
    ClassProbs,
    EvaluationCurve,
    HrConfig,
    ModelConfig,
    ModelConfigError,
    TgCritic,
    load_model,
    save_model,
    song_probs,
)

rng = np.random.default_rng(51)

TINY = ModelConfig(hr=HrConfig(stage_channels=(4, 6, 8)), seed=3)


def tiny_model():
    return TgCritic(TINY)


class TestConfig:
    def test_reshape_width_enforced(self):
        with pytest.raises(ModelConfigError):
            HrConfig(fusion_channels=32)
        with pytest.raises(ModelConfigError):
            HrConfig(freq_pool=(2, 2, 4))

    def test_json_round_trip(self):
        cfg = ModelConfig(hr=HrConfig(stage_channels=(8, 16, 32)), seed=11)
        back = ModelConfig.from_json(cfg.to_json())
        assert back == cfg


class TestClassProbs:
    def test_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ClassProbs(0.5, 0.2, 0.2)

    def test_array_round_trip(self):
        p = ClassProbs(0.2, 0.5, 0.3)
        np.testing.assert_allclose(ClassProbs.from_array(p.as_array()).as_array(), p.as_array())


class TestMultiscaleStage:
    def test_time_dims_preserved_and_freq_halved(self):
        m = tiny_model()
        feats = [
            nn.Tensor(rng.standard_normal((t, 96, 1))) for t in (64, 32, 16)
        ]
        out = m.multiscale_stage(feats, 0)
        assert [f.shape[0] for f in out] == [64, 32, 16]
        assert all(f.shape[1] == 48 for f in out)
        assert all(f.shape[2] == TINY.hr.stage_channels[0] for f in out)

    def test_freq_schedule_96_48_24_12(self):
        m = tiny_model()
        feats = [nn.Tensor(rng.standard_normal((t, 96, 1))) for t in (64, 32, 16)]
        bins = []
        for stage in range(3):
            feats = m.multiscale_stage(feats, stage)
            bins.append(feats[0].shape[1])
        assert bins == [48, 24, 12]

    def test_zero_weights_give_zero_outputs(self):
        m = tiny_model()
        for name, p in m.params.items():
            if name.startswith("hr/stage0"):
                p.data = np.zeros_like(p.data)
        feats = [nn.Tensor(rng.standard_normal((t, 96, 1))) for t in (64, 32, 16)]
        out = m.multiscale_stage(feats, 0)
        for f in out:
            np.testing.assert_array_equal(f.data, np.zeros_like(f.data))


class TestHrForward:
    def test_output_is_64_dim(self):
        m = tiny_model()
        out = m.hr_forward(rng.standard_normal((256, 96, 1)))
        assert out.shape == (64,)
        out_b = m.hr_forward(rng.standard_normal((2, 64, 96, 1)))
        assert out_b.shape == (2, 64)

    def test_zero_input_zero_bias_gives_zero(self):
        m = tiny_model()  # biases start at zero
        out = m.hr_forward(np.zeros((64, 96, 1)))
        np.testing.assert_array_equal(out.data, np.zeros(64))

    def test_rejects_time_not_multiple_of_4(self):
        m = tiny_model()
        with pytest.raises(nn.ShapeError):
            m.hr_forward(rng.standard_normal((254, 96, 1)))

    def test_rejects_wrong_bins(self):
        m = tiny_model()
        with pytest.raises(nn.ShapeError):
            m.hr_forward(rng.standard_normal((256, 95, 1)))

    def test_translation_by_downsample_factor_equivariance(self):
        # averaging kernels commute with a shift of 4 frames away from edges
        m = tiny_model()
        for name, p in m.params.items():
            w = np.zeros_like(p.data)
            if name.endswith("/w"):
                if w.ndim == 4 and w.shape[0] == 3:  # 3x3 conv
                    w[1, 1] = 1.0 / w.shape[2]
                elif w.ndim == 4:  # 1x1 conv
                    w[0, 0] = 1.0 / w.shape[2]
                elif w.ndim == 3:  # conv1d
                    w[w.shape[0] // 2] = 1.0 / w.shape[1]
                else:  # dense
                    w = np.full_like(w, 1.0 / w.shape[0])
            p.data = w
        pattern = rng.standard_normal((32, 96, 1))
        base = np.zeros((256, 96, 1))
        shifted = np.zeros((256, 96, 1))
        base[100:132] = pattern
        shifted[104:136] = pattern
        a = m.hr_forward(base).data
        b = m.hr_forward(shifted).data
        denom = max(np.max(np.abs(a)), 1e-30)
        assert np.max(np.abs(a - b)) / denom < 1e-6


class TestTimbreForward:
    def test_output_is_64_dim(self):
        m = tiny_model()
        assert m.timbre_forward(rng.standard_normal(512)).shape == (64,)
        assert m.timbre_forward(rng.standard_normal((5, 512))).shape == (5, 64)

    def test_zero_input_gives_elu_bias_chain(self):
        m = tiny_model()
        out = m.timbre_forward(np.zeros(512))
        np.testing.assert_array_equal(out.data, np.zeros(64))  # biases are zero

    def test_matches_composed_dense_oracle(self):
        m = tiny_model()
        v = rng.standard_normal(512)
        w0, b0 = m.params["timbre/dense0/w"].data, m.params["timbre/dense0/b"].data
        w1, b1 = m.params["timbre/dense1/w"].data, m.params["timbre/dense1/b"].data

        def ref_elu(z):
            return np.where(z > 0, z, np.exp(np.minimum(z, 0)) - 1)

        expect = ref_elu(ref_elu(v @ w0 + b0) @ w1 + b1)
        np.testing.assert_allclose(m.timbre_forward(v).data, expect, atol=1e-12)

    def test_rejects_wrong_dim(self):
        with pytest.raises(nn.ShapeError):
            tiny_model().timbre_forward(rng.standard_normal(511))


class TestClassify:
    def test_probs_sum_to_one(self):
        m = tiny_model()
        probs = m.classify(nn.Tensor(rng.standard_normal(64)), nn.Tensor(rng.standard_normal(64)))
        assert abs(probs.data.sum() - 1.0) < 1e-9

    def test_purity(self):
        m = tiny_model()
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        p1 = m.classify(nn.Tensor(a), nn.Tensor(b)).data
        p2 = m.classify(nn.Tensor(a.copy()), nn.Tensor(b.copy())).data
        np.testing.assert_array_equal(p1, p2)

    def test_zero_logits_uniform(self):
        m = tiny_model()
        for name in ("head/dense0/w", "head/dense0/b", "head/dense1/w", "head/dense1/b"):
            m.params[name].data = np.zeros_like(m.params[name].data)
        probs = m.classify(nn.Tensor(rng.standard_normal(64)), nn.Tensor(rng.standard_normal(64)))
        np.testing.assert_allclose(probs.data, np.full(3, 1 / 3), atol=1e-12)


class TestForward:
    def test_end_to_end_shapes(self):
        m = tiny_model()
        probs = m.forward(rng.standard_normal((256, 96)), rng.standard_normal(512))
        assert isinstance(probs, ClassProbs)
        total = probs.p_awesome + probs.p_mediocre + probs.p_inferior
        assert abs(total - 1.0) < 1e-9

    def test_deterministic_under_fixed_weights(self):
        m = tiny_model()
        x = rng.standard_normal((256, 96))
        tv = rng.standard_normal(512)
        assert m.forward(x, tv) == m.forward(x, tv)

    def test_fresh_model_predicts_near_uniform(self):
        m = TgCritic()
        x = rng.standard_normal((256, 96))
        tv = rng.standard_normal(512)
        probs = m.forward(x, tv).as_array()
        assert np.all(np.abs(probs - 1 / 3) < 0.05)


class TestParamCount:
    def test_timbre_branch_exact(self):
        m = TgCritic()
        timbre = sum(p.data.size for n, p in m.params.items() if n.startswith("timbre/"))
        assert timbre == 512 * 256 + 256 + 256 * 64 + 64 == 147776

    def test_fusion_head_exact(self):
        m = TgCritic()
        head = sum(p.data.size for n, p in m.params.items() if n.startswith("head/"))
        assert head == 128 * 64 + 64 + 64 * 3 + 3 == 8451

    def test_default_model_within_budget(self):
        count = TgCritic().param_count()
        assert count == 678499
        assert 0.82e6 * 0.8 <= count <= 0.82e6 * 1.2


class TestGradCheckFullGraph:
    def test_small_time_window_full_graph(self):
        # T=16 keeps finite differences affordable; the graph is the full
        # two-branch network with cross-entropy on top.
        m = tiny_model()
        x = rng.standard_normal((16, 96, 1))
        tv = rng.standard_normal(512)
        params = list(m.params.values())

        def loss_fn(*ps):
            probs = m.forward_tensor(x, tv)
            return nn.cross_entropy(probs, 1)

        err = nn.grad_check(loss_fn, params, sample=2, rng=np.random.default_rng(0))
        assert err < 1e-4


class TestEvaluationCurve:
    def _cqt(self, frames):
        return CqtMatrix(rng.uniform(0, 6, (frames, 96)), 512 / 16000)

    def test_single_window(self):
        m = tiny_model()
        curve = m.evaluation_curve(self._cqt(256), rng.standard_normal(512))
        assert len(curve) == 1
        assert curve.points[0][0] == 0

    def test_512_frames_five_points(self):
        m = tiny_model()
        curve = m.evaluation_curve(self._cqt(512), rng.standard_normal(512))
        assert [s for s, _ in curve.points] == [0, 64, 128, 192, 256]

    def test_each_point_sums_to_one(self):
        m = tiny_model()
        curve = m.evaluation_curve(self._cqt(400), rng.standard_normal(512))
        for _, p in curve.points:
            assert abs(p.as_array().sum() - 1.0) < 1e-9

    def test_too_short_rejected(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m.evaluation_curve(self._cqt(255), rng.standard_normal(512))


class TestSongProbs:
    def test_single_point_identity(self):
        p = ClassProbs(0.2, 0.5, 0.3)
        curve = EvaluationCurve([(0, p)])
        assert song_probs(curve) == p

    def test_two_point_average(self):
        curve = EvaluationCurve([(0, ClassProbs(1.0, 0.0, 0.0)), (64, ClassProbs(0.0, 1.0, 0.0))])
        out = song_probs(curve)
        np.testing.assert_allclose(out.as_array(), [0.5, 0.5, 0.0], atol=1e-12)

    def test_mean_stays_distribution(self):
        pts = []
        for i in range(7):
            v = rng.dirichlet(np.ones(3))
            pts.append((i * 64, ClassProbs.from_array(v)))
        out = song_probs(EvaluationCurve(pts))
        assert abs(out.as_array().sum() - 1.0) < 1e-9

    def test_empty_curve_rejected(self):
        with pytest.raises(ValueError):
            song_probs(EvaluationCurve([]))


class TestCheckpointing:
    def test_round_trip(self, tmp_path):
        m = tiny_model()
        save_model(m, tmp_path / "ck", extra={"note": "test"})
        back = load_model(tmp_path / "ck")
        assert back.config == m.config
        for name, p in m.params.items():
            np.testing.assert_array_equal(
                back.params[name].data, p.data.astype(np.float32).astype(np.float64)
            )

    def test_resave_is_byte_identical(self, tmp_path):
        m = tiny_model()
        p1 = save_model(m, tmp_path / "c1")
        p2 = save_model(load_model(p1), tmp_path / "c2")
        assert (p1 / "weights.bin").read_bytes() == (p2 / "weights.bin").read_bytes()

    def test_same_seed_same_init(self):
        a = TgCritic(TINY)
        b = TgCritic(TINY)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
