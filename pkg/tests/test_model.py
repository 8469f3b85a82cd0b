import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from insmos import tensor as T
from insmos.model import InsMOSModel, ModelConfig, fuse, positional_encoding
from insmos.tensor import Tensor


def inputs(rng, n=None, c_evt=10, size=48):
    lead = () if n is None else (n,)
    image = rng.normal(size=lead + (1, size, size))
    voxel = rng.normal(size=lead + (c_evt, size, size))
    em = (rng.random(lead + (1, size, size)) > 0.5).astype(float)
    return image, voxel, em


@pytest.fixture
def model():
    return InsMOSModel(ModelConfig(dtype="f64", seed=3))


class TestConfig:
    def test_json_round_trip(self):
        cfg = ModelConfig(channels=8, strides=(2, 1), modality="events", cma="texture")
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize("kw", [{"modality": "audio"}, {"cma": "triple"}, {"strides": (3, 1)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_image_pair_reroutes_event_channels(self):
        assert ModelConfig(modality="image_pair").event_channels == 1


class TestEncoder:
    def test_feature_shape(self, model, rng):
        f_I, f_E, f_EM = model.encode(*inputs(rng))
        assert f_I.shape == f_E.shape == f_EM.shape == (16, 12, 12)

    def test_zero_image_gives_zero_features(self, model, rng):
        _, voxel, em = inputs(rng)
        f_I, _, _ = model.encode(np.zeros((1, 48, 48)), voxel, em)
        assert not f_I.data.any()

    def test_size_mismatch(self, model, rng):
        image, voxel, em = inputs(rng)
        with pytest.raises(ValueError, match="spatial size"):
            model.encode(image[:, :40], voxel, em)

    def test_events_only_reuses_event_features(self, rng):
        m = InsMOSModel(ModelConfig(modality="events", dtype="f64"))
        f_I, f_E, _ = m.encode(*inputs(rng))
        assert f_I is f_E


class TestCMA:
    def test_residual_identity_at_init(self, model, rng):
        f = [Tensor(rng.normal(size=(16, 6, 6))) for _ in range(3)]
        f_T, f_M, a_t, a_m = model.cma_forward(*f)
        assert_array_equal(f_T.data, f[0].data)
        assert_array_equal(f_M.data, f[1].data)
        assert a_t.shape == a_m.shape == (16, 16)

    def test_zero_events_leave_texture_unchanged(self, model, rng):
        for p in model.params.values():
            if p.name.startswith("cma.") and p.name.endswith(".w"):
                p.data = rng.normal(size=p.shape)
        f_I = Tensor(rng.normal(size=(16, 4, 4)))
        zero = Tensor(np.zeros((16, 4, 4)))
        f_T, _, _, _ = model.cma_forward(f_I, zero, Tensor(rng.normal(size=(16, 4, 4))))
        assert_allclose(f_T.data, f_I.data)
        f_T2, _, _, _ = model.cma_forward(f_I, Tensor(rng.normal(size=(16, 4, 4))), zero)
        assert_array_equal(f_T2.data, f_T.data)

    def test_attention_rows_are_distributions(self, model, rng):
        f = [Tensor(rng.normal(size=(2, 16, 5, 5))) for _ in range(3)]
        _, _, a_t, _ = model.cma_forward(*f)
        assert a_t.shape == (2, 16, 16)
        assert_allclose(a_t.sum(-1), 1.0)

    def test_gradcheck_inputs_and_tau(self, rng):
        m = InsMOSModel(ModelConfig(dtype="f64", seed=4))
        for p in m.params.values():
            if p.name.startswith("cma."):
                p.data = rng.normal(0, 0.5, p.shape)
        f = [rng.normal(size=(16, 4, 4)) for _ in range(3)]
        R = rng.normal(size=(16, 4, 4))

        def loss(a, b, c):
            f_T, f_M, _, _ = m.cma_forward(a, b, c)
            return T.sum((f_T + f_M) * R)

        for i in range(3):
            err = T.grad_check(lambda x, i=i: loss(*[x if j == i else Tensor(f[j]) for j in range(3)]), f[i])
            assert err <= 1e-5
        orig = m.params["cma.tex.log_tau"]

        def by_tau(x):
            m.params["cma.tex.log_tau"] = x
            try:
                return loss(*(Tensor(a) for a in f))
            finally:
                m.params["cma.tex.log_tau"] = orig

        assert T.grad_check(by_tau, orig.data) <= 1e-5

    @pytest.mark.parametrize("mode", ["texture", "motion", "off"])
    def test_ablation_modes(self, mode, rng):
        m = InsMOSModel(ModelConfig(cma=mode, dtype="f64"))
        f = [Tensor(rng.normal(size=(16, 3, 3))) for _ in range(3)]
        f_T, f_M, _, _ = m.cma_forward(*f)
        assert f_T.shape == f_M.shape == (16, 3, 3)


class TestDecoders:
    def test_motion_shapes(self, model, rng):
        me_mov, ms_mov = model.decode_motion(Tensor(rng.normal(size=(16, 12, 12))))
        assert me_mov.shape == (16, 8)
        assert ms_mov.shape == (2, 8)

    def test_decode_motion_gradcheck(self, model, rng):
        f = rng.normal(size=(16, 3, 3))
        R1, R2 = rng.normal(size=(16, 8)), rng.normal(size=(2, 8))

        def loss(x):
            a, b = model.decode_motion(x)
            return T.sum(a * R1) + T.sum(b * R2)

        assert T.grad_check(loss, f) <= 1e-5

    def test_fuse_hand_case(self):
        me_mask = np.stack([np.ones((2, 2)), 2 * np.ones((2, 2))])
        out = fuse(np.ones((2, 1)), me_mask).data
        assert_array_equal(out, np.full((1, 2, 2), 3.0))

    def test_fuse_zero_and_shape(self, rng):
        assert not fuse(np.zeros((16, 8)), rng.normal(size=(16, 12, 12))).data.any()
        assert fuse(rng.normal(size=(16, 8)), rng.normal(size=(16, 12, 12))).shape == (8, 12, 12)

    def test_positional_encoding_is_bounded_and_varies(self):
        pe = positional_encoding(16, 12, 12)
        assert pe.shape == (16, 12, 12)
        assert np.abs(pe).max() <= 1.0
        assert len({pe[:, i, j].tobytes() for i in range(12) for j in range(12)}) == 144


class TestForward:
    def test_train_mode_keeps_frame_features(self, model, rng):
        out = model.forward_full([inputs(rng), inputs(rng)], "train")
        assert len(out.frame_features) == 2
        assert out.F_pred.shape == (2, 48, 48)

    def test_infer_mode_has_no_flow(self, model, rng):
        out = model.forward_full([inputs(rng)], "infer")
        assert out.F_pred is None
        assert out.S_all.shape == (8, 12, 12)

    def test_flow_head_does_not_touch_segmentation(self, model, rng):
        x = inputs(rng)
        a = model.forward_frame(*x, flow=True)
        b = model.forward_frame(*x, flow=False)
        assert b.F_pred is None
        for name in ("S_all", "me_mov", "ms_mov", "me_mask"):
            assert_array_equal(getattr(a, name).data, getattr(b, name).data)

    def test_batched_matches_single(self, model, rng):
        x = inputs(rng, n=2)
        batched = model.forward_frame(*x)
        single = model.forward_frame(*(a[1] for a in x))
        assert_allclose(batched.S_all.data[1], single.S_all.data, rtol=1e-10, atol=1e-12)
        assert_allclose(batched.ms_mov.data[1], single.ms_mov.data, rtol=1e-10, atol=1e-12)

    def test_deterministic(self, rng):
        x = inputs(rng)
        a = InsMOSModel(ModelConfig(seed=9)).forward_frame(*x)
        b = InsMOSModel(ModelConfig(seed=9)).forward_frame(*x)
        assert_array_equal(a.S_all.data, b.S_all.data)

    def test_bad_mode(self, model, rng):
        with pytest.raises(ValueError):
            model.forward_full([inputs(rng)], "eval")


class TestPersistence:
    def test_save_load(self, tmp_path, model, rng):
        model.save(tmp_path / "m.ckpt")
        back = InsMOSModel.load(tmp_path / "m.ckpt", model.config)
        x = inputs(rng)
        assert_array_equal(back.forward_frame(*x).S_all.data, model.forward_frame(*x).S_all.data)

    def test_missing_parameter(self, model):
        state = model.state_dict()
        state.pop("dec.queries")
        with pytest.raises(KeyError, match="missing"):
            model.load_state_dict(state)
