import numpy as np
import pytest
from gradcheck import check_backbone

from reid_uda.deskmodel import (
    CKPT_MAGIC,
    Checkpoint,
    DeskBackbone,
    ModelConfig,
    OptimizerState,
    adam_step,
    checkpoint_bytes,
    config_metadata,
    flip_vector,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from reid_uda.errors import CongruenceError, FormatError, ShapeError, StateError
from reid_uda.rng import Rng
from reid_uda.teacher import ParameterStore

SMALL = ModelConfig(d_in=4, channels=3, height=2, width=2, depth=1, hidden=5, reduction=1, smp_layers=3, classes=5)


def _model(cfg=SMALL, seed=0):
    return DeskBackbone.create(cfg, Rng(seed))


class TestConfig:
    def test_map_size(self):
        assert SMALL.map_size == 12

    @pytest.mark.parametrize("kwargs", [dict(depth=3), dict(channels=1), dict(height=1), dict(d_in=0),
                                        dict(target_classes=-1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestForward:
    def test_zero_weights(self):
        m = _model()
        for name in m.encoder_names():
            m.params[name] = np.zeros_like(m.params[name])
        a = m.forward(np.ones((2, 4)))
        np.testing.assert_array_equal(a.map, np.zeros((2, 3, 2, 2)))
        for v in (a.global_vec, a.top_vec, a.bottom_vec):
            np.testing.assert_array_equal(v, np.zeros((2, 3)))

    def test_hand_fixture(self):
        cfg = ModelConfig(d_in=2, channels=2, height=2, width=1, depth=1, reduction=1, smp_layers=1, classes=2)
        m = _model(cfg)
        m.params["encoder.0.weight"] = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]])
        m.params["encoder.0.bias"] = np.zeros(4)
        a = m.forward(np.array([1.0, 2.0]))
        # pre-activation [1, 2, 3, -1] -> map ch0 [[1], [2]], ch1 [[3], [0]]
        np.testing.assert_array_equal(a.map, [[[1.0], [2.0]], [[3.0], [0.0]]])
        np.testing.assert_array_equal(a.global_vec, [1.5, 1.5])
        np.testing.assert_array_equal(a.top_vec, [1.0, 3.0])
        np.testing.assert_array_equal(a.bottom_vec, [2.0, 0.0])

    def test_depth_two(self):
        cfg = ModelConfig(d_in=4, channels=2, height=2, width=1, depth=2, hidden=6, reduction=1, smp_layers=1)
        m = _model(cfg)
        assert m.params["encoder.0.weight"].shape == (6, 4)
        assert m.params["encoder.1.weight"].shape == (4, 6)
        assert m.forward(np.ones((3, 4))).map.shape == (3, 2, 2, 1)

    def test_input_shape(self):
        with pytest.raises(ShapeError):
            _model().forward(np.ones((2, 5)))

    def test_flip_vector(self):
        np.testing.assert_array_equal(flip_vector(np.array([[1, 2, 3]])), [[3, 2, 1]])

    def test_wrong_store(self):
        with pytest.raises(CongruenceError):
            DeskBackbone(SMALL, ParameterStore({"x": np.zeros(1)}))


class TestBackward:
    def test_zero_upstream(self):
        m = _model()
        g = m.backward(m.forward(np.ones((2, 4))))
        assert set(g) == set(m.params)
        assert all(not np.any(v) for v in g.values())

    @pytest.mark.parametrize("seed", range(3))
    def test_single_sample_fd(self, seed):
        assert check_backbone(seed, depth=1, n=1) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_batch_fd_depth_two(self, seed):
        assert check_backbone(seed, depth=2, n=3) < 1e-4

    def test_dead_unit(self):
        m = _model()
        m.params["encoder.0.bias"][0] = -1e6
        a = m.forward(np.random.default_rng(0).normal(size=(3, 4)))
        g = m.backward(a, d_global=np.ones((3, 3)), d_top=np.ones((3, 3)))
        np.testing.assert_array_equal(g["encoder.0.weight"][0], np.zeros(4))
        assert g["encoder.0.bias"][0] == 0.0
        assert np.any(g["encoder.0.weight"][1:])

    def test_stale_activations(self):
        m = _model()
        a = m.forward(np.ones((1, 4)))
        m.touch()
        with pytest.raises(StateError):
            m.backward(a, d_global=np.ones((1, 3)))

    def test_extra_gradients(self):
        m = _model()
        a = m.forward(np.ones((1, 4)))
        g = m.backward(a, extra={"head.bias": np.ones(5)})
        np.testing.assert_array_equal(g["head.bias"], np.ones(5))
        with pytest.raises(CongruenceError):
            m.backward(a, extra={"nope": np.ones(1)})


class TestHeads:
    def test_target_head(self):
        m = _model()
        with pytest.raises(StateError):
            m.target_head
        t = m.with_target_head(7, Rng(1))
        assert t.target_head.weight.shape == (7, 3)
        for name in m.params:
            np.testing.assert_array_equal(t.params[name], m.params[name])
        assert t.trainable_names("target_head")[-2:] == ["target_head.weight", "target_head.bias"]

    def test_replace_head_bumps_version(self):
        m = _model()
        v = m.version
        m.replace_head(np.zeros((5, 3)), np.zeros(5))
        assert m.version == v + 1 and not m.head.weight.any()

    def test_fusion_view(self):
        assert _model().fusion.channels == 3


class TestAdam:
    def test_zero_gradient_no_decay(self):
        store = ParameterStore({"w": np.array([1.0, -2.0])})
        adam_step(store, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0))
        np.testing.assert_array_equal(store["w"], [1.0, -2.0])

    def test_first_step(self):
        store = ParameterStore({"w": np.array([0.0, 0.0, 0.0])})
        adam_step(store, {"w": np.array([3.0, -0.01, 200.0])}, OptimizerState(lr=1e-3, weight_decay=0.0))
        np.testing.assert_allclose(store["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-5)

    def test_decoupled_decay(self):
        store = ParameterStore({"w": np.array([2.0])})
        adam_step(store, {"w": np.zeros(1)}, OptimizerState(lr=0.1, weight_decay=0.5))
        assert store["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_names_subset(self):
        store = ParameterStore({"a": np.ones(1), "b": np.ones(1)})
        adam_step(store, {"a": np.ones(1), "b": np.ones(1)}, OptimizerState(), names=["a"])
        assert store["b"][0] == 1.0 and store["a"][0] < 1.0

    def test_congruence(self):
        store = ParameterStore({"a": np.ones(2)})
        with pytest.raises(CongruenceError):
            adam_step(store, {"a": np.ones(3)}, OptimizerState())
        with pytest.raises(CongruenceError):
            adam_step(store, {"z": np.ones(2)}, OptimizerState())

    def test_reset(self):
        state = OptimizerState()
        store = ParameterStore({"a": np.ones(1)})
        adam_step(store, {"a": np.ones(1)}, state)
        state.reset("a")
        assert "a" not in state.m and "a" not in state.v


class TestCheckpoint:
    def _ckpt(self):
        m = _model()
        return Checkpoint({"student": m.params, "teacher": m.params.copy()}, config_metadata(SMALL) | {"seed": 3})

    def test_round_trip_bytes(self, tmp_path):
        ck = self._ckpt()
        save_checkpoint(ck, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.metadata == ck.metadata
        assert back.stores["student"].equals(ck.stores["student"])
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_model_view(self):
        m = self._ckpt().model("teacher")
        assert m.config == SMALL

    def test_bad_magic(self):
        data = checkpoint_bytes(self._ckpt())
        with pytest.raises(FormatError):
            parse_checkpoint(b"X" + data[1:])
        assert data.startswith(CKPT_MAGIC)

    def test_truncated_and_trailing(self):
        data = checkpoint_bytes(self._ckpt())
        with pytest.raises(FormatError):
            parse_checkpoint(data[:-8])
        with pytest.raises(FormatError):
            parse_checkpoint(data + b"\0")
        with pytest.raises(FormatError):
            parse_checkpoint(data[:10])
