"""
Parameter store, Adam and the FSCT container.

Run with:
    PYTHONPATH=. pytest -q tests/test_nn.py
"""
import numpy as np
import pytest

import fsct
from errors import ConfigError, FormatError, ShapeError
from nn import Adam, ParamTensor, adam_step


def test_adam_zero_gradient_keeps_parameters():
    value = np.array([1.0, -2.0])
    new, m, v = adam_step(value, np.zeros(2), np.zeros(2), np.zeros(2), t=1, lr=0.1)
    assert np.array_equal(new, value)


def test_adam_first_step_moves_by_lr_against_gradient():
    value = np.zeros(3)
    grad = np.array([0.5, -3.0, 1e-3])
    new, _, _ = adam_step(value, grad, np.zeros(3), np.zeros(3), t=1, lr=1e-2)
    # m_hat = g, v_hat = g^2 at t = 1
    assert np.allclose(new, -1e-2 * grad / (np.abs(grad) + 1e-8), rtol=0, atol=1e-15)


def test_adam_is_deterministic_and_validates_step():
    args = (np.ones(2), np.array([0.3, -0.1]), np.full(2, 0.01), np.full(2, 0.02), 3, 1e-3)
    a, b = adam_step(*args), adam_step(*args)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    with pytest.raises(ConfigError):
        adam_step(np.ones(1), np.ones(1), np.zeros(1), np.zeros(1), t=0, lr=1.0)


def test_adam_tracks_step_counts_per_parameter():
    params = ParamTensor()
    params.add("z.0", np.zeros(2))
    params.add("z.1", np.zeros(2))
    opt = Adam()
    opt.step({"z.0": params["z.0"]}, 0.1, {"z.0": np.ones(2)})
    opt.step(params, 0.1, {"z.0": np.ones(2), "z.1": np.ones(2)})
    assert opt.t == {"z.0": 2, "z.1": 1}
    # a parameter's first step always has magnitude lr
    assert np.allclose(params["z.1"].data, -0.1)

    restored = Adam()
    restored.load_state_dict(opt.state_dict("adam"), "adam")
    assert restored.t == opt.t
    assert np.array_equal(restored.m["z.0"], opt.m["z.0"])


def test_param_tensor_state_dict_round_trip(rng):
    params = ParamTensor()
    params.add("g_s.w1", rng.normal(size=(4, 3)))
    params.add("g_s.b1", rng.normal(size=3))
    assert params.count() == 15
    other = ParamTensor()
    other.add("g_s.w1", np.zeros((4, 3)))
    other.add("g_s.b1", np.zeros(3))
    other.load_state_dict(fsct.loads(fsct.dumps(params.state_dict())))
    assert np.array_equal(other.flat(), params.flat())

    bad = ParamTensor()
    bad.add("g_s.w1", np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        bad.load_state_dict(params.state_dict(), strict=False)
    with pytest.raises(ConfigError):
        params.add("g_s.w1", np.zeros(1))


def test_fsct_round_trip_is_bit_exact(rng, tmp_path):
    arrays = {"scalar": np.array(3.5), "vol": rng.normal(size=(2, 3, 4)), "empty": np.zeros((0, 2))}
    payload = fsct.dumps(arrays)
    assert payload[:4] == b"FSCT"
    assert fsct.dumps(fsct.loads(payload)) == payload
    loaded = fsct.load(fsct.save(tmp_path / "a.fsct", arrays))
    assert list(loaded) == ["scalar", "vol", "empty"]
    assert loaded["vol"].tobytes() == arrays["vol"].tobytes()
    assert loaded["empty"].shape == (0, 2)


def test_fsct_rejects_corrupt_payloads():
    payload = fsct.dumps({"a": np.arange(4.0)})
    with pytest.raises(FormatError):
        fsct.loads(b"XXXX" + payload[4:])
    with pytest.raises(FormatError):
        fsct.loads(payload[:-3])
    with pytest.raises(FormatError):
        fsct.loads(payload + b"\x00")
