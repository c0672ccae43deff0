import struct

import numpy as np
import pytest

from coopsim import autodiff as ad
from coopsim import nn
from coopsim.autodiff import Tensor
from coopsim.checkpoint import MAGIC, load_params, save_params, CheckpointError

from oracles import fd_grad, max_rel_err

RNG = np.random.default_rng(9)


def make_gru(channels, kernel=3, bias_u=0.0):
    p = nn.gru_params(np.random.default_rng(3), channels, kernel=kernel)
    p["bu"].data[:] = bias_u
    return p


def test_gru_update_gate_zero_keeps_state():
    p = make_gru(3, bias_u=-50.0)
    state = Tensor(np.tanh(RNG.standard_normal((4, 5, 3))))
    x = Tensor(RNG.standard_normal((4, 5, 3)))
    out = nn.conv_gru_step(state, x, p["wr"], p["br"], p["wu"], p["bu"], p["wc"], p["bc"])
    assert np.abs(out.data - state.data).max() < 1e-9


def test_gru_update_gate_one_gives_candidate():
    p = make_gru(3, bias_u=50.0)
    state = Tensor(np.tanh(RNG.standard_normal((4, 5, 3))))
    x = Tensor(RNG.standard_normal((4, 5, 3)))
    out = nn.conv_gru_step(state, x, p["wr"], p["br"], p["wu"], p["bu"], p["wc"], p["bc"])
    # recompute the tanh candidate with the same reset path
    both = ad.concat([x, state], axis=2)
    reset = ad.sigmoid(ad.conv2d(both, p["wr"], 1, p["wr"].data.shape[0] // 2) + p["br"])
    gated = ad.concat([x, reset * state], axis=2)
    cand = ad.tanh(ad.conv2d(gated, p["wc"], 1, p["wc"].data.shape[0] // 2) + p["bc"])
    assert np.abs(out.data - cand.data).max() < 1e-9


def test_gru_output_range_with_state_in_unit_interval():
    p = make_gru(2)
    state = Tensor(np.tanh(RNG.standard_normal((6, 6, 2)) * 2))
    x = Tensor(RNG.standard_normal((6, 6, 2)) * 3)
    out = nn.conv_gru_step(state, x, p["wr"], p["br"], p["wu"], p["bu"], p["wc"], p["bc"])
    assert np.all(out.data > -1.0) and np.all(out.data < 1.0)


def test_gru_shape_mismatch():
    p = make_gru(2)
    with pytest.raises(ad.ShapeError):
        nn.conv_gru_step(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((4, 5, 2))),
                         p["wr"], p["br"], p["wu"], p["bu"], p["wc"], p["bc"])


def test_gru_gradcheck():
    p = make_gru(2, kernel=1)
    s0 = np.tanh(RNG.standard_normal((3, 3, 2)))
    x0 = RNG.standard_normal((3, 3, 2)) * 0.5
    wt = RNG.standard_normal((3, 3, 2))

    def run(sv, xv, params):
        return nn.conv_gru_step(Tensor(sv, requires_grad=True), Tensor(xv),
                                params["wr"], params["br"], params["wu"],
                                params["bu"], params["wc"], params["bc"])

    state = Tensor(s0, requires_grad=True)
    x = Tensor(x0, requires_grad=True)
    out = nn.conv_gru_step(state, x, p["wr"], p["br"], p["wu"], p["bu"], p["wc"], p["bc"])
    ad.tsum(out * wt).backward()

    def f_state(sv):
        return float(np.sum(run(sv, x0, p).data * wt))

    def f_wc(wv):
        q = dict(p)
        q["wc"] = Tensor(wv)
        return float(np.sum(run(s0, x0, q).data * wt))

    assert max_rel_err(state.grad, fd_grad(f_state, s0)) < 1e-5
    assert max_rel_err(p["wc"].grad, fd_grad(f_wc, p["wc"].data)) < 1e-5


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_no_update():
    p = {"a": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    before = p["a"].data.copy()
    nn.adam_step(p, {"a": np.zeros(2)}, nn.AdamState(), lr=0.1)
    assert np.array_equal(p["a"].data, before)


def test_adam_first_step_magnitude_is_lr():
    # hand recurrence: m=0.1, v=0.001, mhat=1, vhat=1 -> step = lr/(1+eps)
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    nn.adam_step(p, {"w": np.array([1.0])}, nn.AdamState(),
                 lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    assert abs(p["w"].data[0] - (0.5 - 0.1)) < 1e-8


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = {"w": Tensor(rng.standard_normal(7), requires_grad=True)}
        st = nn.AdamState()
        for _ in range(25):
            g = {"w": rng.standard_normal(7)}
            nn.adam_step(p, g, st, lr=0.03)
        return p["w"].data.copy()

    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite():
    p = {"bad": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(nn.NonFiniteGradientError, match="bad"):
        nn.adam_step(p, {"bad": np.array([np.nan])}, nn.AdamState())


# -- checkpoint format ----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    params = {
        "backbone/conv1/w": Tensor(rng.standard_normal((3, 3, 2, 4)), requires_grad=True),
        "head/det/b": Tensor(rng.standard_normal(7), requires_grad=True),
        "scalarish": Tensor(np.array(3.25)),
    }
    path = tmp_path / "model.pnpw"
    save_params(path, params)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data)
        assert loaded[k].data.dtype == np.float64


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "one.pnpw"
    save_params(path, {"ab": Tensor(np.arange(6.0).reshape(2, 3))})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<HI", raw, 4)
    assert (version, count) == (1, 1)
    nlen = struct.unpack_from("<H", raw, 10)[0]
    assert raw[12:12 + nlen] == b"ab"
    rank = raw[12 + nlen]
    assert rank == 2
    dims = struct.unpack_from("<2I", raw, 13 + nlen)
    assert dims == (2, 3)
    payload = np.frombuffer(raw, dtype="<f8", offset=13 + nlen + 8)
    assert np.array_equal(payload, np.arange(6.0))


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.pnpw"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_params(path)
