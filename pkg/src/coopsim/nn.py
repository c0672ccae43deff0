"""Network building blocks on top of the autodiff core: convolutional GRU,
per-cell MLPs, weight init, and the Adam optimizer."""

import numpy as np

from .autodiff import Tensor, ShapeError, conv2d, concat, sigmoid, tanh, relu


class NonFiniteGradientError(RuntimeError):
    pass


# -- initialization ----------------------------------------------------------


def kaiming_conv(rng, k, cin, cout):
    """Kaiming-uniform fan-in init for a [k,k,cin,cout] conv kernel (ReLU gain)."""
    fan_in = k * k * cin
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(k, k, cin, cout)), requires_grad=True)


def uniform_fan(rng, k, cin, cout):
    """Uniform +-1/sqrt(fan_in) init, used for GRU gate convolutions."""
    fan_in = k * k * cin
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(k, k, cin, cout)), requires_grad=True)


def zeros_bias(cout, value=0.0):
    return Tensor(np.full(cout, value), requires_grad=True)


def conv_layer(x, w, b, stride=1, padding=None, activation=None):
    if padding is None:
        padding = w.data.shape[0] // 2
    y = conv2d(x, w, stride=stride, padding=padding) + b
    if activation == "relu":
        y = relu(y)
    elif activation == "tanh":
        y = tanh(y)
    return y


# -- convolutional GRU -------------------------------------------------------


def conv_gru_step(state, x, wr, br, wu, bu, wc, bc):
    """One gated-recurrent update over a spatial state.

    state, x: [H,W,C] tensors; gate kernels are [k,k,2C,C].  The update gate
    blends state and tanh candidate, so outputs stay in (-1,1) whenever the
    state does.
    """
    if state.data.shape != x.data.shape:
        raise ShapeError(f"conv_gru_step: state {state.data.shape} != input {x.data.shape}")
    pad = wr.data.shape[0] // 2
    both = concat([x, state], axis=2)
    reset = sigmoid(conv2d(both, wr, stride=1, padding=pad) + br)
    update = sigmoid(conv2d(both, wu, stride=1, padding=pad) + bu)
    gated = concat([x, reset * state], axis=2)
    cand = tanh(conv2d(gated, wc, stride=1, padding=pad) + bc)
    return (1.0 - update) * state + update * cand


def gru_params(rng, channels, kernel=1, prefix=""):
    """Parameter dict for conv_gru_step with 2C -> C gate convolutions."""
    p = {}
    for gate in ("r", "u", "c"):
        p[f"{prefix}w{gate}"] = uniform_fan(rng, kernel, 2 * channels, channels)
        p[f"{prefix}b{gate}"] = zeros_bias(channels)
    return p


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place on params' data.

    params: dict name -> Tensor; grads: dict name -> ndarray (same shapes).
    Raises NonFiniteGradientError naming the parameter on nan/inf gradients.
    """
    state.t += 1
    t = state.t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def collect_grads(params):
    return {k: p.grad.copy() for k, p in params.items() if p.grad is not None}


def zero_grads(params):
    for p in params.values():
        p.grad = None
