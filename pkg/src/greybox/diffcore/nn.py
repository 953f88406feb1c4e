"""Network building blocks: parameter stores, fused MLP and 3x3 conv layers."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError
from . import tensor as T
from .tensor import (DTYPE, LEAKY_SLOPE, Var, as_var, fold_replicate_pad, make,
                     pad_replicate)

ACTIVATIONS = ("leaky_relu", "tanh", "identity")


class ParamStore(OrderedDict):
    """Ordered name -> float64 array map holding trainable parameters."""

    def copy(self) -> "ParamStore":
        return ParamStore((k, np.array(v, dtype=DTYPE, copy=True)) for k, v in self.items())

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore((k[len(prefix):], v) for k, v in self.items() if k.startswith(prefix))

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(g: np.ndarray, z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, g, LEAKY_SLOPE * g)
    if kind == "tanh":
        return g * (1.0 - a * a)
    return g


def _check_activation(kind: str) -> str:
    kind = kind.lower().replace("leakyrelu", "leaky_relu")
    if kind not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return kind


# fully connected ---------------------------------------------------------------

def init_mlp(rng: np.random.Generator, layer_sizes: Sequence[int], prefix: str = "") -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    store = ParamStore()
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        bound = np.sqrt(1.0 / n_in)
        store[f"{prefix}{i}.weight"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        store[f"{prefix}{i}.bias"] = np.zeros(n_out)
    return store


def mlp_apply(x, weights: Sequence, biases: Sequence, activation: str = "leaky_relu",
              out_activation: str = "identity") -> Var:
    """Fused multilayer perceptron as a single differentiable op.

    ``x`` may carry any number of leading batch axes; weights are (in, out).
    """
    activation = _check_activation(activation)
    out_activation = _check_activation(out_activation)
    x = as_var(x)
    ws = [as_var(w) for w in weights]
    bs = [as_var(b) for b in biases]
    lead = x.shape[:-1]
    h = x.value.reshape(-1, x.shape[-1])
    inputs, pre, post = [], [], []
    n = len(ws)
    for i, (w, b) in enumerate(zip(ws, bs)):
        inputs.append(h)
        z = h @ w.value + b.value
        a = _activate(z, activation if i < n - 1 else out_activation)
        pre.append(z)
        post.append(a)
        h = a
    out = h.reshape(lead + (h.shape[-1],))
    need_x = x.requires_grad

    def grad_fn(g):
        g = g.reshape(-1, g.shape[-1])
        grads_w, grads_b = [None] * n, [None] * n
        for i in range(n - 1, -1, -1):
            kind = activation if i < n - 1 else out_activation
            g = _activation_grad(g, pre[i], post[i], kind)
            if ws[i].requires_grad:
                grads_w[i] = inputs[i].T @ g
            if bs[i].requires_grad:
                grads_b[i] = g.sum(axis=0)
            if i > 0 or need_x:
                g = g @ ws[i].value.T
        gx = g.reshape(x.shape) if need_x else None
        flat = [gx]
        for gw, gb in zip(grads_w, grads_b):
            flat += [gw, gb]
        return tuple(flat)

    parents = [x]
    for w, b in zip(ws, bs):
        parents += [w, b]
    return make(out, parents, grad_fn)


def mlp_forward(params: Mapping, input, layer_sizes: Sequence[int],
                activation: str = "leaky_relu", out_activation: str = "identity",
                prefix: str = "") -> Var:
    """Evaluate the MLP stored under ``prefix`` in ``params``.

    Hidden layers use ``activation``; the output layer is linear unless
    ``out_activation`` says otherwise.
    """
    x = as_var(input)
    if x.shape[-1] != layer_sizes[0]:
        raise ConfigurationError(
            f"layer 0: input width {x.shape[-1]} does not match {layer_sizes[0]}")
    ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        try:
            w, b = params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"]
        except KeyError as exc:
            raise ConfigurationError(f"layer {i}: missing parameter {exc.args[0]!r}") from None
        if tuple(np.shape(getattr(w, "value", w))) != (n_in, n_out) or \
                tuple(np.shape(getattr(b, "value", b))) != (n_out,):
            raise ConfigurationError(
                f"layer {i}: expected weight {(n_in, n_out)} and bias {(n_out,)}")
        ws.append(w)
        bs.append(b)
    return mlp_apply(x, ws, bs, activation, out_activation)


# 3x3 convolution with replicate padding ------------------------------------------

def conv2d(x, weight, bias) -> Var:
    """Same-size 3x3 convolution; x (B, C, H, W), weight (Cout, C, 3, 3)."""
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    B, C, H, W = x.shape
    cout = weight.shape[0]
    if weight.shape[1:] != (C, 3, 3):
        raise ConfigurationError(f"conv weight {weight.shape} incompatible with {C} channels")
    cols = sliding_window_view(pad_replicate(x.value), (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    wm = weight.value.reshape(cout, C * 9)
    out = (cols @ wm.T + bias.value).reshape(B, H, W, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm).reshape(B, H, W, C, 3, 3)
            gpad = np.zeros((B, C, H + 2, W + 2), dtype=DTYPE)
            for i in range(3):
                for j in range(3):
                    gpad[:, :, i:i + H, j:j + W] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = fold_replicate_pad(gpad)
        return gx, gw, gb

    return make(np.ascontiguousarray(out), (x, weight, bias), grad_fn)


def init_conv(rng: np.random.Generator, channels: Sequence[int], prefix: str = "",
              kernel: int = 3) -> ParamStore:
    if kernel != 3:
        raise ConfigurationError(f"only 3x3 kernels are supported, got {kernel}")
    store = ParamStore()
    for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
        bound = np.sqrt(1.0 / (c_in * 9))
        store[f"{prefix}{i}.weight"] = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
        store[f"{prefix}{i}.bias"] = np.zeros(c_out)
    return store


def conv2d_forward(params: Mapping, input, channels: Sequence[int], kernel=3,
                   activation: str = "leaky_relu", prefix: str = "") -> Var:
    """Stack of 3x3 replicate-padded convolutions; hidden layers activated,
    output linear. Accepts (C, H, W) or (B, C, H, W) input."""
    if isinstance(kernel, (tuple, list)):
        if len(kernel) != 2 or kernel[0] != kernel[1]:
            raise ConfigurationError(f"kernel must be square, got {tuple(kernel)}")
        kernel = kernel[0]
    if kernel != 3:
        raise ConfigurationError(f"only 3x3 kernels are supported, got {kernel}")
    activation = _check_activation(activation)
    x = as_var(input)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != channels[0]:
        raise ConfigurationError(
            f"layer 0: input has {x.shape[1] if x.ndim == 4 else '?'} channels, "
            f"expected {channels[0]}")
    n = len(channels) - 1
    h = x
    for i in range(n):
        try:
            w, b = params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"]
        except KeyError as exc:
            raise ConfigurationError(f"layer {i}: missing parameter {exc.args[0]!r}") from None
        if tuple(np.shape(getattr(w, "value", w))) != (channels[i + 1], channels[i], 3, 3):
            raise ConfigurationError(f"layer {i}: weight shape mismatch")
        h = conv2d(h, w, b)
        if i < n - 1:
            h = T.leaky_relu(h) if activation == "leaky_relu" else \
                T.tanh(h) if activation == "tanh" else h
    return h.reshape(h.shape[1:]) if single else h

