"""Networks, gradients and update rules.

Parameters live in ordered ``dict[str, ndarray]`` maps wrapped by small
dataclasses (:class:`MlpParams`, :class:`LstmParams`). Gradients use the same
keys, so the optimisers below work on any parameter set.

Conventions: MLP weights are ``(out, in)`` and act on row-batched inputs as
``x @ W.T + b``. The LSTM keeps its four gates in one ``(I + H, 4H)`` matrix,
ordered input, forget, output, candidate.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .numerics import RngStream, sample_truncated_normal

ACTIVATIONS = ("linear", "relu")


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass
class MlpParams:
    tensors: dict
    activations: tuple

    def __post_init__(self):
        self.activations = tuple(self.activations)
        if self.activations[-1] != "linear":
            raise InvalidInputError("final MLP layer must be linear")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {act!r}")
        for i in range(1, self.n_layers):
            if self.weight(i).shape[1] != self.weight(i - 1).shape[0]:
                raise InvalidInputError(f"layer {i} does not chain with layer {i - 1}")

    @property
    def n_layers(self):
        return len(self.activations)

    def weight(self, i):
        return self.tensors[f"w{i}"]

    def bias(self, i):
        return self.tensors[f"b{i}"]

    @property
    def sizes(self):
        return [self.weight(0).shape[1]] + [self.weight(i).shape[0] for i in range(self.n_layers)]


def init_mlp(sizes, activations, rng: RngStream, sigma=None) -> MlpParams:
    """Truncated-normal weights, zero biases.

    ``sigma=None`` uses ``1/sqrt(fan_in)`` per layer; a number fixes it for
    every layer; ``0`` gives an all-zero network.
    """
    if len(sizes) != len(activations) + 1:
        raise InvalidInputError("need one activation per layer")
    tensors = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = 1.0 / np.sqrt(n_in) if sigma is None else sigma
        if s == 0:
            tensors[f"w{i}"] = np.zeros((n_out, n_in))
        else:
            tensors[f"w{i}"] = sample_truncated_normal(s, rng, size=(n_out, n_in))
        tensors[f"b{i}"] = np.zeros(n_out)
    return MlpParams(tensors, tuple(activations))


def mlp_forward(params: MlpParams, x):
    """Returns ``(y, cache)``; ``x`` may be a vector or a ``(B, in)`` batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.weight(0).shape[1]:
        raise InvalidInputError(
            f"input width {h.shape[1]} does not match first layer {params.weight(0).shape[1]}"
        )
    inputs, pre = [], []
    for i, act in enumerate(params.activations):
        inputs.append(h)
        z = h @ params.weight(i).T + params.bias(i)
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    cache = {"inputs": inputs, "pre": pre}
    return (h[0] if single else h), cache


def mlp_backward(params: MlpParams, cache, dy):
    dy = np.atleast_2d(dy)
    grads = {}
    for i in reversed(range(params.n_layers)):
        if params.activations[i] == "relu":
            dy = dy * (cache["pre"][i] > 0)
        grads[f"w{i}"] = dy.T @ cache["inputs"][i]
        grads[f"b{i}"] = dy.sum(axis=0)
        if i:
            dy = dy @ params.weight(i)
    return {k: grads[k] for k in params.tensors}


def mlp_l2_grad(params: MlpParams, x, y):
    """Mean over the batch of ``||y_hat - y||^2`` and its exact gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None] if params.sizes[-1] == 1 and y.shape[0] == x.shape[0] else y[None, :]
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    out, cache = mlp_forward(params, x)
    if out.shape != y.shape:
        raise InvalidInputError(f"target shape {y.shape} does not match output {out.shape}")
    diff = out - y
    n = x.shape[0]
    loss = float(np.sum(diff * diff) / n)
    return loss, mlp_backward(params, cache, 2.0 * diff / n)


def effective_matrix(params: MlpParams):
    """Product of the weight matrices of a purely linear MLP (biases ignored)."""
    if any(a != "linear" for a in params.activations):
        raise InvalidInputError("effective matrix is only defined for linear networks")
    w = params.weight(0)
    for i in range(1, params.n_layers):
        w = params.weight(i) @ w
    return w


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


@dataclass
class LstmParams:
    input_size: int
    hidden_size: int
    output_size: int
    tensors: dict

    def __post_init__(self):
        i, h, o = self.input_size, self.hidden_size, self.output_size
        want = {"w_gates": (i + h, 4 * h), "b_gates": (4 * h,), "w_out": (h, o), "b_out": (o,)}
        for name, shape in want.items():
            if self.tensors[name].shape != shape:
                raise InvalidInputError(f"{name} has shape {self.tensors[name].shape}, want {shape}")


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def copy(self):
        return LstmState(self.h.copy(), self.c.copy())


def init_lstm(input_size, output_size, rng: RngStream, hidden_size=64, forget_bias=1.0) -> LstmParams:
    """Truncated-normal weights with sigma = 1/sqrt(fan_in), forget-gate bias 1."""
    fan_gates = input_size + hidden_size
    b = np.zeros(4 * hidden_size)
    b[hidden_size : 2 * hidden_size] = forget_bias
    tensors = {
        "w_gates": sample_truncated_normal(1.0 / np.sqrt(fan_gates), rng, size=(fan_gates, 4 * hidden_size)),
        "b_gates": b,
        "w_out": sample_truncated_normal(1.0 / np.sqrt(hidden_size), rng, size=(hidden_size, output_size)),
        "b_out": np.zeros(output_size),
    }
    return LstmParams(input_size, hidden_size, output_size, tensors)


def zero_lstm(input_size, output_size, hidden_size=64) -> LstmParams:
    h = hidden_size
    tensors = {
        "w_gates": np.zeros((input_size + h, 4 * h)),
        "b_gates": np.zeros(4 * h),
        "w_out": np.zeros((h, output_size)),
        "b_out": np.zeros(output_size),
    }
    return LstmParams(input_size, hidden_size, output_size, tensors)


def zero_state(params: LstmParams, batch=None) -> LstmState:
    shape = (params.hidden_size,) if batch is None else (batch, params.hidden_size)
    return LstmState(np.zeros(shape), np.zeros(shape))


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def lstm_step(params: LstmParams, state: LstmState, x):
    """One LSTM step followed by the linear readout.

    Works on a single vector or a ``(B, input_size)`` batch.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.input_size:
        raise InvalidInputError(f"input width {x.shape[-1]} != {params.input_size}")
    if state.h.shape[-1] != params.hidden_size or state.h.shape[:-1] != x.shape[:-1]:
        raise InvalidInputError("state shape does not match input batch")
    H = params.hidden_size
    p = params.tensors
    gates = np.concatenate([x, state.h], axis=-1) @ p["w_gates"] + p["b_gates"]
    i = _sigmoid(gates[..., :H])
    f = _sigmoid(gates[..., H : 2 * H])
    o = _sigmoid(gates[..., 2 * H : 3 * H])
    g = np.tanh(gates[..., 3 * H :])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return LstmState(h, c), h @ p["w_out"] + p["b_out"]


def lstm_forward(params: LstmParams, inputs, state: LstmState | None = None, keep_cache=True, feedback=None):
    """Run a ``[T, B, I]`` input sequence. Returns ``(outputs, states, cache)``.

    ``states[t]`` is the state *before* step ``t`` (so ``states[0]`` is the
    initial state and ``states[T]`` the final one).

    Closed-loop rollouts pass ``feedback(t, out_t)``; it is called after every
    step and its return value becomes the input of step ``t + 1`` (ignored
    after the last step). ``inputs[0]`` must already be filled.
    """
    inputs = np.array(inputs, dtype=float) if feedback is not None else np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != params.input_size:
        raise InvalidInputError(f"inputs must be [T, B, {params.input_size}], got {inputs.shape}")
    T, B, I = inputs.shape
    if T == 0:
        raise InvalidInputError("episode must have at least one step")
    H = params.hidden_size
    p = params.tensors
    w_x, w_h = p["w_gates"][:I], p["w_gates"][I:]
    if state is None:
        state = zero_state(params, B)
    if feedback is None:
        x_proj = (inputs.reshape(T * B, I) @ w_x).reshape(T, B, 4 * H) + p["b_gates"]
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    hs[0], cs[0] = state.h, state.c
    gate_acts = np.empty((T, B, 4 * H)) if keep_cache else None
    tanh_c = np.empty((T, B, H)) if keep_cache else None
    for t in range(T):
        xp = x_proj[t] if feedback is None else inputs[t] @ w_x + p["b_gates"]
        z = xp + hs[t] @ w_h
        ifo = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        cs[t + 1] = ifo[:, H : 2 * H] * cs[t] + ifo[:, :H] * g
        tc = np.tanh(cs[t + 1])
        hs[t + 1] = ifo[:, 2 * H :] * tc
        if keep_cache:
            gate_acts[t, :, : 3 * H] = ifo
            gate_acts[t, :, 3 * H :] = g
            tanh_c[t] = tc
        if feedback is not None:
            nxt = feedback(t, hs[t + 1] @ p["w_out"] + p["b_out"])
            if t + 1 < T:
                inputs[t + 1] = nxt
    outputs = (hs[1:].reshape(T * B, H) @ p["w_out"]).reshape(T, B, -1) + p["b_out"]
    cache = {"inputs": inputs, "hs": hs, "cs": cs, "gates": gate_acts, "tanh_c": tanh_c}
    return outputs, (hs, cs), cache


def lstm_backward(params: LstmParams, cache, d_outputs):
    inputs, hs, cs = cache["inputs"], cache["hs"], cache["cs"]
    acts, tanh_c = cache["gates"], cache["tanh_c"]
    T, B, I = inputs.shape
    H = params.hidden_size
    p = params.tensors
    w_h = p["w_gates"][I:]
    d_outputs = np.asarray(d_outputs, dtype=float)
    flat_d = d_outputs.reshape(T * B, -1)
    grads = {
        "w_out": hs[1:].reshape(T * B, H).T @ flat_d,
        "b_out": flat_d.sum(axis=0),
    }
    dh_out = (flat_d @ p["w_out"].T).reshape(T, B, H)
    d_gates = np.empty((T, B, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in reversed(range(T)):
        i = acts[t, :, :H]
        f = acts[t, :, H : 2 * H]
        o = acts[t, :, 2 * H : 3 * H]
        g = acts[t, :, 3 * H :]
        tc = tanh_c[t]
        dh = dh + dh_out[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = d_gates[t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - g * g)
        dc = dc * f
        dh = dz @ w_h.T
    flat_g = d_gates.reshape(T * B, 4 * H)
    grads["w_gates"] = np.concatenate(
        [inputs.reshape(T * B, I).T @ flat_g, hs[:-1].reshape(T * B, H).T @ flat_g], axis=0
    )
    grads["b_gates"] = flat_g.sum(axis=0)
    return {k: grads[k] for k in p}


@dataclass
class L2Loss:
    """Mean over the batch of ``(1/T) * sum_t ||y_hat_t - y_t||^2``."""

    targets: np.ndarray

    def value_and_grad(self, outputs):
        d = outputs - self.targets
        T, B = outputs.shape[:2]
        return float(np.sum(d * d) / (T * B)), 2.0 * d / (T * B)


@dataclass
class ReinforceLoss:
    """Score-function objective ``-(1/(T B)) sum_{t,b} R_tb log pi(a_tb)``.

    ``returns`` are treated as constants (no gradient flows through them).
    """

    actions: np.ndarray
    returns: np.ndarray

    def value_and_grad(self, outputs):
        T, B, K = outputs.shape
        probs = softmax(outputs)
        a = np.asarray(self.actions)
        r = np.asarray(self.returns, dtype=float)
        picked = np.take_along_axis(probs, a[..., None], axis=-1)[..., 0]
        loss = float(-np.sum(r * np.log(picked)) / (T * B))
        grad = probs.copy()
        np.put_along_axis(grad, a[..., None], np.take_along_axis(grad, a[..., None], -1) - 1.0, -1)
        return loss, grad * (r[..., None] / (T * B))


def lstm_bptt(params: LstmParams, inputs, loss, state: LstmState | None = None):
    """Exact episode gradient by backpropagation through time.

    ``loss`` is an :class:`L2Loss` or :class:`ReinforceLoss` (anything with a
    ``value_and_grad(outputs)`` method works).
    """
    outputs, _, cache = lstm_forward(params, inputs, state)
    value, d_out = loss.value_and_grad(outputs)
    return value, lstm_backward(params, cache, d_out)


# --------------------------------------------------------------------------
# Policy-gradient pieces
# --------------------------------------------------------------------------


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def reinforce_logit_grad(logits, action: int, ret: float):
    """Gradient of ``-ret * log softmax(logits)[action]`` with respect to logits."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits must be finite")
    if not 0 <= action < logits.shape[-1]:
        raise InvalidInputError(f"action {action} out of range for {logits.shape[-1]} logits")
    g = softmax(logits)
    g[action] -= 1.0
    return ret * g


# --------------------------------------------------------------------------
# Optimisers
# --------------------------------------------------------------------------


def _tensors(params):
    return params.tensors if hasattr(params, "tensors") else params


def _rewrap(params, tensors):
    return dataclasses.replace(params, tensors=tensors) if hasattr(params, "tensors") else tensors


def sgd_update(params, grads, lr: float):
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    cur = _tensors(params)
    return _rewrap(params, {k: v - lr * grads[k] for k, v in cur.items()})


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        cur = _tensors(params)
        return cls({k: np.zeros_like(v) for k, v in cur.items()}, {k: np.zeros_like(v) for k, v in cur.items()}, 0)


def adam_update(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. Returns ``(params, state)``; inputs are not mutated."""
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    cur = _tensors(params)
    if not state.m:
        state = AdamState.zeros_like(cur)
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new, m, v = {}, {}, {}
    for k, theta in cur.items():
        g = grads[k]
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new[k] = theta - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    return _rewrap(params, new), AdamState(m, v, t)


class Optimizer:
    """Stateful wrapper selecting SGD or Adam by name."""

    def __init__(self, kind: str, lr: float):
        if kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimiser {kind!r}")
        self.kind = kind
        self.lr = lr
        self.state = AdamState()

    def step(self, params, grads):
        if self.kind == "sgd":
            return sgd_update(params, grads, self.lr)
        params, self.state = adam_update(params, grads, self.state, self.lr)
        return params


# --------------------------------------------------------------------------
# Checkpoint archive: flat little-endian float64 blob + JSON shape manifest
# --------------------------------------------------------------------------


def save_archive(path, tensors: dict, meta: dict | None = None):
    """Write ``<path>.bin`` and ``<path>.json``. Returns both paths."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float64", "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    manifest = {"endianness": "little", "tensors": entries, "meta": meta or {}}
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path, json_path


def load_archive(path):
    """Inverse of :func:`save_archive`; returns ``(tensors, meta)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("endianness") != "little":
        raise InvalidInputError("only little-endian archives are supported")
    blob = path.with_suffix(".bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        a = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        tensors[e["name"]] = a.reshape(e["shape"]).astype(float)
    return tensors, manifest["meta"]


def save_lstm(path, params: LstmParams, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(input_size=params.input_size, hidden_size=params.hidden_size, output_size=params.output_size)
    return save_archive(path, params.tensors, meta)


def load_lstm(path):
    tensors, meta = load_archive(path)
    params = LstmParams(meta["input_size"], meta["hidden_size"], meta["output_size"], tensors)
    return params, meta
