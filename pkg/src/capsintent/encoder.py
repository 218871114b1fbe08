"""Stacked bidirectional gated recurrent encoder with analytic backprop.

The cell is a GRU variant with gates packed as [reset | update | candidate]
along the last axis of the weight matrices:

    r = sigmoid(x Wx[:, :H]   + h Wh[:, :H]   + b[:H])
    z = sigmoid(x Wx[:, H:2H] + h Wh[:, H:2H] + b[H:2H])
    n = tanh   (x Wx[:, 2H:]  + r * (h Wh[:, 2H:]) + b[2H:])
    h' = z * h + (1 - z) * n

The encoder runs ``layers`` bidirectional layers over the frame sequence and
reads out the concatenated final states of both directions of the top layer.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .numeric import Params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# A zero-initialized update gate keeps only half the state per frame, wiping
# early-sequence content long before the final-state readout; biasing it
# positive starts the cell with multi-frame memory.
UPDATE_GATE_BIAS = 2.0


def gru_param_init(rng: np.random.Generator, in_dim: int, hidden: int) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in); biases zero except the update
    gate's, which starts at +2 so states persist across segments."""
    sx = 1.0 / np.sqrt(in_dim)
    sh = 1.0 / np.sqrt(hidden)
    b = np.zeros(3 * hidden)
    b[hidden:2 * hidden] = UPDATE_GATE_BIAS
    return {
        "Wx": rng.uniform(-sx, sx, size=(in_dim, 3 * hidden)),
        "Wh": rng.uniform(-sh, sh, size=(hidden, 3 * hidden)),
        "b": b,
    }


def gru_forward(p: dict[str, np.ndarray], xs: np.ndarray):
    """Run the cell over ``xs`` (T, in_dim). Returns (states (T, H), cache)."""
    T = xs.shape[0]
    hidden = p["Wh"].shape[0]
    xx_all = xs @ p["Wx"] + p["b"]
    hs = np.empty((T, hidden))
    cache = {"xs": xs, "r": np.empty((T, hidden)), "z": np.empty((T, hidden)),
             "n": np.empty((T, hidden)), "hh_n": np.empty((T, hidden)),
             "h_prev": np.empty((T, hidden))}
    h = np.zeros(hidden)
    for t in range(T):
        hh = h @ p["Wh"]
        r = _sigmoid(xx_all[t, :hidden] + hh[:hidden])
        z = _sigmoid(xx_all[t, hidden:2 * hidden] + hh[hidden:2 * hidden])
        hh_n = hh[2 * hidden:]
        n = np.tanh(xx_all[t, 2 * hidden:] + r * hh_n)
        cache["h_prev"][t] = h
        cache["r"][t], cache["z"][t], cache["n"][t] = r, z, n
        cache["hh_n"][t] = hh_n
        h = z * h + (1.0 - z) * n
        hs[t] = h
    return hs, cache


def gru_backward(p, cache, d_steps, d_last):
    """BPTT through one direction.

    d_steps: (T, H) per-step gradients on the emitted states (may be None),
    d_last: extra gradient on the final state. Returns (param grads, dxs).
    """
    xs = cache["xs"]
    T, hidden = cache["r"].shape
    dWx = np.zeros_like(p["Wx"])
    dWh = np.zeros_like(p["Wh"])
    db = np.zeros_like(p["b"])
    dxs = np.zeros_like(xs)
    dh = np.array(d_last, dtype=np.float64, copy=True)
    for t in range(T - 1, -1, -1):
        if d_steps is not None:
            dh = dh + d_steps[t]
        r, z, n = cache["r"][t], cache["z"][t], cache["n"][t]
        h_prev, hh_n = cache["h_prev"][t], cache["hh_n"][t]
        da_z = dh * (h_prev - n) * z * (1.0 - z)
        da_n = dh * (1.0 - z) * (1.0 - n * n)
        dr = da_n * hh_n
        dhh_n = da_n * r
        da_r = dr * r * (1.0 - r)
        d_pre_x = np.concatenate([da_r, da_z, da_n])
        d_pre_h = np.concatenate([da_r, da_z, dhh_n])
        dWx += np.outer(xs[t], d_pre_x)
        dWh += np.outer(h_prev, d_pre_h)
        db += d_pre_x
        dxs[t] = d_pre_x @ p["Wx"].T
        dh = dh * z + d_pre_h @ p["Wh"].T
    return {"Wx": dWx, "Wh": dWh, "b": db}, dxs


def _layer_params(params: Params, layer: int, direction: str) -> dict[str, np.ndarray]:
    prefix = f"enc.{layer}.{direction}."
    return {"Wx": params[prefix + "Wx"], "Wh": params[prefix + "Wh"], "b": params[prefix + "b"]}


def init_encoder_params(rng: np.random.Generator, feat_dim: int, hidden: int, layers: int) -> Params:
    params: Params = {}
    in_dim = feat_dim
    for layer in range(layers):
        for direction in ("f", "b"):
            block = gru_param_init(rng, in_dim, hidden)
            for key, val in block.items():
                params[f"enc.{layer}.{direction}.{key}"] = val
        in_dim = 2 * hidden
    return params


def encoder_forward(params: Params, feats: np.ndarray, hidden: int, layers: int):
    """Encode a (T, feat_dim) utterance into the (2*hidden,) final-state readout."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DataError(f"encoder needs a non-empty (frames, dim) matrix, got shape {feats.shape}")
    xs = feats
    caches = []
    for layer in range(layers):
        hs_f, cache_f = gru_forward(_layer_params(params, layer, "f"), xs)
        hs_b_rev, cache_b = gru_forward(_layer_params(params, layer, "b"), xs[::-1])
        caches.append((cache_f, cache_b))
        xs = np.concatenate([hs_f, hs_b_rev[::-1]], axis=1)
    # xs rows are [h_f_t, h_b_t]; forward final lives at t = T-1, backward final at t = 0
    readout = np.concatenate([xs[-1, :hidden], xs[0, hidden:]])
    return readout, {"caches": caches, "layers": layers, "hidden": hidden, "T": feats.shape[0]}


def encoder_backward(params: Params, cache, d_readout: np.ndarray) -> Params:
    """Backprop the readout gradient through every layer and time step."""
    layers, hidden = cache["layers"], cache["hidden"]
    T = cache["T"]
    grads: Params = {}
    d_steps_f = None
    d_steps_b_rev = None
    d_last_f = d_readout[:hidden]
    d_last_b = d_readout[hidden:]
    for layer in range(layers - 1, -1, -1):
        cache_f, cache_b = cache["caches"][layer]
        g_f, dx_f = gru_backward(_layer_params(params, layer, "f"), cache_f, d_steps_f, d_last_f)
        g_b, dx_b_rev = gru_backward(_layer_params(params, layer, "b"), cache_b, d_steps_b_rev, d_last_b)
        for key, val in g_f.items():
            grads[f"enc.{layer}.f.{key}"] = val
        for key, val in g_b.items():
            grads[f"enc.{layer}.b.{key}"] = val
        d_xs = dx_f + dx_b_rev[::-1]  # (T, in_dim of this layer)
        if layer > 0:
            d_steps_f = d_xs[:, :hidden]
            d_steps_b_rev = d_xs[::-1, hidden:]
            d_last_f = np.zeros(hidden)
            d_last_b = np.zeros(hidden)
    return grads
