"""Layer math: activations, dense, 1-d convolution, pooling, RNN/LSTM/GRU,
bidirectional wrappers and the classification losses.

Sequences are batched as ``(batch, T, features)``. A single 2-d ``(T, F)``
sequence is accepted too and treated as a batch of one. Tabular records
become sequences through :func:`as_sequence`, one feature per step.

Recurrent cells and the convolution are single tape primitives with
hand-written backward passes. That keeps the tape short (one node per layer
instead of one per step and gate) and keeps BPTT readable in one place.

Parameter layouts
-----------------
dense    ``W[in, out]``, ``b[out]``
conv1d   ``W[out_ch, in_ch, k]``, ``b[out_ch]``
rnn      ``Wx[in, h]``, ``Wh[h, h]``, ``b[h]``
lstm     ``Wx[in, 4h]``, ``Wh[h, 4h]``, ``b[4h]``; column blocks are the
         input, forget, cell and output gates, in that order
gru      ``Wx[in, 3h]``, ``Wh[h, 3h]``, ``b[3h]``; blocks are update,
         reset, candidate
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import Tensor, _sigmoid, record

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax")
CELLS = ("rnn", "lstm", "gru")
_GATES = {"rnn": 1, "lstm": 4, "gru": 3}


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "softmax":
        return T.softmax(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_dense(rng, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {"W": glorot_uniform(rng, (n_in, n_out), n_in, n_out), "b": np.zeros(n_out)}


def init_conv1d(rng, in_ch: int, out_ch: int, k: int) -> dict[str, np.ndarray]:
    return {
        "W": glorot_uniform(rng, (out_ch, in_ch, k), in_ch * k, out_ch * k),
        "b": np.zeros(out_ch),
    }


def init_cell(rng, kind: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    g = _GATES[kind] * hidden
    wh = np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(_GATES[kind])], axis=1)
    return {"Wx": glorot_uniform(rng, (n_in, g), n_in, g), "Wh": wh, "b": np.zeros(g)}


def param_shapes(kind: str, n_in: int, n_out: int, k: int = 0) -> dict[str, tuple]:
    """Expected parameter shapes for a layer; ``n_out`` is units, channels or hidden size."""
    if kind == "dense":
        return {"W": (n_in, n_out), "b": (n_out,)}
    if kind == "conv1d":
        return {"W": (n_out, n_in, k), "b": (n_out,)}
    if kind in _GATES:
        g = _GATES[kind] * n_out
        return {"Wx": (n_in, g), "Wh": (n_out, g), "b": (g,)}
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def check_params(kind: str, params: dict, n_in: int, n_out: int, k: int = 0) -> None:
    expected = param_shapes(kind, n_in, n_out, k)
    if set(params) != set(expected):
        raise ConfigurationError(f"{kind} parameters must be {sorted(expected)}, got {sorted(params)}")
    for name, shape in expected.items():
        got = tuple(params[name].shape)
        if got != shape:
            raise DimensionError(f"{kind} parameter {name} has shape {got}, expected {shape}")


# ---------------------------------------------------------------------------
# feed-forward layers


def dense_forward(x: Tensor, p: dict[str, Tensor], act: str | None = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p["W"].shape[0]:
        raise DimensionError(f"dense input {x.shape} does not match weights {p['W'].shape}")
    z = T.add(T.matmul(x, p["W"]), p["b"])
    return activation(act, z) if act else z


def as_sequence(x: Tensor) -> Tensor:
    """Tabular ``(batch, F)`` to ``(batch, F, 1)``: each feature is one time step."""
    if x.ndim != 2:
        raise DimensionError(f"expected a (batch, features) matrix, got {x.shape}")
    return T.reshape(x, (x.shape[0], x.shape[1], 1))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"sequence input must be (T, F) or (batch, T, F), got {x.shape}")
    return x, False


def conv_output_length(t: int, k: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - k) // stride + 1


def conv1d_forward(x: Tensor, p: dict[str, Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (kernels are not flipped) with zero padding.

    Output length is ``floor((T + 2*padding - k) / stride) + 1``.
    """
    xb, single = _batched(x)
    w, b = p["W"], p["b"]
    n, t, c_in = xb.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise DimensionError(f"conv1d input has {c_in} channels, kernels expect {w_in}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride {stride} / padding {padding}")
    if k > t + 2 * padding:
        raise DimensionError(f"kernel size {k} exceeds padded input length {t + 2 * padding}")
    t_out = conv_output_length(t, k, stride, padding)
    span = stride * (t_out - 1) + 1

    xp = np.pad(xb.data, ((0, 0), (padding, padding), (0, 0)))
    # columns ordered (tap, channel) to match w.transpose(2, 1, 0)
    cols = np.concatenate([xp[:, j : j + span : stride, :] for j in range(k)], axis=2).reshape(n * t_out, k * c_in)
    wmat = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    y = Tensor((cols @ wmat + b.data).reshape(n, t_out, c_out), dtype=xb.dtype)

    def vjp(gs):
        g2 = gs[0].reshape(n * t_out, c_out)
        dcols = (g2 @ wmat.T).reshape(n, t_out, k, c_in)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j : j + span : stride, :] += dcols[:, :, j, :]
        dw = (cols.T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
        return dxp[:, padding : padding + t, :], np.ascontiguousarray(dw), g2.sum(axis=0)

    record((xb, w, b), (y,), vjp)
    return T.reshape(y, y.shape[1:]) if single else y


def maxpool1d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    n, t, c = x.shape
    if size > t:
        raise DimensionError(f"pool size {size} exceeds sequence length {t}")
    t_out = (t - size) // stride + 1
    span = stride * (t_out - 1) + 1
    # running max; ties keep the earliest tap
    best = x.data[:, 0:span:stride, :].copy()
    arg = np.zeros(best.shape, dtype=np.int8)
    for j in range(1, size):
        cand = x.data[:, j : j + span : stride, :]
        better = cand > best
        np.copyto(best, cand, where=better)
        arg[better] = j
    y = Tensor(best, dtype=x.dtype)

    def vjp(gs):
        (g,) = gs
        dx = np.zeros_like(x.data)
        for j in range(size):
            dx[:, j : j + span : stride, :] += g * (arg == j)
        return (dx,)

    record((x,), (y,), vjp)
    return y


# ---------------------------------------------------------------------------
# recurrent cells


def _initial(state: Tensor | None, n: int, hidden: int, dtype) -> tuple[Tensor, bool]:
    """Batch an initial state. Returns the (batch, h) tensor and whether it was tiled."""
    if state is None:
        return Tensor(np.zeros((n, hidden), dtype=dtype)), False
    if state.shape == (hidden,):
        return T.add(Tensor(np.zeros((n, hidden), dtype=dtype)), state), True
    if state.shape == (n, hidden):
        return state, False
    raise DimensionError(f"initial state has shape {state.shape}, expected ({hidden},) or ({n}, {hidden})")


def _check_cell(kind: str, x: Tensor, p: dict[str, Tensor]) -> int:
    wx, wh, b = p["Wx"], p["Wh"], p["b"]
    hidden = wh.shape[0]
    g = _GATES[kind] * hidden
    if wx.shape != (x.shape[2], g) or wh.shape != (hidden, g) or b.shape != (g,):
        raise DimensionError(
            f"{kind} parameters Wx{wx.shape}, Wh{wh.shape}, b{b.shape} do not fit input width {x.shape[2]}"
        )
    return hidden


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_{n,t} a[n,t,:]^T b[n,t,:]`` as one 2-d matmul."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _unbatch(single: bool, *ts: Tensor):
    if not single:
        return ts
    return tuple(T.reshape(t, t.shape[1:]) for t in ts)


def _time_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2))


def _batch_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2))


# Inside the cells every per-step buffer is time-major, (T, batch, width), so
# each step reads and writes one contiguous block.


def rnn_forward(x: Tensor, p: dict[str, Tensor], h0: Tensor | None = None):
    """``h_t = tanh(x_t Wx + h_{t-1} Wh + b)``. Returns ``(states, h_T)``."""
    xb, single = _batched(x)
    hidden = _check_cell("rnn", xb, p)
    n, steps, _ = xb.shape
    h0b, _ = _initial(h0, n, hidden, xb.dtype)
    wx, wh, b = p["Wx"].data, p["Wh"].data, p["b"].data
    xs = _time_major(xb.data)

    xw = xs @ wx + b
    hs = np.empty((steps, n, hidden), dtype=xb.dtype)
    h = h0b.data
    for t in range(steps):
        h = np.tanh(xw[t] + h @ wh, out=hs[t])
    states = Tensor(_batch_major(hs), dtype=xb.dtype)

    def vjp(gs):
        g = _time_major(gs[0])
        da_all = np.empty_like(hs)
        dh = np.zeros((n, hidden), dtype=hs.dtype)
        for t in range(steps - 1, -1, -1):
            dh += g[t]
            da = np.multiply(dh, 1.0 - hs[t] * hs[t], out=da_all[t])
            dh = da @ wh.T
        h_prev = np.concatenate([h0b.data[None], hs[:-1]], axis=0)
        dx = _batch_major(da_all @ wx.T)
        return dx, _outer_sum(xs, da_all), _outer_sum(h_prev, da_all), da_all.sum(axis=(0, 1)), dh

    record((xb, p["Wx"], p["Wh"], p["b"], h0b), (states,), vjp)
    return _unbatch(single, states, states[:, -1, :])


def lstm_forward(x: Tensor, p: dict[str, Tensor], h0: Tensor | None = None, c0: Tensor | None = None):
    """Standard LSTM; returns ``(states, h_T, c_T)``.

    ``i, f, o = sigmoid(.)``, ``g = tanh(.)``, ``c_t = f*c_{t-1} + i*g``,
    ``h_t = o*tanh(c_t)``.
    """
    xb, single = _batched(x)
    H = _check_cell("lstm", xb, p)
    n, steps, _ = xb.shape
    h0b, _ = _initial(h0, n, H, xb.dtype)
    c0b, _ = _initial(c0, n, H, xb.dtype)
    wx, wh, b = p["Wx"].data, p["Wh"].data, p["b"].data
    xs = _time_major(xb.data)

    xw = xs @ wx + b
    hs = np.empty((steps, n, H), dtype=xb.dtype)
    cs = np.empty_like(hs)
    tcs = np.empty_like(hs)
    gates = np.empty((steps, n, 4 * H), dtype=xb.dtype)
    h, c = h0b.data, c0b.data
    for t in range(steps):
        act = gates[t]
        np.add(xw[t], h @ wh, out=act)
        act[:, 2 * H : 3 * H] = np.tanh(act[:, 2 * H : 3 * H])
        for lo, hi in ((0, 2 * H), (3 * H, 4 * H)):
            act[:, lo:hi] = _sigmoid(act[:, lo:hi])
        i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        c = np.add(f * c, i * g, out=cs[t])
        h = np.multiply(o, np.tanh(c, out=tcs[t]), out=hs[t])
    states = Tensor(_batch_major(hs), dtype=xb.dtype)
    cells = Tensor(_batch_major(cs), dtype=xb.dtype)

    def vjp(gs):
        g_h, g_c = _time_major(gs[0]), _time_major(gs[1])
        da_all = np.empty_like(gates)
        dh = np.zeros((n, H), dtype=hs.dtype)
        dc = np.zeros((n, H), dtype=hs.dtype)
        for t in range(steps - 1, -1, -1):
            act = gates[t]
            i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
            c_prev = cs[t - 1] if t > 0 else c0b.data
            tc = tcs[t]
            dh += g_h[t]
            dc += g_c[t] + dh * o * (1.0 - tc * tc)
            da = da_all[t]
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            da[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dh = da @ wh.T
            dc = dc * f
        h_prev = np.concatenate([h0b.data[None], hs[:-1]], axis=0)
        dx = _batch_major(da_all @ wx.T)
        return dx, _outer_sum(xs, da_all), _outer_sum(h_prev, da_all), da_all.sum(axis=(0, 1)), dh, dc

    record((xb, p["Wx"], p["Wh"], p["b"], h0b, c0b), (states, cells), vjp)
    return _unbatch(single, states, states[:, -1, :], cells[:, -1, :])


def gru_forward(x: Tensor, p: dict[str, Tensor], h0: Tensor | None = None):
    """GRU with ``h_t = (1 - z)*h_{t-1} + z*h~``; returns ``(states, h_T)``.

    ``z, r = sigmoid(.)`` and ``h~ = tanh(x_t Wx_n + (r*h_{t-1}) Wh_n + b_n)``.
    """
    xb, single = _batched(x)
    H = _check_cell("gru", xb, p)
    n, steps, _ = xb.shape
    h0b, _ = _initial(h0, n, H, xb.dtype)
    wx, wh, b = p["Wx"].data, p["Wh"].data, p["b"].data
    wh_zr, wh_n = wh[:, : 2 * H], wh[:, 2 * H :]
    xs = _time_major(xb.data)

    xw = xs @ wx + b
    hs = np.empty((steps, n, H), dtype=xb.dtype)
    zrn = np.empty((steps, n, 3 * H), dtype=xb.dtype)
    h = h0b.data
    for t in range(steps):
        act = zrn[t]
        act[:, : 2 * H] = _sigmoid(xw[t, :, : 2 * H] + h @ wh_zr)
        z, r = act[:, :H], act[:, H : 2 * H]
        cand = np.tanh(xw[t, :, 2 * H :] + (r * h) @ wh_n, out=act[:, 2 * H :])
        h = np.add((1.0 - z) * h, z * cand, out=hs[t])
    states = Tensor(_batch_major(hs), dtype=xb.dtype)

    def vjp(gs):
        g = _time_major(gs[0])
        da_all = np.empty_like(zrn)
        dwh = np.zeros_like(wh)
        dh = np.zeros((n, H), dtype=hs.dtype)
        for t in range(steps - 1, -1, -1):
            act = zrn[t]
            z, r, cand = act[:, :H], act[:, H : 2 * H], act[:, 2 * H :]
            h_prev = hs[t - 1] if t > 0 else h0b.data
            dh += g[t]
            da = da_all[t]
            da_n = np.multiply(dh * z, 1.0 - cand * cand, out=da[:, 2 * H :])
            da[:, :H] = dh * (cand - h_prev) * z * (1.0 - z)
            drh = da_n @ wh_n.T
            da[:, H : 2 * H] = drh * h_prev * r * (1.0 - r)
            dwh[:, : 2 * H] += h_prev.T @ da[:, : 2 * H]
            dwh[:, 2 * H :] += (r * h_prev).T @ da_n
            dh = dh * (1.0 - z) + drh * r + da[:, : 2 * H] @ wh_zr.T
        dx = _batch_major(da_all @ wx.T)
        return dx, _outer_sum(xs, da_all), dwh, da_all.sum(axis=(0, 1)), dh

    record((xb, p["Wx"], p["Wh"], p["b"], h0b), (states,), vjp)
    return _unbatch(single, states, states[:, -1, :])


_CELL_FORWARD = {"rnn": rnn_forward, "lstm": lstm_forward, "gru": gru_forward}


def cell_forward(kind: str, x: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Run any cell from zero state; returns ``(states, h_T)``."""
    try:
        fn = _CELL_FORWARD[kind]
    except KeyError:
        raise ConfigurationError(f"unknown cell kind {kind!r}; expected one of {CELLS}") from None
    out = fn(x, p)
    return out[0], out[1]


def bidirectional(kind: str, x: Tensor, p_fwd: dict[str, Tensor], p_bwd: dict[str, Tensor], per_step: bool = False) -> Tensor:
    """Run ``kind`` over ``x`` and over time-reversed ``x``.

    Final-state mode returns ``[h_fwd_T | h_bwd_T]`` (width ``2h``). Per-step
    mode returns ``(…, T, 2h)`` with the backward states put back in forward
    time order.
    """
    if p_fwd["Wh"].shape[0] != p_bwd["Wh"].shape[0]:
        raise ConfigurationError(
            f"bidirectional hidden sizes differ: {p_fwd['Wh'].shape[0]} vs {p_bwd['Wh'].shape[0]}"
        )
    time_axis = x.ndim - 2
    fwd_states, fwd_last = cell_forward(kind, x, p_fwd)
    bwd_states, bwd_last = cell_forward(kind, T.flip(x, time_axis), p_bwd)
    if per_step:
        return T.concat([fwd_states, T.flip(bwd_states, time_axis)], axis=-1)
    return T.concat([fwd_last, bwd_last], axis=-1)


# ---------------------------------------------------------------------------
# losses

LOG_EPS = 1e-12


def _check_one_hot(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=-1) == 1):
        raise ValidationError("targets must be one-hot rows")


def cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean over the batch of ``-sum(target * log(pred + 1e-12))``."""
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} must be equal 2-d shapes")
    sums = pred.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(f"prediction row {bad} sums to {sums[bad]!r}, not 1")
    _check_one_hot(target.data)
    ll = T.sum(T.mul(target, T.log(T.add(pred, LOG_EPS))))
    return T.mul(ll, -1.0 / pred.shape[0])


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean of ``-(y log p + (1-y) log(1-p))`` for a ``(batch, 1)`` sigmoid head."""
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    if np.any((pred.data < 0) | (pred.data > 1)):
        raise ValidationError("binary predictions must lie in [0, 1]")
    if not np.all((target.data == 0) | (target.data == 1)):
        raise ValidationError("binary targets must be 0 or 1")
    pos = T.mul(target, T.log(T.add(pred, LOG_EPS)))
    negp = T.mul(T.sub(1.0, target), T.log(T.add(T.sub(1.0, pred), LOG_EPS)))
    return T.mul(T.sum(T.add(pos, negp)), -1.0 / pred.shape[0])
