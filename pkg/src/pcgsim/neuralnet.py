"""Deterministic LSTM training core with flat, exchangeable parameters.

Stacked LSTM layers plus a linear head, trained with mean-squared error,
exact backpropagation through time, and Adam. All parameters of a model live
in one flat float64 vector with a fixed canonical layout, which is the unit
exchanged between aggregator and prosumers:

    per layer:  input weights W (4h x in), recurrent weights U (4h x h),
                biases b (4h), all C-order, gate blocks ordered
                input | forget | cell | output;
    then:       head weights (output x h_last) C-order, head bias (output).

Training math runs in float64; the on-disk wire format stores float32
(see save_params / PARAM_HEADER_BYTES for the byte-exact layout).
"""

import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .seeding import rng_for
from .timeseries import NormalizationParams, WindowedDataset, denormalize


@dataclass(frozen=True)
class ModelTopology:
    input_size: int
    hidden_sizes: tuple[int, ...]
    output_size: int
    lookback: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_size <= 0 or self.output_size <= 0 or self.lookback <= 0:
            raise ValueError("topology dimensions must be positive")
        if not self.hidden_sizes or any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("need at least one positive hidden size")

    @property
    def param_count(self) -> int:
        count = 0
        fan_in = self.input_size
        for h in self.hidden_sizes:
            count += 4 * h * (fan_in + h) + 4 * h
            fan_in = h
        count += self.hidden_sizes[-1] * self.output_size + self.output_size
        return count


# Presets used throughout: one 15-min-ahead model for PV/consumption and one
# five-minute-ahead model for EV charging.
MODEL1 = ModelTopology(input_size=1, hidden_sizes=(128, 128), output_size=1, lookback=48)
MODEL2 = ModelTopology(input_size=1, hidden_sizes=(200, 200), output_size=5, lookback=15)


@dataclass(frozen=True)
class ParamVector:
    topology: ModelTopology
    values: np.ndarray  # flat float64, canonical layout

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals.size != self.topology.param_count:
            raise ValueError(
                f"expected {self.topology.param_count} parameters, got {vals.size}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.topology, self.values.copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    gradient_clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size positive")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate and adam_epsilon must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be positive or None")


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _unpack(values: np.ndarray, topology: ModelTopology):
    """Views (no copies) of the flat vector as per-layer matrices."""
    layers = []
    offset = 0
    fan_in = topology.input_size
    for h in topology.hidden_sizes:
        w = values[offset: offset + 4 * h * fan_in].reshape(4 * h, fan_in)
        offset += 4 * h * fan_in
        u = values[offset: offset + 4 * h * h].reshape(4 * h, h)
        offset += 4 * h * h
        b = values[offset: offset + 4 * h]
        offset += 4 * h
        layers.append((w, u, b))
        fan_in = h
    out = topology.output_size
    wh = values[offset: offset + fan_in * out].reshape(out, fan_in)
    offset += fan_in * out
    bh = values[offset: offset + out]
    return layers, wh, bh


def init_params(topology: ModelTopology, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases except forget gates at 1.0.

    Matrices are drawn in layout order (W, U per layer, then head weights)
    from one generator, so a (topology, seed) pair fixes every bit.
    """
    values = np.zeros(topology.param_count)
    layers, wh, bh = _unpack(values, topology)
    rng = np.random.default_rng(seed)
    fan_in = topology.input_size
    for (w, u, b), h in zip(layers, topology.hidden_sizes):
        lim_w = np.sqrt(6.0 / (fan_in + 4 * h))
        w[:] = rng.uniform(-lim_w, lim_w, size=w.shape)
        lim_u = np.sqrt(6.0 / (h + 4 * h))
        u[:] = rng.uniform(-lim_u, lim_u, size=u.shape)
        b[h: 2 * h] = 1.0  # forget gate: remember by default
        fan_in = h
    lim_h = np.sqrt(6.0 / (fan_in + topology.output_size))
    wh[:] = rng.uniform(-lim_h, lim_h, size=wh.shape)
    return ParamVector(topology, values)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _forward_batch(params: ParamVector, x: np.ndarray, keep_cache: bool):
    """Run the stack over a batch. x: (B, T, input_size) float64.

    Returns (outputs (B, output_size), cache or None). Hidden and cell state
    start at zero for every window (stateless contract).
    """
    topo = params.topology
    layers, wh, bh = _unpack(params.values, topo)
    batch, steps = x.shape[0], x.shape[1]
    cache = [] if keep_cache else None
    layer_input = x
    for (w, u, b), h_size in zip(layers, topo.hidden_sizes):
        z_in = layer_input.reshape(batch * steps, -1) @ w.T
        z_in = z_in.reshape(batch, steps, 4 * h_size)
        h = np.zeros((batch, h_size))
        c = np.zeros((batch, h_size))
        outputs = np.empty((batch, steps, h_size))
        if keep_cache:
            gates = np.empty((steps, batch, 4 * h_size))
            c_prev_all = np.empty((steps, batch, h_size))
            h_prev_all = np.empty((steps, batch, h_size))
            tanh_c_all = np.empty((steps, batch, h_size))
        for t in range(steps):
            z = z_in[:, t, :] + h @ u.T + b
            gi = _sigmoid(z[:, :h_size])
            gf = _sigmoid(z[:, h_size: 2 * h_size])
            gg = np.tanh(z[:, 2 * h_size: 3 * h_size])
            go = _sigmoid(z[:, 3 * h_size:])
            c_new = gf * c + gi * gg
            tc = np.tanh(c_new)
            h_new = go * tc
            if keep_cache:
                gates[t, :, :h_size] = gi
                gates[t, :, h_size: 2 * h_size] = gf
                gates[t, :, 2 * h_size: 3 * h_size] = gg
                gates[t, :, 3 * h_size:] = go
                c_prev_all[t] = c
                h_prev_all[t] = h
                tanh_c_all[t] = tc
            h, c = h_new, c_new
            outputs[:, t, :] = h
        if keep_cache:
            cache.append((layer_input, gates, c_prev_all, h_prev_all, tanh_c_all))
        layer_input = outputs
    y = layer_input[:, -1, :] @ wh.T + bh
    if keep_cache:
        cache.append(layer_input[:, -1, :])  # head input
    return y, cache


def forward(params: ParamVector, window: np.ndarray) -> np.ndarray:
    """Predict one window. window: (lookback,) for scalar inputs, or
    (lookback, input_size). Returns the horizon vector (output_size,)."""
    topo = params.topology
    w = np.asarray(window, dtype=np.float64)
    if w.ndim == 1:
        if topo.input_size != 1:
            raise ValueError("flat window only valid for input_size == 1")
        w = w[:, None]
    if w.shape != (topo.lookback, topo.input_size):
        raise ValueError(f"window shape {w.shape} does not match "
                         f"({topo.lookback}, {topo.input_size})")
    y, _ = _forward_batch(params, w[None, :, :], keep_cache=False)
    return y[0]


def predict_batch(params: ParamVector, inputs: np.ndarray,
                  batch_size: int = 256) -> np.ndarray:
    """Forward a stack of windows (n, lookback) -> (n, output_size)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    preds = np.empty((x.shape[0], params.topology.output_size))
    for lo in range(0, x.shape[0], batch_size):
        y, _ = _forward_batch(params, x[lo: lo + batch_size], keep_cache=False)
        preds[lo: lo + y.shape[0]] = y
    return preds


def loss_and_gradient(params: ParamVector, inputs: np.ndarray,
                      targets: np.ndarray):
    """MSE over the batch and full gradient via backprop through time.

    inputs: (B, lookback) or (B, lookback, input_size); targets: (B, horizon).
    Returns (loss, grad) with grad flat in the canonical layout.
    """
    topo = params.topology
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    t = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1:] != (topo.lookback, topo.input_size) or \
            t.shape != (x.shape[0], topo.output_size):
        raise ValueError("batch shapes do not match topology")

    y, cache = _forward_batch(params, x, keep_cache=True)
    batch = x.shape[0]
    err = y - t
    loss = float(np.mean(err ** 2))
    d_y = 2.0 * err / err.size

    layers, wh, bh = _unpack(params.values, topo)
    grad = np.zeros_like(params.values)
    g_layers, g_wh, g_bh = _unpack(grad, topo)

    head_input = cache[-1]
    g_wh += d_y.T @ head_input
    g_bh += d_y.sum(axis=0)
    d_h_last = d_y @ wh

    steps = topo.lookback
    d_from_above = None  # (B, T, h) gradient flowing into the layer's outputs
    for layer_idx in range(len(topo.hidden_sizes) - 1, -1, -1):
        h_size = topo.hidden_sizes[layer_idx]
        w, u, _ = layers[layer_idx]
        g_w, g_u, g_b = g_layers[layer_idx]
        layer_in, gates, c_prev_all, h_prev_all, tanh_c_all = cache[layer_idx]

        d_z = np.empty((steps, batch, 4 * h_size))
        d_h = np.zeros((batch, h_size))
        d_c = np.zeros((batch, h_size))
        for t_idx in range(steps - 1, -1, -1):
            if layer_idx == len(topo.hidden_sizes) - 1:
                if t_idx == steps - 1:
                    d_h = d_h + d_h_last
            else:
                d_h = d_h + d_from_above[:, t_idx, :]
            gi = gates[t_idx, :, :h_size]
            gf = gates[t_idx, :, h_size: 2 * h_size]
            gg = gates[t_idx, :, 2 * h_size: 3 * h_size]
            go = gates[t_idx, :, 3 * h_size:]
            tc = tanh_c_all[t_idx]
            d_o = d_h * tc
            d_c = d_c + d_h * go * (1.0 - tc * tc)
            d_i = d_c * gg
            d_f = d_c * c_prev_all[t_idx]
            d_g = d_c * gi
            d_z[t_idx, :, :h_size] = d_i * gi * (1.0 - gi)
            d_z[t_idx, :, h_size: 2 * h_size] = d_f * gf * (1.0 - gf)
            d_z[t_idx, :, 2 * h_size: 3 * h_size] = d_g * (1.0 - gg * gg)
            d_z[t_idx, :, 3 * h_size:] = d_o * go * (1.0 - go)
            d_h = d_z[t_idx] @ u
            d_c = d_c * gf

        d_z_flat = d_z.reshape(steps * batch, 4 * h_size)
        x_flat = layer_in.transpose(1, 0, 2).reshape(steps * batch, -1)
        g_w += d_z_flat.T @ x_flat
        g_u += d_z_flat.T @ h_prev_all.reshape(steps * batch, h_size)
        g_b += d_z_flat.sum(axis=0)
        if layer_idx > 0:
            d_from_above = (d_z_flat @ w).reshape(steps, batch, -1).transpose(1, 0, 2)
    return loss, grad


def evaluate_loss(params: ParamVector, dataset: WindowedDataset,
                  batch_size: int = 256) -> float:
    """Mean squared error over a whole dataset (normalized units)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    preds = predict_batch(params, dataset.inputs, batch_size)
    return float(np.mean((preds - dataset.targets) ** 2))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def adam_step(values: np.ndarray, grad: np.ndarray, state: AdamState,
              cfg: TrainConfig):
    """One Adam update with bias correction; clips the gradient's global
    L2 norm first when cfg.gradient_clip_norm is set."""
    if grad.shape != values.shape or state.m.shape != values.shape:
        raise ValueError("dimension mismatch between params, grad and state")
    g = grad
    if cfg.gradient_clip_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > cfg.gradient_clip_norm:
            g = g * (cfg.gradient_clip_norm / norm)
    step = state.step + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * g * g
    m_hat = m / (1.0 - cfg.adam_beta1 ** step)
    v_hat = v / (1.0 - cfg.adam_beta2 ** step)
    new_values = values - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
    return new_values, AdamState(step, m, v)


def train_epochs(params: ParamVector, dataset: WindowedDataset,
                 cfg: TrainConfig):
    """Mini-batch training for cfg.epochs passes with a fresh optimizer.

    Epoch e shuffles with a generator derived from (cfg.seed, e), so the
    whole run is a pure function of (params, dataset, cfg). Returns
    (new ParamVector, final epoch mean loss); with epochs == 0 the params
    come back unchanged and the loss is a single evaluation pass.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if cfg.epochs == 0:
        return params.copy(), evaluate_loss(params, dataset)
    values = params.values.copy()
    state = AdamState.zeros(values.size)
    final_epoch_loss = 0.0
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "epoch", epoch).permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            loss, grad = loss_and_gradient(
                ParamVector(params.topology, values),
                dataset.inputs[idx], dataset.targets[idx])
            values, state = adam_step(values, grad, state, cfg)
            loss_sum += loss * idx.size
        final_epoch_loss = loss_sum / n
    return ParamVector(params.topology, values), final_epoch_loss


def evaluate_rmse(params: ParamVector, dataset: WindowedDataset,
                  norm: NormalizationParams) -> float:
    """Root-mean-square error in denormalized kilowatts over all pairs
    and horizon steps."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    preds_kw = denormalize(predict_batch(params, dataset.inputs), norm)
    targets_kw = denormalize(dataset.targets, norm)
    return float(np.sqrt(np.mean((preds_kw - targets_kw) ** 2)))


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------
#
# Fixed 64-byte header, little-endian, then param_count float32 values in
# canonical layout:
#
#   offset  size  field
#   0       8     magic b"PCGPARAM"
#   8       2     format version (1)
#   10      2     input_size
#   12      2     output_size
#   14      2     lookback
#   16      2     n_layers (max 8)
#   18      16    hidden sizes, 8 x u16, zero-padded
#   34      22    reserved, zero
#   56      8     param_count (u64)

PARAM_MAGIC = b"PCGPARAM"
PARAM_FORMAT_VERSION = 1
PARAM_HEADER_BYTES = 64
_MAX_LAYERS = 8


def param_file_bytes(topology: ModelTopology) -> int:
    """Exact size of a serialized parameter file, the unit of the
    communication ledger."""
    return PARAM_HEADER_BYTES + 4 * topology.param_count


def _pack_header(topology: ModelTopology) -> bytes:
    if len(topology.hidden_sizes) > _MAX_LAYERS:
        raise ValueError(f"wire format supports at most {_MAX_LAYERS} layers")
    header = bytearray(PARAM_HEADER_BYTES)
    header[0:8] = PARAM_MAGIC
    struct.pack_into("<HHHHH", header, 8, PARAM_FORMAT_VERSION,
                     topology.input_size, topology.output_size,
                     topology.lookback, len(topology.hidden_sizes))
    for i, h in enumerate(topology.hidden_sizes):
        struct.pack_into("<H", header, 18 + 2 * i, h)
    struct.pack_into("<Q", header, 56, topology.param_count)
    return bytes(header)


def save_params(path, params: ParamVector) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = params.values.astype("<f4").tobytes()
    path.write_bytes(_pack_header(params.topology) + payload)


def load_params(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if len(raw) < PARAM_HEADER_BYTES or raw[0:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, input_size, output_size, lookback, n_layers = \
        struct.unpack_from("<HHHHH", raw, 8)
    if version != PARAM_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    hidden = struct.unpack_from(f"<{_MAX_LAYERS}H", raw, 18)[:n_layers]
    count, = struct.unpack_from("<Q", raw, 56)
    topology = ModelTopology(input_size, hidden, output_size, lookback)
    if count != topology.param_count:
        raise ValueError(f"{path}: parameter count {count} does not match topology")
    if len(raw) != PARAM_HEADER_BYTES + 4 * count:
        raise ValueError(f"{path}: truncated payload")
    values = np.frombuffer(raw, dtype="<f4", offset=PARAM_HEADER_BYTES,
                           count=count).astype(np.float64)
    return ParamVector(topology, values)


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

def measure_inference_ms(topology: ModelTopology, repeats: int = 200,
                         seed: int = 0) -> float:
    """Mean wall-clock milliseconds for a single-window forward pass."""
    params = init_params(topology, seed)
    window = np.random.default_rng(seed).uniform(0.0, 1.0, size=topology.lookback)
    forward(params, window)  # warm-up
    start = time.perf_counter()
    for _ in range(repeats):
        forward(params, window)
    return (time.perf_counter() - start) / repeats * 1000.0
