"""From-scratch LSTM sequence predictor with exact backprop through time.

One LSTM layer unrolled over a fixed window, followed by two tanh dense
layers and a linear scalar head. Gate equations per step, with z the
normalized input, h the previous hidden output and * the elementwise product:

    f = sigmoid(z Wzf + h Whf + bf)         forget gate
    c = tanh   (z Wzs + h Whs + bs)         candidate state
    i = sigmoid(z Wzi + h Whi + bi)         input gate
    o = sigmoid(z Wzo + h Who + bo)         output gate
    s = f * s_prev + i * c
    h = o * tanh(s)

Inputs and target are z-scored with statistics from the training split; the
training loss is the MSE in normalized target units, and predictions are
de-normalized back to raw units. Everything is float64 numpy; training is
plain mini-batch Adam and is bitwise reproducible from (data, config, seed).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, NumericFault, RejectionError
from .ingest import FEATURE_NAMES, AlignedDemonstration
from .seeding import substream

DEFAULT_INPUTS = FEATURE_NAMES[:6]
DEFAULT_OUTPUT = "dx_end"

CELL_PARAMS = ("w_zf", "w_hf", "b_f", "w_zs", "w_hs", "b_s",
               "w_zi", "w_hi", "b_i", "w_zo", "w_ho", "b_o")
DENSE_PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3")
PARAM_NAMES = CELL_PARAMS + DENSE_PARAMS


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmCellParams:
    w_zf: np.ndarray  # (M, H)
    w_hf: np.ndarray  # (H, H)
    b_f: np.ndarray   # (H,)
    w_zs: np.ndarray
    w_hs: np.ndarray
    b_s: np.ndarray
    w_zi: np.ndarray
    w_hi: np.ndarray
    b_i: np.ndarray
    w_zo: np.ndarray
    w_ho: np.ndarray
    b_o: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w_zf.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_zf.shape[1]


@dataclass
class LstmState:
    s: np.ndarray  # cell state
    h: np.ndarray  # hidden output, tanh-bounded


@dataclass
class NetworkParams:
    cell: LstmCellParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray  # (D2, 1)
    b3: np.ndarray  # (1,)
    norm_mean: np.ndarray   # per input feature
    norm_std: np.ndarray
    target_mean: float
    target_std: float
    input_features: tuple[str, ...]
    output_feature: str
    window: int
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self.cell, name) for name in CELL_PARAMS}
        out.update({name: getattr(self, name) for name in DENSE_PARAMS})
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        if name in CELL_PARAMS:
            setattr(self.cell, name, value)
        else:
            setattr(self, name, value)


@dataclass
class TrainingWindow:
    """W consecutive raw input rows plus the raw target at the last row."""

    inputs: np.ndarray  # (W, M)
    target: float


@dataclass
class TrainConfig:
    input_features: tuple[str, ...] = DEFAULT_INPUTS
    output_feature: str = DEFAULT_OUTPUT
    window: int = 10
    hidden: int = 32
    dense: tuple[int, int] = (32, 16)
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.005
    seed: int = 0

    def validate(self) -> None:
        for name in tuple(self.input_features) + (self.output_feature,):
            if name not in FEATURE_NAMES:
                raise ConfigError(f"unknown feature name: {name!r}")
        if len(set(self.input_features)) != len(self.input_features):
            raise ConfigError("duplicate input feature")
        if self.window < 1 or self.hidden < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("window/hidden/batch_size must be >= 1, epochs >= 0")


def init_network(config: TrainConfig) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, forget bias +1."""
    rng = substream(config.seed, "init")
    m, h = len(config.input_features), config.hidden
    d1, d2 = config.dense

    def mat(fan_in: int, shape: tuple[int, int]) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    cell = LstmCellParams(
        w_zf=mat(m, (m, h)), w_hf=mat(h, (h, h)), b_f=np.ones(h),
        w_zs=mat(m, (m, h)), w_hs=mat(h, (h, h)), b_s=np.zeros(h),
        w_zi=mat(m, (m, h)), w_hi=mat(h, (h, h)), b_i=np.zeros(h),
        w_zo=mat(m, (m, h)), w_ho=mat(h, (h, h)), b_o=np.zeros(h),
    )
    return NetworkParams(
        cell=cell,
        w1=mat(h, (h, d1)), b1=np.zeros(d1),
        w2=mat(d1, (d1, d2)), b2=np.zeros(d2),
        w3=mat(d2, (d2, 1)), b3=np.zeros(1),
        norm_mean=np.zeros(m), norm_std=np.ones(m),
        target_mean=0.0, target_std=1.0,
        input_features=tuple(config.input_features),
        output_feature=config.output_feature,
        window=config.window,
        meta={"seed": config.seed},
    )


def cell_forward(params: LstmCellParams, inputs: np.ndarray, prev: LstmState) -> LstmState:
    """One LSTM step; accepts a single vector or a (B, M) batch."""
    z = np.atleast_2d(np.asarray(inputs, dtype=float))
    h_prev = np.atleast_2d(prev.h)
    s_prev = np.atleast_2d(prev.s)
    if z.shape[1] != params.input_dim or h_prev.shape[1] != params.hidden_dim:
        raise ContractViolation(
            f"cell_forward shapes: input {z.shape}, hidden {h_prev.shape}, "
            f"params ({params.input_dim}, {params.hidden_dim})"
        )
    p = params
    f = sigmoid(z @ p.w_zf + h_prev @ p.w_hf + p.b_f)
    c = np.tanh(z @ p.w_zs + h_prev @ p.w_hs + p.b_s)
    i = sigmoid(z @ p.w_zi + h_prev @ p.w_hi + p.b_i)
    o = sigmoid(z @ p.w_zo + h_prev @ p.w_ho + p.b_o)
    s = f * s_prev + i * c
    h = o * np.tanh(s)
    if np.asarray(inputs).ndim == 1:
        return LstmState(s=s[0], h=h[0])
    return LstmState(s=s, h=h)


def _forward(net: NetworkParams, windows: np.ndarray, keep_cache: bool):
    """Batched forward pass over raw windows (B, W, M); returns raw predictions."""
    x = np.asarray(windows, dtype=float)
    if x.ndim == 2:
        x = x[None, :, :]
    batch, steps, m = x.shape
    if m != len(net.input_features) or steps != net.window:
        raise ContractViolation(
            f"window shape {x.shape[1:]} does not match (window={net.window}, "
            f"inputs={len(net.input_features)})"
        )
    z = (x - net.norm_mean) / net.norm_std
    p = net.cell
    hdim = p.hidden_dim
    h = np.zeros((batch, hdim))
    s = np.zeros((batch, hdim))
    cache = {"z": z, "f": [], "c": [], "i": [], "o": [], "s": [],
             "s_prev": [], "h_prev": [], "tanh_s": []} if keep_cache else None
    for t in range(steps):
        zt = z[:, t, :]
        f = sigmoid(zt @ p.w_zf + h @ p.w_hf + p.b_f)
        c = np.tanh(zt @ p.w_zs + h @ p.w_hs + p.b_s)
        i = sigmoid(zt @ p.w_zi + h @ p.w_hi + p.b_i)
        o = sigmoid(zt @ p.w_zo + h @ p.w_ho + p.b_o)
        s_new = f * s + i * c
        tanh_s = np.tanh(s_new)
        h_new = o * tanh_s
        if not np.all(np.isfinite(h_new)):
            raise NumericFault(f"non-finite activation at step {t}")
        if keep_cache:
            cache["f"].append(f)
            cache["c"].append(c)
            cache["i"].append(i)
            cache["o"].append(o)
            cache["s"].append(s_new)
            cache["s_prev"].append(s)
            cache["h_prev"].append(h)
            cache["tanh_s"].append(tanh_s)
        s, h = s_new, h_new
    d1 = np.tanh(h @ net.w1 + net.b1)
    d2 = np.tanh(d1 @ net.w2 + net.b2)
    y_norm = (d2 @ net.w3 + net.b3)[:, 0]
    if not np.all(np.isfinite(y_norm)):
        raise NumericFault("non-finite activation at dense head")
    y = y_norm * net.target_std + net.target_mean
    if keep_cache:
        cache.update({"h_final": h, "d1": d1, "d2": d2, "y_norm": y_norm})
    return y, cache


def forward_sequence(net: NetworkParams, window: np.ndarray):
    """Unrolled forward for one raw window (W, M) -> (prediction, cache)."""
    y, cache = _forward(net, np.asarray(window, dtype=float)[None, :, :], keep_cache=True)
    return float(y[0]), cache


def predict(net: NetworkParams, window: np.ndarray) -> float:
    """forward_sequence without the cache; numerically identical."""
    y, _ = _forward(net, np.asarray(window, dtype=float)[None, :, :], keep_cache=False)
    return float(y[0])


def predict_batch(net: NetworkParams, windows: np.ndarray) -> np.ndarray:
    y, _ = _forward(net, windows, keep_cache=False)
    return y


def _zero_grads(net: NetworkParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in net.arrays().items()}


def loss_and_gradients(net: NetworkParams, windows: np.ndarray, targets: np.ndarray):
    """MSE (normalized target units) and its exact gradient through the unroll."""
    x = np.asarray(windows, dtype=float)
    if x.ndim == 2:
        x = x[None, :, :]
    t = np.atleast_1d(np.asarray(targets, dtype=float))
    if x.shape[0] != t.shape[0] or t.shape[0] == 0:
        raise ContractViolation(f"batch mismatch: {x.shape[0]} windows, {t.shape[0]} targets")
    batch = x.shape[0]
    _, cache = _forward(net, x, keep_cache=True)

    t_norm = (t - net.target_mean) / net.target_std
    resid = cache["y_norm"] - t_norm
    mse = float(np.mean(resid ** 2))
    gy = (2.0 / batch) * resid  # d mse / d y_norm

    grads = _zero_grads(net)
    d1, d2, h_final = cache["d1"], cache["d2"], cache["h_final"]
    grads["w3"] = d2.T @ gy[:, None]
    grads["b3"] = np.array([gy.sum()])
    gd2 = gy[:, None] @ net.w3.T
    gpre2 = gd2 * (1.0 - d2 ** 2)
    grads["w2"] = d1.T @ gpre2
    grads["b2"] = gpre2.sum(axis=0)
    gd1 = gpre2 @ net.w2.T
    gpre1 = gd1 * (1.0 - d1 ** 2)
    grads["w1"] = h_final.T @ gpre1
    grads["b1"] = gpre1.sum(axis=0)

    p = net.cell
    gh = gpre1 @ net.w1.T
    gs = np.zeros_like(gh)
    for step in range(net.window - 1, -1, -1):
        f = cache["f"][step]
        c = cache["c"][step]
        i = cache["i"][step]
        o = cache["o"][step]
        s_prev = cache["s_prev"][step]
        h_prev = cache["h_prev"][step]
        tanh_s = cache["tanh_s"][step]
        zt = cache["z"][:, step, :]

        go = gh * tanh_s
        gs = gs + gh * o * (1.0 - tanh_s ** 2)
        gpre_f = (gs * s_prev) * f * (1.0 - f)
        gpre_i = (gs * c) * i * (1.0 - i)
        gpre_c = (gs * i) * (1.0 - c ** 2)
        gpre_o = go * o * (1.0 - o)

        grads["w_zf"] += zt.T @ gpre_f
        grads["w_hf"] += h_prev.T @ gpre_f
        grads["b_f"] += gpre_f.sum(axis=0)
        grads["w_zs"] += zt.T @ gpre_c
        grads["w_hs"] += h_prev.T @ gpre_c
        grads["b_s"] += gpre_c.sum(axis=0)
        grads["w_zi"] += zt.T @ gpre_i
        grads["w_hi"] += h_prev.T @ gpre_i
        grads["b_i"] += gpre_i.sum(axis=0)
        grads["w_zo"] += zt.T @ gpre_o
        grads["w_ho"] += h_prev.T @ gpre_o
        grads["b_o"] += gpre_o.sum(axis=0)

        gh = gpre_f @ p.w_hf.T + gpre_i @ p.w_hi.T + gpre_c @ p.w_hs.T + gpre_o @ p.w_ho.T
        gs = gs * f
    return mse, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, net: NetworkParams, lr: float = 0.005) -> "AdamState":
        return cls(m=_zero_grads(net), v=_zero_grads(net), lr=lr)


def adam_step(state: AdamState, net: NetworkParams, grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update, applied in place; returns (state, net)."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, arr in net.arrays().items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        net.set_array(name, arr - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return state, net


def select_series(demo: AlignedDemonstration, input_features: Sequence[str],
                  output_feature: str) -> tuple[np.ndarray, np.ndarray]:
    cols = [FEATURE_NAMES.index(n) for n in input_features]
    return demo.values[:, cols], demo.values[:, FEATURE_NAMES.index(output_feature)]


def make_windows(series: np.ndarray, targets: np.ndarray, window: int):
    """Stride-1 full windows; row j covers [j-window+1, j] and predicts targets[j]."""
    n = series.shape[0]
    if n < window:
        return np.empty((0, window, series.shape[1])), np.empty((0,))
    idx = np.arange(window - 1, n)
    x = np.stack([series[j - window + 1: j + 1] for j in idx])
    return x, targets[idx]


def padded_window(series: np.ndarray, index: int, window: int) -> np.ndarray:
    """Window ending at ``index``, left-padded by repeating the first row."""
    lo = index - window + 1
    if lo >= 0:
        return series[lo: index + 1]
    pad = np.repeat(series[:1], -lo, axis=0)
    return np.concatenate([pad, series[: index + 1]], axis=0)


def train(demos: Sequence[AlignedDemonstration], config: TrainConfig):
    """Train on stride-1 windows from the given demos; returns (net, loss history).

    Fully deterministic under config.seed: init and per-epoch shuffling draw
    from named substreams. Loss history is the per-epoch mean training MSE in
    normalized units.
    """
    config.validate()
    if not demos:
        raise RejectionError("no training demonstrations")

    xs, ys = [], []
    rows_x, rows_y = [], []
    for demo in demos:
        series, target = select_series(demo, config.input_features, config.output_feature)
        rows_x.append(series)
        rows_y.append(target)
        x, y = make_windows(series, target, config.window)
        if x.shape[0]:
            xs.append(x)
            ys.append(y)
    if not xs:
        raise RejectionError(f"no demo provides a full window of {config.window} frames")
    windows = np.concatenate(xs)
    targets = np.concatenate(ys)

    net = init_network(config)
    all_x = np.concatenate(rows_x)
    all_y = np.concatenate(rows_y)
    net.norm_mean = all_x.mean(axis=0)
    std = all_x.std(axis=0)
    net.norm_std = np.where(std > 0.0, std, 1.0)  # constant feature -> maps to 0
    net.target_mean = float(all_y.mean())
    t_std = float(all_y.std())
    net.target_std = t_std if t_std > 0.0 else 1.0
    net.meta = {"seed": config.seed, "config": _config_echo(config),
                "n_windows": int(windows.shape[0])}

    state = AdamState.fresh(net, lr=config.lr)
    shuffle_rng = substream(config.seed, "shuffle")
    history: list[float] = []
    n = windows.shape[0]
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            batch = order[lo: lo + config.batch_size]
            mse, grads = loss_and_gradients(net, windows[batch], targets[batch])
            adam_step(state, net, grads)
            total += mse * batch.shape[0]
        history.append(total / n)
    return net, history


def _config_echo(config: TrainConfig) -> dict:
    return {
        "input_features": list(config.input_features),
        "output_feature": config.output_feature,
        "window": config.window,
        "hidden": config.hidden,
        "dense": list(config.dense),
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "seed": config.seed,
    }


def save_model(path, net: NetworkParams) -> None:
    """Self-describing artifact: all weights as float64 plus a JSON header."""
    header = {
        "input_features": list(net.input_features),
        "output_feature": net.output_feature,
        "window": net.window,
        "hidden": net.cell.hidden_dim,
        "dense": [net.w1.shape[1], net.w2.shape[1]],
        "meta": net.meta,
    }
    arrays = {name: np.asarray(arr, dtype=np.float64) for name, arr in net.arrays().items()}
    arrays["norm_mean"] = net.norm_mean
    arrays["norm_std"] = net.norm_std
    arrays["target_stats"] = np.array([net.target_mean, net.target_std])
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> NetworkParams:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        arrays = {name: data[name] for name in PARAM_NAMES}
        norm_mean = data["norm_mean"]
        norm_std = data["norm_std"]
        t_mean, t_std = data["target_stats"]
    cell = LstmCellParams(**{name: arrays[name] for name in CELL_PARAMS})
    return NetworkParams(
        cell=cell,
        w1=arrays["w1"], b1=arrays["b1"],
        w2=arrays["w2"], b2=arrays["b2"],
        w3=arrays["w3"], b3=arrays["b3"],
        norm_mean=norm_mean, norm_std=norm_std,
        target_mean=float(t_mean), target_std=float(t_std),
        input_features=tuple(header["input_features"]),
        output_feature=header["output_feature"],
        window=int(header["window"]),
        meta=header.get("meta", {}),
    )
