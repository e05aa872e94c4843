"""Two-layer (Bi)LSTM with dropout and a dense output head, plus exact BPTT.

Gate blocks in every 4H-sized tensor are ordered [input, forget, cell
candidate, output]. The same ordering is used in checkpoints, so weight
transfer between models is well defined. All math is float64; parameter
values are kept on the float32 grid so checkpoints round-trip bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class LstmLayerParams:
    """One direction of one layer: w_input (4H x D), w_recurrent (4H x H), bias (4H)."""

    w_input: np.ndarray
    w_recurrent: np.ndarray
    bias: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_recurrent.shape[1]


@dataclass
class LayerParams:
    fwd: LstmLayerParams
    bwd: LstmLayerParams | None = None


@dataclass
class ModelParams:
    layers: list[LayerParams]
    dense_w: np.ndarray  # (C, R)
    dense_b: np.ndarray  # (C,)


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    hidden: int = 128
    num_layers: int = 2
    bidirectional: bool = False
    dropout_keep: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden <= 0 or self.num_layers <= 0:
            raise ValueError("hidden and num_layers must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep {self.dropout_keep} outside (0, 1]")
        if self.feature_dim <= 0 or self.num_classes < 2:
            raise ValueError("bad feature_dim / num_classes")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def layer_output_dim(self) -> int:
        return self.hidden * self.directions

    def layer_input_dim(self, layer_index: int) -> int:
        return self.feature_dim if layer_index == 0 else self.layer_output_dim


def tensor_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list for every tensor of a model."""
    spec = []
    h = cfg.hidden
    for li in range(cfg.num_layers):
        d = cfg.layer_input_dim(li)
        dirs = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        for direction in dirs:
            prefix = f"layer{li + 1}.{direction}"
            spec.append((f"{prefix}.w_input", (4 * h, d)))
            spec.append((f"{prefix}.w_recurrent", (4 * h, h)))
            spec.append((f"{prefix}.bias", (4 * h,)))
    spec.append(("dense.w", (cfg.num_classes, cfg.layer_output_dim)))
    spec.append(("dense.b", (cfg.num_classes,)))
    return spec


def named_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Tensors in canonical checkpoint order; arrays are the live objects."""
    out = []
    for li, layer in enumerate(params.layers):
        pairs = [("fwd", layer.fwd)]
        if layer.bwd is not None:
            pairs.append(("bwd", layer.bwd))
        for direction, lp in pairs:
            prefix = f"layer{li + 1}.{direction}"
            out.append((f"{prefix}.w_input", lp.w_input))
            out.append((f"{prefix}.w_recurrent", lp.w_recurrent))
            out.append((f"{prefix}.bias", lp.bias))
    out.append(("dense.w", params.dense_w))
    out.append(("dense.b", params.dense_b))
    return out


def validate_params(params: ModelParams, cfg: ModelConfig) -> None:
    spec = dict(tensor_spec(cfg))
    seen = dict(named_tensors(params))
    if set(spec) != set(seen):
        missing = set(spec) ^ set(seen)
        raise ValueError(f"params/config tensor mismatch: {sorted(missing)}")
    for name, shape in spec.items():
        if seen[name].shape != shape:
            raise ValueError(
                f"tensor {name} has shape {seen[name].shape}, config requires {shape}"
            )


def zeros_like_params(params: ModelParams) -> ModelParams:
    def zl(lp: LstmLayerParams) -> LstmLayerParams:
        return LstmLayerParams(
            np.zeros_like(lp.w_input),
            np.zeros_like(lp.w_recurrent),
            np.zeros_like(lp.bias),
        )

    layers = [
        LayerParams(zl(layer.fwd), zl(layer.bwd) if layer.bwd is not None else None)
        for layer in params.layers
    ]
    return ModelParams(layers, np.zeros_like(params.dense_w), np.zeros_like(params.dense_b))


def copy_params(params: ModelParams) -> ModelParams:
    def cp(lp: LstmLayerParams) -> LstmLayerParams:
        return LstmLayerParams(lp.w_input.copy(), lp.w_recurrent.copy(), lp.bias.copy())

    layers = [
        LayerParams(cp(layer.fwd), cp(layer.bwd) if layer.bwd is not None else None)
        for layer in params.layers
    ]
    return ModelParams(layers, params.dense_w.copy(), params.dense_b.copy())


def _f32_grid(a: np.ndarray) -> np.ndarray:
    # keep values exactly representable in float32 so checkpoints round-trip
    return a.astype(np.float32).astype(np.float64)


def init_params(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases except forget gate bias of 1."""
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden

    def glorot(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return _f32_grid(rng.uniform(-limit, limit, size=shape))

    def make_direction(d):
        w_input = glorot((4 * h, d), d, 4 * h)
        w_recurrent = glorot((4 * h, h), h, 4 * h)
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0  # forget gate
        return LstmLayerParams(w_input, w_recurrent, bias)

    layers = []
    for li in range(cfg.num_layers):
        d = cfg.layer_input_dim(li)
        fwd = make_direction(d)
        bwd = make_direction(d) if cfg.bidirectional else None
        layers.append(LayerParams(fwd, bwd))

    r = cfg.layer_output_dim
    dense_w = glorot((cfg.num_classes, r), r, cfg.num_classes)
    dense_b = np.zeros(cfg.num_classes)
    return ModelParams(layers, dense_w, dense_b)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class _DirectionCache:
    """Activations of one direction, in its own time order."""

    x: np.ndarray        # (T, D) input as seen by this direction
    i: np.ndarray        # (T, H) gate activations
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray        # (T, H) cell states
    tanh_c: np.ndarray
    h: np.ndarray


def _direction_forward(lp: LstmLayerParams, x: np.ndarray) -> tuple[np.ndarray, _DirectionCache]:
    t_len = x.shape[0]
    h_dim = lp.hidden
    z_in = x @ lp.w_input.T + lp.bias  # (T, 4H)

    i = np.empty((t_len, h_dim))
    f = np.empty((t_len, h_dim))
    g = np.empty((t_len, h_dim))
    o = np.empty((t_len, h_dim))
    c = np.empty((t_len, h_dim))
    tanh_c = np.empty((t_len, h_dim))
    h = np.empty((t_len, h_dim))

    h_prev = np.zeros(h_dim)
    c_prev = np.zeros(h_dim)
    w_rec_t = lp.w_recurrent.T
    for t in range(t_len):
        z = z_in[t] + h_prev @ w_rec_t
        i[t] = _sigmoid(z[:h_dim])
        f[t] = _sigmoid(z[h_dim : 2 * h_dim])
        g[t] = np.tanh(z[2 * h_dim : 3 * h_dim])
        o[t] = _sigmoid(z[3 * h_dim :])
        c[t] = f[t] * c_prev + i[t] * g[t]
        tanh_c[t] = np.tanh(c[t])
        h[t] = o[t] * tanh_c[t]
        h_prev = h[t]
        c_prev = c[t]

    return h, _DirectionCache(x, i, f, g, o, c, tanh_c, h)


def _direction_backward(
    lp: LstmLayerParams, cache: _DirectionCache, dh_out: np.ndarray
) -> tuple[np.ndarray, LstmLayerParams]:
    t_len, h_dim = dh_out.shape
    dz = np.empty((t_len, 4 * h_dim))
    dh_next = np.zeros(h_dim)
    dc_next = np.zeros(h_dim)
    w_rec = lp.w_recurrent

    i, f, g, o = cache.i, cache.f, cache.g, cache.o
    tanh_c = cache.tanh_c
    for t in range(t_len - 1, -1, -1):
        dh = dh_out[t] + dh_next
        do = dh * tanh_c[t]
        dc = dh * o[t] * (1.0 - tanh_c[t] ** 2) + dc_next
        c_prev = cache.c[t - 1] if t > 0 else 0.0
        di = dc * g[t]
        df = dc * c_prev
        dg = dc * i[t]
        dz_t = dz[t]
        dz_t[:h_dim] = di * i[t] * (1.0 - i[t])
        dz_t[h_dim : 2 * h_dim] = df * f[t] * (1.0 - f[t])
        dz_t[2 * h_dim : 3 * h_dim] = dg * (1.0 - g[t] ** 2)
        dz_t[3 * h_dim :] = do * o[t] * (1.0 - o[t])
        dh_next = dz_t @ w_rec
        dc_next = dc * f[t]

    h_prev = np.vstack([np.zeros((1, h_dim)), cache.h[:-1]])
    grads = LstmLayerParams(
        w_input=dz.T @ cache.x,
        w_recurrent=dz.T @ h_prev,
        bias=dz.sum(axis=0),
    )
    dx = dz @ lp.w_input
    return dx, grads


@dataclass
class ForwardCache:
    cfg: ModelConfig
    train_mode: bool
    layer_inputs: list[np.ndarray]
    dir_caches: list[tuple[_DirectionCache, _DirectionCache | None]]
    masks: list[np.ndarray | None]
    final_hidden: np.ndarray = field(default=None)  # type: ignore[assignment]


def _stack_forward(
    params: ModelParams,
    cfg: ModelConfig,
    features: np.ndarray,
    train_mode: bool,
    dropout_seed: int,
) -> tuple[list[np.ndarray], ForwardCache]:
    """Run the recurrent stack; returns per-layer (post-dropout) outputs."""
    if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with feature_dim {cfg.feature_dim}"
        )
    if features.shape[0] < 1:
        raise ValueError("need at least one frame")
    validate_params(params, cfg)

    rng = np.random.default_rng(dropout_seed) if train_mode else None
    cache = ForwardCache(cfg, train_mode, [], [], [])
    x = np.asarray(features, dtype=np.float64)
    outputs = []
    for layer in params.layers:
        cache.layer_inputs.append(x)
        h_fwd, c_fwd = _direction_forward(layer.fwd, x)
        if layer.bwd is not None:
            h_bwd_rev, c_bwd = _direction_forward(layer.bwd, x[::-1])
            out = np.hstack([h_fwd, h_bwd_rev[::-1]])
            cache.dir_caches.append((c_fwd, c_bwd))
        else:
            out = h_fwd
            cache.dir_caches.append((c_fwd, None))
        if train_mode and cfg.dropout_keep < 1.0:
            mask = (rng.random(out.shape) < cfg.dropout_keep) / cfg.dropout_keep
            out = out * mask
            cache.masks.append(mask)
        else:
            cache.masks.append(None)
        outputs.append(out)
        x = out
    cache.final_hidden = x
    return outputs, cache


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    features: np.ndarray,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, ForwardCache]:
    """Per-utterance forward pass; returns (T x C logits, cache for backward)."""
    outputs, cache = _stack_forward(params, cfg, features, train_mode, dropout_seed)
    logits = outputs[-1] @ params.dense_w.T + params.dense_b
    return logits, cache


def recurrent_hidden_outputs(
    params: ModelParams, cfg: ModelConfig, features: np.ndarray
) -> list[np.ndarray]:
    """Eval-mode hidden output of every recurrent layer (no dense head)."""
    outputs, _ = _stack_forward(params, cfg, features, train_mode=False, dropout_seed=0)
    return outputs


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def backward(
    params: ModelParams, cfg: ModelConfig, cache: ForwardCache, dlogits: np.ndarray
) -> ModelParams:
    """Exact gradients for the loss whose logit gradient is ``dlogits``.

    Returns a ModelParams-shaped container of gradient arrays.
    """
    if cache.cfg != cfg:
        raise ValueError("cache was produced under a different model config")
    if dlogits.shape != (cache.final_hidden.shape[0], cfg.num_classes):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match the forward pass")

    h = cfg.hidden
    grads = zeros_like_params(params)
    grads.dense_w = dlogits.T @ cache.final_hidden
    grads.dense_b = dlogits.sum(axis=0)

    dx = dlogits @ params.dense_w
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        mask = cache.masks[li]
        if mask is not None:
            dx = dx * mask
        c_fwd, c_bwd = cache.dir_caches[li]
        if layer.bwd is not None:
            dx_f, g_f = _direction_backward(layer.fwd, c_fwd, dx[:, :h])
            dx_b_rev, g_b = _direction_backward(layer.bwd, c_bwd, dx[:, h:][::-1])
            dx = dx_f + dx_b_rev[::-1]
            grads.layers[li] = LayerParams(g_f, g_b)
        else:
            dx, g_f = _direction_backward(layer.fwd, c_fwd, dx)
            grads.layers[li] = LayerParams(g_f, None)
    return grads
