"""The bi-attention tabular transformer.

A table of ``R`` rows and ``C`` feature columns becomes a grid of cell
embeddings: every feature cell is standardized with training-row statistics
and lifted by a shared scalar-to-vector map, and the target column (test
rows filled with the training mean) gets its own scalar map. Each layer then
attends across columns within a row, across rows within a column, and runs a
cell-wise MLP, with a residual add and a LayerNorm after each of the three.
The decoder reads the target-column embeddings of the test rows.

Rows ``[0, split)`` are training rows. Datapoint attention takes keys and
values from training rows only, so a test row never sees another test row.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    pass


class Activation(str, enum.Enum):
    GELU = "gelu"
    RELU = "relu"


@dataclass
class ModelConfig:
    embedding_size: int = 96
    num_attention_heads: int = 4
    mlp_hidden_size: int = 192
    num_layers: int = 3
    num_outputs: int = 2
    clip_z: float = 10.0
    activation: Activation = Activation.GELU

    def __post_init__(self):
        self.activation = Activation(self.activation)
        for field in ("embedding_size", "num_attention_heads", "mlp_hidden_size", "num_layers", "num_outputs"):
            v = getattr(self, field)
            if int(v) != v or v < 1:
                raise ConfigError(f"{field} must be a positive integer, got {v!r}")
            setattr(self, field, int(v))
        if self.embedding_size % self.num_attention_heads:
            raise ConfigError(
                f"embedding_size={self.embedding_size} is not divisible by "
                f"num_attention_heads={self.num_attention_heads}"
            )
        if not self.clip_z > 0:
            raise ConfigError(f"clip_z must be positive, got {self.clip_z}")
        self.clip_z = float(self.clip_z)

    @property
    def head_dim(self):
        return self.embedding_size // self.num_attention_heads

    def to_dict(self):
        d = asdict(self)
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TableBatch:
    """``x``: B x R x C features, ``y``: B x R class indices, rows ``[0, split)`` train."""

    x: np.ndarray
    y: np.ndarray
    split: int

    def __post_init__(self):
        xs = self.x.shape
        if len(xs) != 3:
            raise ConfigError(f"x must be B x R x C, got shape {xs}")
        if tuple(np.shape(self.y)) != xs[:2]:
            raise ConfigError(f"y shape {np.shape(self.y)} does not match x rows {xs[:2]}")
        if not 1 <= self.split <= xs[1]:
            raise ConfigError(f"split={self.split} outside [1, R={xs[1]}]")

    @property
    def x_train(self):
        return self.x[:, : self.split]

    @property
    def x_test(self):
        return self.x[:, self.split :]

    @property
    def y_train(self):
        return self.y[:, : self.split]

    @property
    def y_test(self):
        return self.y[:, self.split :]


# --- parameters -------------------------------------------------------------------

def parameter_shapes(cfg):
    """Ordered ``name -> shape`` for every learned array of ``cfg``."""
    E, H = cfg.embedding_size, cfg.mlp_hidden_size
    shapes = {
        "feature_encoder.weight": (1, E),
        "feature_encoder.bias": (E,),
        "target_encoder.weight": (1, E),
        "target_encoder.bias": (E,),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        for attn in ("feature_attn", "datapoint_attn"):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                shapes[f"{p}{attn}.{w}"] = (E, E)
        shapes[f"{p}mlp.W1"] = (E, H)
        shapes[f"{p}mlp.b1"] = (H,)
        shapes[f"{p}mlp.W2"] = (H, E)
        shapes[f"{p}mlp.b2"] = (E,)
        for ln in ("ln_feature", "ln_datapoint", "ln_mlp"):
            shapes[f"{p}{ln}.gain"] = (E,)
            shapes[f"{p}{ln}.bias"] = (E,)
    shapes["decoder.W1"] = (E, H)
    shapes["decoder.b1"] = (H,)
    shapes["decoder.W2"] = (H, cfg.num_outputs)
    shapes["decoder.b2"] = (cfg.num_outputs,)
    return shapes


def count_parameters(cfg):
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_parameters(cfg, seed=0, dtype=None):
    """Weights ~ N(0, 1/fan_in), biases 0, LayerNorm gain 1 / bias 0."""
    rng = np.random.default_rng(seed)
    dtype = dtype or T.get_default_dtype()
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = Parameter(arr.astype(dtype), name)
    return params


# --- building blocks ----------------------------------------------------------------

def _activation(x, cfg):
    return T.gelu(x) if cfg.activation is Activation.GELU else T.relu(x)


def _as_input(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.get_default_dtype()))


def encode_features(x, split, params, cfg):
    """Standardize every column by its training rows, clip, and embed each cell.

    ``x`` is B x R x C; returns B x R x C x E.
    """
    if split < 2:
        raise ConfigError(f"feature standardization needs >= 2 training rows, got split={split}")
    x = _as_input(x)
    B, R, C = x.shape
    train = x[:, :split]
    mu = train.mean(axis=1, keepdims=True)
    centered = train - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    # max(std, 1e-8) == sqrt(max(var, 1e-16)), with a gradient that stays finite
    std = T.sqrt(T.maximum(var, 1e-16))
    z = T.clip((x - mu) / std, -cfg.clip_z, cfg.clip_z)
    return T.linear(z.reshape(B, R, C, 1), params["feature_encoder.weight"], params["feature_encoder.bias"])


def encode_targets(y, split, params, cfg):
    """Fill test-row targets with the training mean and embed: B x R -> B x R x 1 x E."""
    if split < 1:
        raise ConfigError(f"target encoding needs >= 1 training row, got split={split}")
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=T.get_default_dtype())
    B, R = y.shape
    filled = y.copy()
    filled[:, split:] = y[:, :split].mean(axis=1, keepdims=True)
    return T.linear(
        Tensor(filled.reshape(B, R, 1, 1)), params["target_encoder.weight"], params["target_encoder.bias"]
    )


def _split_heads(t, heads):
    # (..., L, E) -> (..., h, L, d)
    *lead, L, E = t.shape
    t = t.reshape(*lead, L, heads, E // heads)
    n = len(lead)
    return t.transpose(*range(n), n + 1, n, n + 2)


def _merge_heads(t):
    # (..., h, L, d) -> (..., L, E)
    *lead, h, L, d = t.shape
    n = len(lead)
    t = t.transpose(*range(n), n + 1, n, n + 2)
    return t.reshape(*lead, L, h * d)


def attention(q_in, kv_in, params, prefix, heads):
    """Multi-head scaled dot-product attention over the second-to-last axis.

    ``q_in`` is (..., L, E) and ``kv_in`` is (..., S, E) with matching leading
    axes. No masking: callers choose which tokens are visible by what they
    pass as ``kv_in``.
    """
    E = q_in.shape[-1]
    scale = 1.0 / math.sqrt(E // heads)
    q = _split_heads(T.linear(q_in, params[prefix + "Wq"]) * scale, heads)
    k = _split_heads(T.linear(kv_in, params[prefix + "Wk"]), heads)
    v = _split_heads(T.linear(kv_in, params[prefix + "Wv"]), heads)
    nk = k.ndim
    scores = T.matmul(q, k.transpose(*range(nk - 2), nk - 1, nk - 2))
    weights = T.softmax(scores, axis=-1)
    return T.linear(_merge_heads(T.matmul(weights, v)), params[prefix + "Wo"])


def feature_attention(cells, params, cfg, layer=0, queries=None):
    """Attention across the C+1 columns of each row of a B x R x (C+1) x E grid.

    ``queries`` optionally restricts which cells ask (a column slice of
    ``cells``); keys and values always come from every column.
    """
    q = cells if queries is None else queries
    return attention(q, cells, params, f"layers.{layer}.feature_attn.", cfg.num_attention_heads)


def datapoint_attention(cells, split, params, cfg, layer=0):
    """Attention across rows within each column; keys/values are rows ``[0, split)``.

    Training rows therefore see all training rows (themselves included) and
    test rows see only training rows.
    """
    if split < 1:
        raise ConfigError(f"datapoint attention needs >= 1 training row, got split={split}")
    by_col = cells.transpose(0, 2, 1, 3)  # B x T x R x E
    out = attention(
        by_col, by_col[:, :, :split], params, f"layers.{layer}.datapoint_attn.", cfg.num_attention_heads
    )
    return out.transpose(0, 2, 1, 3)


def mlp(h, params, cfg, layer=0):
    p = f"layers.{layer}.mlp."
    hidden = _activation(T.linear(h, params[p + "W1"], params[p + "b1"]), cfg)
    return T.linear(hidden, params[p + "W2"], params[p + "b2"])


def _ln(x, params, name):
    return T.layer_norm(x, params[name + ".gain"], params[name + ".bias"])


def transformer_layer(cells, split, params, cfg, layer=0):
    """Post-LN block: LN(x + FeatAttn), LN(. + DataAttn), LN(. + MLP)."""
    p = f"layers.{layer}."
    h = _ln(cells + feature_attention(cells, params, cfg, layer), params, p + "ln_feature")
    h = _ln(h + datapoint_attention(h, split, params, cfg, layer), params, p + "ln_datapoint")
    return _ln(h + mlp(h, params, cfg, layer), params, p + "ln_mlp")


def _final_layer(cells, split, params, cfg, layer):
    """``transformer_layer`` restricted to the cells the decoder reads.

    Only the target column of test rows reaches the logits, so feature
    attention runs with target-column queries, datapoint attention within the
    target column, and the MLP on test rows alone. Returns B x (R-split) x E.
    """
    p = f"layers.{layer}."
    target = cells[:, :, -1:]
    h = _ln(target + feature_attention(cells, params, cfg, layer, queries=target), params, p + "ln_feature")
    h = _ln(h + datapoint_attention(h, split, params, cfg, layer), params, p + "ln_datapoint")
    h = h[:, split:, 0]
    return _ln(h + mlp(h, params, cfg, layer), params, p + "ln_mlp")


def decode(h, params, cfg):
    hidden = _activation(T.linear(h, params["decoder.W1"], params["decoder.b1"]), cfg)
    return T.linear(hidden, params["decoder.W2"], params["decoder.b2"])


def _check(batch, params, cfg):
    x = batch.x.data if isinstance(batch.x, Tensor) else batch.x
    if x.shape[2] < 1:
        raise ConfigError("table has no feature columns (C must be >= 1)")
    E = params["feature_encoder.weight"].shape[1]
    if E != cfg.embedding_size:
        raise ConfigError(f"embedding_size mismatch: config {cfg.embedding_size}, parameters {E}")
    k = params["decoder.W2"].shape[1]
    if k != cfg.num_outputs:
        raise ConfigError(f"num_outputs mismatch: config {cfg.num_outputs}, parameters {k}")
    if f"layers.{cfg.num_layers - 1}.mlp.W1" not in params or f"layers.{cfg.num_layers}.mlp.W1" in params:
        raise ConfigError(f"num_layers={cfg.num_layers} does not match the parameter set")


def forward(batch, params, cfg, prune_last=True):
    """Logits for the test rows: B x (R - split) x num_outputs.

    With ``prune_last`` the final layer skips cells that cannot reach the
    output; the result is the same as running every layer in full.
    """
    _check(batch, params, cfg)
    split = batch.split
    cells = T.concat(
        [encode_features(batch.x, split, params, cfg), encode_targets(batch.y, split, params, cfg)], axis=2
    )
    n_full = cfg.num_layers - 1 if prune_last else cfg.num_layers
    for i in range(n_full):
        cells = transformer_layer(cells, split, params, cfg, i)
    if prune_last:
        h = _final_layer(cells, split, params, cfg, cfg.num_layers - 1)
    else:
        h = cells[:, split:, -1]
    return decode(h, params, cfg)


def predict_proba(batch, params, cfg):
    """Class probabilities for the test rows (numpy, B x (R - split) x num_outputs)."""
    with T.no_grad():
        logits = forward(batch, params, cfg)
        if logits.size == 0:
            return logits.data.copy()
        return T.softmax(logits, axis=-1).data


class NanoTabPFNModel:
    """Parameters plus config, with the familiar constructor keywords.

    >>> model = NanoTabPFNModel(embedding_size=96, num_attention_heads=4,
    ...                         mlp_hidden_size=192, num_layers=3, num_outputs=2)
    """

    def __init__(self, config=None, seed=0, dtype=None, **kwargs):
        if config is None:
            config = ModelConfig(**kwargs)
        elif kwargs:
            raise TypeError("pass either a ModelConfig or keyword hyperparameters, not both")
        self.config = config
        self.params = init_parameters(config, seed=seed, dtype=dtype)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch, prune_last=True):
        return forward(batch, self.params, self.config, prune_last=prune_last)

    __call__ = forward

    def predict_proba(self, batch):
        return predict_proba(batch, self.params, self.config)

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
