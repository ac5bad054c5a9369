"""Reward models scored per token sequence, trained on pairwise preferences.

Two architectures share one interface (``layout``, ``bind``, ``example_loss``,
``reward``, ``with_params``):

* :class:`LinearRewardModel`: a trainable head over fixed random-projection
  bag-of-tokens features. Convex in its parameters, which makes it the
  reference instance for leave-one-out verification.
* :class:`TinyTransformerRewardModel`: a frozen randomly initialized
  transformer encoder whose attention projections carry trainable low-rank
  adapters (update ``B @ A`` scaled by ``alpha / rank``), plus a trainable
  scalar head over mean-pooled states. Only adapters and head are trainable;
  at initialization ``B = 0``, so the model equals its frozen base.

The pairwise loss everywhere is the Bradley-Terry negative log likelihood
``softplus(-(reward(chosen) - reward(rejected)))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import engine
from .autodiff import ParameterLayout
from .data import bag_features, projection_matrix
from .engine import Tensor
from .errors import InputError

__all__ = [
    "LinearConfig",
    "LinearRewardModel",
    "TransformerConfig",
    "TinyTransformerRewardModel",
    "build_model",
    "reward",
    "bt_loss",
    "mean_bt_loss",
]

_PROJECTIONS = ("q", "k", "v", "o")


def _validate_tokens(tokens, vocab_size: int, max_len: int | None = None):
    if len(tokens) == 0:
        raise InputError("token sequence must be nonempty")
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise InputError(f"token id {t} outside vocabulary [0, {vocab_size})")
    if max_len is not None and len(tokens) > max_len:
        raise InputError(
            f"sequence length {len(tokens)} exceeds positional table {max_len}"
        )


@dataclass(frozen=True)
class LinearConfig:
    vocab_size: int = 4096
    feature_dim: int = 32
    projection_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2 or self.feature_dim < 1:
            raise InputError("vocab_size >= 2 and feature_dim >= 1 required")


class LinearRewardModel:
    """Linear head over fixed random-projection features; convex to train."""

    kind = "linear"

    def __init__(self, config: LinearConfig, *, projection=None, params=None):
        self.config = config
        self.projection = (
            np.asarray(projection, dtype=np.float64)
            if projection is not None
            else projection_matrix(
                config.vocab_size, config.feature_dim, config.projection_seed
            )
        )
        if self.projection.shape != (config.feature_dim, config.vocab_size):
            raise InputError("projection shape does not match config")
        self.layout = ParameterLayout(("head",), ((config.feature_dim,),))
        if params is None:
            self._params = np.zeros(config.feature_dim)
        else:
            self._params = self.layout.validate_vector(params).copy()
        self._feature_cache: dict = {}

    @property
    def params(self) -> np.ndarray:
        return self._params.copy()

    def with_params(self, flat) -> "LinearRewardModel":
        model = LinearRewardModel(
            self.config, projection=self.projection, params=flat
        )
        model._feature_cache = self._feature_cache
        return model

    def features(self, tokens) -> np.ndarray:
        key = tuple(tokens)
        cached = self._feature_cache.get(key)
        if cached is None:
            _validate_tokens(tokens, self.config.vocab_size)
            cached = bag_features(tokens, self.projection)
            self._feature_cache[key] = cached
        return cached

    def delta_features(self, pair) -> np.ndarray:
        return self.features(pair.chosen) - self.features(pair.rejected)

    def bind(self, flat) -> dict:
        arrays = self.layout.unflatten(flat)
        return {"head": Tensor(arrays["head"], requires_grad=True)}

    def example_loss(self, leaves: dict, pair, rng=None) -> Tensor:
        margin = engine.dot(leaves["head"], Tensor(self.delta_features(pair)))
        return engine.softplus(engine.neg(margin))

    def reward(self, tokens) -> float:
        return float(self._params @ self.features(tokens))

    def architecture(self) -> dict:
        return {"kind": self.kind, **asdict(self.config)}

    def base_arrays(self) -> dict:
        return {"projection": self.projection}

    @classmethod
    def from_arrays(cls, config_fields: dict, base: dict, params) -> "LinearRewardModel":
        return cls(
            LinearConfig(**config_fields),
            projection=base["projection"],
            params=params,
        )


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 4096
    max_len: int = 64
    width: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_dropout: float = 0.05
    adapted: tuple = _PROJECTIONS
    head_trainable: bool = True
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adapted", tuple(self.adapted))
        if self.width % self.heads != 0:
            raise InputError("width must be divisible by heads")
        if self.adapter_rank < 1:
            raise InputError("adapter_rank must be >= 1")
        if not 0.0 <= self.adapter_dropout < 1.0:
            raise InputError("adapter_dropout must lie in [0, 1)")
        unknown = set(self.adapted) - set(_PROJECTIONS)
        if unknown:
            raise InputError(f"unknown adapted projections {sorted(unknown)}")
        if not self.adapted and not self.head_trainable:
            raise InputError("model has no trainable parameters")


def _sinusoidal_table(max_len: int, width: int) -> np.ndarray:
    positions = np.arange(max_len)[:, None].astype(np.float64)
    channels = np.arange(width)[None, :]
    angles = positions / np.power(10000.0, (2 * (channels // 2)) / width)
    table = np.where(channels % 2 == 0, np.sin(angles), np.cos(angles))
    return table


def _init_base(config: TransformerConfig) -> dict:
    """Frozen base weights, drawn in a fixed documented order."""
    rng = np.random.default_rng(np.random.SeedSequence(config.base_seed).spawn(2)[0])
    w = config.width
    base = {
        "embedding": rng.standard_normal((config.vocab_size, w)) / math.sqrt(w),
        "positional": _sinusoidal_table(config.max_len, w),
    }
    hidden = config.ffn_mult * w
    for li in range(config.layers):
        for name in _PROJECTIONS:
            base[f"layer{li}.{name}.weight"] = rng.standard_normal((w, w)) / math.sqrt(w)
        base[f"layer{li}.ffn.w1"] = rng.standard_normal((hidden, w)) / math.sqrt(w)
        base[f"layer{li}.ffn.w2"] = rng.standard_normal((w, hidden)) / math.sqrt(hidden)
    base["head_init"] = rng.standard_normal(w) / math.sqrt(w)
    return base


def _layer_norm_graph(t: Tensor) -> Tensor:
    mu = engine.mean(t, axis=-1, keepdims=True)
    centered = engine.sub(t, mu)
    var = engine.mean(engine.mul(centered, centered), axis=-1, keepdims=True)
    return engine.div(centered, engine.sqrt(engine.add(var, 1e-5)))


def _layer_norm_np(t: np.ndarray) -> np.ndarray:
    # means written as sum times reciprocal, matching the graph ops bitwise
    n = t.shape[-1]
    mu = t.sum(axis=-1, keepdims=True) * (1.0 / n)
    centered = t - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * (1.0 / n)
    return centered / np.sqrt(var + 1e-5)


class TinyTransformerRewardModel:
    """Frozen pre-LN transformer with trainable low-rank adapters and head."""

    kind = "transformer"

    def __init__(self, config: TransformerConfig, *, base=None, params=None):
        self.config = config
        self.base = base if base is not None else _init_base(config)
        names, shapes = [], []
        for li in range(config.layers):
            for name in _PROJECTIONS:
                if name in config.adapted:
                    names.append(f"layer{li}.{name}.A")
                    shapes.append((config.adapter_rank, config.width))
                    names.append(f"layer{li}.{name}.B")
                    shapes.append((config.width, config.adapter_rank))
        if config.head_trainable:
            names.append("head")
            shapes.append((config.width,))
        self.layout = ParameterLayout(tuple(names), tuple(shapes))
        if params is None:
            self._params = self._init_params()
        else:
            self._params = self.layout.validate_vector(params).copy()
        # Constant tensors are reusable across graphs; matrices that appear
        # on the right of matmul are stored pre-transposed.
        self._const = {}
        for li in range(config.layers):
            for name in _PROJECTIONS:
                key = f"layer{li}.{name}.weight"
                self._const[key + "_t"] = Tensor(self.base[key].T)
            self._const[f"layer{li}.ffn.w1_t"] = Tensor(self.base[f"layer{li}.ffn.w1"].T)
            self._const[f"layer{li}.ffn.w2_t"] = Tensor(self.base[f"layer{li}.ffn.w2"].T)
        self._const["head_init"] = Tensor(self.base["head_init"])

    def _init_params(self) -> np.ndarray:
        rng = np.random.default_rng(
            np.random.SeedSequence(self.config.base_seed).spawn(2)[1]
        )
        bound = 1.0 / math.sqrt(self.config.width)
        arrays = {}
        for name, shape in zip(self.layout.names, self.layout.shapes):
            if name.endswith(".A"):
                arrays[name] = rng.uniform(-bound, bound, size=shape)
            elif name.endswith(".B"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = self.base["head_init"].copy()
        return self.layout.flatten(arrays)

    @property
    def params(self) -> np.ndarray:
        return self._params.copy()

    def with_params(self, flat) -> "TinyTransformerRewardModel":
        return TinyTransformerRewardModel(self.config, base=self.base, params=flat)

    def bind(self, flat) -> dict:
        arrays = self.layout.unflatten(flat)
        return {name: Tensor(arrays[name], requires_grad=True) for name in arrays}

    def _project(self, leaves: dict, li: int, name: str, x: Tensor, rng) -> Tensor:
        cfg = self.config
        out = engine.matmul(x, self._const[f"layer{li}.{name}.weight_t"])
        if name in cfg.adapted:
            a = leaves[f"layer{li}.{name}.A"]
            b = leaves[f"layer{li}.{name}.B"]
            x_in = x
            if rng is not None and cfg.adapter_dropout > 0.0:
                keep = 1.0 - cfg.adapter_dropout
                mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
                x_in = engine.mul(x, Tensor(mask))
            low = engine.matmul(x_in, engine.swapaxes(a, 0, 1))
            delta = engine.matmul(low, engine.swapaxes(b, 0, 1))
            out = engine.add(out, engine.mul(delta, cfg.adapter_alpha / cfg.adapter_rank))
        return out

    def _attention(self, leaves: dict, li: int, h: Tensor, rng) -> Tensor:
        cfg = self.config
        s = h.shape[0]
        dh = cfg.width // cfg.heads
        q = self._project(leaves, li, "q", h, rng)
        k = self._project(leaves, li, "k", h, rng)
        v = self._project(leaves, li, "v", h, rng)

        def split_heads(t):
            return engine.swapaxes(engine.reshape(t, (s, cfg.heads, dh)), 0, 1)

        scores = engine.mul(
            engine.matmul(split_heads(q), engine.swapaxes(split_heads(k), -1, -2)),
            1.0 / math.sqrt(dh),
        )
        context = engine.matmul(engine.softmax(scores, axis=-1), split_heads(v))
        merged = engine.reshape(engine.swapaxes(context, 0, 1), (s, cfg.width))
        return self._project(leaves, li, "o", merged, rng)

    def _ffn(self, li: int, h: Tensor) -> Tensor:
        inner = engine.tanh(engine.matmul(h, self._const[f"layer{li}.ffn.w1_t"]))
        return engine.matmul(inner, self._const[f"layer{li}.ffn.w2_t"])

    def reward_graph(self, leaves: dict, tokens, rng=None) -> Tensor:
        cfg = self.config
        _validate_tokens(tokens, cfg.vocab_size, cfg.max_len)
        s = len(tokens)
        x = Tensor(self.base["embedding"][list(tokens)] + self.base["positional"][:s])
        for li in range(cfg.layers):
            x = engine.add(x, self._attention(leaves, li, _layer_norm_graph(x), rng))
            x = engine.add(x, self._ffn(li, _layer_norm_graph(x)))
        pooled = engine.mean(_layer_norm_graph(x), axis=0)
        head = leaves["head"] if cfg.head_trainable else self._const["head_init"]
        return engine.dot(pooled, head)

    def example_loss(self, leaves: dict, pair, rng=None) -> Tensor:
        margin = engine.sub(
            self.reward_graph(leaves, pair.chosen, rng),
            self.reward_graph(leaves, pair.rejected, rng),
        )
        return engine.softplus(engine.neg(margin))

    def reward(self, tokens) -> float:
        with engine.no_grad():
            leaves = self.bind(self._params)
            return self.reward_graph(leaves, tokens).item()

    def base_reward(self, tokens) -> float:
        """Frozen-base score (no adapters, initial head), pure numpy route.

        Written independently of the graph ops so it can cross-check them.
        """
        cfg = self.config
        _validate_tokens(tokens, cfg.vocab_size, cfg.max_len)
        s = len(tokens)
        dh = cfg.width // cfg.heads
        x = self.base["embedding"][list(tokens)] + self.base["positional"][:s]
        for li in range(cfg.layers):
            h = _layer_norm_np(x)
            q = h @ self.base[f"layer{li}.q.weight"].T
            k = h @ self.base[f"layer{li}.k.weight"].T
            v = h @ self.base[f"layer{li}.v.weight"].T

            def split_heads(t):
                return t.reshape(s, cfg.heads, dh).swapaxes(0, 1)

            # scaled as mul by reciprocal so both reward routes round alike
            scores = split_heads(q) @ split_heads(k).swapaxes(-1, -2) * (1.0 / math.sqrt(dh))
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            context = (weights @ split_heads(v)).swapaxes(0, 1).reshape(s, cfg.width)
            x = x + context @ self.base[f"layer{li}.o.weight"].T
            h2 = _layer_norm_np(x)
            inner = np.tanh(h2 @ self.base[f"layer{li}.ffn.w1"].T)
            x = x + inner @ self.base[f"layer{li}.ffn.w2"].T
        pooled = _layer_norm_np(x).sum(axis=0) * (1.0 / s)
        # multiply-then-sum, not BLAS dot: keeps parity with the graph route
        return float((pooled * self.base["head_init"]).sum())

    def trainable_fraction(self) -> float:
        frozen = sum(a.size for a in self.base.values())
        return self.layout.total / (self.layout.total + frozen)

    def architecture(self) -> dict:
        arch = {"kind": self.kind, **asdict(self.config)}
        arch["adapted"] = list(self.config.adapted)
        return arch

    def base_arrays(self) -> dict:
        return dict(self.base)

    @classmethod
    def from_arrays(cls, config_fields: dict, base: dict, params) -> "TinyTransformerRewardModel":
        fields = dict(config_fields)
        fields["adapted"] = tuple(fields.get("adapted", _PROJECTIONS))
        return cls(TransformerConfig(**fields), base=base, params=params)


_MODEL_KINDS = {
    LinearRewardModel.kind: LinearRewardModel,
    TinyTransformerRewardModel.kind: TinyTransformerRewardModel,
}


def build_model(kind: str, config_fields: dict, base: dict, params) -> object:
    try:
        cls = _MODEL_KINDS[kind]
    except KeyError:
        raise InputError(f"unknown model kind {kind!r}") from None
    return cls.from_arrays(config_fields, base, params)


def reward(model, tokens) -> float:
    """Scalar score of one token sequence under the model."""
    return model.reward(tokens)


def bt_loss(model, pair) -> float:
    """Bradley-Terry negative log likelihood of one preference pair.

    Computed from the two reward calls (numpy path), independently of the
    graph-based ``example_loss`` used for gradients.
    """
    margin = model.reward(pair.chosen) - model.reward(pair.rejected)
    return float(np.logaddexp(0.0, -margin))


def mean_bt_loss(model, pairs) -> float:
    if not pairs:
        raise InputError("mean_bt_loss needs at least one pair")
    return float(np.mean([bt_loss(model, pair) for pair in pairs]))
