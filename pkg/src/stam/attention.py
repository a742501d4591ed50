"""Global attention layers and their stack.

A global attention layer scores every clip against a single query derived
from the current global feature, turns the scores into temporal attention
with a softmax, and returns the attention-weighted sum of the clip values as
the refined global feature.  Stacking layers feeds each refined global
feature back in as the next query while keys and values always come from the
original clip features.

All functions accept either a single sample (global ``[D]``, clips ``[N, D]``)
or a batch (global ``[B, D]``, clips ``[B, N, D]``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor, linear, matmul, softmax
from .errors import DimensionError

LAYER_NORM_EPS = 1e-5


def default_hidden_dim(feature_dim: int) -> int:
    """512 for backbone-sized features, otherwise the feature dimension itself."""
    return 512 if feature_dim >= 512 else feature_dim


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, dim: int) -> "LayerNormParams":
        return cls(
            store.param(f"{prefix}.gamma", (dim,), init="ones"),
            store.param(f"{prefix}.beta", (dim,), init="zeros"),
        )


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = LAYER_NORM_EPS) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * params.gamma + params.beta


@dataclass
class GlobalAttentionLayerParams:
    """Projections of one global attention layer.

    ``W_q`` and ``W_k`` map features to the shared hidden size ``d``;
    ``W_v`` keeps the feature dimension.  ``norm`` (optional) normalises the
    incoming global feature before the query projection.
    """

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    norm: LayerNormParams | None = None

    def __post_init__(self):
        d, feat = self.W_q.shape
        if self.W_k.shape != (d, feat):
            raise DimensionError(f"W_k must be {(d, feat)} to match W_q, got {self.W_k.shape}")
        if self.W_v.shape != (feat, feat):
            raise DimensionError(f"W_v must be {(feat, feat)}, got {self.W_v.shape}")

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def create(
        cls,
        store: ParamStore,
        prefix: str,
        feature_dim: int,
        d: int,
        normalize: bool = True,
        zero_query: bool = False,
    ) -> "GlobalAttentionLayerParams":
        w_q = store.param(f"{prefix}.W_q", (d, feature_dim), init="zeros" if zero_query else "uniform")
        return cls(
            W_q=w_q,
            W_k=store.param(f"{prefix}.W_k", (d, feature_dim)),
            W_v=store.param(f"{prefix}.W_v", (feature_dim, feature_dim)),
            norm=LayerNormParams.create(store, f"{prefix}.norm", feature_dim) if normalize else None,
        )


def _check_inputs(g: Tensor, clips: Tensor, feature_dim: int) -> None:
    if clips.ndim not in (2, 3) or clips.shape[-1] != feature_dim:
        raise DimensionError(f"clips: expected [N, {feature_dim}] or [B, N, {feature_dim}], got {clips.shape}")
    if g.shape != clips.shape[:-2] + (feature_dim,):
        raise DimensionError(
            f"global feature: expected {clips.shape[:-2] + (feature_dim,)}, got {g.shape}"
        )
    if clips.shape[-2] < 1:
        raise DimensionError("at least one clip is required")


def attention_scores(g: Tensor, clips: Tensor, params: GlobalAttentionLayerParams) -> Tensor:
    """Pre-softmax score of every clip: ``(W_q g) . (W_k f_i) / sqrt(d)``."""
    _check_inputs(g, clips, params.feature_dim)
    if params.norm is not None:
        g = layer_norm(g, params.norm)
    q = linear(g, params.W_q)
    keys = linear(clips, params.W_k)
    scores = matmul(keys, q.reshape(q.shape + (1,)))
    return scores.reshape(scores.shape[:-1]) * (1.0 / math.sqrt(params.d))


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``sum_i weights[..., i] * values[..., i, :]``."""
    n = weights.shape[-1]
    out = matmul(weights.reshape(weights.shape[:-1] + (1, n)), values)
    return out.reshape(out.shape[:-2] + (values.shape[-1],))


def layer_forward(
    g: Tensor, clips: Tensor, params: GlobalAttentionLayerParams
) -> tuple[Tensor, Tensor]:
    """Refined global feature and the temporal attention that produced it."""
    weights = softmax(attention_scores(g, clips, params), axis=-1)
    values = linear(clips, params.W_v)
    return weighted_sum(weights, values), weights


@dataclass
class StamStack:
    layers: list[GlobalAttentionLayerParams]
    normalize_global: bool = True

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a stack needs at least one layer")
        d, feat = self.layers[0].d, self.layers[0].feature_dim
        for i, layer in enumerate(self.layers):
            if (layer.d, layer.feature_dim) != (d, feat):
                raise DimensionError(
                    f"layer {i} has (d, D_f)=({layer.d}, {layer.feature_dim}), expected ({d}, {feat})"
                )

    @classmethod
    def create(
        cls,
        store: ParamStore,
        num_layers: int,
        feature_dim: int,
        d: int,
        normalize_global: bool = True,
        zero_query: bool = False,
        prefix: str = "stam",
    ) -> "StamStack":
        layers = [
            GlobalAttentionLayerParams.create(
                store, f"{prefix}.{i + 1}", feature_dim, d, normalize_global, zero_query
            )
            for i in range(num_layers)
        ]
        return cls(layers, normalize_global)

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class AttentionTrace:
    """Globals ``g^0..g^M`` and attention vectors ``a^0..a^M``.

    ``per_layer_weights[0]`` is ``None`` unless the initializer itself
    produced temporal weights.
    """

    per_layer_globals: list[Tensor] = field(default_factory=list)
    per_layer_weights: list[Tensor | None] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.per_layer_globals) - 1

    def weights_array(self, layer: int) -> np.ndarray | None:
        w = self.per_layer_weights[layer]
        return None if w is None else w.values


def stack_forward(
    g0: Tensor,
    clips: Tensor,
    stack: StamStack,
    initial_weights: Tensor | None = None,
) -> AttentionTrace:
    trace = AttentionTrace([g0], [initial_weights])
    g = g0
    for layer in stack.layers:
        g, weights = layer_forward(g, clips, layer)
        trace.per_layer_globals.append(g)
        trace.per_layer_weights.append(weights)
    return trace
