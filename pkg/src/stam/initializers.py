"""Ways to build the initial global feature from the clip features.

Every initializer maps clips ``[N, D]`` (or a batch ``[B, N, D]``) to a
global feature ``[D]`` (or ``[B, D]``).  The pooling and self-attention
variants are invariant to clip order; the bidirectional GRU and the
full-span temporal convolution are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .autodiff import ParamStore, Tensor, concat, linear, matmul, softmax
from .errors import ConfigError, DimensionError

INITIALIZER_KINDS = ("avg", "max", "bigru", "tconv", "selfatt")


def _check_clips(clips: Tensor) -> None:
    if clips.ndim not in (2, 3):
        raise DimensionError(f"clips must be [N, D] or [B, N, D], got {clips.shape}")
    if clips.shape[-2] < 1 or clips.shape[-1] < 1:
        raise DimensionError(f"clips need N >= 1 and D >= 1, got {clips.shape}")


def init_avg(clips: Tensor) -> Tensor:
    _check_clips(clips)
    return clips.mean(axis=-2)


def init_max(clips: Tensor) -> Tensor:
    # ties route the subgradient to the lowest clip index
    _check_clips(clips)
    return clips.max(axis=-2)


# -- self-attention ------------------------------------------------------------------


@dataclass
class SelfAttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, feature_dim: int, d: int) -> "SelfAttentionParams":
        return cls(
            store.param(f"{prefix}.W_q", (d, feature_dim)),
            store.param(f"{prefix}.W_k", (d, feature_dim)),
            store.param(f"{prefix}.W_v", (feature_dim, feature_dim)),
        )


def self_attention(x: Tensor, params: SelfAttentionParams) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product self-attention over the clip axis.

    Returns the attended clips (same shape as ``x``) and the row-stochastic
    attention matrix ``[..., N, N]``.
    """
    _check_clips(x)
    if x.shape[-1] != params.W_q.shape[1]:
        raise DimensionError(f"self-attention expects D={params.W_q.shape[1]}, got clips {x.shape}")
    q = linear(x, params.W_q)
    k = linear(x, params.W_k)
    v = linear(x, params.W_v)
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(params.d)), axis=-1)
    return matmul(attn, v), attn


def _selfatt(clips: Tensor, params: SelfAttentionParams) -> tuple[Tensor, Tensor]:
    attended, attn = self_attention(clips, params)
    # g0 = mean_i sum_j A_ij v_j, so the effective clip weights are A's column means
    return attended.mean(axis=-2), attn.mean(axis=-2)


def init_selfatt(clips: Tensor, params: SelfAttentionParams) -> Tensor:
    return _selfatt(clips, params)[0]


# -- bidirectional GRU ---------------------------------------------------------------


@dataclass
class GruParams:
    """One GRU direction, gates stacked in (reset, update, candidate) order."""

    W_ih: Tensor
    W_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_dim: int, hidden: int) -> "GruParams":
        return cls(
            store.param(f"{prefix}.W_ih", (3 * hidden, input_dim), fan_in=hidden),
            store.param(f"{prefix}.W_hh", (3 * hidden, hidden), fan_in=hidden),
            store.param(f"{prefix}.b_ih", (3 * hidden,), fan_in=hidden),
            store.param(f"{prefix}.b_hh", (3 * hidden,), fan_in=hidden),
        )


@dataclass
class BiGruParams:
    forward: GruParams
    backward: GruParams
    W_proj: Tensor
    b_proj: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, feature_dim: int) -> "BiGruParams":
        hidden = feature_dim
        return cls(
            GruParams.create(store, f"{prefix}.fwd", feature_dim, hidden),
            GruParams.create(store, f"{prefix}.bwd", feature_dim, hidden),
            store.param(f"{prefix}.W_proj", (feature_dim, 2 * hidden)),
            store.param(f"{prefix}.b_proj", (feature_dim,), fan_in=2 * hidden),
        )


def gru_final_state(clips: Tensor, params: GruParams, reverse: bool = False) -> Tensor:
    """Run a GRU over ``clips`` [B, N, D] from a zero state; return the last hidden state."""
    batch, n, _ = clips.shape
    hid = params.hidden
    gates_x = linear(clips, params.W_ih, params.b_ih)
    # split once so each step only slices out its time index
    x_rz, x_n = gates_x[:, :, : 2 * hid], gates_x[:, :, 2 * hid :]
    w_rz, w_n = params.W_hh[: 2 * hid], params.W_hh[2 * hid :]
    b_rz, b_n = params.b_hh[: 2 * hid], params.b_hh[2 * hid :]
    h = Tensor(np.zeros((batch, hid)))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        gates = (x_rz[:, t] + linear(h, w_rz, b_rz)).sigmoid()
        reset, update = gates[:, :hid], gates[:, hid:]
        candidate = (x_n[:, t] + reset * linear(h, w_n, b_n)).tanh()
        h = candidate + update * (h - candidate)
    return h


def init_bigru(clips: Tensor, params: BiGruParams) -> Tensor:
    _check_clips(clips)
    single = clips.ndim == 2
    x = clips.reshape((1,) + clips.shape) if single else clips
    both = concat(
        [gru_final_state(x, params.forward), gru_final_state(x, params.backward, reverse=True)],
        axis=-1,
    )
    g0 = linear(both, params.W_proj, params.b_proj)
    return g0.reshape(g0.shape[-1]) if single else g0


# -- temporal convolution ------------------------------------------------------------


@dataclass
class TemporalConvParams:
    """Kernel spanning all ``N`` clips: one ``D x D`` channel mix per tap."""

    kernel: Tensor  # [N, D_out, D_in]
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, feature_dim: int, clip_count: int) -> "TemporalConvParams":
        fan_in = clip_count * feature_dim
        return cls(
            store.param(f"{prefix}.kernel", (clip_count, feature_dim, feature_dim), fan_in=fan_in),
            store.param(f"{prefix}.bias", (feature_dim,), fan_in=fan_in),
        )


def init_tconv(clips: Tensor, params: TemporalConvParams) -> Tensor:
    """``sum_t K_t f_t + b`` with a kernel as long as the clip sequence (no padding)."""
    _check_clips(clips)
    taps, d_out, d_in = params.kernel.shape
    n, feat = clips.shape[-2:]
    if (n, feat) != (taps, d_in):
        raise DimensionError(f"temporal conv kernel expects [{taps}, {d_in}] clips, got {clips.shape}")
    flat_clips = clips.reshape(clips.shape[:-2] + (n * feat,))
    flat_kernel = params.kernel.transpose(1, 0, 2).reshape(d_out, taps * d_in)
    return linear(flat_clips, flat_kernel, params.bias)


# -- dispatch ------------------------------------------------------------------------

InitParams = Union[None, SelfAttentionParams, BiGruParams, TemporalConvParams]


@dataclass
class GlobalInitializer:
    """A chosen initializer kind bundled with its parameters (if any)."""

    kind: str
    params: InitParams = None

    @classmethod
    def create(
        cls,
        kind: str,
        store: ParamStore,
        feature_dim: int,
        clip_count: int,
        d: int,
        prefix: str = "init",
    ) -> "GlobalInitializer":
        if kind not in INITIALIZER_KINDS:
            raise ConfigError(f"unknown initializer {kind!r}; choose from {', '.join(INITIALIZER_KINDS)}")
        if kind == "selfatt":
            params: InitParams = SelfAttentionParams.create(store, f"{prefix}.selfatt", feature_dim, d)
        elif kind == "bigru":
            params = BiGruParams.create(store, f"{prefix}.bigru", feature_dim)
        elif kind == "tconv":
            params = TemporalConvParams.create(store, f"{prefix}.tconv", feature_dim, clip_count)
        else:
            params = None
        return cls(kind, params)

    def __call__(self, clips: Tensor) -> tuple[Tensor, Tensor | None]:
        """Global feature plus per-clip weights when the kind produces them."""
        if self.kind == "avg":
            return init_avg(clips), None
        if self.kind == "max":
            return init_max(clips), None
        if self.kind == "selfatt":
            return _selfatt(clips, self.params)
        if self.kind == "bigru":
            return init_bigru(clips, self.params), None
        return init_tconv(clips, self.params), None
