"""Full classifiers assembled from the building blocks.

``StamModel`` is initializer -> stack of global attention layers -> one head
per stage.  ``VanillaStackModel`` is the control: plain self-attention layers
stacked over the clip features, mean-aggregated, with a single head.  Its
first layer shares parameter names with the self-attention initializer so a
one-layer vanilla stack and a zero-layer STAM with self-attention init are
the same network.
"""

from __future__ import annotations

from .attention import AttentionTrace, StamStack, default_hidden_dim, stack_forward, weighted_sum
from .autodiff import ParamStore, Tensor
from .errors import ConfigError
from .heads import LossWeights, combined_loss, make_heads
from .initializers import GlobalInitializer, SelfAttentionParams, self_attention


class StamModel:
    def __init__(
        self,
        store: ParamStore,
        feature_dim: int,
        clip_count: int,
        num_classes: int,
        initializer: str = "selfatt",
        layers: int = 2,
        d: int | None = None,
        normalize_global: bool = True,
        zero_query: bool = False,
    ):
        if layers < 0:
            raise ConfigError(f"layer count must be >= 0, got {layers}")
        d = default_hidden_dim(feature_dim) if d is None else d
        if d < 1:
            raise ConfigError(f"hidden dim must be >= 1, got {d}")
        self.store = store
        self.initializer = GlobalInitializer.create(initializer, store, feature_dim, clip_count, d)
        self.stack = (
            StamStack.create(store, layers, feature_dim, d, normalize_global, zero_query) if layers else None
        )
        self.heads = make_heads(store, layers + 1, feature_dim, num_classes)

    @property
    def num_stages(self) -> int:
        return len(self.heads)

    def forward(self, clips: Tensor) -> AttentionTrace:
        g0, weights0 = self.initializer(clips)
        if self.stack is None:
            return AttentionTrace([g0], [weights0])
        return stack_forward(g0, clips, self.stack, initial_weights=weights0)

    def loss(self, clips: Tensor, labels, weights: LossWeights) -> Tensor:
        return combined_loss(self.forward(clips), self.heads, labels, weights)


class VanillaStackModel:
    """``num_layers`` self-attention layers, each re-attending the previous layer's outputs."""

    def __init__(
        self,
        store: ParamStore,
        feature_dim: int,
        num_classes: int,
        num_layers: int,
        d: int | None = None,
    ):
        if num_layers < 1:
            raise ConfigError(f"vanilla stack needs at least one layer, got {num_layers}")
        d = default_hidden_dim(feature_dim) if d is None else d
        self.store = store
        self.layers = [
            SelfAttentionParams.create(store, "init.selfatt" if i == 0 else f"vanilla.{i + 1}", feature_dim, d)
            for i in range(num_layers)
        ]
        self.heads = make_heads(store, 1, feature_dim, num_classes)

    @property
    def num_stages(self) -> int:
        return 1

    def forward(self, clips: Tensor) -> AttentionTrace:
        """Single-stage trace; the weights are each input clip's total share of the output."""
        x = clips
        maps = []
        for params in self.layers:
            x, attn = self_attention(x, params)
            maps.append(attn)
        weights = maps[-1].mean(axis=-2)
        for attn in reversed(maps[:-1]):
            weights = weighted_sum(weights, attn)
        return AttentionTrace([x.mean(axis=-2)], [weights])

    def loss(self, clips: Tensor, labels, weights: LossWeights) -> Tensor:
        return combined_loss(self.forward(clips), self.heads, labels, weights)
