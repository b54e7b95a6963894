"""A small frozen transformer encoder classifier with low-rank adapters.

The base network (embeddings, positions, and per-block attention and FFN
matrices) is initialized once from a seed and never trained. Each block's
six matrices receive an adapter pair at the rank the plan assigns to that
block; a plan rank of zero leaves the block unadapted. The only other
trainable parameters are the zero-initialized classifier head, so an
untrained model always predicts uniform logits.

Blocks are pre-norm: x + Attn(LN(x)), then x + FFN(LN(x)). Sequence output
is mean-pooled, normalized, and mapped to logits by the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics, prune_engine
from .adapter import AdapterPair, FrozenLinear, forward as adapter_forward, init_adapter
from .errors import ConfigError, ParameterError, ShapeError
from .numerics import Rng, Tensor
from .rank_plan import RankPlan

__all__ = ["ModelDims", "ToyModel", "MATRIX_KINDS", "matrix_shape", "layer_shapes"]

# The adapted matrices inside one block, in forward-pass order.
MATRIX_KINDS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class ModelDims:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 16
    seq_len: int = 16
    num_outputs: int = 2

    def __post_init__(self) -> None:
        for field in ("num_layers", "d_model", "num_heads", "d_ff", "vocab_size", "seq_len", "num_outputs"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}"
            )


def matrix_shape(kind: str, dims: ModelDims) -> tuple[int, int]:
    """(output width, input width) of one block matrix."""
    if kind in ("wq", "wk", "wv", "wo"):
        return (dims.d_model, dims.d_model)
    if kind == "w1":
        return (dims.d_ff, dims.d_model)
    if kind == "w2":
        return (dims.d_model, dims.d_ff)
    raise ConfigError(f"unknown matrix kind {kind!r}; choose from {MATRIX_KINDS}")


def layer_shapes(dims: ModelDims, kinds=MATRIX_KINDS) -> list[list[tuple[int, int]]]:
    """Per-layer matrix shapes, as adapter budget accounting expects them."""
    per_layer = [matrix_shape(kind, dims) for kind in kinds]
    return [list(per_layer) for _ in range(dims.num_layers)]


class ToyModel:
    def __init__(
        self,
        dims: ModelDims,
        plan: RankPlan,
        embed: np.ndarray,
        pos: np.ndarray,
        blocks: list[dict[str, FrozenLinear]],
        adapters: dict[str, AdapterPair],
        head_w: Tensor,
        head_b: Tensor,
    ):
        self.dims = dims
        self.plan = plan
        self.embed = embed
        self.pos = pos
        self.blocks = blocks
        self.adapters = adapters
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def build(
        cls,
        dims: ModelDims,
        plan: RankPlan,
        rng: Rng,
        adapter_std: float = 0.02,
        adapter_scale: float = 1.0,
        adapt_kinds=MATRIX_KINDS,
    ) -> "ToyModel":
        """Seed the frozen base, attach adapters where the plan says to."""
        if plan.num_layers != dims.num_layers:
            raise ConfigError(
                f"plan covers {plan.num_layers} layers but the model has {dims.num_layers}"
            )
        for kind in adapt_kinds:
            if kind not in MATRIX_KINDS:
                raise ConfigError(f"unknown matrix kind {kind!r}; choose from {MATRIX_KINDS}")
        embed = rng.child("base/embed").normal((dims.vocab_size, dims.d_model))
        pos = rng.child("base/pos").normal((dims.seq_len, dims.d_model))
        blocks: list[dict[str, FrozenLinear]] = []
        adapters: dict[str, AdapterPair] = {}
        for i in range(dims.num_layers):
            block: dict[str, FrozenLinear] = {}
            for kind in MATRIX_KINDS:
                d1, d2 = matrix_shape(kind, dims)
                w = rng.child(f"base/block{i}/{kind}").normal((d1, d2), std=d2**-0.5)
                block[kind] = FrozenLinear(Tensor(w))
            blocks.append(block)
            r = plan.ranks[i]
            if r == 0:
                continue
            for kind in adapt_kinds:
                d1, d2 = matrix_shape(kind, dims)
                name = f"blocks.{i}.{kind}"
                adapters[name] = init_adapter(
                    d1,
                    d2,
                    r,
                    rng.child(f"adapter/{name}"),
                    std=adapter_std,
                    scale=adapter_scale,
                    frozen_ref=name,
                )
        head_w = Tensor(np.zeros((dims.num_outputs, dims.d_model)), requires_grad=True)
        head_b = Tensor(np.zeros(dims.num_outputs), requires_grad=True)
        return cls(dims, plan, embed, pos, blocks, adapters, head_w, head_b)

    def _apply(
        self,
        name: str,
        layer: FrozenLinear,
        x: Tensor,
        stats: dict | None,
        want_input: bool,
        want_latent: bool,
    ) -> Tensor:
        pair = self.adapters.get(name)
        if pair is not None and stats is not None:
            if want_input:
                # wq/wk/wv read the same activation; compute its norm once
                cache = stats["_norm_cache"]
                key = id(x.data)
                norm = cache.get(key)
                if norm is None:
                    norm = cache[key] = prune_engine.batch_input_norm(x.data)
                stats["input"][name] = norm
            if want_latent:
                # The latent entering B; recomputed outside the gradient tape.
                latent = x.data @ pair.A.data.T
                stats["latent"][name] = prune_engine.batch_input_norm(latent)
        return adapter_forward(layer, pair, x)

    def forward(
        self,
        tokens: np.ndarray,
        want_input_norms: bool = False,
        want_latent_norms: bool = False,
    ) -> tuple[Tensor, dict | None]:
        """Logits for a token batch, plus per-matrix norm statistics if asked."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (batch, position), got shape {tokens.shape}")
        b, n = tokens.shape
        if n > self.dims.seq_len:
            raise ShapeError(f"sequence length {n} exceeds model maximum {self.dims.seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.dims.vocab_size:
            raise ParameterError(f"token ids must lie in [0, {self.dims.vocab_size})")

        collect = want_input_norms or want_latent_norms
        stats: dict | None = (
            {"input": {}, "latent": {}, "_norm_cache": {}} if collect else None
        )
        heads, dh = self.dims.num_heads, self.dims.d_model // self.dims.num_heads

        x = Tensor(self.embed[tokens] + self.pos[:n])
        for i, block in enumerate(self.blocks):
            h = numerics.layernorm(x)
            q = self._apply(f"blocks.{i}.wq", block["wq"], h, stats, want_input_norms, want_latent_norms)
            k = self._apply(f"blocks.{i}.wk", block["wk"], h, stats, want_input_norms, want_latent_norms)
            v = self._apply(f"blocks.{i}.wv", block["wv"], h, stats, want_input_norms, want_latent_norms)
            q = q.reshape(b, n, heads, dh).swapaxes(1, 2)
            k = k.reshape(b, n, heads, dh).swapaxes(1, 2)
            v = v.reshape(b, n, heads, dh).swapaxes(1, 2)
            scores = numerics.matmul(q, k.swapaxes(-1, -2)) * (dh**-0.5)
            attn = numerics.softmax(scores, axis=-1)
            ctx = numerics.matmul(attn, v).swapaxes(1, 2).reshape(b, n, self.dims.d_model)
            x = x + self._apply(f"blocks.{i}.wo", block["wo"], ctx, stats, want_input_norms, want_latent_norms)

            h2 = numerics.layernorm(x)
            f = numerics.relu(
                self._apply(f"blocks.{i}.w1", block["w1"], h2, stats, want_input_norms, want_latent_norms)
            )
            x = x + self._apply(f"blocks.{i}.w2", block["w2"], f, stats, want_input_norms, want_latent_norms)

        pooled = numerics.layernorm(x.mean(axis=1))
        logits = numerics.matmul(pooled, self.head_w.transpose()) + self.head_b
        return logits, stats

    def trainable(self) -> dict[str, Tensor]:
        """Every tensor the optimizer may touch, in a stable order."""
        out: dict[str, Tensor] = {}
        for name, pair in self.adapters.items():
            out[f"{name}.A"] = pair.A
            out[f"{name}.B"] = pair.B
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def base_arrays(self) -> list[np.ndarray]:
        arrays = [self.embed, self.pos]
        for block in self.blocks:
            for kind in MATRIX_KINDS:
                arrays.append(block[kind].W0.data)
        return arrays

    def base_hash(self) -> str:
        """Digest of every frozen array; training must never change it."""
        return numerics.fingerprint(self.base_arrays())
