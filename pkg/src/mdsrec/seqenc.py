"""Causal Transformer encoder shared in shape by the ID and modality channels.

Blocks are post-norm: ``LN(x + MHA(x))`` then ``LN(h + FFN(h))``. Padded
positions are forced to zero after every block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .numkit import (ACTIVATIONS, Tensor, embedding_lookup, layer_norm, parameter,
                     row_softmax, scale)

LAYER_KEYS = ("q", "k", "v", "u", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass
class EncoderParams:
    layers: list[dict[str, Tensor]]
    n_heads: int
    activation: str = "gelu"

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{l}.{key}": t for l, layer in enumerate(self.layers) for key, t in layer.items()}


def init_encoder(rng: np.random.Generator, d: int, n_layers: int, n_heads: int, d_ff: int | None = None,
                 dtype=np.float64, activation: str = "gelu") -> EncoderParams:
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    d_ff = d_ff or d
    std = 1.0 / math.sqrt(d)

    def mat(rows, cols, s=std):
        return parameter((rng.standard_normal((rows, cols)) * s).astype(dtype))

    layers = []
    for _ in range(n_layers):
        layers.append({
            "q": mat(d, d), "k": mat(d, d), "v": mat(d, d), "u": mat(d, d),
            "w1": mat(d, d_ff), "b1": parameter(np.zeros(d_ff, dtype=dtype)),
            "w2": mat(d_ff, d, 1.0 / math.sqrt(d_ff)), "b2": parameter(np.zeros(d, dtype=dtype)),
            "ln1_g": parameter(np.ones(d, dtype=dtype)), "ln1_b": parameter(np.zeros(d, dtype=dtype)),
            "ln2_g": parameter(np.ones(d, dtype=dtype)), "ln2_b": parameter(np.zeros(d, dtype=dtype)),
        })
    return EncoderParams(layers, n_heads, activation)


def embed_sequence(item_ids: np.ndarray, pad_mask: np.ndarray, table: Tensor, pos: Tensor) -> Tensor:
    """Look up item rows and add position vectors; PAD slots come out as zeros.

    Positions are right-aligned with the table, so the newest column always
    gets the last position row and extra left padding changes nothing.
    """
    t = item_ids.shape[1]
    n_pos = pos.shape[0]
    if t > n_pos:
        raise ShapeError(f"sequence length {t} exceeds the {n_pos}-row position table")
    x = embedding_lookup(table, item_ids) + pos[n_pos - t:]
    return x * pad_mask[..., None].astype(x.dtype)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def multi_head_attention(queries: Tensor, keys_values: Tensor, layer: dict[str, Tensor], n_heads: int,
                         mask: np.ndarray, temperature: float) -> tuple[Tensor, Tensor]:
    """Heads over ``queries @ Q`` against ``keys_values @ K``/``@ V``, mixed by ``U``.

    ``mask`` broadcasts to (batch, heads, n_queries, n_keys); False is forbidden.
    Returns the mixed output and the attention weights.
    """
    q = split_heads(queries @ layer["q"], n_heads)
    k = split_heads(keys_values @ layer["k"], n_heads)
    v = split_heads(keys_values @ layer["v"], n_heads)
    weights = row_softmax(scale(q @ k.T, 1.0 / temperature), mask)
    return merge_heads(weights @ v) @ layer["u"], weights


def self_attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Causal mask over real positions; a PAD query may only see itself."""
    t = pad_mask.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    real_keys = pad_mask[:, None, None, :]
    pad_query_self = np.eye(t, dtype=bool) & ~pad_mask[:, None, :, None]
    return (causal & real_keys) | pad_query_self


def encoder_block(x: Tensor, pad_mask: np.ndarray, layer: dict[str, Tensor], n_heads: int,
                  activation: str, attn_mask: np.ndarray | None = None) -> Tensor:
    act = ACTIVATIONS[activation]
    if attn_mask is None:
        attn_mask = self_attention_mask(pad_mask)
    d_head = x.shape[-1] // n_heads
    a, _ = multi_head_attention(x, x, layer, n_heads, attn_mask, math.sqrt(d_head))
    h = layer_norm(x + a, layer["ln1_g"], layer["ln1_b"])
    f = act(h @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"]
    out = layer_norm(h + f, layer["ln2_g"], layer["ln2_b"])
    return out * pad_mask[..., None].astype(out.dtype)


def transformer_forward(x: Tensor, pad_mask: np.ndarray, params: EncoderParams) -> list[Tensor]:
    """Run every block; returns ``[input, after block 1, ..., after block L]``."""
    if x.ndim != 3:
        raise ShapeError(f"encoder input must be (batch, time, width), got {x.shape}")
    if not pad_mask.any(axis=1).all():
        raise DataError("a batch row is entirely padding")
    attn_mask = self_attention_mask(pad_mask)
    states = [x]
    for layer in params.layers:
        states.append(encoder_block(states[-1], pad_mask, layer, params.n_heads, params.activation, attn_mask))
    return states
