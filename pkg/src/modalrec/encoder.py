"""Shared causal transformer over item sequences.

The per-position input is the concatenation of the three projected
modality vectors (text, image, cross, in that slot order) plus a learned
absolute position vector, and optionally an item-id embedding added on
top.  The same stack encodes single-domain sequences and cross-domain
mixed flows; the caller decides which item list to feed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, TooShortError
from .layers import (EncoderLayerParams, attention_layer, batch_attention_mask,
                     ffn_layer, init_encoder_layer)

INIT_STD = 0.02


@dataclass
class EncoderParams:
    layers: list[EncoderLayerParams]
    position: Tensor  # (n_max, dim), learned absolute positions
    n_heads: int

    @property
    def n_max(self) -> int:
        return self.position.shape[0]

    @property
    def dim(self) -> int:
        return self.position.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {"position": self.position}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        return out


def init_encoder(rng: np.random.Generator, dim: int, n_layers: int,
                 n_heads: int, ffn_inner: int, n_max: int) -> EncoderParams:
    if dim % n_heads != 0:
        raise ConfigError(f"encoder dim {dim} not divisible by {n_heads} heads")
    if n_layers < 0 or n_max < 1:
        raise ConfigError(f"bad encoder geometry: layers={n_layers}, n_max={n_max}")
    layers = [init_encoder_layer(rng, dim, ffn_inner) for _ in range(n_layers)]
    position = Tensor(rng.normal(0.0, INIT_STD, (n_max, dim)), requires_grad=True)
    return EncoderParams(layers=layers, position=position, n_heads=n_heads)


def concat_input(text_vec, image_vec, cross_vec, j: int, position,
                 id_vec=None) -> np.ndarray:
    """Input vector for position ``j``: [text | image | cross] + p_j (+ id).

    Slot order is fixed: text occupies [0, d), image [d, 2d), cross [2d, 3d).
    All three projected vectors must share one width d, and the id vector,
    when given, must span the full 3d.
    """
    text_vec = np.asarray(text_vec, dtype=np.float64)
    image_vec = np.asarray(image_vec, dtype=np.float64)
    cross_vec = np.asarray(cross_vec, dtype=np.float64)
    if not text_vec.shape == image_vec.shape == cross_vec.shape:
        raise ShapeError("projected modality vectors must share one width")
    table = position.data if isinstance(position, Tensor) else np.asarray(position)
    if not 0 <= j < table.shape[0]:
        raise IndexError(f"position {j} outside table of length {table.shape[0]}")
    out = np.concatenate([text_vec, image_vec, cross_vec]) + table[j]
    if id_vec is not None:
        id_vec = np.asarray(id_vec, dtype=np.float64)
        if id_vec.shape != out.shape:
            raise ShapeError(f"id vector width {id_vec.shape} != {out.shape}")
        out = out + id_vec
    return out


def encode(inputs, params: EncoderParams, lengths=None, causal: bool = True,
           p_drop: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Run the transformer stack over already-assembled position inputs.

    ``inputs`` is (n, dim), (batch, n, dim), or a list of 1-d vectors.
    ``lengths`` marks the true length of each padded row (keys beyond it are
    masked out).  With zero layers the inputs pass through unchanged.
    """
    if isinstance(inputs, (list, tuple)):
        inputs = np.stack([np.asarray(v, dtype=np.float64) for v in inputs])
    h = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    squeeze = h.ndim == 2
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
    if h.ndim != 3:
        raise ShapeError(f"expected (n, dim) or (batch, n, dim), got {inputs.shape}")
    batch, n, dim = h.shape
    if dim != params.dim:
        raise ShapeError(f"input width {dim} != encoder width {params.dim}")
    if n > params.n_max:
        raise IndexError(f"sequence length {n} exceeds maximum {params.n_max}")
    if lengths is None:
        lengths = [n] * batch
    mask = batch_attention_mask(lengths, n, causal=causal)
    for layer in params.layers:
        h = attention_layer(h, layer.attn, params.n_heads, mask=mask,
                            p_drop=p_drop, rng=rng)
        h = ffn_layer(h, layer.ffn, p_drop=p_drop, rng=rng)
    return ad.reshape(h, (n, dim)) if squeeze else h


def user_context_repr(hidden, true_length: int):
    """The user's context representation: hidden state at the last real position."""
    if true_length < 1:
        raise TooShortError("cannot read a representation from an empty sequence")
    data = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
    n = data.shape[-2]
    if true_length > n:
        raise IndexError(f"true length {true_length} exceeds sequence length {n}")
    if isinstance(hidden, Tensor):
        return ad.reshape(ad.gather_rows(hidden, [true_length - 1]),
                          (hidden.shape[-1],))
    return data[true_length - 1]
