"""Transformer building blocks: multi-head self-attention and feed-forward.

Both layers are residual with post-normalisation: ``out = LN(x + sublayer(x))``.
Masking is additive on the attention logits; masked slots get a large
negative finite value so the softmax finiteness guard stays active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

# Finite stand-in for -inf in attention logits; exp() underflows to 0.
NEG_LOGIT = -1e30

INIT_STD = 0.02


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                 "ln_gamma", "ln_beta")}


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("w1", "b1", "w2", "b2", "ln_gamma", "ln_beta")}


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ffn: FfnParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        out.update(self.ffn.named(f"{prefix}.ffn"))
        return out


def init_attention(rng: np.random.Generator, dim: int) -> AttentionParams:
    def w():
        return Tensor(rng.normal(0.0, INIT_STD, (dim, dim)), requires_grad=True)

    def b():
        return Tensor(np.zeros(dim), requires_grad=True)

    return AttentionParams(wq=w(), wk=w(), wv=w(), wo=w(),
                           bq=b(), bk=b(), bv=b(), bo=b(),
                           ln_gamma=Tensor(np.ones(dim), requires_grad=True),
                           ln_beta=Tensor(np.zeros(dim), requires_grad=True))


def init_ffn(rng: np.random.Generator, dim: int, inner: int) -> FfnParams:
    return FfnParams(
        w1=Tensor(rng.normal(0.0, INIT_STD, (dim, inner)), requires_grad=True),
        b1=Tensor(np.zeros(inner), requires_grad=True),
        w2=Tensor(rng.normal(0.0, INIT_STD, (inner, dim)), requires_grad=True),
        b2=Tensor(np.zeros(dim), requires_grad=True),
        ln_gamma=Tensor(np.ones(dim), requires_grad=True),
        ln_beta=Tensor(np.zeros(dim), requires_grad=True))


def init_encoder_layer(rng: np.random.Generator, dim: int,
                       ffn_inner: int) -> EncoderLayerParams:
    return EncoderLayerParams(attn=init_attention(rng, dim),
                              ffn=init_ffn(rng, dim, ffn_inner))


def attention_mask(n: int, true_len: int | None = None,
                   causal: bool = True) -> np.ndarray:
    """Additive (n, n) mask: 0 where position i may attend to j, NEG_LOGIT else.

    Rows are queries, columns keys.  Causality blocks j > i; padding blocks
    keys at or past ``true_len``.
    """
    mask = np.zeros((n, n))
    if causal:
        mask[np.triu_indices(n, k=1)] = NEG_LOGIT
    if true_len is not None:
        if not 0 < true_len <= n:
            raise ConfigError(f"true_len {true_len} not in 1..{n}")
        mask[:, true_len:] = NEG_LOGIT
    return mask


def batch_attention_mask(lengths, n: int, causal: bool = True) -> np.ndarray:
    """Stack per-sequence masks into shape (B, 1, n, n) for head broadcast."""
    return np.stack([attention_mask(n, true_len, causal) for true_len in lengths]
                    )[:, None, :, :]


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


def _lift(h: Tensor) -> tuple[Tensor, bool]:
    if h.ndim == 2:
        return ad.reshape(h, (1,) + h.shape), True
    if h.ndim == 3:
        return h, False
    raise ShapeError(f"expected (n, d) or (batch, n, d), got {h.shape}")


def attention_layer(h: Tensor, params: AttentionParams, n_heads: int,
                    mask: np.ndarray | None = None, p_drop: float = 0.0,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Residual multi-head self-attention with post-layernorm.

    ``h`` is (n, d) or (batch, n, d); ``mask`` is additive, shaped (n, n)
    or (batch, 1, n, n).
    """
    h, squeeze = _lift(h)
    batch, n, dim = h.shape
    if dim % n_heads != 0:
        raise ConfigError(f"model dim {dim} not divisible by {n_heads} heads")
    head_dim = dim // n_heads

    def split_heads(x: Tensor) -> Tensor:
        return ad.swapaxes(ad.reshape(x, (batch, n, n_heads, head_dim)), 1, 2)

    q = split_heads(ad.add(ad.matmul(h, params.wq), params.bq))
    k = split_heads(ad.add(ad.matmul(h, params.wk), params.bk))
    v = split_heads(ad.add(ad.matmul(h, params.wv), params.bv))

    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, 2, 3)), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim == 2:
            mask = mask[None, None, :, :]
        scores = ad.add(scores, Tensor(mask))
    weights = ad.softmax(scores, axis=-1)
    context = ad.reshape(ad.swapaxes(ad.matmul(weights, v), 1, 2), (batch, n, dim))
    out = ad.add(ad.matmul(context, params.wo), params.bo)
    out = _dropout(out, p_drop, rng)
    result = ad.layernorm(ad.add(h, out), params.ln_gamma, params.ln_beta)
    return ad.reshape(result, (n, dim)) if squeeze else result


def ffn_layer(h: Tensor, params: FfnParams, p_drop: float = 0.0,
              rng: np.random.Generator | None = None) -> Tensor:
    """Residual position-wise feed-forward (ReLU) with post-layernorm."""
    h, squeeze = _lift(h)
    inner = ad.relu(ad.add(ad.matmul(h, params.w1), params.b1))
    out = ad.add(ad.matmul(inner, params.w2), params.b2)
    out = _dropout(out, p_drop, rng)
    result = ad.layernorm(ad.add(h, out), params.ln_gamma, params.ln_beta)
    return ad.reshape(result, h.shape[1:]) if squeeze else result
