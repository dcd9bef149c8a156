"""Encoder-decoder transformer built from basic torch modules.

Pre-norm residual blocks, learned absolute position embeddings, and
explicit key/value caches so autoregressive decoding costs one position
per step instead of re-running the whole prefix.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

__all__ = ["Seq2SeqTransformer", "TransformerEncoder", "KVCache"]

NEG_INF = -1e9


class KVCache:
    """Per-layer key/value tensors grown during incremental decoding."""

    def __init__(self) -> None:
        self.self_k: list[Tensor | None] = []
        self.self_v: list[Tensor | None] = []
        self.cross_k: list[Tensor | None] = []
        self.cross_v: list[Tensor | None] = []

    @classmethod
    def for_layers(cls, n_layers: int) -> "KVCache":
        cache = cls()
        cache.self_k = [None] * n_layers
        cache.self_v = [None] * n_layers
        cache.cross_k = [None] * n_layers
        cache.cross_v = [None] * n_layers
        return cache


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.q_proj = nn.Linear(hidden, hidden, bias=False)
        self.k_proj = nn.Linear(hidden, hidden, bias=False)
        self.v_proj = nn.Linear(hidden, hidden, bias=False)
        self.out_proj = nn.Linear(hidden, hidden, bias=False)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, key_value: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k_proj(key_value)), self._split(self.v_proj(key_value))

    def forward(
        self,
        query: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Tensor | None = None,
    ) -> Tensor:
        """Attend `query` (B, Tq, H) over projected k/v (B, heads, Tk, d).

        `mask` is boolean with True = blocked, broadcastable to
        (B, heads, Tq, Tk).
        """
        q = self._split(self.q_proj(query))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(mask, NEG_INF)
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).flatten(-2)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ff: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(hidden, ff),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff, hidden),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, heads, dropout)
        self.norm2 = nn.LayerNorm(hidden)
        self.ff = FeedForward(hidden, ff, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Tensor | None) -> Tensor:
        h = self.norm1(x)
        k, v = self.attn.project_kv(h)
        mask = pad_mask[:, None, None, :] if pad_mask is not None else None
        x = x + self.dropout(self.attn(h, k, v, mask))
        x = x + self.dropout(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.self_attn = MultiHeadAttention(hidden, heads, dropout)
        self.norm2 = nn.LayerNorm(hidden)
        self.cross_attn = MultiHeadAttention(hidden, heads, dropout)
        self.norm3 = nn.LayerNorm(hidden)
        self.ff = FeedForward(hidden, ff, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        causal_mask: Tensor | None,
        memory_pad_mask: Tensor | None,
        cache: KVCache | None = None,
        layer: int = 0,
    ) -> Tensor:
        h = self.norm1(x)
        k, v = self.self_attn.project_kv(h)
        if cache is not None:
            if cache.self_k[layer] is not None:
                k = torch.cat([cache.self_k[layer], k], dim=2)
                v = torch.cat([cache.self_v[layer], v], dim=2)
            cache.self_k[layer] = k
            cache.self_v[layer] = v
        x = x + self.dropout(self.self_attn(h, k, v, causal_mask))

        h = self.norm2(x)
        if cache is not None and cache.cross_k[layer] is not None:
            ck, cv = cache.cross_k[layer], cache.cross_v[layer]
        else:
            ck, cv = self.cross_attn.project_kv(memory)
            if cache is not None:
                cache.cross_k[layer] = ck
                cache.cross_v[layer] = cv
        cross_mask = memory_pad_mask[:, None, None, :] if memory_pad_mask is not None else None
        x = x + self.dropout(self.cross_attn(h, ck, cv, cross_mask))
        x = x + self.dropout(self.ff(self.norm3(x)))
        return x


class TokenEmbedding(nn.Module):
    def __init__(self, vocab_size: int, hidden: int, max_len: int, dropout: float):
        super().__init__()
        self.tokens = nn.Embedding(vocab_size, hidden)
        self.positions = nn.Embedding(max_len, hidden)
        self.scale = math.sqrt(hidden)
        self.dropout = nn.Dropout(dropout)
        self.max_len = max_len

    def forward(self, ids: Tensor, offset: int = 0) -> Tensor:
        t = ids.shape[1]
        if offset + t > self.max_len:
            raise ValueError(f"sequence length {offset + t} exceeds maximum {self.max_len}")
        pos = torch.arange(offset, offset + t, device=ids.device)
        return self.dropout(self.tokens(ids) * self.scale + self.positions(pos))


class TransformerEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        hidden: int,
        heads: int,
        layers: int,
        ff: int,
        max_len: int,
        dropout: float,
        embedding: TokenEmbedding | None = None,
    ):
        super().__init__()
        self.embed = embedding or TokenEmbedding(vocab_size, hidden, max_len, dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(hidden, heads, ff, dropout) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(hidden)

    def forward(self, ids: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, pad_mask)
        return self.norm(x)


class Seq2SeqTransformer(nn.Module):
    """Token-id encoder-decoder with a tied input embedding."""

    def __init__(
        self,
        vocab_size: int,
        hidden: int,
        heads: int,
        enc_layers: int,
        dec_layers: int,
        ff: int,
        max_enc_len: int,
        max_dec_len: int,
        dropout: float,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_enc_len = max_enc_len
        self.max_dec_len = max_dec_len
        self.n_dec_layers = dec_layers
        shared = TokenEmbedding(vocab_size, hidden, max(max_enc_len, max_dec_len), dropout)
        self.encoder = TransformerEncoder(
            vocab_size, hidden, heads, enc_layers, ff, max_enc_len, dropout, embedding=shared
        )
        self.dec_embed = shared
        self.dec_layers = nn.ModuleList(
            DecoderLayer(hidden, heads, ff, dropout) for _ in range(dec_layers)
        )
        self.dec_norm = nn.LayerNorm(hidden)
        self.lm_head = nn.Linear(hidden, vocab_size, bias=False)
        self.apply(_init_weights)

    def encode(self, enc_ids: Tensor, enc_pad_mask: Tensor | None = None) -> Tensor:
        return self.encoder(enc_ids, enc_pad_mask)

    def decode(
        self,
        dec_ids: Tensor,
        memory: Tensor,
        enc_pad_mask: Tensor | None = None,
        cache: KVCache | None = None,
        offset: int = 0,
    ) -> Tensor:
        x = self.dec_embed(dec_ids, offset=offset)
        t = dec_ids.shape[1]
        causal = None
        if t > 1:
            causal = torch.triu(
                torch.ones(t, t, dtype=torch.bool, device=dec_ids.device), diagonal=1
            )
        for index, layer in enumerate(self.dec_layers):
            x = layer(x, memory, causal, enc_pad_mask, cache=cache, layer=index)
        return self.lm_head(self.dec_norm(x))

    def forward(
        self,
        enc_ids: Tensor,
        dec_ids: Tensor,
        enc_pad_mask: Tensor | None = None,
    ) -> Tensor:
        memory = self.encode(enc_ids, enc_pad_mask)
        return self.decode(dec_ids, memory, enc_pad_mask)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)
