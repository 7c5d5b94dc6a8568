"""Encoder-decoder transformer baseline over block tensors.

Input blocks become encoder tokens, each output block is produced by one
learned decoder query token.  Per-token affine maps translate between the
block size d and the model width.  There is no layer norm and no dropout;
residual additions are kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .nn import _init_affine

__all__ = ["TransformerConfig", "Transformer"]


@dataclass
class TransformerConfig:
    block_size: int
    input_blocks: int
    output_blocks: int
    model_width: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    ffn_width: int = 128
    activation_slope: float = 0.01

    def validate(self):
        if min(self.block_size, self.input_blocks, self.output_blocks, self.model_width,
               self.num_heads, self.num_encoder_layers, self.num_decoder_layers,
               self.ffn_width) <= 0:
            raise ValueError("transformer dimensions must be positive")
        if self.model_width % self.num_heads != 0:
            raise ValueError(
                f"model_width {self.model_width} is not divisible by num_heads {self.num_heads}"
            )
        return self


class _Attention:
    """Multi-head attention; query and key/value sequences may differ."""

    def __init__(self, rng, width, heads, dtype, name):
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.wq = _init_affine(rng, width, width, dtype)
        self.wk = _init_affine(rng, width, width, dtype)
        self.wv = _init_affine(rng, width, width, dtype)
        self.wo = _init_affine(rng, width, width, dtype)
        self.name = name

    def _split(self, x: Tensor, batch, seq):
        # [batch, seq, width] -> [batch, heads, seq, head_dim]
        x = T.reshape(x, (batch, seq, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def forward(self, queries: Tensor, keys_values: Tensor):
        batch, q_len, _ = queries.shape
        kv_len = keys_values.shape[1]
        q = self._split(T.matmul(queries, self.wq[0]) + self.wq[1], batch, q_len)
        k = self._split(T.matmul(keys_values, self.wk[0]) + self.wk[1], batch, kv_len)
        v = self._split(T.matmul(keys_values, self.wv[0]) + self.wv[1], batch, kv_len)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=3)
        mixed = T.matmul(weights, v)
        mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch, q_len, self.width))
        return T.matmul(mixed, self.wo[0]) + self.wo[1], weights

    def parameters(self):
        out = {}
        for tag, (w, b) in zip(("q", "k", "v", "o"), (self.wq, self.wk, self.wv, self.wo)):
            out[f"{self.name}.w{tag}"] = w
            out[f"{self.name}.b{tag}"] = b
        return out


class _Ffn:
    def __init__(self, rng, width, hidden, slope, dtype, name):
        self.l1 = _init_affine(rng, width, hidden, dtype)
        self.l2 = _init_affine(rng, hidden, width, dtype)
        self.slope = slope
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(T.matmul(x, self.l1[0]) + self.l1[1], self.slope)
        return T.matmul(h, self.l2[0]) + self.l2[1]

    def parameters(self):
        return {
            f"{self.name}.w1": self.l1[0], f"{self.name}.b1": self.l1[1],
            f"{self.name}.w2": self.l2[0], f"{self.name}.b2": self.l2[1],
        }


class Transformer:
    def __init__(self, cfg: TransformerConfig, rng, dtype=np.float64, name="transformer"):
        cfg.validate()
        self.cfg = cfg
        self.name = name
        w = cfg.model_width
        self.in_proj = _init_affine(rng, cfg.block_size, w, dtype)
        self.out_proj = _init_affine(rng, w, cfg.block_size, dtype)
        bound = np.sqrt(1.0 / w)
        self.pos_embed = T.parameter(
            rng.uniform(-bound, bound, size=(cfg.input_blocks, w)).astype(dtype))
        self.queries = T.parameter(
            rng.uniform(-bound, bound, size=(cfg.output_blocks, w)).astype(dtype))
        self.enc_attn = []
        self.enc_ffn = []
        for i in range(cfg.num_encoder_layers):
            self.enc_attn.append(_Attention(rng, w, cfg.num_heads, dtype, f"{name}.enc{i}.attn"))
            self.enc_ffn.append(_Ffn(rng, w, cfg.ffn_width, cfg.activation_slope, dtype,
                                     f"{name}.enc{i}.ffn"))
        self.dec_self = []
        self.dec_cross = []
        self.dec_ffn = []
        for i in range(cfg.num_decoder_layers):
            self.dec_self.append(_Attention(rng, w, cfg.num_heads, dtype, f"{name}.dec{i}.self"))
            self.dec_cross.append(_Attention(rng, w, cfg.num_heads, dtype, f"{name}.dec{i}.cross"))
            self.dec_ffn.append(_Ffn(rng, w, cfg.ffn_width, cfg.activation_slope, dtype,
                                     f"{name}.dec{i}.ffn"))

    def forward(self, blocks: Tensor, rng=None, eval_mode=False):
        cfg = self.cfg
        batch, n, d = blocks.shape
        if n != cfg.input_blocks or d != cfg.block_size:
            raise ValueError(
                f"transformer expected [batch, {cfg.input_blocks}, {cfg.block_size}], got {blocks.shape}")
        h = T.matmul(blocks, self.in_proj[0]) + self.in_proj[1]
        h = h + T.reshape(self.pos_embed, (1, cfg.input_blocks, cfg.model_width))
        # inspection reads these after a forward pass; numpy copies only
        self.last_attention = {"encoder": [], "decoder_self": [], "decoder_cross": []}
        self.last_encoder_layer0 = None
        for i, (attn, ffn) in enumerate(zip(self.enc_attn, self.enc_ffn)):
            a, w = attn.forward(h, h)
            self.last_attention["encoder"].append(w.data.copy())
            h = h + a
            if i == 0:
                self.last_encoder_layer0 = h.data.copy()
            h = h + ffn.forward(h)
        ones = Tensor(np.ones((batch, 1, 1), dtype=h.data.dtype))
        dec = ones * T.reshape(self.queries, (1, cfg.output_blocks, cfg.model_width))
        for attn_s, attn_c, ffn in zip(self.dec_self, self.dec_cross, self.dec_ffn):
            a, w = attn_s.forward(dec, dec)
            self.last_attention["decoder_self"].append(w.data.copy())
            dec = dec + a
            a, w = attn_c.forward(dec, h)
            self.last_attention["decoder_cross"].append(w.data.copy())
            dec = dec + a
            dec = dec + ffn.forward(dec)
        return T.matmul(dec, self.out_proj[0]) + self.out_proj[1]

    def parameters(self):
        out = {
            f"{self.name}.in_w": self.in_proj[0], f"{self.name}.in_b": self.in_proj[1],
            f"{self.name}.out_w": self.out_proj[0], f"{self.name}.out_b": self.out_proj[1],
            f"{self.name}.pos": self.pos_embed, f"{self.name}.queries": self.queries,
        }
        for mod_list in (self.enc_attn, self.enc_ffn, self.dec_self, self.dec_cross, self.dec_ffn):
            for mod in mod_list:
                out.update(mod.parameters())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())
