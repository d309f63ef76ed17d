"""A small BERT-style encoder for sequence classification.

Post-layernorm residual blocks: each sublayer computes its function, adds
the residual, then layer-normalizes. The FFN sublayer is either a dense
two-layer network or an ExpertSet with token routing; both expose the same
per-layer hidden states X^0 .. X^L for distillation (X^0 is the embedding
output, each X^l post-layernorm).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .moe import ExpertSet, RoutingTable, moe_forward, GATE


@dataclass
class MoEConfig:
    num_experts: int
    expert_dim: int
    shared_dim: int
    routing: str  # hash_random | hash_balanced | gate

    def to_dict(self):
        return {"num_experts": self.num_experts, "expert_dim": self.expert_dim,
                "shared_dim": self.shared_dim, "routing": self.routing}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    ffn_hidden: int = 256
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 64
    num_labels: int = 2
    dropout: float = 0.1
    moe: MoEConfig | None = None

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError("config", (self.embed_dim,), (self.num_heads,))
        if self.moe is not None:
            if self.moe.expert_dim > self.ffn_hidden:
                raise ValueError("expert_dim exceeds ffn_hidden")
            if self.moe.shared_dim > self.moe.expert_dim:
                raise ValueError("shared_dim exceeds expert_dim")
            if self.moe.num_experts < 1:
                raise ValueError("need at least one expert")

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("vocab_size", "embed_dim", "ffn_hidden", "num_layers", "num_heads",
              "max_seq_len", "num_labels", "dropout")}
        d["moe"] = self.moe.to_dict() if self.moe else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        moe = d.pop("moe", None)
        return cls(moe=MoEConfig.from_dict(moe) if moe else None, **d)


@dataclass
class LayerOutputs:
    hidden: list[Tensor]  # X^0 .. X^L, each batch × seq × d
    attn_out: list[Tensor]  # attention sublayer output A per layer
    mask: np.ndarray


class DenseFFN:
    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def ffn_forward(a: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer FFN: GELU(A·W1 + b1)·W2 + b2 (residual/layernorm at caller)."""
    if w1.shape[0] != a.shape[-1] or w2.shape[0] != w1.shape[1]:
        raise ShapeError("ffn_forward", a.shape, w1.shape, w2.shape)
    h = T.gelu(T.add(T.matmul(a, w1), b1))
    return T.add(T.matmul(h, w2), b2)


class EncoderLayer:
    """One transformer block: self-attention + FFN, post-layernorm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim

        def lin(nin, nout):
            return (Tensor(rng.normal(0.0, 0.02, size=(nin, nout)), requires_grad=True),
                    Tensor(np.zeros(nout), requires_grad=True))

        self.wq, self.bq = lin(d, d)
        self.wk, self.bk = lin(d, d)
        self.wv, self.bv = lin(d, d)
        self.wo, self.bo = lin(d, d)
        self.attn_ln_g = Tensor(np.ones(d), requires_grad=True)
        self.attn_ln_b = Tensor(np.zeros(d), requires_grad=True)
        w1, b1 = lin(d, cfg.ffn_hidden)
        w2, b2 = lin(cfg.ffn_hidden, d)
        self.ffn: DenseFFN | ExpertSet = DenseFFN(w1, b1, w2, b2)
        self.routing: RoutingTable | None = None
        self.ffn_ln_g = Tensor(np.ones(d), requires_grad=True)
        self.ffn_ln_b = Tensor(np.zeros(d), requires_grad=True)
        self.num_heads = cfg.num_heads

    def attn_parameters(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                self.wo, self.bo, self.attn_ln_g, self.attn_ln_b]

    def parameters(self):
        ps = self.attn_parameters() + self.ffn.parameters()
        ps += [self.ffn_ln_g, self.ffn_ln_b]
        if self.routing is not None and self.routing.gate_weight is not None:
            ps.append(self.routing.gate_weight)
        return ps

    def forward(self, x: Tensor, mask: np.ndarray, token_ids: np.ndarray,
                dropout_p: float, rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        batch, seq, d = x.shape
        h = self.num_heads
        dk = d // h

        def heads(t):
            return T.transpose(T.reshape(t, (batch, seq, h, dk)), (0, 2, 1, 3))

        q = heads(T.add(T.matmul(x, self.wq), self.bq))
        k = heads(T.add(T.matmul(x, self.wk), self.bk))
        v = heads(T.add(T.matmul(x, self.wv), self.bv))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        bias = np.where(mask[:, None, None, :] > 0, 0.0, -1e9)
        probs = T.softmax(T.add(scores, Tensor(bias)), axis=-1)
        if dropout_p > 0 and rng is not None:
            probs = T.dropout(probs, dropout_p, rng)
        ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3))
        ctx = T.reshape(ctx, (batch, seq, d))
        attn = T.add(T.matmul(ctx, self.wo), self.bo)
        if dropout_p > 0 and rng is not None:
            attn = T.dropout(attn, dropout_p, rng)
        a = T.layernorm(T.add(x, attn), self.attn_ln_g, self.attn_ln_b)

        if isinstance(self.ffn, ExpertSet):
            y = moe_forward(a, self.ffn, self.routing, token_ids, mask)
        else:
            y = ffn_forward(a, self.ffn.w1, self.ffn.b1, self.ffn.w2, self.ffn.b2)
        if dropout_p > 0 and rng is not None:
            y = T.dropout(y, dropout_p, rng)
        out = T.layernorm(T.add(a, y), self.ffn_ln_g, self.ffn_ln_b)
        return out, a


class EncoderModel:
    """Embeddings + L encoder layers + pooler + classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)),
                              requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_seq_len, d)),
                              requires_grad=True)
        self.emb_ln_g = Tensor(np.ones(d), requires_grad=True)
        self.emb_ln_b = Tensor(np.zeros(d), requires_grad=True)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.pool_w = Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True)
        self.pool_b = Tensor(np.zeros(d), requires_grad=True)
        self.cls_w = Tensor(rng.normal(0.0, 0.02, size=(d, cfg.num_labels)),
                            requires_grad=True)
        self.cls_b = Tensor(np.zeros(cfg.num_labels), requires_grad=True)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        ps = [self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b]
        for layer in self.layers:
            ps += layer.parameters()
        ps += [self.pool_w, self.pool_b, self.cls_w, self.cls_b]
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
                 "emb_ln_g": self.emb_ln_g, "emb_ln_b": self.emb_ln_b}
        for i, layer in enumerate(self.layers):
            p = f"layer{i}."
            named.update({p + "wq": layer.wq, p + "bq": layer.bq,
                          p + "wk": layer.wk, p + "bk": layer.bk,
                          p + "wv": layer.wv, p + "bv": layer.bv,
                          p + "wo": layer.wo, p + "bo": layer.bo,
                          p + "attn_ln_g": layer.attn_ln_g, p + "attn_ln_b": layer.attn_ln_b,
                          p + "ffn_ln_g": layer.ffn_ln_g, p + "ffn_ln_b": layer.ffn_ln_b})
            if isinstance(layer.ffn, ExpertSet):
                for e in range(layer.ffn.num_experts):
                    named[p + f"expert{e}.w1"] = layer.ffn.w1[e]
                    named[p + f"expert{e}.b1"] = layer.ffn.b1[e]
                    named[p + f"expert{e}.w2"] = layer.ffn.w2[e]
                    named[p + f"expert{e}.b2"] = layer.ffn.b2[e]
                if layer.routing is not None and layer.routing.gate_weight is not None:
                    named[p + "gate_w"] = layer.routing.gate_weight
            else:
                named.update({p + "ffn_w1": layer.ffn.w1, p + "ffn_b1": layer.ffn.b1,
                              p + "ffn_w2": layer.ffn.w2, p + "ffn_b2": layer.ffn.b2})
        named.update({"pool_w": self.pool_w, "pool_b": self.pool_b,
                      "cls_w": self.cls_w, "cls_b": self.cls_b})
        return named

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def is_moe(self) -> bool:
        return any(isinstance(l.ffn, ExpertSet) for l in self.layers)

    def count_effective_params(self) -> int:
        return effective_param_count(self.cfg)

    def count_total_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def flops_per_token(self, seq_len: int | None = None) -> int:
        return flops_per_token(self.cfg, seq_len)

    # -- forward ------------------------------------------------------------

    def forward(self, token_ids: np.ndarray, mask: np.ndarray,
                training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, LayerOutputs]:
        token_ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=np.float64)
        batch, seq = token_ids.shape
        if seq > self.cfg.max_seq_len:
            raise ShapeError("encoder_forward", (batch, seq), (self.cfg.max_seq_len,))
        if token_ids.max(initial=0) >= self.cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        p = self.cfg.dropout if training else 0.0
        drop_rng = rng if training else None

        emb = T.add(T.embedding(self.tok_emb, token_ids),
                    T.embedding(self.pos_emb, np.arange(seq)))
        x = T.layernorm(emb, self.emb_ln_g, self.emb_ln_b)
        if p > 0 and drop_rng is not None:
            x = T.dropout(x, p, drop_rng)
        hidden = [x]
        attn_outs = []
        for layer in self.layers:
            x, a = layer.forward(x, mask, token_ids, p, drop_rng)
            hidden.append(x)
            attn_outs.append(a)

        cls_vec = T.reshape(T.take(x, np.asarray([0]), axis=1), (batch, self.cfg.embed_dim))
        pooled = T.tanh(T.add(T.matmul(cls_vec, self.pool_w), self.pool_b))
        logits = T.add(T.matmul(pooled, self.cls_w), self.cls_b)
        return logits, LayerOutputs(hidden, attn_outs, mask)


# -- analytic cost accounting ----------------------------------------------


def effective_param_count(cfg: ModelConfig) -> int:
    """Parameters touched computing one token's forward pass.

    Dense: every parameter. MoE: per layer, attention + a single expert's
    FFN + the gate weight (if any); embeddings and heads counted once.
    """
    d, d_h = cfg.embed_dim, cfg.ffn_hidden
    total = cfg.vocab_size * d + cfg.max_seq_len * d + 2 * d  # embeddings + ln
    per_layer = 4 * (d * d + d) + 2 * d  # attention projections + ln
    if cfg.moe is None:
        per_layer += 2 * d * d_h + d_h + d
    else:
        e = cfg.moe.expert_dim
        per_layer += 2 * d * e + e + d
        if cfg.moe.routing == GATE:
            per_layer += d * cfg.moe.num_experts
    per_layer += 2 * d  # FFN sublayer ln
    total += cfg.num_layers * per_layer
    total += d * d + d  # pooler
    total += d * cfg.num_labels + cfg.num_labels
    return total


def total_param_count(cfg: ModelConfig) -> int:
    """All stored parameters (MoE counts every expert)."""
    if cfg.moe is None:
        return effective_param_count(cfg)
    n, e = cfg.moe.num_experts, cfg.moe.expert_dim
    extra_experts = (n - 1) * (2 * cfg.embed_dim * e + e + cfg.embed_dim)
    return effective_param_count(cfg) + cfg.num_layers * extra_experts


def flops_breakdown(cfg: ModelConfig, seq_len: int | None = None) -> dict[str, int]:
    """Analytic multiply-accumulate count for one token's forward pass.

    The MoE FFN term uses expert_dim and is independent of the number of
    experts. Attention score/mix terms scale with ``seq_len`` (defaults to
    the configured maximum).
    """
    d, d_h = cfg.embed_dim, cfg.ffn_hidden
    s = seq_len or cfg.max_seq_len
    attn = cfg.num_layers * (4 * d * d + 2 * s * d)
    width = d_h if cfg.moe is None else cfg.moe.expert_dim
    ffn = cfg.num_layers * 2 * d * width
    gate = 0
    if cfg.moe is not None and cfg.moe.routing == GATE:
        gate = cfg.num_layers * d * cfg.moe.num_experts
    head = d * d + d * cfg.num_labels
    return {"attention": attn, "ffn": ffn, "gate": gate, "head": head,
            "total": attn + ffn + gate + head}


def flops_per_token(cfg: ModelConfig, seq_len: int | None = None) -> int:
    return flops_breakdown(cfg, seq_len)["total"]
