"""Sequence decoders mapping (h_x, atom embeddings) to a length-l_y output.

Four families share one interface, ``decode(h_x, memory) -> (batch, l_y)``
raw outputs:

* ``rnn``: GRU unrolled one value per step; initial hidden state is h_x,
  first input is a learned start vector, later inputs are the previous
  output projected to d_hid.
* ``chunk_rnn``: same, emitting ``chunk`` values per step.
* ``chunk_rnn_attn`` (and ``rnn_attn``, its chunk=1 case): the GRU state
  queries the atom embeddings each step and [state; context] feeds the head.
* ``transformer``: inputs z_i = [one_hot(i); h_x] for every position at
  once, causally masked self-attention, source attention over atoms,
  feed-forward, post-norm residuals.

GRU cell (update gate z, reset gate r):
    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DecoderConfig
from .params import ParamInit, sub_params
from .tensor import MASK_VALUE, Tensor


@dataclass
class Memory:
    """Encoder atom embeddings laid out per graph for source attention."""

    nodes: Tensor  # (batch, max_atoms, d_hid)
    mask: np.ndarray  # (batch, max_atoms) bool, True for real atoms

    @classmethod
    def from_nodes(cls, nodes: Tensor, pad_index: np.ndarray, pad_mask: np.ndarray) -> "Memory":
        return cls(T.gather_rows(nodes, pad_index), pad_mask)

    def additive_mask(self) -> np.ndarray:
        """(batch, 1, 1, max_atoms) additive mask for attention logits."""
        return np.where(self.mask, 0.0, MASK_VALUE)[:, None, None, :]


# ---------------------------------------------------------------- shared pieces


def gru_cell(x: Tensor, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    d = h.shape[1]
    gi = T.linear(x, p["w_ih"], p["b_ih"])
    gh = T.linear(h, p["w_hh"], p["b_hh"])
    r = T.sigmoid(gi[:, :d] + gh[:, :d])
    z = T.sigmoid(gi[:, d:2 * d] + gh[:, d:2 * d])
    n = T.tanh(gi[:, 2 * d:] + r * gh[:, 2 * d:])
    return n + z * (h - n)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def init_attention(init: ParamInit, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        init.weight(f"{name}_w", d, d)
        init.zeros(f"{name}_b", d)


def project_memory(memory: Memory, p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    k = split_heads(T.linear(memory.nodes, p["k_w"], p["k_b"]), heads)
    v = split_heads(T.linear(memory.nodes, p["v_w"], p["v_b"]), heads)
    return k, v


def source_attention(queries: Tensor, memory: Memory, p: dict[str, Tensor], heads: int,
                     projected: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, np.ndarray]:
    """softmax(Q_dec K_enc^T / sqrt(d)) V_enc per head, heads concatenated.

    ``queries`` is (batch, steps, d). The output projection ``o`` is *not*
    applied here; callers add it. Returns the context and the weights
    (batch, heads, steps, max_atoms).
    """
    k, v = projected if projected is not None else project_memory(memory, p, heads)
    q = split_heads(T.linear(queries, p["q_w"], p["q_b"]), heads)
    mask = np.broadcast_to(memory.additive_mask(), q.shape[:3] + (k.shape[2],))
    out, weights = T.attention(q, k, v, mask)
    return merge_heads(out), weights


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def self_attention(x: Tensor, p: dict[str, Tensor], heads: int, causal: bool = True) -> tuple[Tensor, np.ndarray]:
    q = split_heads(T.linear(x, p["q_w"], p["q_b"]), heads)
    k = split_heads(T.linear(x, p["k_w"], p["k_b"]), heads)
    v = split_heads(T.linear(x, p["v_w"], p["v_b"]), heads)
    mask = np.broadcast_to(causal_mask(x.shape[1]), q.shape[:3] + (x.shape[1],)) if causal else None
    out, weights = T.attention(q, k, v, mask)
    return T.linear(merge_heads(out), p["o_w"], p["o_b"]), weights


# ---------------------------------------------------------------- recurrent decoders


def _init_recurrent(init: ParamInit, d: int, chunk: int, head_in: int) -> None:
    init.vector("start", d)
    init.weight("in_w", d, chunk)
    init.zeros("in_b", d)
    g = init.child("gru")
    g.weight("w_ih", 3 * d, d)
    g.weight("w_hh", 3 * d, d)
    g.zeros("b_ih", 3 * d)
    g.zeros("b_hh", 3 * d)
    init.weight("head_w", chunk, head_in)
    init.zeros("head_b", chunk)


def rnn_decode(h_x: Tensor, p: dict[str, Tensor], l_y: int) -> Tensor:
    """One scalar per GRU step; the previous output is fed back as input."""
    b = h_x.shape[0]
    gru = sub_params(p, "gru")
    h = h_x
    x = T.expand(p["start"], 0, b)
    outputs = []
    for t in range(l_y):
        h = gru_cell(x, h, gru)
        y = T.linear(h, p["head_w"], p["head_b"])
        outputs.append(y)
        if t + 1 < l_y:
            x = T.linear(y, p["in_w"], p["in_b"])
    return T.concat(outputs, axis=1)


def chunk_rnn_decode(h_x: Tensor, p: dict[str, Tensor], l_y: int, chunk: int) -> Tensor:
    """l_y / chunk GRU steps, each emitting a segment of ``chunk`` values."""
    if chunk < 1 or l_y % chunk:
        raise ValueError(f"chunk size {chunk} does not divide l_y={l_y}")
    steps = l_y // chunk
    b = h_x.shape[0]
    gru = sub_params(p, "gru")
    h = h_x
    x = T.expand(p["start"], 0, b)
    segments = []
    for t in range(steps):
        h = gru_cell(x, h, gru)
        seg = T.linear(h, p["head_w"], p["head_b"])
        segments.append(seg)
        if t + 1 < steps:
            x = T.linear(seg, p["in_w"], p["in_b"])
    return T.concat(segments, axis=1)


def chunk_rnn_attn_decode(h_x: Tensor, memory: Memory, p: dict[str, Tensor], l_y: int, chunk: int,
                          heads: int) -> Tensor:
    """Chunk RNN whose head also sees a source-attention context over atoms."""
    if chunk < 1 or l_y % chunk:
        raise ValueError(f"chunk size {chunk} does not divide l_y={l_y}")
    steps = l_y // chunk
    b, d = h_x.shape
    gru = sub_params(p, "gru")
    att = sub_params(p, "attn")
    projected = project_memory(memory, att, heads)
    h = h_x
    x = T.expand(p["start"], 0, b)
    segments = []
    for t in range(steps):
        h = gru_cell(x, h, gru)
        ctx, _ = source_attention(T.reshape(h, (b, 1, d)), memory, att, heads, projected)
        ctx = T.linear(T.reshape(ctx, (b, d)), att["o_w"], att["o_b"])
        seg = T.linear(T.concat([h, ctx], axis=1), p["head_w"], p["head_b"])
        segments.append(seg)
        if t + 1 < steps:
            x = T.linear(seg, p["in_w"], p["in_b"])
    return T.concat(segments, axis=1)


# ---------------------------------------------------------------- transformer


def transformer_inputs(h_x: Tensor, l_y: int) -> Tensor:
    """z_i = [one_hot(i); h_x] for every position: (batch, l_y, l_y + d)."""
    b = h_x.shape[0]
    positions = T.constant(np.broadcast_to(np.eye(l_y), (b, l_y, l_y)).copy())
    return T.concat([positions, T.expand(h_x, 1, l_y)], axis=2)


def transformer_forward(z: Tensor, memory: Memory, p: dict[str, Tensor], layers: int, heads: int,
                        act=T.leaky_relu, keep_weights: list | None = None) -> Tensor:
    """Run the decoder stack on prepared inputs z; returns (batch, l_y)."""
    b, l_y, _ = z.shape
    x = T.linear(z, p["in_w"], p["in_b"])
    for i in range(layers):
        lp = sub_params(p, f"layer{i}")
        sa = sub_params(lp, "self")
        ca = sub_params(lp, "src")
        a, w_self = self_attention(x, sa, heads, causal=True)
        x = T.layer_norm(x + a, lp["ln1_g"], lp["ln1_b"])
        ctx, w_src = source_attention(x, memory, ca, heads)
        x = T.layer_norm(x + T.linear(ctx, ca["o_w"], ca["o_b"]), lp["ln2_g"], lp["ln2_b"])
        f = T.linear(act(T.linear(x, lp["ff1_w"], lp["ff1_b"])), lp["ff2_w"], lp["ff2_b"])
        x = T.layer_norm(x + f, lp["ln3_g"], lp["ln3_b"])
        if keep_weights is not None:
            keep_weights.append((w_self, w_src))
    return T.reshape(T.linear(x, p["head_w"], p["head_b"]), (b, l_y))


def transformer_decode(h_x: Tensor, memory: Memory, p: dict[str, Tensor], l_y: int, layers: int,
                       heads: int, act=T.leaky_relu) -> Tensor:
    return transformer_forward(transformer_inputs(h_x, l_y), memory, p, layers, heads, act)


# ---------------------------------------------------------------- output head


def output_head(raw: Tensor, mode: str) -> Tensor:
    """softmax: sums to 1 per sample; softplus: non-negative; none: identity."""
    if mode == "softmax":
        return T.softmax(raw, axis=-1)
    if mode == "softplus":
        return T.softplus(raw)
    if mode == "none":
        return raw
    raise ValueError(f"unknown output head {mode!r}")


# ---------------------------------------------------------------- decoder objects


class SequenceDecoder:
    """Owns the parameters of one decoder kind and dispatches to its function."""

    def __init__(self, cfg: DecoderConfig, init: ParamInit):
        self.cfg = cfg
        self.act = T.activation(cfg.activation)
        d = cfg.d_hid
        kind = cfg.kind
        if kind in ("rnn", "chunk_rnn"):
            _init_recurrent(init, d, cfg.chunk, d)
        elif kind in ("rnn_attn", "chunk_rnn_attn"):
            _init_recurrent(init, d, cfg.chunk, 2 * d)
            init_attention(init.child("attn"), d)
        elif kind == "transformer":
            init.weight("in_w", d, cfg.l_y + d)
            init.zeros("in_b", d)
            for i in range(cfg.layers):
                li = init.child(f"layer{i}")
                init_attention(li.child("self"), d)
                init_attention(li.child("src"), d)
                li.weight("ff1_w", cfg.ff_width, d)
                li.zeros("ff1_b", cfg.ff_width)
                li.weight("ff2_w", d, cfg.ff_width)
                li.zeros("ff2_b", d)
                for ln in ("ln1", "ln2", "ln3"):
                    li.ones(f"{ln}_g", d)
                    li.zeros(f"{ln}_b", d)
            init.weight("head_w", 1, d)
            init.zeros("head_b", 1)
        else:
            raise ValueError(f"unknown decoder kind {kind!r}")
        self.params = init.store

    def decode(self, h_x: Tensor, memory: Memory) -> Tensor:
        c = self.cfg
        p = self.params
        if c.kind == "rnn":
            return rnn_decode(h_x, p, c.l_y)
        if c.kind == "chunk_rnn":
            return chunk_rnn_decode(h_x, p, c.l_y, c.chunk)
        if c.kind in ("rnn_attn", "chunk_rnn_attn"):
            return chunk_rnn_attn_decode(h_x, memory, p, c.l_y, c.chunk, c.heads)
        return transformer_decode(h_x, memory, p, c.l_y, c.layers, c.heads, self.act)
