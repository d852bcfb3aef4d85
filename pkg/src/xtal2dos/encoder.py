"""Graph-attention encoder: UniMP layers (or plain GCN) plus mean pooling.

Edges are directed: for each edge e, ``dst[e]`` is the node whose neighbor
list contains ``src[e]``, so messages flow src -> dst and node i aggregates
over its own list N(i).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .graph import GraphBatch
from .params import ParamInit, sub_params
from .tensor import BatchNormState, Tensor

log = logging.getLogger(__name__)


@dataclass
class EncoderState:
    layers: list[Tensor]  # h^0 .. h^L, each (n_nodes, d_hid)
    pooled: Tensor  # h_x, (n_graphs, d_hid)

    @property
    def nodes(self) -> Tensor:
        return self.layers[-1]


# ---------------------------------------------------------------- GCN baseline


def gcn_layer(h: Tensor, weight: Tensor, dst: np.ndarray, src: np.ndarray, act=T.leaky_relu) -> Tensor:
    """h_i' = act(sum_{j in N(i)} W h_j / sqrt(|N(i)| |N(j)|))."""
    n = h.shape[0]
    degree = np.bincount(dst, minlength=n).astype(np.float64)
    if np.any(degree == 0):
        log.warning("gcn_layer: %d node(s) with no neighbors get act(0)", int(np.sum(degree == 0)))
    # a source with an empty list of its own still sends; count it as degree 1
    safe = np.maximum(degree, 1.0)
    coef = 1.0 / np.sqrt(safe[dst] * safe[src])
    wh = T.linear(h, weight)
    msg = T.gather_rows(wh, src) * T.constant(np.repeat(coef[:, None], wh.shape[1], axis=1))
    return act(T.segment_sum(msg, dst, n))


# ---------------------------------------------------------------- UniMP pieces


def unimp_attention(q_dst: Tensor, key_edge: Tensor, dst: np.ndarray, n: int, heads: int) -> Tensor:
    """Per-edge attention weights, softmax over each node's neighbors.

    ``q_dst`` holds q_i for every edge (i <- j) and ``key_edge`` holds
    k_j + g_ij; both are (n_edges, d). Returns (n_edges, heads); scores are
    scaled by sqrt of the per-head width.
    """
    e, d = q_dst.shape
    dh = d // heads
    scores = T.sum_(T.reshape(q_dst * key_edge, (e, heads, dh)), axis=2) * (1.0 / math.sqrt(dh))
    return T.segment_softmax(scores, dst, n)


def unimp_aggregate(alpha: Tensor, value_edge: Tensor, dst: np.ndarray, n: int) -> Tensor:
    """h_hat_i = sum_j alpha_ij (v_j + g_ij), per head, heads concatenated."""
    e, d = value_edge.shape
    heads = alpha.shape[1]
    dh = d // heads
    weighted = T.reshape(value_edge, (e, heads, dh)) * T.expand(alpha, 2, dh)
    return T.segment_sum(T.reshape(weighted, (e, d)), dst, n)


def gated_residual(h_hat: Tensor, h: Tensor, p: dict[str, Tensor], last: bool, act=T.leaky_relu) -> Tensor:
    """Sigmoid-gated blend of the aggregated message and a linear skip."""
    r = T.linear(h, p["r_w"], p["r_b"])
    gate_in = T.concat([h_hat, r, h_hat - r], axis=1)
    beta = T.sigmoid(T.reshape(T.linear(gate_in, p["gate"]), (h.shape[0],)))
    blend = h_hat + T.expand(beta, 1, h_hat.shape[1]) * (r - h_hat)
    if last:
        return blend
    return act(T.layer_norm(blend, p["ln_g"], p["ln_b"]))


def unimp_layer(h: Tensor, g: Tensor, batch: GraphBatch, p: dict[str, Tensor], heads: int,
                last: bool, act=T.leaky_relu) -> Tensor:
    n = h.shape[0]
    q = T.linear(h, p["q_w"], p["q_b"])
    k = T.linear(h, p["k_w"], p["k_b"])
    v = T.linear(h, p["v_w"], p["v_b"])
    alpha = unimp_attention(T.gather_rows(q, batch.dst), T.gather_rows(k, batch.src) + g, batch.dst, n, heads)
    h_hat = unimp_aggregate(alpha, T.gather_rows(v, batch.src) + g, batch.dst, n)
    return gated_residual(h_hat, h, p, last, act)


def mean_pool(h: Tensor, node_graph: np.ndarray, counts: np.ndarray) -> Tensor:
    b = len(counts)
    summed = T.segment_sum(h, node_graph, b)
    inv = np.repeat((1.0 / counts)[:, None], h.shape[1], axis=1)
    return summed * T.constant(inv)


# ---------------------------------------------------------------- encoder


class GraphEncoder:
    """Input projection, stacked conv layers with batch norm between them, mean pool."""

    def __init__(self, cfg: TrainConfig, init: ParamInit):
        self.cfg = cfg
        self.conv = cfg.encoder_conv
        self.n_layers = cfg.encoder_layers
        self.heads = cfg.encoder_heads
        self.act = T.activation(cfg.activation)
        d = cfg.d_hid
        init.weight("in_w", d, cfg.d_atom)
        init.zeros("in_b", d)
        if self.conv == "unimp":
            init.weight("edge_w", d, cfg.d_edge)
            init.zeros("edge_b", d)
        self.bn_states: dict[str, BatchNormState] = {}
        for layer in range(self.n_layers):
            li = init.child(f"layer{layer}")
            if self.conv == "unimp":
                for name in ("q", "k", "v", "r"):
                    li.weight(f"{name}_w", d, d)
                    li.zeros(f"{name}_b", d)
                li.zeros("gate", 1, 3 * d)
                li.ones("ln_g", d)
                li.zeros("ln_b", d)
            else:
                li.weight("w", d, d)
            if layer < self.n_layers - 1:
                li.ones("bn_g", d)
                li.zeros("bn_b", d)
                self.bn_states[f"layer{layer}"] = BatchNormState(d)
        self.params = init.store

    def encode(self, batch: GraphBatch, training: bool = False) -> EncoderState:
        p = self.params
        h = T.linear(T.constant(batch.nodes), p["in_w"], p["in_b"])
        layers = [h]
        g = None
        if self.conv == "unimp":
            g = T.linear(T.constant(batch.edge_attr), p["edge_w"], p["edge_b"])
        for layer in range(self.n_layers):
            lp = sub_params(p, f"layer{layer}")
            last = layer == self.n_layers - 1
            if self.conv == "unimp":
                h = unimp_layer(h, g, batch, lp, self.heads, last, self.act)
            else:
                h = gcn_layer(h, lp["w"], batch.dst, batch.src, self.act if not last else T.identity)
            if not last:
                h = T.batch_norm(h, lp["bn_g"], lp["bn_b"], self.bn_states[f"layer{layer}"], training)
                h = self.act(h)
            layers.append(h)
        return EncoderState(layers, mean_pool(h, batch.node_graph, batch.counts))
