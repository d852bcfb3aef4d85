"""Encoder + decoder + output head, with flat parameter and buffer views."""
from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .decoders import Memory, SequenceDecoder, output_head
from .encoder import EncoderState, GraphEncoder
from .graph import GraphBatch
from .params import ParamInit
from .tensor import BatchNormState, Tensor


class Xtal2DoS:
    """Graph encoder feeding one sequence decoder.

    Parameters are drawn from a PCG64 stream seeded by ``cfg.seed``; the
    encoder is initialized first, so two models that differ only in decoder
    kind share identical encoder weights.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        rng = np.random.Generator(np.random.PCG64(self.cfg.seed))
        self.encoder = GraphEncoder(self.cfg, ParamInit(rng))
        self.decoder = SequenceDecoder(self.cfg.decoder_config(), ParamInit(rng))

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
        return out

    def buffers(self) -> dict[str, BatchNormState]:
        return {f"encoder.{k}": v for k, v in self.encoder.bn_states.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def encode(self, batch: GraphBatch, training: bool = False) -> EncoderState:
        return self.encoder.encode(batch, training)

    def raw(self, batch: GraphBatch, training: bool = False) -> Tensor:
        state = self.encode(batch, training)
        memory = Memory.from_nodes(state.nodes, batch.pad_index, batch.pad_mask)
        return self.decoder.decode(state.pooled, memory)

    def forward(self, batch: GraphBatch, training: bool = False) -> Tensor:
        """Predicted spectra (n_graphs, l_y) after the configured head."""
        return output_head(self.raw(batch, training), self.cfg.head)

    __call__ = forward

    def predict(self, batch: GraphBatch) -> np.ndarray:
        return self.forward(batch, training=False).data
