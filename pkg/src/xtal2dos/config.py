"""Model and training configuration with cross-field validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .tensor import ACTIVATIONS
from .graph import D_ATOM, D_EDGE, LY_EDOS, LY_PHDOS, N_MAX_NBR, R_CUT

DECODER_KINDS = ("rnn", "rnn_attn", "chunk_rnn", "chunk_rnn_attn", "transformer")
LOSS_KINDS = ("kl", "generalized_kl", "mse")
HEAD_KINDS = ("softmax", "softplus", "none")
ENCODER_CONVS = ("unimp", "gcn")

# loss -> heads it may be paired with
LOSS_HEADS = {"kl": ("softmax",), "generalized_kl": ("softplus",), "mse": HEAD_KINDS}


class ConfigError(ValueError):
    """One or more configuration problems, all reported together."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def default_chunk(l_y: int) -> int:
    if l_y == LY_EDOS:
        return 32
    if l_y == LY_PHDOS:
        return 17
    return 1


@dataclass(frozen=True)
class DecoderConfig:
    kind: str
    l_y: int
    d_hid: int
    chunk: int = 1
    layers: int = 6
    heads: int = 4
    ff_width: int = 512
    activation: str = "leaky_relu"

    @property
    def steps(self) -> int:
        """Recurrent steps for the RNN family."""
        return self.l_y // self.chunk

    @property
    def segment(self) -> int:
        return self.chunk


@dataclass
class TrainConfig:
    l_y: int = LY_PHDOS
    d_atom: int = D_ATOM
    d_edge: int = D_EDGE
    r_cut: float = R_CUT
    n_max_nbr: int = N_MAX_NBR
    d_hid: int = 128
    encoder_conv: str = "unimp"
    encoder_layers: int = 3
    encoder_heads: int = 4
    activation: str = "leaky_relu"
    decoder: str = "transformer"
    chunk: int | None = None
    decoder_layers: int = 6
    decoder_heads: int = 4
    ff_width: int | None = None
    loss: str = "kl"
    head: str = "softmax"
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 5.0
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    bin_width: float = 1.0
    train_path: str | None = None
    val_path: str | None = None

    def resolved(self) -> "TrainConfig":
        """Copy with derived defaults (chunk size, feed-forward width) filled in."""
        out = dataclasses.replace(self)
        if out.chunk is None:
            out.chunk = 1 if out.decoder in ("rnn", "rnn_attn") else default_chunk(out.l_y)
        if out.decoder in ("rnn", "rnn_attn"):
            out.chunk = 1
        if out.ff_width is None:
            out.ff_width = 4 * out.d_hid
        out.split_ratios = tuple(out.split_ratios)
        return out

    def problems(self) -> list[str]:
        c = self.resolved()
        errs = []
        if c.l_y < 1:
            errs.append(f"l_y must be positive, got {c.l_y}")
        if c.decoder not in DECODER_KINDS:
            errs.append(f"decoder must be one of {DECODER_KINDS}, got {c.decoder!r}")
        if c.loss not in LOSS_KINDS:
            errs.append(f"loss must be one of {LOSS_KINDS}, got {c.loss!r}")
        if c.head not in HEAD_KINDS:
            errs.append(f"head must be one of {HEAD_KINDS}, got {c.head!r}")
        elif c.loss in LOSS_HEADS and c.head not in LOSS_HEADS[c.loss]:
            errs.append(f"loss {c.loss!r} requires head in {LOSS_HEADS[c.loss]}, got {c.head!r}")
        if c.encoder_conv not in ENCODER_CONVS:
            errs.append(f"encoder_conv must be one of {ENCODER_CONVS}, got {c.encoder_conv!r}")
        if c.d_hid < 2:
            errs.append("d_hid must be at least 2")
        if c.encoder_heads < 1 or c.d_hid % c.encoder_heads:
            errs.append(f"encoder_heads={c.encoder_heads} must divide d_hid={c.d_hid}")
        if c.decoder_heads < 1 or c.d_hid % c.decoder_heads:
            errs.append(f"decoder_heads={c.decoder_heads} must divide d_hid={c.d_hid}")
        if c.encoder_layers < 1:
            errs.append("encoder_layers must be at least 1")
        if c.decoder_layers < 1:
            errs.append("decoder_layers must be at least 1")
        if c.chunk < 1 or (c.l_y >= 1 and c.l_y % c.chunk):
            errs.append(f"chunk size {c.chunk} must divide l_y={c.l_y}")
        if c.batch_size < 1:
            errs.append("batch_size must be at least 1")
        if c.epochs < 0:
            errs.append("epochs must be non-negative")
        if c.lr < 0:
            errs.append("lr must be non-negative")
        if c.grad_clip is not None and c.grad_clip <= 0:
            errs.append("grad_clip must be positive or null")
        if len(c.split_ratios) != 3 or abs(sum(c.split_ratios) - 1.0) > 1e-9:
            errs.append(f"split_ratios must sum to 1, got {c.split_ratios}")
        if c.d_atom < 1 or c.d_edge < 2:
            errs.append("d_atom must be >= 1 and d_edge >= 2")
        if c.bin_width <= 0:
            errs.append("bin_width must be positive")
        if c.activation not in ACTIVATIONS:
            errs.append(f"activation must be one of {sorted(ACTIVATIONS)}, got {c.activation!r}")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self.resolved()

    def decoder_config(self) -> DecoderConfig:
        c = self.resolved()
        return DecoderConfig(kind=c.decoder, l_y=c.l_y, d_hid=c.d_hid, chunk=c.chunk,
                             layers=c.decoder_layers, heads=c.decoder_heads,
                             ff_width=c.ff_width, activation=c.activation)

    # ---------------------------------------------------------------- io
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(TrainConfig)]


__all__ = ["ConfigError", "DecoderConfig", "TrainConfig", "DECODER_KINDS", "LOSS_KINDS",
           "HEAD_KINDS", "default_chunk", "field_names"]
