"""Decoder speed benchmark: seconds per training epoch for each decoder kind.

Every kind shares the same dataset, encoder config, batch size and d_hid;
only the decoder changes. Each timing is the median of ``repeats`` epochs
measured after ``warmup`` untimed ones.
"""
from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import TrainConfig
from .graph import generate_synthetic
from .training import Trainer

BENCH_KINDS = ("transformer", "chunk_rnn_attn", "rnn_attn", "rnn")


@dataclass
class BenchReport:
    seconds: dict[str, float]
    samples: dict[str, list[float]]
    configs: dict[str, dict]
    shared: dict
    host: dict
    ordering: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def host_descriptor(threads: int | None = None) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
    }


def bench_config(l_y: int = 128, d_hid: int = 128, batch_size: int = 32, seed: int = 0, **kw) -> TrainConfig:
    return TrainConfig(l_y=l_y, d_hid=d_hid, batch_size=batch_size, seed=seed, **kw)


def time_epochs(cfg: TrainConfig, samples, warmup: int = 1, repeats: int = 5) -> list[float]:
    trainer = Trainer(cfg)
    for _ in range(warmup):
        trainer.train_epoch(samples)
    out = []
    for _ in range(repeats):
        start = time.perf_counter()
        trainer.train_epoch(samples)
        out.append(time.perf_counter() - start)
    return out


def run_bench(base: TrainConfig, kinds=BENCH_KINDS, n_samples: int = 32, warmup: int = 1, repeats: int = 5,
              threads: int | None = None, progress=None) -> BenchReport:
    if repeats < 5:
        raise ValueError("the median needs at least 5 timed epochs")
    data = generate_synthetic(n_samples, seed=base.seed, l_y=base.l_y, d_atom=base.d_atom,
                              n_max_nbr=base.n_max_nbr).samples
    seconds, samples, configs = {}, {}, {}
    for kind in kinds:
        # rnn kinds get chunk 1 from the resolver; the chunked kind keeps the default
        cfg = replace(base, decoder=kind, chunk=None).validate()
        times = time_epochs(cfg, data, warmup, repeats)
        seconds[kind] = statistics.median(times)
        samples[kind] = times
        configs[kind] = cfg.to_dict()
        if progress is not None:
            progress(kind, seconds[kind])
    shared_keys = ("l_y", "d_hid", "batch_size", "encoder_conv", "encoder_layers", "encoder_heads", "d_atom",
                   "seed")
    shared = {k: getattr(base, k) for k in shared_keys}
    shared.update(n_samples=n_samples, warmup=warmup, repeats=repeats)
    return BenchReport(seconds, samples, configs, shared, host_descriptor(threads),
                       sorted(seconds, key=seconds.get))
