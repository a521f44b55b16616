"""Named, independently derived random streams for one run.

A stream seed is the first 8 bytes (little-endian) of
``sha256(f"{master_seed}:{stream}:{run_index}")``.  Generators are numpy
PCG64, whose output is identical across platforms.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

STREAMS = ("init", "shuffle", "score_batch", "random_prune", "data")


def derive_seed(master_seed: int, stream: str, run_index: int) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{stream}:{int(run_index)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SeedLineage:
    master_seed: int
    run_index: int = 0

    def seed(self, stream: str) -> int:
        if stream not in STREAMS:
            raise KeyError(f"unknown stream {stream!r}; known: {STREAMS}")
        return derive_seed(self.master_seed, stream, self.run_index)

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed(stream)))

    def as_dict(self) -> dict:
        return {"master_seed": self.master_seed, "run_index": self.run_index, "streams": {s: self.seed(s) for s in STREAMS}}
