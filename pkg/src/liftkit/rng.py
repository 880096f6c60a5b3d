"""Deterministic, named random streams.

A single root seed fans out into independent streams keyed by a name plus
optional integer indices (step, example, ...). Every stream is a pure
function of ``(seed, name, *indices)``, so any point in a run can be
reproduced without replaying earlier draws. This is what makes
checkpoint-resume bit-identical: step 500's randomness does not depend on
generator state left over from steps 0..499.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _digest(name: str) -> int:
    # Stable across processes (unlike hash()).
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, name, *indices)``."""
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, _digest(name), *[i & 0xFFFFFFFFFFFFFFFF for i in indices]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class StepRngs:
    """Per-example random streams consumed inside one training step.

    ``mask`` drives Bernoulli corruption, ``select`` drives the random
    branch of subset selection, ``dropout`` drives dropout masks. Keeping
    them separate means e.g. changing the dropout seed cannot disturb which
    positions get masked or selected.
    """

    mask: np.random.Generator
    select: np.random.Generator
    dropout: np.random.Generator

    @staticmethod
    def at(seed: int, step: int, example: int) -> "StepRngs":
        return StepRngs(
            mask=stream(seed, "mask", step, example),
            select=stream(seed, "select", step, example),
            dropout=stream(seed, "dropout", step, example),
        )

    @staticmethod
    def from_seed(seed: int) -> "StepRngs":
        """Standalone bundle for single-shot objective calls (step 0, example 0)."""
        return StepRngs.at(seed, 0, 0)
