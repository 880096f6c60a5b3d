"""Forward corruption process: timestep/ratio sampling and Bernoulli masking.

The mask schedule is linear: a sequence at diffusion time t has each
response token masked independently with probability t (t=1 fully masked).
Prompt tokens and padding are never masked. A secondary ratio rho in
[0, 1-t] builds the more-corrupted probe input at rate t + rho.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import TokenSequence
from .errors import ConfigError, ContractError

T_MIN = 1e-3  # keeps the 1/t loss weight bounded

RHO_KINDS = ("uniform", "fixed", "truncated_uniform")


@dataclass(frozen=True)
class RhoStrategy:
    """How the secondary masking ratio is drawn.

    uniform:            rho ~ U(0, 1-t)            (default)
    fixed(k):           rho = min(k, 1-t)
    truncated_uniform(k): rho ~ U over [min(k, 1-t), 1-t]; a degenerate
                          interval yields its single point.
    """

    kind: str = "uniform"
    k: float | None = None

    def __post_init__(self):
        if self.kind not in RHO_KINDS:
            raise ConfigError(f"unknown rho strategy '{self.kind}'")
        if self.kind != "uniform":
            if self.k is None or not (0.0 < float(self.k) < 1.0):
                raise ConfigError(f"rho strategy '{self.kind}' needs k in (0,1), got {self.k}")


@dataclass(frozen=True)
class TimestepDraw:
    t: float
    rho: float

    def __post_init__(self):
        if not (T_MIN <= self.t <= 1.0):
            raise ContractError(f"t={self.t} outside [{T_MIN}, 1]")
        if not (0.0 <= self.rho <= 1.0 - self.t + 1e-12):
            raise ContractError(f"rho={self.rho} outside [0, 1-t={1.0 - self.t}]")

    @property
    def total(self) -> float:
        return self.t + self.rho


def sample_timestep(strategy: RhoStrategy, rng: np.random.Generator, t_min: float = T_MIN) -> TimestepDraw:
    """Draw t ~ U[t_min, 1], then rho per the strategy.

    Draw order is part of the contract (t first, then at most one uniform
    for rho) so independent re-implementations can replay a stream.
    """
    t = t_min + (1.0 - t_min) * rng.random()
    room = 1.0 - t
    if strategy.kind == "uniform":
        rho = room * rng.random()
    elif strategy.kind == "fixed":
        rho = min(float(strategy.k), room)
    else:  # truncated_uniform
        lo = min(float(strategy.k), room)
        rho = lo + (room - lo) * rng.random()
    return TimestepDraw(t=t, rho=rho)


@dataclass
class CorruptedSequence:
    """A TokenSequence with mask_id written over a subset of response positions."""

    ids: np.ndarray
    mask_set: np.ndarray  # sorted positions currently masked
    source_t: float  # effective masking rate this corruption was drawn at
    prompt_len: int
    response_len: int

    def mask_positions(self) -> set[int]:
        return {int(p) for p in self.mask_set}


def corrupt(
    clean: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    mask_id: int,
    exact_count: bool = False,
) -> CorruptedSequence:
    """Mask each response token independently with probability ``rate``.

    ``exact_count`` switches to masking exactly round(rate * response_len)
    positions (variance reduction); the default matches the per-token
    Bernoulli forward process.
    """
    if not (0.0 <= rate <= 1.0):
        raise ContractError(f"mask rate {rate} outside [0, 1]")
    positions = clean.response_positions()
    if exact_count:
        m = int(round(rate * len(positions)))
        chosen = np.sort(rng.choice(positions, size=m, replace=False)) if m else np.empty(0, np.int64)
    else:
        u = rng.random(len(positions))
        chosen = positions[u < rate]
    ids = clean.ids.copy()
    ids[chosen] = mask_id
    return CorruptedSequence(
        ids=ids,
        mask_set=np.asarray(chosen, dtype=np.int64),
        source_t=float(rate),
        prompt_len=clean.prompt_len,
        response_len=clean.response_len,
    )


def unmask_positions(
    corrupted: CorruptedSequence,
    clean: TokenSequence,
    positions,
) -> CorruptedSequence:
    """Restore clean ids at ``positions`` (must all be currently masked)."""
    pos = np.asarray(sorted(int(p) for p in positions), dtype=np.int64)
    if pos.size:
        current = set(corrupted.mask_positions())
        outside = [int(p) for p in pos if int(p) not in current]
        if outside:
            raise ContractError(f"positions {outside} not in the mask set")
    ids = corrupted.ids.copy()
    ids[pos] = clean.ids[pos]
    remaining = np.setdiff1d(corrupted.mask_set, pos, assume_unique=True)
    return replace(corrupted, ids=ids, mask_set=remaining)
