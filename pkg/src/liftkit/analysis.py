"""Token-learnability analysis: confidence streaming, binning, reporting.

Confidences of ground-truth tokens at masked positions are streamed into a
2-d grid binned by corpus token frequency (log-decade bins) and diffusion
time (log-spaced bins between 2^-2 and 2^-1/4, plus catch-all bins at both
extremes so every draw lands somewhere). Cell statistics use single-pass
Welford updates and merge exactly, so collection can be sharded.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import rng as rngmod
from .corpus import TokenSequence, Vocabulary
from .denoiser import Denoiser
from .diffusion import T_MIN, corrupt
from .errors import ConfigError

DEFAULT_FREQ_EDGES = (1.0, 10.0, 100.0, 1e3, 1e4, 1e5)


@dataclass(frozen=True)
class ConfidenceRecord:
    token_id: int
    frequency: int
    t: float
    confidence: float


@dataclass(frozen=True)
class GridSpec:
    """Bin boundaries. The last edge of each axis opens an unbounded bin."""

    freq_edges: tuple = DEFAULT_FREQ_EDGES
    n_time_bins: int = 8
    t_low: float = 2.0**-2
    t_high: float = 2.0**-0.25

    def __post_init__(self):
        if len(self.freq_edges) < 2:
            raise ConfigError("need at least 2 frequency bins")
        if self.n_time_bins < 1:
            raise ConfigError("need at least 1 interior time bin")
        if not (0.0 < self.t_low < self.t_high <= 1.0):
            raise ConfigError(f"bad time-bin range [{self.t_low}, {self.t_high}]")

    def freq_bounds(self) -> list[tuple[float, float]]:
        edges = list(self.freq_edges) + [math.inf]
        return list(zip(edges[:-1], edges[1:]))

    def time_bounds(self) -> list[tuple[float, float]]:
        # interior log-spaced bins plus catch-alls below t_low and above t_high
        interior = 2.0 ** np.linspace(math.log2(self.t_low), math.log2(self.t_high), self.n_time_bins + 1)
        edges = [0.0, *interior, math.inf]
        return list(zip(edges[:-1], edges[1:]))

    def freq_bin(self, frequency: float) -> int:
        edges = np.asarray(self.freq_edges)
        return int(np.searchsorted(edges, frequency, side="right")) - 1

    def time_bin(self, t: float) -> int:
        bounds = self.time_bounds()
        edges = np.asarray([b[0] for b in bounds] + [math.inf])
        return int(np.searchsorted(edges, t, side="right")) - 1


class Welford:
    """Streaming count/mean/variance with exact shard merging."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "Welford") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / total
        self.m2 += other.m2 + delta * delta * self.count * other.count / total
        self.count = total

    @property
    def variance(self) -> float:
        # population variance; 0 for a single observation
        return self.m2 / self.count if self.count else 0.0


@dataclass
class BinGrid:
    spec: GridSpec
    cells: dict = field(default_factory=dict)  # (freq_bin, time_bin) -> Welford
    token_stats: dict = field(default_factory=dict)  # token_id -> (frequency, Welford)
    total_records: int = 0
    rejected: int = 0

    def add(self, rec: ConfidenceRecord) -> bool:
        if rec.frequency < 1:
            self.rejected += 1
            return False
        key = (self.spec.freq_bin(rec.frequency), self.spec.time_bin(rec.t))
        self.cells.setdefault(key, Welford()).add(rec.confidence)
        freq, w = self.token_stats.setdefault(rec.token_id, (rec.frequency, Welford()))
        w.add(rec.confidence)
        self.total_records += 1
        return True

    def merge(self, other: "BinGrid") -> None:
        for key, w in other.cells.items():
            self.cells.setdefault(key, Welford()).merge(w)
        for tok, (freq, w) in other.token_stats.items():
            self.token_stats.setdefault(tok, (freq, Welford()))[1].merge(w)
        self.total_records += other.total_records
        self.rejected += other.rejected

    def freq_marginal(self) -> dict[int, Welford]:
        out: dict[int, Welford] = {}
        for (fi, _), w in self.cells.items():
            out.setdefault(fi, Welford()).merge(w)
        return out

    def time_marginal(self) -> dict[int, Welford]:
        out: dict[int, Welford] = {}
        for (_, ti), w in self.cells.items():
            out.setdefault(ti, Welford()).merge(w)
        return out


def bin_records(records, spec: GridSpec) -> BinGrid:
    grid = BinGrid(spec=spec)
    for rec in records:
        grid.add(rec)
    return grid


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------

def collect(
    model: Denoiser,
    data: list[TokenSequence],
    vocab: Vocabulary,
    samples_per_example: int,
    seed: int,
    t_min: float = T_MIN,
    threads: int = 1,
    batch_size: int = 32,
) -> list[ConfidenceRecord]:
    """One record per masked response position, over random corruptions.

    Per (example, draw): t ~ U[t_min, 1] then a Bernoulli mask at rate t,
    both from the stream (seed, "analysis", example, draw). Forward passes
    run in evaluation mode.
    """
    freq = np.asarray(vocab.frequency)
    jobs = [(i, d) for i in range(len(data)) for d in range(samples_per_example)]

    def run_chunk(chunk) -> list[ConfidenceRecord]:
        corrupted = []
        for i, d in chunk:
            gen = rngmod.stream(seed, "analysis", i, d)
            t = t_min + (1.0 - t_min) * gen.random()
            corrupted.append((i, t, corrupt(data[i], t, gen, vocab.mask_id)))
        width = max(len(c.ids) for _, _, c in corrupted)
        ids = np.stack(
            [np.pad(c.ids, (0, width - len(c.ids)), constant_values=vocab.pad_id) for _, _, c in corrupted]
        )
        logp = model.log_probs_eval(ids, pad_id=vocab.pad_id)
        out = []
        for row, (i, t, c) in enumerate(corrupted):
            clean_ids = data[i].ids
            for k in c.mask_set:
                tok = int(clean_ids[k])
                out.append(
                    ConfidenceRecord(
                        token_id=tok,
                        frequency=int(freq[tok]),
                        t=t,
                        confidence=float(np.exp(logp[row, k, tok])),
                    )
                )
        return out

    chunks = [jobs[i : i + batch_size] for i in range(0, len(jobs), batch_size)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    return [rec for part in parts for rec in part]


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _fmt_edge(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.10g}"


def report(grid: BinGrid, out_dir, vocab: Vocabulary | None = None, top_tokens_per_bin: int = 10) -> dict:
    """Write cells.csv, marginal.csv, tokens.csv, and confidence_vs_frequency.svg."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = grid.spec
    fb = spec.freq_bounds()
    tb = spec.time_bounds()

    with open(out_dir / "cells.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["freq_bin_lo", "freq_bin_hi", "t_bin_lo", "t_bin_hi", "count", "mean_conf", "var_conf"])
        for (fi, ti) in sorted(grid.cells):
            cell = grid.cells[(fi, ti)]
            w.writerow(
                [
                    _fmt_edge(fb[fi][0]), _fmt_edge(fb[fi][1]),
                    _fmt_edge(tb[ti][0]), _fmt_edge(tb[ti][1]),
                    cell.count, f"{cell.mean:.10f}", f"{cell.variance:.10f}",
                ]
            )

    with open(out_dir / "marginal.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["freq_bin_lo", "freq_bin_hi", "count", "mean_conf", "var_conf"])
        for fi, cell in sorted(grid.freq_marginal().items()):
            w.writerow(
                [
                    _fmt_edge(fb[fi][0]), _fmt_edge(fb[fi][1]),
                    cell.count, f"{cell.mean:.10f}", f"{cell.variance:.10f}",
                ]
            )

    with open(out_dir / "tokens.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["freq_bin_lo", "freq_bin_hi", "token", "token_id", "count", "mean_conf"])
        by_bin: dict[int, list] = {}
        for tok, (freq, wf) in grid.token_stats.items():
            by_bin.setdefault(spec.freq_bin(freq), []).append((tok, freq, wf))
        for fi in sorted(by_bin):
            ranked = sorted(by_bin[fi], key=lambda x: (-x[2].count, x[0]))[:top_tokens_per_bin]
            for tok, freq, wf in ranked:
                label = vocab.token(tok) if vocab is not None else str(tok)
                w.writerow([_fmt_edge(fb[fi][0]), _fmt_edge(fb[fi][1]), label, tok, wf.count, f"{wf.mean:.10f}"])

    svg = _confidence_svg(grid)
    (out_dir / "confidence_vs_frequency.svg").write_text(svg, encoding="utf-8")

    summary = {
        "records": grid.total_records,
        "rejected": grid.rejected,
        "occupied_cells": len(grid.cells),
        "warnings": [] if grid.total_records else ["empty grid: artifacts contain headers only"],
    }
    (out_dir / "analysis_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def _confidence_svg(grid: BinGrid, width: int = 640, height: int = 420) -> str:
    """Mean confidence vs log10 frequency, one polyline per occupied time bin."""
    spec = grid.spec
    fb = spec.freq_bounds()
    tb = spec.time_bounds()
    ml, mr, mt, mb = 60, 160, 20, 50
    px = lambda u: ml + u * (width - ml - mr)
    py = lambda v: height - mb - v * (height - mt - mb)

    def bin_x(fi: int) -> float:
        lo, hi = fb[fi]
        mid = lo * 2.0 if math.isinf(hi) else math.sqrt(lo * hi)
        lo0 = fb[0][0]
        hi0 = fb[-1][0] * 4.0
        return (math.log10(mid) - math.log10(lo0)) / (math.log10(hi0) - math.log10(lo0))

    series: dict[int, list[tuple[float, float]]] = {}
    for (fi, ti), cell in sorted(grid.cells.items()):
        series.setdefault(ti, []).append((bin_x(fi), cell.mean))

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height-mb}" x2="{width-mr}" y2="{height-mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height-mb}" stroke="black"/>',
        f'<text x="{(ml+width-mr)//2}" y="{height-12}" text-anchor="middle" font-size="13">'
        "token frequency (log bins)</text>",
        f'<text x="16" y="{(mt+height-mb)//2}" font-size="13" '
        f'transform="rotate(-90 16 {(mt+height-mb)//2})" text-anchor="middle">mean confidence</text>',
    ]
    for i, ti in enumerate(sorted(series)):
        pts = sorted(series[ti])
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        color = palette[i % len(palette)]
        lo, hi = tb[ti]
        label = f"t in [{_fmt_edge(lo)}, {_fmt_edge(hi)})"
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 16 * (i + 1)
        parts.append(f'<line x1="{width-mr+8}" y1="{ly-4}" x2="{width-mr+28}" y2="{ly-4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width-mr+32}" y="{ly}" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
