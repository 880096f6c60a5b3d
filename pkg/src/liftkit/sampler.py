"""Reverse-diffusion decoding and task evaluation (exact match, pass@k).

Decoding starts from an all-masked response span and repeatedly commits
the most confident masked positions (or random ones), a fixed number of
tokens per step. Committed tokens and the prompt are never overwritten.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .corpus import Task, TokenSequence, Vocabulary
from .denoiser import Denoiser
from .errors import ConfigError, ContractError, InputError

REMASK_STRATEGIES = ("confidence", "random")


@dataclass(frozen=True)
class DecodeConfig:
    gen_len: int = 64
    steps: int = 32
    tokens_per_step: int = 2
    temperature: float = 0.0
    remask_strategy: str = "confidence"

    def __post_init__(self):
        if min(self.gen_len, self.steps, self.tokens_per_step) < 1:
            raise ConfigError("gen_len, steps, tokens_per_step must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.steps * self.tokens_per_step < self.gen_len:
            raise ConfigError(
                f"steps*tokens_per_step = {self.steps * self.tokens_per_step} "
                f"cannot cover gen_len = {self.gen_len}"
            )
        if self.remask_strategy not in REMASK_STRATEGIES:
            raise ConfigError(f"unknown remask_strategy '{self.remask_strategy}'")


def generate(
    model: Denoiser,
    prompt: TokenSequence | np.ndarray,
    cfg: DecodeConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> TokenSequence:
    """Decode a gen_len response after the prompt span.

    Each step runs one forward pass; under the confidence strategy the
    tokens_per_step masked positions whose chosen token has the highest
    model probability are committed (argmax at temperature 0, categorical
    sample otherwise). Deterministic at temperature 0.
    """
    prompt_ids = prompt.ids[: prompt.prompt_len] if isinstance(prompt, TokenSequence) else np.asarray(prompt)
    p_len = len(prompt_ids)
    if p_len + cfg.gen_len > model.config.max_seq_len:
        raise InputError(
            f"prompt ({p_len}) + gen_len ({cfg.gen_len}) exceeds max_seq_len {model.config.max_seq_len}"
        )
    ids = np.concatenate([prompt_ids, np.full(cfg.gen_len, vocab.mask_id, dtype=np.int64)])
    remaining = list(range(p_len, p_len + cfg.gen_len))
    suppress = [vocab.mask_id, vocab.pad_id]  # never commit special tokens
    for _ in range(cfg.steps):
        if not remaining:
            break
        logp = model.log_probs_eval(ids[None, :], pad_id=vocab.pad_id)[0]
        picks = {}
        for pos in remaining:
            row = logp[pos].copy()
            row[suppress] = -np.inf
            if cfg.temperature == 0.0:
                tok = int(np.argmax(row))
            else:
                scaled = row / cfg.temperature
                scaled -= scaled.max()
                probs = np.exp(scaled)
                probs /= probs.sum()
                tok = int(rng.choice(len(row), p=probs))
            picks[pos] = (tok, float(np.exp(logp[pos, tok])))
        n_commit = min(cfg.tokens_per_step, len(remaining))
        if cfg.remask_strategy == "confidence":
            chosen = sorted(picks, key=lambda p: (-picks[p][1], p))[:n_commit]
        else:
            chosen = [remaining[int(i)] for i in rng.permutation(len(remaining))[:n_commit]]
        for pos in chosen:
            ids[pos] = picks[pos][0]
            remaining.remove(pos)
    if remaining:
        raise ContractError("decoding finished with masked positions left")
    return TokenSequence(ids=ids, prompt_len=p_len, response_len=cfg.gen_len)


# ---------------------------------------------------------------------------
# pass@k
# ---------------------------------------------------------------------------

def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k), evaluated in log space."""
    if not (0 <= c <= n):
        raise ContractError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not (1 <= k <= n):
        raise ContractError(f"need 1 <= k <= n, got k={k}, n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    log_ratio = (
        math.lgamma(n - c + 1)
        - math.lgamma(n - c - k + 1)
        + math.lgamma(n - k + 1)
        - math.lgamma(n + 1)
    )
    return 1.0 - math.exp(log_ratio)


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    prompt: str
    generation: str
    extracted: str
    canonical: str
    correct: bool  # first sample's verdict
    n: int
    c: int


@dataclass
class EvalReport:
    records: list[EvalRecord]
    accuracy: float
    pass_at_k: dict[int, float]
    avg_at_k: dict[int, float]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "pass_at_k": {str(k): v for k, v in self.pass_at_k.items()},
            "avg_at_k": {str(k): v for k, v in self.avg_at_k.items()},
            "config": self.config,
            "seed": self.seed,
            "records": [
                {
                    "prompt": r.prompt,
                    "generation": r.generation,
                    "extracted": r.extracted,
                    "canonical": r.canonical,
                    "correct": r.correct,
                    "n": r.n,
                    "c": r.c,
                }
                for r in self.records
            ],
        }

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.json").write_text(
            json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8"
        )
        ks = sorted(self.pass_at_k)
        with open(out_dir / "eval_summary.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            header = ["seed", "n_prompts", "accuracy"]
            header += [f"pass_at_{k}" for k in ks] + [f"avg_at_{k}" for k in ks]
            header += sorted(self.config)
            w.writerow(header)
            row = [self.seed, len(self.records), f"{self.accuracy:.6f}"]
            row += [f"{self.pass_at_k[k]:.6f}" for k in ks]
            row += [f"{self.avg_at_k[k]:.6f}" for k in ks]
            row += [self.config[k] for k in sorted(self.config)]
            w.writerow(row)


def evaluate(
    model: Denoiser,
    eval_set: list[TokenSequence],
    task: Task,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    k_list: list[int],
    seed: int,
    tokenization: str = "char",
    threads: int = 1,
) -> EvalReport:
    """Generate n = max(k_list) samples per prompt and grade them.

    Answer extraction or checking failures count as incorrect; they never
    abort the run.
    """
    if not k_list:
        raise ConfigError("k_list must be non-empty")
    n = max(k_list)
    if n > 1 and cfg.temperature <= 0.0:
        raise ConfigError("n > 1 samples need temperature > 0 (otherwise all samples coincide)")

    def run_prompt(i: int) -> EvalRecord:
        seq = eval_set[i]
        prompt_text = vocab.decode_ids(seq.ids[: seq.prompt_len], tokenization)
        try:
            canonical = task.solve(prompt_text)
        except Exception:
            canonical = ""
        c = 0
        first_gen = first_ex = ""
        first_ok = False
        for s in range(n):
            gen = generate(model, seq, cfg, rngmod.stream(seed, "decode", i, s), vocab)
            text = vocab.decode_ids(gen.ids[gen.prompt_len :], tokenization)
            try:
                extracted = task.extract(text)
                ok = bool(canonical) and task.check(extracted, canonical, prompt_text)
            except Exception:
                extracted, ok = "", False
            c += ok
            if s == 0:
                first_gen, first_ex, first_ok = text, extracted, ok
        return EvalRecord(
            prompt=prompt_text, generation=first_gen, extracted=first_ex,
            canonical=canonical, correct=first_ok, n=n, c=c,
        )

    indices = range(len(eval_set))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_prompt, indices))
    else:
        records = [run_prompt(i) for i in indices]

    accuracy = float(np.mean([r.correct for r in records])) if records else 0.0
    pk = {k: float(np.mean([pass_at_k(r.n, r.c, k) for r in records])) for k in k_list}
    ak = {k: float(np.mean([r.c / r.n for r in records])) for k in k_list}
    return EvalReport(records=records, accuracy=accuracy, pass_at_k=pk, avg_at_k=ak, seed=seed)
