"""Corpus generation, tokenization, vocabulary, and batching.

Examples are (prompt, response) string pairs. Four synthetic tasks provide
desk-scale SFT corpora whose canonical answers are recomputable from the
prompt alone, so the eval harness can grade generations without stored
labels. Responses are padded to a fixed per-task length with a visible
filler character ('.') so that generation-time response slots match the
training distribution.

Character-level tokenization is the default (tiny vocabulary, desk-scale
softmax); whitespace tokenization is available for plain-text ingestion.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ContractError, IngestionError

MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
FILLER = "."

TOKENIZATIONS = ("char", "whitespace")


def tokenize(text: str, mode: str = "char") -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "whitespace":
        return text.split(" ")
    raise ConfigError(f"unknown tokenization '{mode}'")


def detokenize(tokens: list[str], mode: str = "char") -> str:
    if mode == "char":
        return "".join(tokens)
    if mode == "whitespace":
        return " ".join(tokens)
    raise ConfigError(f"unknown tokenization '{mode}'")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

VOCAB_FORMAT_VERSION = 1


@dataclass
class Vocabulary:
    """Token list with reserved mask/pad ids and response-token frequencies.

    ``frequency[i]`` counts occurrences of token i over all corpus
    *response* tokens (prompts provide context, not training targets);
    the mask and pad tokens always have frequency 0.
    """

    tokens: list[str]
    mask_id: int
    pad_id: int
    frequency: list[int]
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise IngestionError("duplicate tokens in vocabulary")
        if self.mask_id == self.pad_id:
            raise ContractError("mask_id and pad_id must differ")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise IngestionError(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode_text(self, text: str, mode: str = "char") -> list[int]:
        return [self.lookup(t) for t in tokenize(text, mode)]

    def decode_ids(self, ids, mode: str = "char", strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if strip_special and i in (self.mask_id, self.pad_id):
                continue
            toks.append(self.tokens[i])
        return detokenize(toks, mode)

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "tokens": list(self.tokens),
            "mask_id": self.mask_id,
            "pad_id": self.pad_id,
            "frequency": list(self.frequency),
        }

    @staticmethod
    def from_json(obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_FORMAT_VERSION:
            raise IngestionError(f"unsupported vocabulary version {obj.get('version')!r}")
        return Vocabulary(
            tokens=list(obj["tokens"]),
            mask_id=int(obj["mask_id"]),
            pad_id=int(obj["pad_id"]),
            frequency=[int(f) for f in obj["frequency"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Vocabulary":
        return Vocabulary.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Example:
    """A clean SFT pair before encoding (the string form of a TokenSequence)."""

    prompt: str
    response: str


@dataclass
class TokenSequence:
    """Encoded example: prompt span, response span, optional pad suffix."""

    ids: np.ndarray
    prompt_len: int
    response_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.response_len < 1:
            raise ContractError("response_len must be >= 1")
        if self.prompt_len < 0:
            raise ContractError("prompt_len must be >= 0")
        if len(self.ids) < self.prompt_len + self.response_len:
            raise ContractError("ids shorter than prompt + response")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def response_slice(self) -> slice:
        return slice(self.prompt_len, self.prompt_len + self.response_len)

    def response_positions(self) -> np.ndarray:
        return np.arange(self.prompt_len, self.prompt_len + self.response_len)

    def padded(self, total_len: int, pad_id: int) -> "TokenSequence":
        if total_len < len(self.ids):
            raise ContractError(f"cannot pad length {len(self.ids)} down to {total_len}")
        ids = np.full(total_len, pad_id, dtype=np.int64)
        ids[: len(self.ids)] = self.ids
        return TokenSequence(ids, self.prompt_len, self.response_len)

    def validate(self, vocab: Vocabulary) -> None:
        body = self.ids[: self.prompt_len + self.response_len]
        if np.any(body == vocab.mask_id):
            raise ContractError("clean sequence contains the mask id")
        if np.any(body == vocab.pad_id):
            raise ContractError("pad id inside prompt/response span")
        tail = self.ids[self.prompt_len + self.response_len :]
        if tail.size and np.any(tail != vocab.pad_id):
            raise ContractError("non-pad token in the padding suffix")


def encode_example(ex: Example, vocab: Vocabulary, mode: str = "char") -> TokenSequence:
    prompt_ids = vocab.encode_text(ex.prompt, mode)
    response_ids = vocab.encode_text(ex.response, mode)
    seq = TokenSequence(
        ids=np.array(prompt_ids + response_ids, dtype=np.int64),
        prompt_len=len(prompt_ids),
        response_len=len(response_ids),
    )
    seq.validate(vocab)
    return seq


def encode_corpus(examples: list[Example], vocab: Vocabulary, mode: str = "char") -> list[TokenSequence]:
    return [encode_example(ex, vocab, mode) for ex in examples]


def build_vocabulary(examples: list[Example], tokenization: str = "char") -> Vocabulary:
    """Vocabulary covering every prompt/response token, frequencies over responses."""
    if not examples:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    if tokenization not in TOKENIZATIONS:
        raise ConfigError(f"unknown tokenization '{tokenization}'")
    seen: set[str] = set()
    counts: dict[str, int] = {}
    for ex in examples:
        seen.update(tokenize(ex.prompt, tokenization))
        for tok in tokenize(ex.response, tokenization):
            seen.add(tok)
            counts[tok] = counts.get(tok, 0) + 1
    tokens = [PAD_TOKEN, MASK_TOKEN] + sorted(seen)
    frequency = [counts.get(tok, 0) for tok in tokens]
    return Vocabulary(tokens=tokens, mask_id=1, pad_id=0, frequency=frequency)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

class Task:
    """One synthetic task: generation plus answer extraction/checking."""

    name = "base"
    response_len = 0  # fixed response length incl. filler

    def sample(self, rng: np.random.Generator) -> Example:
        raise NotImplementedError

    def solve(self, prompt: str) -> str:
        """Canonical answer, recomputed from the prompt alone."""
        raise NotImplementedError

    def extract(self, response_text: str) -> str:
        """Pull the answer out of (possibly noisy) generated text."""
        return response_text.rstrip(FILLER)

    def check(self, extracted: str, canonical: str, prompt: str) -> bool:
        return extracted == canonical

    def _fill(self, core: str) -> str:
        if len(core) > self.response_len:
            raise ContractError(f"{self.name} response {core!r} exceeds fixed length {self.response_len}")
        return core + FILLER * (self.response_len - len(core))


class CopyTask(Task):
    name = "copy"
    response_len = 12
    letters = "abcdefghij"

    def sample(self, rng):
        n = int(rng.integers(4, 11))
        s = "".join(self.letters[int(i)] for i in rng.integers(0, len(self.letters), n))
        return Example(prompt=s + "=", response=self._fill(s))

    def solve(self, prompt):
        return prompt[:-1]


class ReverseTask(CopyTask):
    name = "reverse"

    def sample(self, rng):
        n = int(rng.integers(4, 11))
        s = "".join(self.letters[int(i)] for i in rng.integers(0, len(self.letters), n))
        return Example(prompt=s + "~", response=self._fill(s[::-1]))

    def solve(self, prompt):
        return prompt[:-1][::-1]


class AdditionCotTask(Task):
    """Two-digit addition with digit-by-digit carry chain-of-thought.

    47+85 -> "7+5=12,4+8+1=13,=>132" (each step shows carry||digit, the
    final answer follows the "=>" delimiter).
    """

    name = "addition_cot"
    response_len = 24

    def sample(self, rng):
        a = int(rng.integers(10, 100))
        b = int(rng.integers(10, 100))
        return Example(prompt=f"{a}+{b}=", response=self._fill(self._cot(a, b)))

    @staticmethod
    def _cot(a: int, b: int) -> str:
        a1, a0 = divmod(a, 10)
        b1, b0 = divmod(b, 10)
        s0 = a0 + b0
        c0 = s0 // 10
        s1 = a1 + b1 + c0
        return f"{a0}+{b0}={s0:02d},{a1}+{b1}+{c0}={s1:02d},=>{a + b}"

    def solve(self, prompt):
        a, b = prompt.rstrip("=").split("+")
        return str(int(a) + int(b))

    def extract(self, response_text):
        if "=>" not in response_text:
            return ""
        return response_text.rsplit("=>", 1)[1].rstrip(FILLER)


class MiniCountdownTask(Task):
    """Reach a target from three digits with two left-to-right operations.

    The response ends in "=>(a∘b)∘c"; the grader re-evaluates the emitted
    expression and checks it uses exactly the prompt's numbers.
    """

    name = "mini_countdown"
    response_len = 26
    ops = "+-*"

    def sample(self, rng):
        while True:
            a, b, c = (int(v) for v in rng.integers(2, 10, 3))
            op1, op2 = (self.ops[int(i)] for i in rng.integers(0, 3, 2))
            v1 = self._apply(a, op1, b)
            target = self._apply(v1, op2, c)
            if 1 <= v1 <= 99 and 1 <= target <= 99:
                break
        core = f"{a}{op1}{b}={v1},{v1}{op2}{c}={target},=>({a}{op1}{b}){op2}{c}"
        return Example(prompt=f"{a},{b},{c}:{target}=", response=self._fill(core))

    @staticmethod
    def _apply(x: int, op: str, y: int) -> int:
        return x + y if op == "+" else x - y if op == "-" else x * y

    def solve(self, prompt):
        return prompt.rstrip("=").split(":")[1]

    def extract(self, response_text):
        if "=>" not in response_text:
            return ""
        return response_text.rsplit("=>", 1)[1].rstrip(FILLER)

    def check(self, extracted, canonical, prompt):
        numbers = sorted(int(n) for n in prompt.split(":")[0].split(","))
        value = safe_eval_expression(extracted)
        if value is None or value != int(canonical):
            return False
        used = sorted(_expression_leaves(extracted))
        return used == numbers


def safe_eval_expression(expr: str):
    """Evaluate +,-,* integer arithmetic; None on anything else."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError:
        return None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
            left, right = ev(node.left), ev(node.right)
            if left is None or right is None:
                return None
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            return left * right
        return None

    return ev(tree)


def _expression_leaves(expr: str) -> list[int]:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError:
        return []
    return [n.value for n in ast.walk(tree) if isinstance(n, ast.Constant) and isinstance(n.value, int)]


TASKS: dict[str, Task] = {
    t.name: t for t in (CopyTask(), ReverseTask(), AdditionCotTask(), MiniCountdownTask())
}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task '{name}' (choose from {sorted(TASKS)})") from None


def generate_synthetic(task: str, count: int, seed: int) -> list[Example]:
    """Deterministic synthetic corpus with unique prompts (when feasible)."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    t = get_task(task)
    rng = rngmod.stream(seed, f"corpus:{task}")
    out: list[Example] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < count:
        ex = t.sample(rng)
        attempts += 1
        if ex.prompt in seen and attempts < 50 * count:
            continue
        seen.add(ex.prompt)
        out.append(ex)
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    sequences: list[TokenSequence]
    seed: int

    def __post_init__(self):
        lengths = {len(s) for s in self.sequences}
        if len(lengths) > 1:
            raise ContractError(f"batch sequences have mixed lengths {sorted(lengths)}")

    def ids(self) -> np.ndarray:
        return np.stack([s.ids for s in self.sequences])


def make_batches(
    data: list[TokenSequence],
    batch_size: int,
    shuffle_seed: int,
    pad_id: int,
):
    """Yield shuffled batches; the final partial batch is retained."""
    if not data:
        raise IngestionError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = rngmod.stream(shuffle_seed, "order").permutation(len(data))
    for start in range(0, len(data), batch_size):
        chosen = [data[int(i)] for i in order[start : start + batch_size]]
        width = max(len(s) for s in chosen)
        yield Batch([s.padded(width, pad_id) for s in chosen], seed=shuffle_seed)


# ---------------------------------------------------------------------------
# corpus files (one JSON object per line: {"prompt": ..., "response": ...})
# ---------------------------------------------------------------------------

def write_jsonl(examples: list[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"prompt": ex.prompt, "response": ex.response}) + "\n")


def read_jsonl(path, max_length: int | None = None, tokenization: str = "char") -> list[Example]:
    """Load a corpus file; optionally drop examples longer than max_length tokens."""
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ex = Example(prompt=str(obj["prompt"]), response=str(obj["response"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise IngestionError(f"{path}:{lineno}: bad corpus record ({e})") from None
            if max_length is not None:
                total = len(tokenize(ex.prompt, tokenization)) + len(tokenize(ex.response, tokenization))
                if total >= max_length:
                    continue
            out.append(ex)
    if not out:
        raise IngestionError(f"{path}: no usable examples")
    return out
