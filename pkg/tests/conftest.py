import re
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from liftkit.corpus import build_vocabulary, encode_corpus, generate_synthetic
from liftkit.denoiser import Denoiser, ModelConfig

_ACCEPTANCE_RESULTS: dict[str, str] = {}
_CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if not m:
        return
    key = f"{int(m.group(1)):02d} {m.group(2).replace('_', '-')}"
    if report.when == "call":
        _ACCEPTANCE_RESULTS[key] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _ACCEPTANCE_RESULTS[key] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for key in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {key}: {_ACCEPTANCE_RESULTS[key]}")


@pytest.fixture(scope="session")
def addition_corpus():
    examples = generate_synthetic("addition_cot", 48, seed=11)
    vocab = build_vocabulary(examples)
    data = encode_corpus(examples, vocab)
    return examples, vocab, data


@pytest.fixture(scope="session")
def tiny_model(addition_corpus):
    _, vocab, _ = addition_corpus
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=2, max_seq_len=40)
    return Denoiser(cfg, seed=3)


def make_clean(ids, prompt_len):
    """Tiny hand-built clean sequence for scalar-oracle style tests."""
    from liftkit.corpus import TokenSequence

    ids = np.asarray(ids, dtype=np.int64)
    return TokenSequence(ids=ids, prompt_len=prompt_len, response_len=len(ids) - prompt_len)
