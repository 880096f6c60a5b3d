"""Single command-line entry point for the whole workflow.

    liftkit gen-corpus  --out runs/demo
    liftkit build-vocab --corpus runs/demo/train.jsonl --out runs/demo/vocab.json
    liftkit train       --corpus ... --vocab ... --out runs/demo
    liftkit generate    --vocab ... --checkpoint ... --prompt "12+34="
    liftkit eval        --corpus ... --vocab ... --checkpoint ... --out runs/demo
    liftkit analyze     --corpus ... --vocab ... --checkpoint ... --out runs/demo
    liftkit show-config [--config file.json]

Failures print one machine-readable JSON line to stderr and exit with a
code identifying the error class (see errors.py).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis as analysis_mod
from . import config as cfgmod
from . import corpus as corpus_mod
from . import sampler as sampler_mod
from . import trainer as trainer_mod
from .denoiser import Denoiser, load_checkpoint
from .errors import LiftkitError, MismatchError, MissingFileError


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"{what} not found: {p}")
    return p


def _apply_overrides(cfg: dict, args) -> dict:
    """Flag > file > default, limited to the documented override flags."""
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    over = {
        ("train", "objective", "kind"): getattr(args, "objective", None),
        ("train", "objective", "H"): getattr(args, "H", None),
        ("train", "objective", "rho", "kind"): getattr(args, "rho_kind", None),
        ("train", "objective", "rho", "k"): getattr(args, "rho_k", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("train", "learning_rate"): getattr(args, "lr", None),
        ("train", "batch_size"): getattr(args, "batch_size", None),
        ("decode", "gen_len"): getattr(args, "gen_len", None),
        ("decode", "steps"): getattr(args, "steps", None),
        ("decode", "tokens_per_step"): getattr(args, "tokens_per_step", None),
        ("decode", "temperature"): getattr(args, "temperature", None),
        ("corpus", "task"): getattr(args, "task", None),
        ("corpus", "count"): getattr(args, "count", None),
        ("corpus", "eval_count"): getattr(args, "eval_count", None),
        ("corpus", "tokenization"): getattr(args, "tokenization", None),
    }
    for keys, value in over.items():
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return cfg


def _load_model_and_vocab(args) -> tuple[Denoiser, corpus_mod.Vocabulary, dict]:
    vocab = corpus_mod.Vocabulary.load(_require_file(args.vocab, "vocabulary file"))
    model, _, extra = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if model.config.vocab_size != len(vocab):
        raise MismatchError(
            f"checkpoint vocab_size {model.config.vocab_size} != vocabulary size {len(vocab)}"
        )
    return model, vocab, extra


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    c = cfg["corpus"]
    out = _out_dir(args)
    examples = corpus_mod.generate_synthetic(c["task"], c["count"] + c["eval_count"], cfg["seed"])
    corpus_mod.write_jsonl(examples[: c["count"]], out / "train.jsonl")
    corpus_mod.write_jsonl(examples[c["count"] :], out / "eval.jsonl")
    print(json.dumps({"train": str(out / "train.jsonl"), "eval": str(out / "eval.jsonl"),
                      "task": c["task"], "count": c["count"], "eval_count": c["eval_count"]}))
    return 0


def cmd_build_vocab(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    mode = cfg["corpus"]["tokenization"]
    examples = corpus_mod.read_jsonl(
        _require_file(args.corpus, "corpus file"),
        max_length=cfg["corpus"]["max_length"],
        tokenization=mode,
    )
    vocab = corpus_mod.build_vocabulary(examples, mode)
    vocab.save(args.out)
    print(json.dumps({"vocab": str(args.out), "size": len(vocab)}))
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    mode = cfg["corpus"]["tokenization"]
    examples = corpus_mod.read_jsonl(
        _require_file(args.corpus, "corpus file"),
        max_length=cfg["corpus"]["max_length"],
        tokenization=mode,
    )
    vocab = corpus_mod.Vocabulary.load(_require_file(args.vocab, "vocabulary file"))
    data = corpus_mod.encode_corpus(examples, vocab, mode)
    tc = cfgmod.train_config(cfg)
    out = _out_dir(args)
    (out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    from . import autodiff as ad

    with ad.precision(cfg["train"]["precision"]):
        model = Denoiser(cfgmod.model_config(cfg, len(vocab)), seed=tc.seed)
        result = trainer_mod.train(
            model, data, vocab, tc, out, raw_examples=examples,
            resume_from=args.resume,
        )
    live = [r for r in result.manifest.records if not r.skipped]
    print(json.dumps({
        "checkpoint": str(result.checkpoint_path),
        "steps": len(result.manifest.records),
        "final_loss": live[-1].loss if live else None,
    }))
    return 0


def cmd_generate(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    model, vocab, _ = _load_model_and_vocab(args)
    mode = cfg["corpus"]["tokenization"]
    dc = cfgmod.decode_config(cfg)
    import numpy as np

    from . import rng as rngmod

    prompt_ids = np.asarray(vocab.encode_text(args.prompt, mode), dtype=np.int64)
    gen = sampler_mod.generate(model, prompt_ids, dc, rngmod.stream(cfg["seed"], "decode", 0, 0), vocab)
    text = vocab.decode_ids(gen.ids[gen.prompt_len :], mode)
    print(json.dumps({"prompt": args.prompt, "response": text}))
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    model, vocab, _ = _load_model_and_vocab(args)
    mode = cfg["corpus"]["tokenization"]
    examples = corpus_mod.read_jsonl(_require_file(args.corpus, "corpus file"), tokenization=mode)
    data = corpus_mod.encode_corpus(examples, vocab, mode)
    task = corpus_mod.get_task(args.task or cfg["corpus"]["task"])
    k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else [1]
    report = sampler_mod.evaluate(
        model, data, task, vocab, cfgmod.decode_config(cfg), k_list,
        seed=cfg["seed"], tokenization=mode, threads=args.threads,
    )
    report.config = {"gen_len": cfgmod.decode_config(cfg).gen_len, "temperature": cfgmod.decode_config(cfg).temperature}
    out = _out_dir(args)
    report.save(out)
    print(json.dumps({"accuracy": report.accuracy,
                      "pass_at_k": {str(k): v for k, v in report.pass_at_k.items()},
                      "avg_at_k": {str(k): v for k, v in report.avg_at_k.items()}}))
    return 0


def cmd_analyze(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    model, vocab, _ = _load_model_and_vocab(args)
    mode = cfg["corpus"]["tokenization"]
    examples = corpus_mod.read_jsonl(_require_file(args.corpus, "corpus file"), tokenization=mode)
    data = corpus_mod.encode_corpus(examples, vocab, mode)
    records = analysis_mod.collect(
        model, data, vocab,
        samples_per_example=cfg["analysis"]["samples_per_example"],
        seed=cfg["seed"], threads=args.threads,
    )
    grid = analysis_mod.bin_records(records, cfgmod.grid_spec(cfg))
    summary = analysis_mod.report(grid, _out_dir(args), vocab,
                                  top_tokens_per_bin=cfg["analysis"]["top_tokens_per_bin"])
    print(json.dumps(summary))
    return 0


def cmd_show_config(args) -> int:
    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    print(json.dumps(cfg, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, out: bool = False):
    p.add_argument("--config", default=None, help="JSON run-config file")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    p.add_argument("--threads", type=int, default=1, help="worker thread cap")
    if out:
        p.add_argument("--out", required=True, help="run directory for all outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liftkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic train/eval corpus")
    _add_common(p, out=True)
    p.add_argument("--task", choices=sorted(corpus_mod.TASKS))
    p.add_argument("--count", type=int)
    p.add_argument("--eval-count", dest="eval_count", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output vocabulary JSON path")
    p.add_argument("--tokenization", choices=corpus_mod.TOKENIZATIONS)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a denoiser")
    _add_common(p, out=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--objective", choices=("vanilla", "lift", "lift_a", "top_k", "bottom_k",
                                           "random2", "random3", "gift", "cart"))
    p.add_argument("--H", type=int)
    p.add_argument("--rho-kind", dest="rho_kind", choices=("uniform", "fixed", "truncated_uniform"))
    p.add_argument("--rho-k", dest="rho_k", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a response for one prompt")
    _add_common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--gen-len", dest="gen_len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tokens-per-step", dest="tokens_per_step", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="grade generations on an eval corpus")
    _add_common(p, out=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=sorted(corpus_mod.TASKS))
    p.add_argument("--k-list", dest="k_list", default=None, help="comma-separated k values")
    p.add_argument("--gen-len", dest="gen_len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tokens-per-step", dest="tokens_per_step", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="confidence-vs-frequency analysis")
    _add_common(p, out=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("show-config", help="print the fully-defaulted effective config")
    _add_common(p)
    p.set_defaults(func=cmd_show_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LiftkitError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    except Exception as e:  # unexpected: still one machine-readable line
        print(json.dumps({"error": "internal", "message": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
