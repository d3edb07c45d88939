"""Command-line entry point.

Exit codes: 0 when every check passed, 1 when a check failed, 2 for usage,
configuration and I/O errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .demo import demo_corpus_text
from .infotheory import (
    ChainError,
    MarkovChain,
    block_entropy_bruteforce,
    detailed_balance_gap,
    entropy_rate,
    estimate_from_corpus,
    path_kl_bruteforce,
    perplexity_floor,
    per_state_divergence,
    reverse_chain,
    time_reversal_divergence,
)
from .model import POS_MODES, ModelConfig, ModelError
from .seqcore import Corpus, parse_corpus, reverse_corpus
from .tokenizer import (
    TokenizerError,
    char_tokenizer,
    propose_reversal_bijection,
    stability_report,
    train_bpe,
)
from .train import TrainConfig, TrainingDiverged
from .verify import (
    check_perm_equivariance,
    check_reversal_invariance,
    curve_csv,
    independent_curves_comparison,
    matched_training_check,
    reversal_setup,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "check-invariance": {
        "corpus": None,
        "vocab_size": 16,
        "pos_mode": list(POS_MODES),
        "tie": ["untied", "tied"],
        "d_model": 64,
        "n_heads": 2,
        "n_layers": 2,
        "max_len": 128,
        "seed": 0,
        "n_cases": 25,
        "perm_cases": 100,
        "flip": True,
        "workers": 1,
    },
    "tokenizer-stability": {
        "corpus": None,
        "vocab_size": 16,
        "max_examples": 10,
    },
    "divergence": {
        "chain": None,
        "corpus": None,
        "order": 2,
        "lam": 0.5,
        "vocab_size": None,
        "max_n": 10,
    },
    "matched-train": {
        "corpus": None,
        "vocab_size": 16,
        "pos_mode": ["rotary"],
        "tie": ["untied"],
        "d_model": 64,
        "n_heads": 2,
        "n_layers": 2,
        "max_len": 128,
        "seed": 0,
        "steps": 200,
        "batch_size": 8,
        "optimizer": ["sgd", "adam"],
        "sgd_lr": 0.1,
        "adam_lr": 3e-3,
        "independent": False,
        "seeds": 5,
        "independent_steps": 150,
    },
}

# keys that locate inputs/outputs rather than describe the computation
_IO_KEYS = {"corpus", "chain", "out", "config", "pretty"}


class UsageError(Exception):
    pass


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    return _finite(obj)


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _vocab_arg(text: str):
    if text in ("none", "char", "alphabet"):
        return None
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, 'alphabet' or 'none', got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("vocab size must be positive")
    return v


def _load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config file: {exc}") from None
    # top-level keys are shared by all commands and apply where they fit;
    # keys in the command's own table must all be known
    defaults = DEFAULTS[command]
    shared = {_config_key(k): v for k, v in data.items() if not isinstance(v, dict)}
    out = {k: v for k, v in shared.items() if k in defaults}
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"[{command}] in the config file must be a table")
    for k, v in section.items():
        key = _config_key(k)
        if key not in defaults:
            raise UsageError(f"unknown config key for {command}: {k!r}")
        out[key] = v
    return out


def _config_key(name: str) -> str:
    key = name.replace("-", "_")
    return "lam" if key == "lambda" else key


def _resolve(args: argparse.Namespace, command: str) -> dict:
    defaults = DEFAULTS[command]
    file_cfg = _load_config(args.config, command)
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    for key in ("pos_mode", "tie", "optimizer"):
        if key in resolved and isinstance(resolved[key], str):
            resolved[key] = [resolved[key]]
    if isinstance(resolved.get("vocab_size"), str):
        try:
            resolved["vocab_size"] = _vocab_arg(resolved["vocab_size"])
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"vocab_size: {exc}") from None
    for mode in resolved.get("pos_mode", []):
        if mode not in POS_MODES:
            raise UsageError(f"unknown pos_mode {mode!r}")
    return resolved


def _read_corpus(path: str | None) -> tuple[Corpus, str]:
    if path is None:
        data = demo_corpus_text()
    else:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise UsageError(f"cannot read corpus: {exc}") from None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UsageError(f"cannot read corpus: not valid UTF-8 ({exc})") from None
    return parse_corpus(text), hashlib.sha256(data).hexdigest()


def _report(command: str, resolved: dict, inputs: dict, results, passed: bool | None) -> dict:
    return {
        "command": command,
        "artifact_version": __version__,
        "config": {k: v for k, v in resolved.items() if k not in _IO_KEYS},
        "inputs": inputs,
        "results": results,
        "passed": passed,
    }


def _emit(args, report: dict, filename: str, pretty_text: str, extra_files: dict | None = None) -> None:
    text = _dumps(report)
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / filename).write_text(text, encoding="utf-8")
            for name, content in (extra_files or {}).items():
                (out / name).write_text(content, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write output: {exc}") from None
    sys.stdout.write(pretty_text + "\n" if args.pretty else text)


def _model_configs(resolved: dict, vocab_size: int):
    for mode in resolved["pos_mode"]:
        for tie in resolved["tie"]:
            if tie not in ("tied", "untied"):
                raise UsageError(f"tie must be 'tied' or 'untied', got {tie!r}")
            yield ModelConfig(
                vocab_size=vocab_size,
                d_model=resolved["d_model"],
                n_heads=resolved["n_heads"],
                n_layers=resolved["n_layers"],
                max_len=resolved["max_len"],
                pos_mode=mode,
                tie_embeddings=tie == "tied",
            )


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_check_invariance(args) -> int:
    resolved = _resolve(args, "check-invariance")
    corpus, digest = _read_corpus(resolved["corpus"])
    setup = reversal_setup(corpus, resolved["vocab_size"])
    reports = []
    for cfg in _model_configs(resolved, setup.vocab_size):
        reports.append(check_perm_equivariance(cfg, resolved["seed"], resolved["perm_cases"],
                                               workers=resolved["workers"]))
        reports.append(check_reversal_invariance(cfg, resolved["seed"], corpus, resolved["n_cases"],
                                                 flip=resolved["flip"], setup=setup, workers=resolved["workers"]))
    passed = all(r.passed for r in reports)
    report = _report("check-invariance", resolved, {"corpus_sha256": digest},
                     {"notes": setup.notes, "checks": [r.to_dict() for r in reports]}, passed)
    _emit(args, report, "invariance_report.json", "\n".join(r.line() for r in reports))
    return EXIT_OK if passed else EXIT_FAILED


def cmd_tokenizer_stability(args) -> int:
    resolved = _resolve(args, "tokenizer-stability")
    corpus, digest = _read_corpus(resolved["corpus"])
    if len(corpus) == 0:
        raise UsageError("empty corpus")
    rev = reverse_corpus(corpus)
    if resolved["vocab_size"] is None:
        t_fwd, t_rev = char_tokenizer(corpus), char_tokenizer(rev)
    else:
        t_fwd, t_rev = train_bpe(corpus, resolved["vocab_size"]), train_bpe(rev, resolved["vocab_size"])
    pi = propose_reversal_bijection(t_fwd, t_rev)
    rep = stability_report(t_fwd, t_rev, pi, corpus, max_examples=resolved["max_examples"])
    results = rep.to_dict()
    results["vocab_forward"] = t_fwd.vocab_size
    results["vocab_reversed"] = t_rev.vocab_size
    results["merges_forward"] = [list(m) for m in t_fwd.merges]
    results["merges_reversed"] = [list(m) for m in t_rev.merges]
    report = _report("tokenizer-stability", resolved, {"corpus_sha256": digest}, results, None)
    extra = {"tokenizer_forward.json": _dumps(t_fwd.to_dict()), "tokenizer_reversed.json": _dumps(t_rev.to_dict()),
             "stability_table.txt": rep.table() + "\n"}
    _emit(args, report, "stability_report.json", rep.table(), extra)
    return EXIT_OK


def _chain_results(mc: MarkovChain, max_n: int) -> tuple[dict, str]:
    h = entropy_rate(mc)
    a = time_reversal_divergence(mc)
    rows = []
    for n in range(1, max_n + 1):
        if mc.n_states**n > 10**7:
            break
        rows.append({"n": n, "path_kl_per_token": path_kl_bruteforce(mc, n),
                     "block_entropy_per_token": block_entropy_bruteforce(mc, n)})
    results = {
        "states": list(mc.states),
        "stationary": mc.stationary.tolist(),
        "h_nats": h,
        "h_bits": h / math.log(2),
        "perplexity_floor": perplexity_floor(h),
        "h_reversed_nats": entropy_rate(reverse_chain(mc)),
        "A_nats": a,
        "A_bits": a / math.log(2),
        "detailed_balance_gap": detailed_balance_gap(mc),
        "per_state_A": per_state_divergence(mc).tolist(),
        "convergence": rows,
    }
    lines = [
        f"entropy rate h      {h:.6f} nats ({h / math.log(2):.6f} bits)",
        f"perplexity floor    {perplexity_floor(h):.6f}",
        f"reversed-chain h    {results['h_reversed_nats']:.6f} nats",
        f"reversal divergence {a:.6f} nats ({a / math.log(2):.6f} bits)",
        "n   (1/n) path KL   (1/n) H(X_1^n)",
    ]
    lines += [f"{r['n']:<3d} {r['path_kl_per_token']:<15.6f} {r['block_entropy_per_token']:.6f}" for r in rows]
    return results, "\n".join(lines)


def cmd_divergence(args) -> int:
    resolved = _resolve(args, "divergence")
    chain_path = resolved["chain"]
    corpus_path = resolved["corpus"]
    if (chain_path is None) == (corpus_path is None):
        raise UsageError("give exactly one of --chain or --corpus")
    if chain_path is not None:
        try:
            raw = Path(chain_path).read_bytes()
            mc = MarkovChain.from_dict(json.loads(raw.decode("utf-8")))
        except OSError as exc:
            raise UsageError(f"cannot read chain: {exc}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad chain file: {exc}") from None
        results, table = _chain_results(mc, resolved["max_n"])
        report = _report("divergence", resolved, {"chain_sha256": hashlib.sha256(raw).hexdigest()}, results, None)
        _emit(args, report, "divergence_report.json", table)
        return EXIT_OK

    corpus, digest = _read_corpus(corpus_path)
    if len(corpus) == 0:
        raise UsageError("empty corpus")
    t = char_tokenizer(corpus) if resolved["vocab_size"] is None else train_bpe(corpus, resolved["vocab_size"])
    est = estimate_from_corpus(t, corpus, order=resolved["order"], lam=resolved["lam"])
    results = est.to_dict()
    report = _report("divergence", resolved, {"corpus_sha256": digest}, results, None)
    table = "\n".join(
        [
            f"plug-in h            {est.h_nats:.6f} nats ({est.h_bits:.6f} bits)",
            f"plug-in h (reversed) {est.h_reversed_nats:.6f} nats",
            f"plug-in A            {est.A_nats:.6f} nats ({est.A_bits:.6f} bits)",
            f"order {est.order}, lambda {est.lam}, {est.token_count} tokens, {est.n_contexts} contexts",
        ]
        + [f"warning: {w}" for w in est.warnings]
    )
    _emit(args, report, "divergence_report.json", table, {"contributions.csv": est.contributions_csv()})
    return EXIT_OK


def cmd_matched_train(args) -> int:
    resolved = _resolve(args, "matched-train")
    if resolved["independent"] and resolved["seeds"] < 3:
        raise UsageError(f"--independent needs at least 3 seeds, got {resolved['seeds']}")
    corpus, digest = _read_corpus(resolved["corpus"])
    setup = reversal_setup(corpus, resolved["vocab_size"])
    reports = []
    files = {}
    for cfg in _model_configs(resolved, setup.vocab_size):
        for opt in resolved["optimizer"]:
            lr = resolved["sgd_lr"] if opt == "sgd" else resolved["adam_lr"]
            tc = TrainConfig(steps=resolved["steps"], batch_size=resolved["batch_size"], learning_rate=lr,
                             optimizer=opt, seed=resolved["seed"])
            rep = matched_training_check(cfg, tc, corpus, setup=setup)
            tag = f"{cfg.pos_mode}_{'tied' if cfg.tie_embeddings else 'untied'}_{opt}"
            files[f"curves_{tag}.csv"] = curve_csv(rep)
            reports.append(rep)
            if resolved["independent"]:
                tc_ind = TrainConfig(steps=resolved["independent_steps"], batch_size=resolved["batch_size"],
                                     learning_rate=lr, optimizer=opt, seed=resolved["seed"])
                reports.append(independent_curves_comparison(cfg, tc_ind, corpus, resolved["seeds"], setup=setup))
    passed = all(r.passed for r in reports)
    checks = []
    for r in reports:
        d = r.to_dict()
        d["extra"] = {k: v for k, v in d["extra"].items() if k not in ("curve", "curves")}
        checks.append(d)
    report = _report("matched-train", resolved, {"corpus_sha256": digest},
                     {"notes": setup.notes, "checks": checks}, passed)
    _emit(args, report, "matched_train_report.json", "\n".join(r.line() for r in reports), files)
    return EXIT_OK if passed else EXIT_FAILED


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file; flags override its values")
    p.add_argument("--out", help="directory for JSON/CSV outputs")
    p.add_argument("--pretty", action="store_true", help="print a human-readable table instead of JSON")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pos-mode", dest="pos_mode", action="append", choices=POS_MODES,
                   help="positional encoding; repeat for several (default: see command)")
    p.add_argument("--tie", action="append", choices=("tied", "untied"), help="embedding tying; repeatable")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"revlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-invariance", help="permutation equivariance and reversal invariance checks")
    _common(p)
    _model_flags(p)
    p.add_argument("--corpus", help="UTF-8 text, one document per line (default: bundled demo corpus)")
    p.add_argument("--vocab-size", dest="vocab_size", type=_vocab_arg, help="BPE vocabulary, or 'alphabet'")
    p.add_argument("--n-cases", dest="n_cases", type=int, help="random parameter draws for reversal invariance")
    p.add_argument("--perm-cases", dest="perm_cases", type=int, help="random cases for permutation equivariance")
    p.add_argument("--no-flip", dest="flip", action="store_const", const=False,
                   help="disable the position flip (negative control for learned_absolute)")
    p.add_argument("--workers", type=int, help="threads for independent cases")
    p.set_defaults(func=cmd_check_invariance)

    p = sub.add_parser("tokenizer-stability", help="BPE stability under string reversal")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab-size", dest="vocab_size", type=_vocab_arg)
    p.add_argument("--max-examples", dest="max_examples", type=int)
    p.set_defaults(func=cmd_tokenizer_stability)

    p = sub.add_parser("divergence", help="entropy rate and time-reversal divergence")
    _common(p)
    p.add_argument("--chain", help="JSON {states, transition}")
    p.add_argument("--corpus")
    p.add_argument("--order", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="add-lambda smoothing (default 0.5)")
    p.add_argument("--vocab-size", dest="vocab_size", type=_vocab_arg, help="BPE vocabulary (default: characters)")
    p.add_argument("--max-n", dest="max_n", type=int, help="largest path length for the brute-force table")
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("matched-train", help="matched and independent training runs on D and T(D)")
    _common(p)
    _model_flags(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab-size", dest="vocab_size", type=_vocab_arg)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", action="append", choices=("sgd", "adam"))
    p.add_argument("--sgd-lr", dest="sgd_lr", type=float)
    p.add_argument("--adam-lr", dest="adam_lr", type=float)
    p.add_argument("--independent", action="store_const", const=True,
                   help="also compare independently seeded forward/reversed runs")
    p.add_argument("--seeds", type=int)
    p.add_argument("--independent-steps", dest="independent_steps", type=int)
    p.set_defaults(func=cmd_matched_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"revlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, TokenizerError, ChainError, ValueError) as exc:
        print(f"revlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"revlab: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
