"""Command-line entry point: ``fedlora train | eval | gen-corpus``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure during
training, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import tomli

from .adapters import load, load_base
from .client import TrainHyper
from .corpus import DEFAULT_SIZES, generate_clients, load_jsonl, write_corpora
from .errors import ConfigError, CorpusParseError, CorpusSchemaError, DecodeError, FedLoraError, NumericError, RoundAbortedError
from .experiment import CorpusSource, EvalOptions, ExperimentConfig, MODES, render_csv, run_experiment
from .metrics import TOKEN_UNITS, evaluate
from .model import ModelConfig, tokenize_example
from .server import FedConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_SECTIONS = {
    "experiment": {"mode", "seed", "client_index", "out"},
    "fed": {f.name for f in dataclasses.fields(FedConfig)} - {"hyper", "mode", "seed"},
    "train": {f.name for f in dataclasses.fields(TrainHyper)},
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"},
    "corpus": {f.name for f in dataclasses.fields(CorpusSource)} - {"seed"},
    "eval": {f.name for f in dataclasses.fields(EvalOptions)},
}


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from the parsed TOML sections.

    ``experiment.seed`` drives corpus generation, base initialization and
    client training alike. Relative corpus and output paths resolve against
    ``base_dir``; a ``--out`` flag is taken as given.
    """
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    exp = dict(doc.get("experiment", {}))
    corpus = dict(doc.get("corpus", {}))
    if base_dir is not None:
        if exp.get("out"):
            exp["out"] = str(base_dir / exp["out"])
        for key in ("train", "test"):
            corpus[key] = [str(base_dir / p) for p in corpus.get(key, [])]
        if corpus.get("mixed_test"):
            corpus["mixed_test"] = str(base_dir / corpus["mixed_test"])
    try:
        cfg = ExperimentConfig(
            mode=exp.get("mode", "fed_cl"),
            fed=FedConfig(hyper=TrainHyper(**doc.get("train", {})), **doc.get("fed", {})),
            model=ModelConfig(**doc.get("model", {})),
            corpus=CorpusSource(**corpus),
            eval=EvalOptions(**doc.get("eval", {})),
            client_index=exp.get("client_index"),
            out_dir=exp.get("out"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.with_seed(int(exp.get("seed", 0)))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, base_dir=path.parent)


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must look like 800,220,100, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment mode from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--client-index", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="score an adapter checkpoint on a JSONL test set")
    p.add_argument("--model", required=True, help="adapter checkpoint (.fjla)")
    p.add_argument("--test", required=True, help="JSONL test set")
    p.add_argument("--base", help="base checkpoint; defaults to base.fjla beside --model")
    p.add_argument("--unit", choices=TOKEN_UNITS, default="byte")
    p.add_argument("--max-gen", type=int, default=20)
    p.add_argument("--no-generate", action="store_true")

    p = sub.add_parser("gen-corpus", help="write the synthetic client corpora as JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=_parse_sizes, default=DEFAULT_SIZES)
    p.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.client_index is not None:
        overrides["client_index"] = args.client_index
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if cfg.out_dir is None:
        raise ConfigError("no output directory: pass --out or set experiment.out")
    result = run_experiment(cfg)
    sys.stdout.write(render_csv(result.matrix, {"config_hash": f"{cfg.config_hash():012x}",
                                                "seed": cfg.seed, "mode": cfg.mode}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    model_path = Path(args.model)
    base_path = Path(args.base) if args.base else model_path.parent / "base.fjla"
    base = load_base(base_path)
    adapters = load(model_path)
    if adapters.config_hash is not None and adapters.config_hash != base.config.hash():
        raise ConfigError("adapter checkpoint was trained against a different base model")
    examples = [
        tokenize_example(e.instruction_input, e.instruction_output, base.config.max_context)
        for e in load_jsonl(args.test)
    ]
    if not examples:
        raise ConfigError(f"{args.test} holds no examples")
    report = evaluate(base, adapters, examples, model_path.stem, Path(args.test).stem,
                      generate=not args.no_generate, max_gen_examples=args.max_gen, unit=args.unit)
    sys.stdout.write(render_csv([report]))
    return EXIT_OK


def _cmd_gen_corpus(args) -> int:
    corpora = generate_clients(args.seed, args.sizes)
    for path in write_corpora(corpora, args.out):
        print(path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"train": _cmd_train, "eval": _cmd_eval, "gen-corpus": _cmd_gen_corpus}[args.command]
    try:
        return handler(args)
    except (NumericError, RoundAbortedError) as exc:
        cause = exc.__cause__
        if isinstance(exc, RoundAbortedError) and not isinstance(cause, NumericError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG if isinstance(cause, (ConfigError, ValueError)) else EXIT_NUMERIC
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusParseError, CorpusSchemaError, DecodeError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, FedLoraError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
