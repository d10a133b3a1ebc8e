"""Experiment grid: zero-shot, centralized, per-client centralized and federated runs.

A run trains whatever its mode calls for, evaluates every produced model on
every client test set plus the mixed set, and writes checkpoints and a
CSV/JSON report into the output directory.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .adapters import AdapterSet, base_to_bytes, init_adapters, save
from .client import ClientState, TrainHyper, client_update, steps_per_epoch
from .corpus import DEFAULT_SIZES, InstructionExample, generate_clients, load_jsonl
from .errors import ConfigError
from .metrics import SMOOTHING_NOTE, TOKEN_UNITS, MetricReport, evaluate
from .model import BaseModel, ModelConfig, TokenizedExample, init_base_model, tokenize_example
from .server import FedConfig, run_training

log = logging.getLogger(__name__)

MODES = ("zero_shot", "center", "center_client", "fed_base", "fed_cl")
REPORT_COLUMNS = ("R-1", "R-2", "R-L", "B-4", "B-N", "PPL")
_SCORE_FIELDS = ("rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu4", "bleuN")


@dataclass
class CorpusSource:
    """Synthetic corpora from ``(seed, sizes)``, or JSONL files per client."""

    seed: int = 0
    sizes: tuple[int, ...] = DEFAULT_SIZES
    train: tuple[str, ...] = ()
    test: tuple[str, ...] = ()
    mixed_test: str | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.train, self.test = tuple(self.train), tuple(self.test)
        if self.train or self.test:
            if len(self.train) != len(self.test) or not self.train:
                raise ConfigError("corpus.train and corpus.test need one path per client")
        elif any(s < 10 for s in self.sizes):
            raise ConfigError("synthetic corpus sizes must be >= 10")

    @property
    def n_clients(self) -> int:
        return len(self.train) if self.train else len(self.sizes)


@dataclass
class EvalOptions:
    generate: bool = True
    max_gen_examples: int | None = 20
    token_unit: str = "byte"

    def __post_init__(self):
        if self.token_unit not in TOKEN_UNITS:
            raise ConfigError(f"eval.token_unit must be one of {TOKEN_UNITS}")
        if self.max_gen_examples is not None and self.max_gen_examples < 1:
            raise ConfigError("eval.max_gen_examples must be >= 1")


@dataclass
class ExperimentConfig:
    mode: str = "fed_cl"
    fed: FedConfig = field(default_factory=FedConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSource = field(default_factory=CorpusSource)
    eval: EvalOptions = field(default_factory=EvalOptions)
    client_index: int | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        n = self.corpus.n_clients
        if self.mode == "center_client":
            if self.client_index is None:
                raise ConfigError("mode center_client requires client_index")
            if not 1 <= self.client_index <= n:
                raise ConfigError(f"client_index must be in 1..{n}")
        if self.mode in ("fed_base", "fed_cl") and n < 2:
            raise ConfigError("federated modes require at least 2 clients")
        if not 1 <= self.fed.rank < self.model.d_model:
            raise ConfigError(f"rank must satisfy 1 <= rank < d_model={self.model.d_model}")

    @property
    def hyper(self) -> TrainHyper:
        return self.fed.hyper

    @property
    def seed(self) -> int:
        return self.fed.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One seed drives the corpus, the base weights and client training."""
        return dataclasses.replace(
            self,
            fed=dataclasses.replace(self.fed, seed=seed),
            model=dataclasses.replace(self.model, seed=seed),
            corpus=dataclasses.replace(self.corpus, seed=seed),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fed"]["hyper"]["betas"] = list(d["fed"]["hyper"]["betas"])
        return d

    def config_hash(self) -> int:
        """48-bit digest of everything that determines trained weights.

        Mode, output directory and evaluation options are left out so that
        runs differing only in those share checkpoints (fed_base and fed_cl
        agree bit-for-bit at T=1).
        """
        d = self.to_dict()
        for k in ("mode", "out_dir", "eval", "client_index"):
            d.pop(k)
        d["fed"].pop("mode")
        d["fed"].pop("threads")
        blob = json.dumps(d, sort_keys=True).encode()
        return int(hashlib.sha256(blob).hexdigest()[:12], 16)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    matrix: list[MetricReport]
    adapters: dict[str, AdapterSet | None]
    optimizer_steps: int
    round_log: list[dict] = field(default_factory=list)
    uplink_bytes: list[int] = field(default_factory=list)
    base_bytes: int = 0
    files: list[Path] = field(default_factory=list)

    def cell(self, model_id: str, corpus_id: str) -> MetricReport:
        for r in self.matrix:
            if r.model_id == model_id and r.corpus_id == corpus_id:
                return r
        raise KeyError((model_id, corpus_id))


@dataclass
class LoadedCorpora:
    train: list[list[TokenizedExample]]
    test: list[list[TokenizedExample]]
    mixed: list[TokenizedExample]


def _tok(examples: Sequence[InstructionExample], max_context: int) -> list[TokenizedExample]:
    return [tokenize_example(e.instruction_input, e.instruction_output, max_context) for e in examples]


def load_corpora(source: CorpusSource, max_context: int) -> LoadedCorpora:
    if source.train:
        train = [load_jsonl(p) for p in source.train]
        test = [load_jsonl(p) for p in source.test]
        if source.mixed_test:
            mixed = load_jsonl(source.mixed_test)
        else:
            m = min(len(t) for t in test)
            mixed = [t[i] for i in range(m) for t in test]
    else:
        corpora = generate_clients(source.seed, source.sizes, max_context)
        train = [c.train for c in corpora.clients]
        test = [c.test for c in corpora.clients]
        mixed = corpora.mixed_test
    for i, (tr, te) in enumerate(zip(train, test), start=1):
        if not tr or not te:
            raise ConfigError(f"client {i} has an empty train or test split")
    return LoadedCorpora(
        [_tok(t, max_context) for t in train],
        [_tok(t, max_context) for t in test],
        _tok(mixed, max_context),
    )


def fed_step_count(sizes: Sequence[int], rounds: int, hyper: TrainHyper) -> int:
    """Total optimizer steps, summed over clients, of a federated run."""
    return rounds * hyper.epochs * sum(steps_per_epoch(n, hyper) for n in sizes)


def _train_single(model, data, config: ExperimentConfig, client_id: int, max_steps: int | None):
    hyper = dataclasses.replace(config.hyper, epochs=config.hyper.epochs * config.fed.rounds)
    start = init_adapters(model.config, config.fed.rank, seed=config.seed)
    start.round = 0
    state = ClientState(client_id=client_id, dataset=data, seed=config.seed)
    trained = client_update(model, state, start, 1, hyper, use_cl=False, max_steps=max_steps)
    return trained.copy(round=1), state.log


def run_experiment(config: ExperimentConfig, train_only: bool = False) -> ExperimentResult:
    """Train per ``config.mode`` and evaluate every model on every test set.

    ``train_only`` skips evaluation and reporting (used by timing-sensitive
    callers that score the adapters themselves).
    """
    data = load_corpora(config.corpus, config.model.max_context)
    model = init_base_model(config.model)
    chash = config.config_hash()
    ckpt_meta = {"config_hash": chash, "seed": config.seed}
    run_meta = {"config_hash": f"{chash:012x}", "seed": config.seed, "mode": config.mode}
    out = Path(config.out_dir) if config.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    models: dict[str, AdapterSet | None] = {}
    round_log: list[dict] = []
    uplink: list[int] = []
    steps = 0
    sizes = [len(d) for d in data.train]

    if config.mode == "zero_shot":
        models["zero_shot"] = None
    elif config.mode in ("center", "center_client"):
        if config.mode == "center":
            pooled = [ex for d in data.train for ex in d]
            target = fed_step_count(sizes, config.fed.rounds, config.hyper)
            adapters, tlog = _train_single(model, pooled, config, 0, target)
            name = "center"
        else:
            i = config.client_index
            adapters, tlog = _train_single(model, data.train[i - 1], config, i, None)
            name = f"center_client{i}"
        steps = len(tlog)
        models[name] = adapters
        if out is not None:
            save(adapters, out / f"{name}.fjla", run_meta=ckpt_meta)
            files.append(out / f"{name}.fjla")
            _write_jsonl(out / "train_log.jsonl", [{**run_meta, **r} for r in tlog])
            files.append(out / "train_log.jsonl")
    else:
        fed = dataclasses.replace(config.fed, mode="base" if config.mode == "fed_base" else "cl")
        result = run_training(model, data.train, fed, out_dir=out, run_meta=run_meta, checkpoint_meta=ckpt_meta)
        steps = len(result.client_log)
        round_log = result.round_log
        uplink = [rs.uplink_bytes for rs in result.rounds]
        models[f"{config.mode}_global"] = result.global_adapters
        for cid, adapters in sorted(result.client_adapters.items()):
            models[f"{config.mode}_client{cid}"] = adapters
        if out is not None:
            files += [out / f"global_round{t}.fjla" for t in range(1, fed.rounds + 1)]
            files += [out / f"client{cid}_final.fjla" for cid in sorted(result.client_adapters)]
            files += [out / "round_log.jsonl", out / "train_log.jsonl"]

    base_blob = base_to_bytes(model, run_meta=ckpt_meta)
    if out is not None and config.mode != "zero_shot":
        (out / "base.fjla").write_bytes(base_blob)
        files.append(out / "base.fjla")

    result = ExperimentResult(config, [], models, steps, round_log, uplink, len(base_blob), files)
    if train_only:
        return result

    tests = [(f"client{i}_test", t) for i, t in enumerate(data.test, start=1)]
    tests.append(("mixed_test", data.mixed))
    ev = config.eval
    for model_id, adapters in models.items():
        for corpus_id, examples in tests:
            result.matrix.append(
                evaluate(model, adapters, examples, model_id, corpus_id,
                         generate=ev.generate, max_gen_examples=ev.max_gen_examples, unit=ev.token_unit)
            )
    if out is not None:
        header = {**run_meta, "smoothing": SMOOTHING_NOTE, "token_unit": ev.token_unit,
                  "config": config.to_dict()}
        result.files += emit_report(result.matrix, out, header)
    return result


# ---------------------------------------------------------------- reports


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def report_rows(matrix: Sequence[MetricReport]) -> list[dict]:
    rows = []
    for r in matrix:
        row = {"model": r.model_id, "test_set": r.corpus_id}
        for col, f in zip(REPORT_COLUMNS, _SCORE_FIELDS):
            v = getattr(r, f)
            row[col] = None if v is None else round(100 * v, 2)
        row["PPL"] = round(r.perplexity, 2)
        rows.append(row)
    return rows


def render_csv(matrix: Sequence[MetricReport], header: dict | None = None) -> str:
    buf = io.StringIO()
    for key in ("config_hash", "seed", "mode", "smoothing"):
        if header and key in header:
            buf.write(f"# {key}: {header[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("model", "test_set") + REPORT_COLUMNS)
    for row in report_rows(matrix):
        writer.writerow([row["model"], row["test_set"]] + [_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def emit_report(matrix: Sequence[MetricReport], out_dir: str | Path, header: dict | None = None) -> list[Path]:
    """Write ``report.csv`` and ``report.json``; ROUGE/BLEU are scaled by 100.

    Rows keep the order of ``matrix``; output bytes depend only on the inputs.
    """
    if not matrix:
        raise ConfigError("cannot emit an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "report.csv", out / "report.json"
    csv_path.write_text(render_csv(matrix, header), encoding="utf-8")
    doc = {
        "meta": header or {},
        "columns": ["model", "test_set", *REPORT_COLUMNS],
        "rows": report_rows(matrix),
        "raw": [r.to_dict() for r in matrix],
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def base_model_for(config: ExperimentConfig) -> BaseModel:
    return init_base_model(config.model)
