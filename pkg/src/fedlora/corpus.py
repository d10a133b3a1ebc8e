"""Instruction corpora: JSONL ingestion and three synthetic client styles.

The synthetic styles stand in for heterogeneous institutions: a formal
court register (long facts, uppercase holdings), colloquial consultation
(terse questions, chatty lowercase advice) and step-marked reasoning (numbered
arithmetic steps). Each is a small template grammar driven by a seeded
generator; relative input and output lengths follow the real corpora
(inputs roughly 8 : 1 : 2, outputs roughly 1.4 : 1 : 1).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, CorpusParseError, CorpusSchemaError

FIELDS = ("instruction_input", "instruction_output")


@dataclass(frozen=True)
class InstructionExample:
    instruction_input: str
    instruction_output: str

    def __post_init__(self):
        if not self.instruction_output:
            raise ContractError("instruction_output must be nonempty")


def load_jsonl(path: str | PathLike) -> list[InstructionExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, line_no, exc.msg) from None
            if not isinstance(rec, dict):
                raise CorpusParseError(path, line_no, "expected a JSON object")
            for f in FIELDS:
                if not isinstance(rec.get(f), str):
                    raise CorpusSchemaError(path, line_no, f)
            if not rec["instruction_output"]:
                raise CorpusSchemaError(path, line_no, "instruction_output")
            out.append(InstructionExample(rec["instruction_input"], rec["instruction_output"]))
    return out


def save_jsonl(examples: Iterable[InstructionExample], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"instruction_input": ex.instruction_input, "instruction_output": ex.instruction_output}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- styles

_NAMES = ["Zhang", "Wang", "Li", "Zhao", "Chen", "Liu", "Yang", "Huang", "Zhou", "Wu", "Xu", "Sun"]
_CITIES = ["Hefei", "Nanjing", "Suzhou", "Wuhan", "Jinan", "Xiamen", "Harbin", "Kunming"]
_MONTHS = ["January", "February", "March", "April", "May", "June", "July",
           "August", "September", "October", "November", "December"]


def _court(rng: np.random.Generator) -> tuple[str, str]:
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    name = pick(_NAMES)
    acts = [
        ("stole", ["a Vehicle", "Cash", "a Phone", "two Bicycles"], "Theft"),
        ("forged", ["a Contract", "an Invoice", "a Seal"], "Forgery"),
        ("embezzled", ["Company Funds", "Public Funds"], "Embezzlement"),
        ("robbed", ["a Courier", "a Shop Owner", "a Passerby"], "Robbery"),
        ("defrauded", ["an Investor", "a Bank", "an Elderly Victim"], "Fraud"),
    ]
    verb, objs, crime = acts[rng.integers(len(acts))]
    harm = pick(["Loss", "Injury", "Disorder", "Harm"])
    x = (
        f"Facts: On {pick(_MONTHS)} {rng.integers(1, 29)}, Defendant {name} {verb} "
        f"{pick(objs)} in {pick(_CITIES)}, causing {harm}."
    )
    months = int(rng.integers(6, 37))
    clause = pick(["IS GUILTY OF", "COMMITTED", "SHALL BEAR LIABILITY FOR"])
    y = f"HELD: {name.upper()} {clause} {crime.upper()}; TERM OF {months} MONTHS."
    return x, y


def _consult(rng: np.random.Generator) -> tuple[str, str]:
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    who = pick(["landlord", "boss", "ex", "neighbor", "seller"])
    issue = pick(["wont pay", "kept deposit", "ghosted me", "took my stuff"])
    x = f"{who} {issue}??"
    tips = ["text them", "keep receipts", "ask in writing", "call the hotline",
            "get a lawyer", "try small claims", "stay calm", "take pics"]
    a, b = rng.choice(len(tips), size=2, replace=False)
    y = f"{pick(['ok', 'hey', 'omg'])} so {tips[a]}, then {tips[b]}!!"
    return x, y


def _reasoning(rng: np.random.Generator) -> tuple[str, str]:
    kind = int(rng.integers(3))
    a = int(rng.integers(20, 100))
    b = int(rng.integers(1, a))
    if kind == 0:
        x = f"Q: Owes {a}, repays {b}. Left?"
        y = f"1){a};2)-{b};3){a}-{b}={a - b};4){a - b}+{b}={a};=>{a - b}"
    elif kind == 1:
        x = f"Q: Term {a}d, served {b}d. Left?"
        y = f"1){a}d;2)-{b}d;3){a}-{b}={a - b}d;4){a - b}+{b}={a};=>{a - b}d"
    else:
        c = int(rng.integers(2, 10))
        x = f"Q: {c} heirs split {a * c}. Each?"
        y = f"1){a * c};2)/{c};3){a * c}/{c}={a};4){a}*{c}={a * c};=>{a}"
    return x, y


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    name: str
    generate: Callable[[np.random.Generator], tuple[str, str]]


STYLES = (
    StyleSpec(1, "court_view", _court),
    StyleSpec(2, "consultation", _consult),
    StyleSpec(3, "reasoning", _reasoning),
)

DEFAULT_SIZES = (800, 220, 100)


@dataclass
class ClientCorpus:
    style: str
    train: list[InstructionExample]
    test: list[InstructionExample]


@dataclass
class SyntheticCorpora:
    clients: list[ClientCorpus]
    mixed_test: list[InstructionExample]


def _fits(x: str, y: str, max_context: int) -> bool:
    # BOS + input + output + EOS
    return len(x.encode()) + len(y.encode()) + 2 <= max_context


def generate_style(style: StyleSpec, seed: int, n: int, max_context: int = 128) -> list[InstructionExample]:
    rng = np.random.default_rng([seed, style.style_id])
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 20 * n + 100:
            raise ContractError(f"style {style.name!r} rarely fits max_context={max_context}")
        x, y = style.generate(rng)
        if _fits(x, y, max_context):
            out.append(InstructionExample(x, y))
    return out


def split_train_test(examples: Sequence[InstructionExample], test_fraction: float = 0.1):
    n_test = max(1, int(round(len(examples) * test_fraction)))
    return list(examples[:-n_test]), list(examples[-n_test:])


def generate_clients(
    seed: int, sizes: Sequence[int] = DEFAULT_SIZES, max_context: int = 128
) -> SyntheticCorpora:
    """Three style-shifted client corpora, 90/10 split, plus a balanced mixed test set.

    The mixed set interleaves the first ``m`` test examples of every client,
    ``m`` being the smallest test split, so each style carries equal weight.
    """
    if len(sizes) != len(STYLES):
        raise ContractError(f"expected {len(STYLES)} sizes, got {len(sizes)}")
    if any(s < 10 for s in sizes):
        raise ContractError("every client needs at least 10 examples")
    clients = []
    for style, n in zip(STYLES, sizes):
        train, test = split_train_test(generate_style(style, seed, n, max_context))
        clients.append(ClientCorpus(style.name, train, test))
    m = min(len(c.test) for c in clients)
    mixed = [c.test[i] for i in range(m) for c in clients]
    return SyntheticCorpora(clients, mixed)


def write_corpora(corpora: SyntheticCorpora, out_dir: str | PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, c in enumerate(corpora.clients, start=1):
        for split in ("train", "test"):
            path = out / f"client{i}_{split}.jsonl"
            save_jsonl(getattr(c, split), path)
            written.append(path)
    path = out / "mixed_test.jsonl"
    save_jsonl(corpora.mixed_test, path)
    written.append(path)
    return written


# ---------------------------------------------------------------- statistics


def unigram_distribution(examples: Iterable[InstructionExample]) -> np.ndarray:
    """Byte frequency over input and output text, as a length-256 probability vector."""
    counts = Counter()
    for ex in examples:
        counts.update(ex.instruction_input.encode())
        counts.update(ex.instruction_output.encode())
    vec = np.zeros(256)
    for b, c in counts.items():
        vec[b] = c
    total = vec.sum()
    return vec / total if total else vec


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats."""
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)
