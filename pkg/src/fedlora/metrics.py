"""Text-generation metrics (ROUGE-1/2/L F1, BLEU-4, BLEU-N) and perplexity.

All sequence metrics work on arbitrary hashable token sequences with a single
reference. BLEU uses +1 smoothing on the numerator and denominator of the
n >= 2 precisions unless ``smooth=False``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import EOS, BaseModel, TokenizedExample, collate, detokenize, generate_greedy, token_nll

SMOOTHING_NOTE = "BLEU n>=2 precisions use +1 smoothing on numerator and denominator"
TOKEN_UNITS = ("byte", "whitespace")

Seq = Sequence[Hashable]


def ngrams(seq: Seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n_f1(candidate: Seq, reference: Seq, n: int) -> float:
    if n < 1:
        raise ContractError("n must be >= 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    total_c, total_r = sum(cand.values()), sum(ref.values())
    if total_c == 0 or total_r == 0:
        return 0.0
    overlap = sum((cand & ref).values())
    return _f1(overlap / total_c, overlap / total_r)


def lcs_length(a: Seq, b: Seq) -> int:
    """Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Seq, reference: Seq) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    return _f1(lcs / len(candidate), lcs / len(reference))


def modified_precisions(candidate: Seq, reference: Seq, k: int, smooth: bool = True) -> list[float]:
    out = []
    for n in range(1, k + 1):
        cand, ref = ngrams(candidate, n), ngrams(reference, n)
        num, den = sum((cand & ref).values()), sum(cand.values())
        if smooth and n >= 2:
            num, den = num + 1, den + 1
        out.append(num / den if den else 0.0)
    return out


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / cand_len))


def bleu_k(candidate: Seq, reference: Seq, k: int, smooth: bool = True) -> float:
    """Geometric mean of the first ``k`` modified precisions times the brevity penalty."""
    if not 1 <= k <= 4:
        raise ContractError("k must be in 1..4")
    if len(candidate) == 0:
        return 0.0
    precisions = modified_precisions(candidate, reference, k, smooth)
    if min(precisions) == 0.0:
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / k
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_mean)


def bleu_n_avg(candidate: Seq, reference: Seq, smooth: bool = True) -> float:
    return sum(bleu_k(candidate, reference, k, smooth) for k in range(1, 5)) / 4


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    """Scores for one (model, test corpus) cell.

    ROUGE/BLEU are stored in [0, 1] and may be ``None`` when generation
    metrics were not requested; perplexity is always present.
    """

    model_id: str
    corpus_id: str
    perplexity: float
    rouge1_f1: float | None = None
    rouge2_f1: float | None = None
    rougeL_f1: float | None = None
    bleu4: float | None = None
    bleuN: float | None = None

    def __post_init__(self):
        for name in ("rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu4", "bleuN"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if not self.perplexity >= 1.0:
            raise ContractError(f"perplexity {self.perplexity} below 1")

    def to_dict(self) -> dict:
        return asdict(self)


def split_tokens(ids: Sequence[int], unit: str = "byte") -> list:
    """Metric tokens for a model id sequence: raw byte ids, or whitespace words."""
    if unit == "byte":
        return [i for i in ids if 0 <= i < 256]
    if unit == "whitespace":
        return detokenize(ids).decode("utf-8", errors="replace").split()
    raise ContractError(f"unknown token unit {unit!r}; expected one of {TOKEN_UNITS}")


def perplexity(
    model: BaseModel, adapters, examples: Sequence[TokenizedExample], batch_size: int = 16
) -> float:
    """``exp`` of the mean output-token negative log-likelihood over the whole set."""
    if not examples:
        raise ContractError("test set is empty")
    total = 0.0
    count = 0.0
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            ids, targets, weights = collate(examples[i : i + batch_size])
            wsum = float(weights.sum())
            total += token_nll(model, adapters, ids, targets, weights).item() * wsum
            count += wsum
    return math.exp(total / count)


def generation_scores(
    model: BaseModel,
    adapters,
    examples: Sequence[TokenizedExample],
    max_examples: int | None = None,
    unit: str = "byte",
    smooth: bool = True,
) -> dict[str, float]:
    """Greedy-decode each prompt and average per-example ROUGE/BLEU in example order."""
    chosen = list(examples[:max_examples] if max_examples is not None else examples)
    if not chosen:
        raise ContractError("no examples to generate from")
    sums = dict.fromkeys(("rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu4", "bleuN"), 0.0)
    for ex in chosen:
        prompt = ex.x_tokens
        budget = max(1, min(len(ex.y_tokens) * 2, model.config.max_context))
        out = generate_greedy(model, adapters, prompt, budget, eos_id=EOS)[len(prompt) :]
        cand = split_tokens(out, unit)
        ref = split_tokens(ex.y_tokens, unit)
        sums["rouge1_f1"] += rouge_n_f1(cand, ref, 1)
        sums["rouge2_f1"] += rouge_n_f1(cand, ref, 2)
        sums["rougeL_f1"] += rouge_l_f1(cand, ref)
        sums["bleu4"] += bleu_k(cand, ref, 4, smooth)
        sums["bleuN"] += bleu_n_avg(cand, ref, smooth)
    return {k: v / len(chosen) for k, v in sums.items()}


def evaluate(
    model: BaseModel,
    adapters,
    examples: Sequence[TokenizedExample],
    model_id: str,
    corpus_id: str,
    generate: bool = True,
    max_gen_examples: int | None = None,
    unit: str = "byte",
) -> MetricReport:
    ppl = perplexity(model, adapters, examples)
    gen = generation_scores(model, adapters, examples, max_gen_examples, unit) if generate else {}
    return MetricReport(model_id, corpus_id, ppl, **gen)


def mean_report(reports: Sequence[MetricReport], model_id: str, corpus_id: str) -> MetricReport:
    """Field-wise mean, used to summarize repeated runs."""
    fields = ("perplexity", "rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu4", "bleuN")
    vals = {}
    for f in fields:
        xs = [getattr(r, f) for r in reports]
        vals[f] = None if any(x is None for x in xs) else float(np.mean(xs))
    return MetricReport(model_id, corpus_id, **vals)
