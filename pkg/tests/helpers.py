"""Shared generators, independent oracles and the acceptance-line recorder."""

import math
from functools import lru_cache

import numpy as np

from fedlora.adapters import AdapterPair, AdapterSet
from fedlora.autodiff import Tensor

# tensors reject inf/nan, so awkward values stop at signed zeros, subnormals and huge magnitudes
_SPECIALS = np.array([0.0, -0.0, 1e-310, -1e-310, 1e150, -1e150])
_NAME_CHARS = "abcxyz._0123é漢"


def random_adapter_set(rng: np.random.Generator) -> AdapterSet:
    """Arbitrary shapes, names, metadata and awkward float values."""
    n_sites = int(rng.integers(0, 5))
    rank = int(rng.integers(1, 4))
    sites = {}
    while len(sites) < n_sites:
        name = "".join(rng.choice(list(_NAME_CHARS), size=int(rng.integers(1, 12))))
        d_in, d_out = (int(v) for v in rng.integers(1, 7, size=2))
        A, B = rng.normal(size=(rank, d_in)), rng.normal(size=(d_out, rank))
        for arr in (A, B):
            hit = rng.random(arr.shape) < 0.1
            arr[hit] = rng.choice(_SPECIALS, size=int(hit.sum()))
        scale = 1.0 if rng.random() < 0.5 else float(rng.uniform(0.1, 4.0))
        sites[name] = AdapterPair(Tensor(A), Tensor(B), scale)

    def maybe(hi):
        return None if rng.random() < 0.3 else int(rng.integers(0, hi))

    return AdapterSet(
        sites,
        rank=rank if sites else maybe(8),
        config_hash=maybe(2**48),
        client_id=maybe(100),
        round=maybe(50),
    )


def flip_byte(blob: bytes, rng: np.random.Generator) -> bytes:
    pos = int(rng.integers(0, len(blob)))
    out = bytearray(blob)
    out[pos] ^= int(rng.integers(1, 256))
    return bytes(out)


def lcs_oracle(a, b) -> int:
    """Recursive memoized longest common subsequence."""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def bleu_oracle(cand, ref, k) -> float:
    """Direct counting: walk every candidate n-gram and clip by occurrences left in the reference."""
    if not cand:
        return 0.0
    product = 1.0
    for n in range(1, k + 1):
        c_grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
        r_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
        hits = 0
        for g in c_grams:
            if g in r_grams:
                r_grams.remove(g)
                hits += 1
        num, den = hits, len(c_grams)
        if n >= 2:
            num, den = num + 1, den + 1
        if num == 0:
            return 0.0
        product *= num / den
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * product ** (1.0 / k)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Log one acceptance verdict; the terminal summary prints them all."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def trend_seed(seed: int) -> dict:
    """Default desk profile at one seed: the runs criterion 9 and 10 inspect.

    Returns mixed and per-client perplexities for the three single-client
    baselines and both federated globals, plus byte accounting from fed_base.
    """
    import dataclasses
    import resource

    from fedlora.adapters import to_bytes
    from fedlora.experiment import EvalOptions, ExperimentConfig, run_experiment

    def cpu() -> float:
        u = resource.getrusage(resource.RUSAGE_SELF)
        return u.ru_utime + u.ru_stime

    start = cpu()
    base = ExperimentConfig(eval=EvalOptions(generate=False)).with_seed(seed)
    runs = [("center_client", 1), ("center_client", 2), ("center_client", 3), ("fed_base", None), ("fed_cl", None)]
    ppl: dict[str, dict[str, float]] = {}
    out = {"seed": seed}
    for mode, idx in runs:
        res = run_experiment(dataclasses.replace(base, mode=mode, client_index=idx))
        for rep in res.matrix:
            if rep.model_id.startswith("center") or rep.model_id.endswith("_global"):
                ppl.setdefault(rep.model_id, {})[rep.corpus_id] = rep.perplexity
        if mode == "fed_base":
            out["uplink_bytes"] = res.uplink_bytes
            out["adapter_bytes"] = {cid: len(to_bytes(a)) for cid, a in enumerate(
                (res.adapters[f"fed_base_client{i}"] for i in (1, 2, 3)), start=1)}
            out["base_bytes"] = res.base_bytes
    out["ppl"] = ppl
    out["cpu_seconds"] = cpu() - start
    return out
