"""Server side of the federated protocol: distribute, collect, aggregate.

Every message between server and clients is an FJLA byte string, even
in-process, so the wire format is exercised each round and the byte counts
reported in the round log are real.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterSet, flatten, from_bytes, init_adapters, save, to_bytes, unflatten
from .client import ClientState, TrainHyper, client_update
from .errors import ConfigError, ContractError, RoundAbortedError
from .model import BaseModel, TokenizedExample

log = logging.getLogger(__name__)

MODES = ("base", "cl")


@dataclass
class FedConfig:
    rounds: int = 5
    rank: int = 4
    mode: str = "cl"
    seed: int = 0
    hyper: TrainHyper = field(default_factory=TrainHyper)
    threads: int | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")


@dataclass
class RoundState:
    t: int
    received: dict[int, AdapterSet]
    global_adapters: AdapterSet
    bytes_up: dict[int, int]
    bytes_down: dict[int, int]
    seconds: float = 0.0

    @property
    def uplink_bytes(self) -> int:
        return sum(self.bytes_up.values())


@dataclass
class TrainingResult:
    global_adapters: AdapterSet
    client_adapters: dict[int, AdapterSet]
    rounds: list[RoundState]
    round_log: list[dict]
    client_log: list[dict]


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ContractError("no client sizes given")
    if (sizes < 1).any():
        raise ContractError("every client dataset size must be >= 1")
    return sizes / sizes.sum()


def aggregate(received: Sequence[tuple[AdapterSet, int]]) -> AdapterSet:
    """Dataset-size weighted average of client adapters.

    Summation runs in client-id order (input order for anonymous sets), so the
    result is bit-reproducible whatever order uploads arrived in.
    """
    if not received:
        raise ContractError("cannot aggregate an empty list")
    items = sorted(
        received, key=lambda pair: -1 if pair[0].client_id is None else pair[0].client_id
    )
    weights = aggregation_weights([size for _, size in items])
    first = items[0][0]
    n = first.num_params()
    acc = np.zeros(n)
    for (adapters, _), w in zip(items, weights):
        if adapters.num_params() != n or adapters.site_names() != first.site_names():
            raise ContractError("client adapter sets have different layouts")
        acc += w * flatten(adapters)
    rounds = [a.round for a, _ in items if a.round is not None]
    return unflatten(acc, first.copy(client_id=None, round=(max(rounds) if rounds else 0) + 1))


def _thread_count(config: FedConfig, n_clients: int) -> int:
    cap = config.threads
    env = os.environ.get("FEDLORA_THREADS")
    if env:
        cap = int(env) if cap is None else min(cap, int(env))
    if cap is None:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_clients))


def run_round(
    model: BaseModel,
    global_adapters: AdapterSet,
    clients: Sequence[ClientState],
    t: int,
    config: FedConfig,
) -> RoundState:
    """Distribute the global adapters, train every client, aggregate the uploads."""
    if t < 1 or t > config.rounds:
        raise ContractError(f"round {t} outside 1..{config.rounds}")
    start = time.perf_counter()
    down = to_bytes(global_adapters)
    use_cl = config.mode == "cl"

    def work(client: ClientState) -> bytes:
        received = from_bytes(down)
        updated = client_update(model, client, received, t, config.hyper, use_cl=use_cl)
        return to_bytes(updated)

    ordered = sorted(clients, key=lambda c: c.client_id)
    with ThreadPoolExecutor(max_workers=_thread_count(config, len(ordered))) as pool:
        futures = [pool.submit(work, c) for c in ordered]
        uploads = {}
        for c, fut in zip(ordered, futures):
            try:
                uploads[c.client_id] = fut.result()
            except Exception as exc:
                for other in futures:
                    other.cancel()
                raise RoundAbortedError(f"round {t}: client {c.client_id} failed: {exc}") from exc

    received = {cid: from_bytes(blob) for cid, blob in uploads.items()}
    new_global = aggregate([(received[c.client_id], len(c.dataset)) for c in ordered])
    return RoundState(
        t=t,
        received=received,
        global_adapters=new_global,
        bytes_up={cid: len(blob) for cid, blob in uploads.items()},
        bytes_down={c.client_id: len(down) for c in ordered},
        seconds=time.perf_counter() - start,
    )


def run_training(
    model: BaseModel,
    datasets: Sequence[Sequence[TokenizedExample]],
    config: FedConfig,
    out_dir: str | Path | None = None,
    run_meta: dict | None = None,
    checkpoint_meta: dict[str, float] | None = None,
) -> TrainingResult:
    """Full training loop; client ids are 1..N in ``datasets`` order.

    With ``out_dir`` set, writes ``global_round{t}.fjla`` per round,
    ``client{i}_final.fjla`` per client, and the JSON-lines round and
    training logs. All ``run_meta`` entries are added to every log row;
    ``checkpoint_meta`` (default: the numeric ``run_meta`` entries) is stamped
    into every saved checkpoint.
    """
    run_meta = dict(run_meta or {})
    if checkpoint_meta is None:
        checkpoint_meta = {
            k: v for k, v in run_meta.items() if isinstance(v, (int, float)) and not isinstance(v, bool)
        }
    ckpt_meta = dict(checkpoint_meta)
    if not datasets:
        raise ConfigError("at least one client is required")
    clients = [
        ClientState(client_id=i + 1, dataset=list(d), seed=config.seed) for i, d in enumerate(datasets)
    ]
    for c in clients:
        if not c.dataset:
            raise ConfigError(f"client {c.client_id} has no training data")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    global_adapters = init_adapters(model.config, config.rank, seed=config.seed)
    global_adapters.round = 0
    rounds: list[RoundState] = []
    round_log: list[dict] = []
    for t in range(1, config.rounds + 1):
        rs = run_round(model, global_adapters, clients, t, config)
        global_adapters = rs.global_adapters
        rounds.append(rs)
        for c in clients:
            entries = [e for e in c.log if e["round"] == t]
            round_log.append({
                "t": t,
                "client_id": c.client_id,
                "bytes_up": rs.bytes_up[c.client_id],
                "bytes_down": rs.bytes_down[c.client_id],
                "mean_loss": float(np.mean([e["loss"] for e in entries])),
                "mean_penalty": float(np.mean([e["cl_penalty"] for e in entries])),
            })
        log.info("round %d done in %.1fs, uplink %d bytes", t, rs.seconds, rs.uplink_bytes)
        if out is not None:
            save(global_adapters, out / f"global_round{t}.fjla", run_meta=ckpt_meta)

    finals = rounds[-1].received
    client_log = [e for c in clients for e in c.log]
    if out is not None:
        for cid, adapters in finals.items():
            save(adapters, out / f"client{cid}_final.fjla", run_meta=ckpt_meta)
        _write_jsonl(out / "round_log.jsonl", [{**run_meta, **r} for r in round_log])
        _write_jsonl(out / "train_log.jsonl", [{**run_meta, **r} for r in client_log])
    return TrainingResult(global_adapters, dict(finals), rounds, round_log, client_log)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
