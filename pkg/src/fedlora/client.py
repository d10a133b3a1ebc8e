"""Local training on one federated client.

The local objective is the masked autoregressive loss on the client's
instruction data. From the second round on, the continual-learning variant adds a drift
penalty ``s + s**2`` with ``s = J . |W_local - W_global_prev|``, where ``J``
is the gradient of the client's own loss at the freshly received global
adapters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, flatten, flatten_grads
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError
from .model import BaseModel, TokenizedExample, collate, token_nll


@dataclass
class TrainHyper:
    epochs: int = 2
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 2
    grad_accum: int = 8
    lam: float = 1.0
    probe_batch_size: int = 16
    abs_jacobian: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.grad_accum < 1 or self.probe_batch_size < 1:
            raise ConfigError("batch_size, grad_accum and probe_batch_size must be >= 1")


@dataclass
class JacobianEstimate:
    J: np.ndarray
    probe_ids: list[int]
    round: int | None = None

    def __len__(self):
        return self.J.size


@dataclass
class ClientState:
    client_id: int
    dataset: list[TokenizedExample]
    adapters: AdapterSet | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    seed: int = 0
    log: list[dict] = field(default_factory=list)


def local_loss(model: BaseModel, adapters: AdapterSet, batch: Sequence[TokenizedExample]) -> Tensor:
    """Mean negative log-likelihood over the output tokens of ``batch``."""
    if not batch:
        raise ContractError("batch must be nonempty")
    ids, targets, weights = collate(batch)
    return token_nll(model, adapters, ids, targets, weights)


def estimate_jacobian(
    model: BaseModel,
    global_adapters: AdapterSet,
    probe: Sequence[TokenizedExample],
    probe_ids: Sequence[int] = (),
    round_index: int | None = None,
) -> JacobianEstimate:
    """Gradient of :func:`local_loss` w.r.t. the flattened adapters, at the global point."""
    if not probe:
        raise ContractError("probe batch must be nonempty")
    point = global_adapters.copy().requires_grad_()
    ad.reset_graph()
    ad.backward(local_loss(model, point, probe))
    J = flatten_grads(point)
    if not np.isfinite(J).all():
        raise NumericError("non-finite Jacobian estimate")
    return JacobianEstimate(J, list(probe_ids), round_index)


def _penalty_terms(
    local: AdapterSet, global_prev: AdapterSet, J, abs_jacobian: bool = False
) -> tuple[Tensor, Tensor]:
    jvec = np.asarray(J.J if isinstance(J, JacobianEstimate) else J, dtype=np.float64)
    if abs_jacobian:
        jvec = np.abs(jvec)
    n = local.num_params()
    if global_prev.num_params() != n or jvec.shape != (n,):
        raise ContractError(
            f"length mismatch: local {n}, global {global_prev.num_params()}, J {jvec.size}"
        )
    if local.site_names() != global_prev.site_names():
        raise ContractError("local and global adapters cover different sites")
    s = None
    offset = 0
    for cur, prev in zip(local.tensors(), global_prev.tensors()):
        jpart = Tensor(jvec[offset : offset + cur.size].reshape(cur.shape))
        offset += cur.size
        term = ad.tsum(ad.mul(ad.tabs(ad.sub(cur, Tensor(prev.data))), jpart))
        s = term if s is None else ad.add(s, term)
    if s is None:
        s = Tensor(0.0)
    return ad.add(s, ad.mul(s, s)), s


def cl_penalty(local: AdapterSet, global_prev: AdapterSet, J, abs_jacobian: bool = False) -> Tensor:
    """``s + s**2`` with ``s = J . |flatten(local) - flatten(global_prev)|``."""
    return _penalty_terms(local, global_prev, J, abs_jacobian)[0]


def _objective(model, adapters, batch, global_prev, J, t, lam, abs_jacobian=False):
    if t < 1:
        raise ContractError("round index t starts at 1")
    loss = local_loss(model, adapters, batch)
    if t == 1 or lam == 0 or J is None:
        return loss, loss, None, None
    pen, s = _penalty_terms(adapters, global_prev, J, abs_jacobian)
    return ad.add(loss, ad.scale(pen, lam)), loss, pen, s


def combined_objective(
    model: BaseModel,
    state: ClientState,
    batch: Sequence[TokenizedExample],
    global_prev: AdapterSet,
    J,
    t: int,
    lam: float,
    abs_jacobian: bool = False,
) -> Tensor:
    """Local loss, plus ``lam`` times the drift penalty when ``t != 1``.

    At ``t == 1`` (or ``lam == 0``) the returned tensor *is* the local loss.
    """
    return _objective(model, state.adapters, batch, global_prev, J, t, lam, abs_jacobian)[0]


def steps_per_epoch(n_examples: int, hyper: TrainHyper) -> int:
    """Optimizer steps in one pass over ``n_examples`` (partial groups count)."""
    micro = -(-n_examples // hyper.batch_size)
    return -(-micro // hyper.grad_accum)


def adam_step(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, hyper: TrainHyper) -> np.ndarray:
    """One bias-corrected Adam update; ``m`` and ``v`` are updated in place."""
    b1, b2 = hyper.betas
    m *= b1
    m += (1 - b1) * grads
    v *= b2
    v += (1 - b2) * grads * grads
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def _write_back(adapters: AdapterSet, flat: np.ndarray) -> None:
    offset = 0
    for t in adapters.tensors():
        t.data = flat[offset : offset + t.size].reshape(t.shape).copy()
        offset += t.size


def client_update(
    model: BaseModel,
    state: ClientState,
    global_adapters: AdapterSet,
    t: int,
    hyper: TrainHyper,
    use_cl: bool = True,
    max_steps: int | None = None,
) -> AdapterSet:
    """Run ``hyper.epochs`` epochs of Adam starting from ``global_adapters``.

    Microbatches of ``batch_size`` examples are accumulated ``grad_accum`` at a
    time; a trailing partial group still produces an optimizer step. Adam
    moments are reset every round. With ``max_steps`` set, training instead
    runs exactly that many optimizer steps, drawing further epochs as needed.
    """
    data = state.dataset
    if not data:
        raise ContractError(f"client {state.client_id} has an empty dataset")
    n = len(data)
    rng = np.random.default_rng([state.seed, state.client_id, t])
    round_order = rng.permutation(n)

    adapters = global_adapters.copy(client_id=state.client_id).requires_grad_()
    state.adapters = adapters
    state.m = np.zeros(adapters.num_params())
    state.v = np.zeros(adapters.num_params())

    J = None
    if use_cl and t > 1 and hyper.lam > 0:
        probe_ids = [int(i) for i in round_order[: hyper.probe_batch_size]]
        J = estimate_jacobian(model, global_adapters, [data[i] for i in probe_ids], probe_ids, t - 1)

    if max_steps is not None and max_steps < 0:
        raise ContractError("max_steps must be >= 0")
    step = 0
    bs = hyper.batch_size
    epoch = 0
    while (step < max_steps) if max_steps is not None else (epoch < hyper.epochs):
        perm = rng.permutation(n)
        micro = [perm[i : i + bs] for i in range(0, n, bs)]
        for g0 in range(0, len(micro), hyper.grad_accum):
            if max_steps is not None and step >= max_steps:
                break
            group = micro[g0 : g0 + hyper.grad_accum]
            adapters.zero_grad()
            losses, pens, ss = [], [], []
            for idx in group:
                batch = [data[i] for i in idx]
                total, loss, pen, s = _objective(
                    model, adapters, batch, global_adapters, J, t,
                    hyper.lam if use_cl else 0.0, hyper.abs_jacobian,
                )
                ad.backward(ad.scale(total, 1.0 / len(group)))
                losses.append(loss.item())
                if pen is not None:
                    pens.append(pen.item())
                    ss.append(s.item())
            step += 1
            new = adam_step(flatten(adapters), flatten_grads(adapters), state.m, state.v, step, hyper)
            if not np.isfinite(new).all():
                raise NumericError(f"client {state.client_id}: non-finite adapter update")
            _write_back(adapters, new)
            state.log.append({
                "round": t,
                "client_id": state.client_id,
                "epoch": epoch,
                "step": step,
                "loss": float(np.mean(losses)),
                "cl_penalty": float(np.mean(pens)) if pens else 0.0,
                "s": float(np.mean(ss)) if ss else 0.0,
            })
        epoch += 1
    adapters.zero_grad()
    return adapters.copy()
