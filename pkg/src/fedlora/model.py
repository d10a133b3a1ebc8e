"""Byte-level tokenizer and a small frozen decoder-only transformer.

Adapters (see :mod:`fedlora.adapters`) are applied on the fly at the
``attn.q`` and ``attn.v`` projections of every layer; the base weights are
never modified.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TargetIndexError

PAD = 256
BOS = 257
EOS = 258
VOCAB_SIZE = 259

INJECTION_KINDS = ("q", "v")


def tokenize(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: Sequence[int]) -> bytes:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    return bytes(i for i in ids if 0 <= i < 256)


def decode_text(ids: Sequence[int]) -> str:
    return detokenize(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_context: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def hash(self) -> int:
        """48-bit digest of the configuration (exact in a float64)."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int(hashlib.sha256(blob).hexdigest()[:12], 16)

    def injection_sites(self) -> list[str]:
        return [f"layers.{i}.attn.{k}" for i in range(self.n_layers) for k in INJECTION_KINDS]


@dataclass
class TokenizedExample:
    x_tokens: list[int]
    y_tokens: list[int]

    @property
    def tokens(self) -> list[int]:
        return self.x_tokens + self.y_tokens

    @property
    def loss_mask(self) -> list[int]:
        return [0] * len(self.x_tokens) + [1] * len(self.y_tokens)

    def __len__(self):
        return len(self.x_tokens) + len(self.y_tokens)


def tokenize_example(instruction_input: str, instruction_output: str, max_context: int) -> TokenizedExample:
    """BOS + input, output + EOS; the input is cut from the left if too long."""
    x = tokenize(instruction_input)
    y = tokenize(instruction_output) + [EOS]
    room = max_context - len(y) - 1
    if room < 0:
        raise ContractError(
            f"instruction output needs {len(y) + 1} positions, max_context is {max_context}"
        )
    if len(x) > room:
        x = x[len(x) - room:]
    return TokenizedExample([BOS] + x, y)


def collate(batch: Sequence[TokenizedExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad a batch into (ids, next-token targets, loss weights)."""
    width = max(len(ex) for ex in batch)
    ids = np.full((len(batch), width), PAD, dtype=np.int64)
    targets = np.zeros((len(batch), width), dtype=np.int64)
    weights = np.zeros((len(batch), width))
    for b, ex in enumerate(batch):
        seq = ex.tokens
        n = len(seq)
        ids[b, :n] = seq
        targets[b, : n - 1] = seq[1:]
        weights[b, : n - 1] = ex.loss_mask[1:]
    return ids, targets, weights


def _sinusoid(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n_pos, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


@dataclass
class BaseModel:
    """Frozen transformer weights, keyed by name.

    Projection matrices are stored ``(d_out, d_in)`` so that an adapter
    contribution ``B @ A`` adds to them directly.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    _t: dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for t in self.params.values():
            t.requires_grad = False
            t.data.flags.writeable = False
        self._t = {}

    def weight_t(self, name: str) -> Tensor:
        t = self._t.get(name)
        if t is None:
            t = self._t[name] = Tensor(self.params[name].data.T)
        return t

    def copy_with(self, replaced: dict[str, np.ndarray]) -> "BaseModel":
        params = {k: Tensor(replaced[k]) if k in replaced else v for k, v in self.params.items()}
        return BaseModel(self.config, params)


# Init scales of the frozen network. The value path has low gain (small W_v,
# large W_o) and the MLP branches are damped, so the residual stream is
# dominated by the adapted attention path and a rank-4 change to W_v is
# amplified by W_o. Without this a randomly initialized base barely responds
# to adapters within the desk-scale step budget at lr=2e-4.
EMBED_STD = 0.08
VALUE_GAIN = 0.03
OUTPUT_GAIN = 5.0
MLP_GAIN = 0.03


def init_base_model(config: ModelConfig) -> BaseModel:
    """Deterministic random weights from ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0xBA5E])
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    gains = {"q": 1.0, "k": 1.0, "v": VALUE_GAIN, "o": OUTPUT_GAIN}

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    params = {
        "tok_emb": normal((v, d), EMBED_STD),
        "pos_emb": 0.1 * _sinusoid(config.max_context, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for k in ("q", "k", "v", "o"):
            params[p + "attn." + k] = normal((d, d), gains[k] * d**-0.5)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "mlp.fc"] = normal((f, d), d**-0.5)
        params[p + "mlp.fc_b"] = np.zeros(f)
        params[p + "mlp.proj"] = normal((d, f), MLP_GAIN * f**-0.5 / np.sqrt(2 * config.n_layers))
        params[p + "mlp.proj_b"] = np.zeros(d)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    return BaseModel(config, {k: Tensor(a) for k, a in params.items()})


def project(model: BaseModel, adapters, name: str, x: Tensor) -> Tensor:
    """Raw projection ``x W^T`` plus the adapter term ``scale * x A^T B^T``."""
    y = ad.matmul(x, model.weight_t(name))
    pair = adapters.sites.get(name) if adapters is not None else None
    if pair is not None:
        z = ad.matmul(ad.matmul(x, ad.transpose(pair.A)), ad.transpose(pair.B))
        if pair.scale != 1.0:
            z = ad.scale(z, pair.scale)
        y = ad.add(y, z)
    return y


def _attention(model: BaseModel, adapters, layer: int, x: Tensor) -> Tensor:
    cfg = model.config
    b, n, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    p = f"layers.{layer}.attn."

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(project(model, adapters, p + "q", x))
    k = heads(project(model, adapters, p + "k", x))
    v = heads(project(model, adapters, p + "v", x))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), dh**-0.5)
    att = ad.matmul(ad.softmax(scores, causal=True), v)
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, n, d))
    return project(model, adapters, p + "o", merged)


def _mlp(model: BaseModel, layer: int, x: Tensor) -> Tensor:
    p = model.params
    pre = f"layers.{layer}.mlp."
    hidden = ad.gelu(ad.add(ad.matmul(x, model.weight_t(pre + "fc")), p[pre + "fc_b"]))
    return ad.add(ad.matmul(hidden, model.weight_t(pre + "proj")), p[pre + "proj_b"])


def hidden_states(model: BaseModel, adapters, ids: np.ndarray) -> Tensor:
    """Final layer-normed states, shape (batch, length, d_model)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractError("ids must be (batch, length)")
    cfg = model.config
    n = ids.shape[1]
    if n < 1 or n > cfg.max_context:
        raise ContractError(f"sequence length {n} outside [1, {cfg.max_context}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TargetIndexError("token id out of range")
    p = model.params
    h = ad.add(ad.embedding(p["tok_emb"], ids), Tensor(p["pos_emb"].data[:n]))
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        x = ad.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        h = ad.add(h, _attention(model, adapters, i, x))
        x = ad.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = ad.add(h, _mlp(model, i, x))
    return ad.layer_norm(h, p["ln_f.g"], p["ln_f.b"])


def forward_batch(model: BaseModel, adapters, ids: np.ndarray) -> Tensor:
    """Logits of shape (batch, length, V) for an integer id array."""
    return ad.matmul(hidden_states(model, adapters, ids), model.weight_t("tok_emb"))


def token_nll(model: BaseModel, adapters, ids: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum(w * nll) / sum(w)`` over positions with nonzero weight.

    Vocabulary logits are only computed where the weight is nonzero, which is
    what keeps instruction-tuning steps cheap: prompt and padding positions
    never reach the output head.
    """
    h = hidden_states(model, adapters, ids)
    flat_w = np.asarray(weights, dtype=np.float64).reshape(-1)
    rows = np.flatnonzero(flat_w)
    if rows.size == 0:
        raise ContractError("no positions carry loss weight")
    hr = ad.take_rows(ad.reshape(h, (-1, h.shape[-1])), rows)
    logits = ad.matmul(hr, model.weight_t("tok_emb"))
    return ad.masked_cross_entropy(logits, np.asarray(targets).reshape(-1)[rows], flat_w[rows])


def forward_logits(model: BaseModel, adapters, tokens: Sequence[int]) -> Tensor:
    """Logits (len, V); row m parameterizes the distribution of token m+1."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    out = forward_batch(model, adapters, ids)
    return ad.reshape(out, out.shape[1:])


def generate_greedy(
    model: BaseModel,
    adapters,
    prompt: Sequence[int],
    max_new: int,
    eos_id: int | None = EOS,
    logits_fn: Callable[[list[int]], np.ndarray] | None = None,
) -> list[int]:
    """Append argmax tokens until ``eos_id`` or ``max_new`` new tokens.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    The context window slides once the sequence exceeds ``max_context``.
    """
    seq = list(prompt)
    if not seq:
        raise ContractError("prompt must be nonempty")
    if logits_fn is None:
        window = model.config.max_context

        def logits_fn(s):
            return forward_logits(model, adapters, s[-window:]).data[-1]

    with ad.no_grad():
        for _ in range(max_new):
            tok = int(np.argmax(logits_fn(seq)))
            seq.append(tok)
            if eos_id is not None and tok == eos_id:
                break
    return seq
