"""Low-rank adapter sets, their algebra, and the FJLA checkpoint container.

FJLA layout (little-endian)::

    b"FJLA" | u32 version | u32 count |
    count x ( u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 | payload ) |
    u32 crc32(everything after the magic)

dtype 0 is float64 and 1 is float32. Adapter tensors are named
``lora.<site>.A`` / ``lora.<site>.B``; scalar metadata lives under ``meta.``
and base-model weights under ``base.``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DecodeError,
    TruncatedPayloadError,
    UnknownSiteError,
    VersionMismatchError,
)
from .model import BaseModel, ModelConfig

MAGIC = b"FJLA"
VERSION = 1
MAX_NDIM = 32  # adapters are 2-D; anything far beyond that is corruption
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {"f64": 0, "f32": 1}
_META_FIELDS = ("rank", "config_hash", "client_id", "round")


@dataclass
class AdapterPair:
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        """The dense contribution ``scale * B @ A``, shape (d_out, d_in)."""
        return self.scale * (self.B.data @ self.A.data)


@dataclass
class AdapterSet:
    """Trainable adapter parameters plus the metadata that travels with them."""

    sites: dict[str, AdapterPair] = field(default_factory=dict)
    rank: int | None = None
    config_hash: int | None = None
    client_id: int | None = None
    round: int | None = None

    def __post_init__(self):
        ranks = {p.rank for p in self.sites.values()}
        if len(ranks) > 1:
            raise ContractError(f"adapter pairs disagree on rank: {sorted(ranks)}")
        if ranks and self.rank is None:
            self.rank = ranks.pop()

    def site_names(self) -> list[str]:
        return sorted(self.sites)

    def tensors(self) -> list[Tensor]:
        """Trainable tensors in flatten order."""
        out = []
        for name in self.site_names():
            out += [self.sites[name].A, self.sites[name].B]
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self, **meta) -> "AdapterSet":
        sites = {
            k: AdapterPair(Tensor(p.A.data.copy()), Tensor(p.B.data.copy()), p.scale)
            for k, p in self.sites.items()
        }
        fields = {f: getattr(self, f) for f in _META_FIELDS}
        fields.update(meta)
        return AdapterSet(sites, **fields)

    def requires_grad_(self, flag: bool = True) -> "AdapterSet":
        for t in self.tensors():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def __eq__(self, other):
        if not isinstance(other, AdapterSet):
            return NotImplemented
        if any(getattr(self, f) != getattr(other, f) for f in _META_FIELDS):
            return False
        if self.site_names() != other.site_names():
            return False
        for k in self.sites:
            a, b = self.sites[k], other.sites[k]
            if a.scale != b.scale:
                return False
            for x, y in ((a.A, b.A), (a.B, b.B)):
                if x.shape != y.shape or x.data.tobytes() != y.data.tobytes():
                    return False
        return True


def init_adapters(config: ModelConfig, rank: int = 4, seed: int = 0, scale: float = 1.0) -> AdapterSet:
    """Gaussian(0, 0.02^2) ``A`` and all-zero ``B`` at every injection site."""
    d = config.d_model
    if rank < 1 or rank >= d:
        raise ConfigError(f"rank {rank} must satisfy 1 <= rank < {d}")
    if scale <= 0:
        raise ConfigError("adapter scale must be positive")
    rng = np.random.default_rng([seed, 0xADA])
    sites = {}
    for name in config.injection_sites():
        sites[name] = AdapterPair(
            Tensor(rng.normal(0.0, 0.02, size=(rank, d))),
            Tensor(np.zeros((d, rank))),
            scale,
        )
    return AdapterSet(sites, rank=rank, config_hash=config.hash())


def merge(base: BaseModel, adapters: AdapterSet) -> BaseModel:
    """Fold adapters into the frozen weights: ``W + scale * B @ A`` per site."""
    replaced = {}
    for name, pair in adapters.sites.items():
        if name not in base.params:
            raise UnknownSiteError(name)
        w = base.params[name].data
        if w.shape != (pair.B.shape[0], pair.A.shape[1]):
            raise ContractError(f"adapter at {name} does not fit weight shape {w.shape}")
        replaced[name] = w + pair.delta()
    return base.copy_with(replaced)


def flatten(adapters: AdapterSet) -> np.ndarray:
    """Site-name-sorted concatenation, A before B, row-major."""
    parts = [t.data.reshape(-1) for t in adapters.tensors()]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vec: np.ndarray, like: AdapterSet) -> AdapterSet:
    """Inverse of :func:`flatten`, shaped after ``like`` and carrying its metadata."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (like.num_params(),):
        raise ContractError(f"vector of length {vec.size}, expected {like.num_params()}")
    out = like.copy()
    offset = 0
    for t in out.tensors():
        t.data = vec[offset : offset + t.size].reshape(t.shape).copy()
        offset += t.size
    return out


def flatten_grads(adapters: AdapterSet) -> np.ndarray:
    parts = [
        (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for t in adapters.tensors()
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------- container


def encode_tensors(tensors: dict[str, np.ndarray], dtype: str = "f64") -> bytes:
    """Serialize named arrays in insertion order into an FJLA byte string."""
    code = _DTYPE_CODES[dtype]
    np_dtype = _DTYPES[code]
    body = bytearray(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return MAGIC + bytes(body) + struct.pack("<I", crc)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse an FJLA byte string; float32 payloads are widened to float64."""
    if blob[:4] != MAGIC:
        raise BadMagicError("not an FJLA container")
    view = memoryview(blob)
    end = len(blob) - 4
    pos = 4

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > end:
            raise TruncatedPayloadError(f"needed {n} bytes at offset {pos}, container ends at {end}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if len(blob) < 16:
        raise TruncatedPayloadError("container shorter than its fixed header")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"tensor name is not UTF-8: {exc}") from None
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise DecodeError(f"unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise DecodeError(f"tensor rank {ndim} exceeds {MAX_NDIM}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count_el = math.prod(dims)  # exact integer; a corrupted dim cannot wrap around
        raw = take(count_el * _DTYPES[code].itemsize)
        if name in out:
            raise DecodeError(f"duplicate tensor name {name!r}")
        try:
            out[name] = np.frombuffer(raw, dtype=_DTYPES[code]).astype(np.float64).reshape(dims)
        except ValueError as exc:  # e.g. a zero-size shape with an absurd extent
            raise DecodeError(f"bad shape {dims}: {exc}") from None
    if pos != end:
        raise DecodeError(f"{end - pos} unexpected bytes after the last tensor")
    (crc,) = struct.unpack("<I", view[end:])
    if zlib.crc32(view[4:end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    return out


def to_bytes(adapters: AdapterSet, dtype: str = "f64", run_meta: dict[str, float] | None = None) -> bytes:
    """Serialize an adapter set.

    ``run_meta`` adds numeric ``meta.run.<key>`` scalars (experiment hash,
    seed) that :func:`from_bytes` skips and :func:`read_run_meta` returns.
    """
    tensors: dict[str, np.ndarray] = {}
    for key, value in sorted((run_meta or {}).items()):
        tensors[f"meta.run.{key}"] = np.asarray(float(value))
    for f in _META_FIELDS:
        value = getattr(adapters, f)
        if value is not None:
            tensors[f"meta.{f}"] = np.asarray(float(value))
    for name in adapters.site_names():
        pair = adapters.sites[name]
        tensors[f"lora.{name}.A"] = pair.A.data
        tensors[f"lora.{name}.B"] = pair.B.data
        if pair.scale != 1.0:
            tensors[f"lora.{name}.scale"] = np.asarray(pair.scale)
    return encode_tensors(tensors, dtype)


def from_bytes(blob: bytes) -> AdapterSet:
    tensors = decode_tensors(blob)
    meta = {}
    parts: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        if key.startswith("meta.run."):
            continue
        if key.startswith("meta."):
            f = key[5:]
            if f not in _META_FIELDS:
                raise DecodeError(f"unknown metadata field {f!r}")
            meta[f] = int(arr)
        elif key.startswith("lora."):
            site, _, part = key[5:].rpartition(".")
            if part not in ("A", "B", "scale"):
                raise DecodeError(f"unexpected adapter tensor {key!r}")
            parts.setdefault(site, {})[part] = arr
        else:
            raise DecodeError(f"tensor {key!r} does not belong to an adapter set")
    sites = {}
    for site, p in parts.items():
        if "A" not in p or "B" not in p:
            raise DecodeError(f"site {site!r} lacks its A or B matrix")
        scale = float(p["scale"]) if "scale" in p else 1.0
        sites[site] = AdapterPair(Tensor(p["A"].copy()), Tensor(p["B"].copy()), scale)
    return AdapterSet(sites, **meta)


def read_run_meta(blob: bytes) -> dict[str, float]:
    return {k[9:]: float(v) for k, v in decode_tensors(blob).items() if k.startswith("meta.run.")}


def save(
    adapters: AdapterSet, path: str | PathLike, dtype: str = "f64", run_meta: dict[str, float] | None = None
) -> int:
    """Write an ``.fjla`` file; returns the byte count."""
    blob = to_bytes(adapters, dtype, run_meta)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path: str | PathLike) -> AdapterSet:
    return from_bytes(Path(path).read_bytes())


_CFG_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_context", "seed")


def base_to_bytes(model: BaseModel, dtype: str = "f64", run_meta: dict[str, float] | None = None) -> bytes:
    tensors = {f"meta.run.{k}": np.asarray(float(v)) for k, v in sorted((run_meta or {}).items())}
    tensors.update({f"meta.cfg.{f}": np.asarray(float(getattr(model.config, f))) for f in _CFG_FIELDS})
    tensors.update({f"base.{k}": t.data for k, t in model.params.items()})
    return encode_tensors(tensors, dtype)


def base_from_bytes(blob: bytes) -> BaseModel:
    tensors = decode_tensors(blob)
    try:
        cfg = ModelConfig(**{f: int(tensors[f"meta.cfg.{f}"]) for f in _CFG_FIELDS})
    except KeyError as exc:
        raise DecodeError(f"base checkpoint lacks {exc.args[0]}") from None
    params = {k[5:]: Tensor(v.copy()) for k, v in tensors.items() if k.startswith("base.")}
    return BaseModel(cfg, params)


def save_base(model: BaseModel, path: str | PathLike) -> int:
    blob = base_to_bytes(model)
    Path(path).write_bytes(blob)
    return len(blob)


def load_base(path: str | PathLike) -> BaseModel:
    return base_from_bytes(Path(path).read_bytes())
