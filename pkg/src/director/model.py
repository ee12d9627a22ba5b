"""Decoder-only transformer with a language-model head and a per-candidate classifier head.

Both heads read the same final core representation. Row ``t`` of either head
refers to the token at position ``t + 1``: the LM head gives its distribution
and the classifier head gives, for every vocabulary candidate ``v``, the
probability that placing ``v`` there keeps the sequence in the positive class.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "DirectorModel",
    "DualHeadOutput",
    "KVCache",
    "init_params",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "ConfigMismatchError",
    "CheckpointTruncatedError",
    "CheckpointChecksumError",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 128
    seed: int = 0
    ff_mult: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "n_layers", "n_heads", "max_seq_len", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")


@dataclass
class DualHeadOutput:
    """Per-position outputs of both heads.

    ``lm_log_probs[..., t, v]`` is ``log P(x_{t+1} = v | x_{<=t})`` and
    ``class_logits[..., t, v]`` is the logit of the positive class for
    candidate ``v`` at position ``t + 1``.
    """

    lm_log_probs: Tensor
    class_logits: Tensor
    hidden: Tensor | None = None

    @property
    def class_probs(self) -> np.ndarray:
        return T._sigmoid(self.class_logits.data)

    @property
    def lm_probs(self) -> np.ndarray:
        return np.exp(self.lm_log_probs.data)

    @classmethod
    def from_probs(cls, lm_probs, class_probs) -> "DualHeadOutput":
        """Build a fixed output from explicit probability tables (for hand-set cases)."""
        lm = np.asarray(lm_probs, dtype=np.float64)
        cp = np.asarray(class_probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logits = np.log(cp) - np.log1p(-cp)
            return cls(Tensor(np.log(lm)), Tensor(logits))


@dataclass
class KVCache:
    """Keys/values of already processed positions, one ``(k, v)`` pair per layer."""

    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    length: int = 0


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, V, ff = cfg.embed_dim, cfg.vocab_size, cfg.embed_dim * cfg.ff_mult
    shapes = [("tok_emb", (V, d)), ("pos_emb", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.qkv.w", (d, 3 * d)), (p + "attn.qkv.b", (3 * d,)),
            (p + "attn.out.w", (d, d)), (p + "attn.out.b", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ff.w1", (d, ff)), (p + "ff.b1", (ff,)),
            (p + "ff.w2", (ff, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [
        ("ln_f.g", (d,)), ("ln_f.b", (d,)),
        ("lm_head.w", (d, V)), ("lm_head.b", (V,)),
        ("class_head.w", (d, V)), ("class_head.b", (V,)),
    ]
    return shapes


class DirectorModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], frozen_core: bool = False):
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(config):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)
        self._frozen = False
        self.frozen_core = frozen_core

    # -- parameter bookkeeping -----------------------------------------
    @property
    def frozen_core(self) -> bool:
        return self._frozen

    @frozen_core.setter
    def frozen_core(self, value: bool) -> None:
        self._frozen = bool(value)
        for name, p in self.params.items():
            p.requires_grad = self.is_class_param(name) or not self._frozen

    @staticmethod
    def is_class_param(name: str) -> bool:
        return name.startswith("class_head.")

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def core_state(self) -> dict[str, np.ndarray]:
        """Copies of every core and LM-head parameter (everything except the classifier head)."""
        return {n: p.data.copy() for n, p in self.params.items() if not self.is_class_param(n)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data[...] = state[n]

    def copy(self) -> "DirectorModel":
        return DirectorModel(self.config, self.state_dict(), self._frozen)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- computation ---------------------------------------------------
    def core(self, tokens, cache: KVCache | None = None) -> tuple[Tensor, KVCache]:
        """Final-layer-normed representations of ``tokens`` (shape ``(B, T)``)."""
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"tokens must be 2-D (batch, time), got shape {ids.shape}")
        B, n = ids.shape
        start = 0 if cache is None else cache.length
        if n < 1 or start + n > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {start + n} outside [1, max_seq_len={cfg.max_seq_len}]")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        P = self.params
        d, H = cfg.embed_dim, cfg.n_heads
        dh = d // H
        x = T.embedding(P["tok_emb"], ids) + T.embedding(P["pos_emb"], np.arange(start, start + n))
        # query i (absolute start+i) must not see key j > start+i
        future = np.arange(start + n)[None, :] > (start + np.arange(n))[:, None]
        new_layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = a @ P[p + "attn.qkv.w"] + P[p + "attn.qkv.b"]
            q, k, v = (qkv[:, :, j * d:(j + 1) * d].reshape(B, n, H, dh).transpose(0, 2, 1, 3)
                       for j in range(3))
            if cache is not None:
                pk, pv = cache.layers[i]
                k = T.concat([pk, k], axis=2)
                v = T.concat([pv, v], axis=2)
            new_layers.append((k, v))
            att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            att = T.softmax(T.masked_fill(att, future, -np.inf))
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = x + (y @ P[p + "attn.out.w"] + P[p + "attn.out.b"])
            a = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            f = T.gelu(a @ P[p + "ff.w1"] + P[p + "ff.b1"])
            x = x + (f @ P[p + "ff.w2"] + P[p + "ff.b2"])
        h = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return h, KVCache(new_layers, start + n)

    def heads(self, h: Tensor) -> DualHeadOutput:
        P = self.params
        lm = T.log_softmax(h @ P["lm_head.w"] + P["lm_head.b"])
        cls = h @ P["class_head.w"] + P["class_head.b"]
        return DualHeadOutput(lm, cls, h)

    def forward(self, tokens) -> DualHeadOutput:
        """Both heads for every position in a single pass.

        A 1-D token list yields ``(T, |V|)`` tables; a 2-D batch ``(B, T, |V|)``.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        h, _ = self.core(ids[None] if single else ids)
        out = self.heads(h)
        if single:
            return DualHeadOutput(out.lm_log_probs[0], out.class_logits[0], h[0])
        return out

    __call__ = forward

    def step(self, tokens, cache: KVCache | None = None) -> tuple[DualHeadOutput, KVCache]:
        """Process ``tokens`` (1-D) after the positions held in ``cache``.

        Earlier representations are reused, so extending a prefix by one token
        costs one position of work. Intended for inference under ``no_grad``.
        """
        ids = np.asarray(tokens, dtype=np.int64)[None]
        h, new_cache = self.core(ids, cache)
        out = self.heads(h)
        return DualHeadOutput(out.lm_log_probs[0], out.class_logits[0]), new_cache


def init_params(config: ModelConfig) -> DirectorModel:
    """Seeded scaled-normal initialization (std 0.02, residual projections shrunk by depth)."""
    rng = rng_for(config.seed, "init")
    resid_std = 0.02 / np.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            std = resid_std if name.endswith(("attn.out.w", "ff.w2")) else 0.02
            params[name] = rng.normal(0.0, std, size=shape)
    return DirectorModel(config, params)


def forward(model: DirectorModel, tokens) -> DualHeadOutput:
    return model.forward(tokens)


# -- checkpoints ---------------------------------------------------------

MAGIC = b"DIR1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointVersionError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_checkpoint(model: DirectorModel) -> bytes:
    """Serialize as ``DIR1 | version | header | float64-LE blobs | CRC-32``."""
    names = [n for n, _ in _param_shapes(model.config)]
    header = json.dumps(
        {"config": asdict(model.config), "frozen_core": model.frozen_core, "params": names},
        sort_keys=True,
    ).encode()
    blob = b"".join(model.params[n].data.astype("<f8").tobytes() for n in names)
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header
    body += struct.pack("<Q", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(data: bytes, expected_config: ModelConfig | None = None) -> DirectorModel:
    data = bytes(data)
    if len(data) < 12:
        raise CheckpointTruncatedError(f"checkpoint is only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    off = 12 + hlen
    if len(data) < off + 8:
        raise CheckpointTruncatedError("checkpoint ends inside its header")
    (blen,) = struct.unpack_from("<Q", data, off)
    total = off + 8 + blen + 4
    if len(data) < total:
        raise CheckpointTruncatedError(f"checkpoint has {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise CheckpointFormatError(f"{len(data) - total} trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", data, total - 4)
    if zlib.crc32(data[: total - 4]) != crc:
        raise CheckpointChecksumError("CRC-32 mismatch: checkpoint is corrupt")
    header = json.loads(data[12:off])
    config = ModelConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint config {config} does not match expected {expected_config}")
    shapes = dict(_param_shapes(config))
    if header["params"] != list(shapes):
        raise CheckpointFormatError("parameter list does not match the declared config")
    params, pos = {}, off + 8
    for name in header["params"]:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shapes[name]).astype(np.float64)
        pos += 8 * count
    return DirectorModel(config, params, frozen_core=header["frozen_core"])
