"""Frozen embedding providers and the trainable surrogate text encoder.

Real vision-language encoders live out of process: their token embeddings
arrive through a binary dump file and are replayed bit-exactly. The surrogate
text encoder (an embedding table plus one block run with kv = its own input)
supplies trainable text parameters so the second fine-tuning stage can be
exercised without any pretrained model.

Dump wire format, all integers 32-bit little-endian:

    magic "CRDUMP01" | version | dim d | record count N
    per record: id byte length, UTF-8 id, token count L,
                ceil(L/8) mask bytes (LSB-first), L*d float32 row-major

"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import CaBlockParams, TokenSequence, ca_block_forward, init_ca_block_params
from .errors import DataError, ShapeError, UsageError

DUMP_MAGIC = b"CRDUMP01"
DUMP_VERSION = 1

CLASS_TOKEN_ID = 0
PAD_TOKEN_ID = 1


class EmbeddingDump:
    """Immutable id-keyed store of token sequences sharing one dimension."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._records: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def ids(self) -> list[str]:
        return list(self._records)

    def add(self, key: str, tokens, mask=None) -> None:
        tokens = ad.as_matrix(tokens).astype(np.float32, copy=False)
        if tokens.shape[1] != self.dim:
            raise DataError(
                f"record {key!r} has dimension {tokens.shape[1]}, dump has {self.dim}")
        if key in self._records:
            raise DataError(f"duplicate record id {key!r}")
        if mask is None:
            mask = np.ones(tokens.shape[0], dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != tokens.shape[0]:
            raise DataError(f"record {key!r}: mask length does not match token count")
        self._records[key] = (tokens, mask)

    def arrays(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._records[key]
        except KeyError:
            raise DataError(f"unknown embedding id {key!r}") from None

    def sequence(self, key: str) -> TokenSequence:
        tokens, mask = self.arrays(key)
        return TokenSequence(ad.constant(tokens), mask.copy())


def write_dump(path: str, dump: EmbeddingDump) -> None:
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<III", DUMP_VERSION, dump.dim, len(dump)))
        for key in dump.ids():
            tokens, mask = dump.arrays(key)
            raw_id = key.encode("utf-8")
            f.write(struct.pack("<I", len(raw_id)))
            f.write(raw_id)
            f.write(struct.pack("<I", tokens.shape[0]))
            f.write(np.packbits(mask, bitorder="little").tobytes())
            f.write(tokens.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated dump: expected {n} bytes for {what}")
    return data


def load_dump(path: str) -> EmbeddingDump:
    """Parse and fully validate a dump file."""
    with open(path, "rb") as f:
        magic = f.read(len(DUMP_MAGIC))
        if magic != DUMP_MAGIC:
            raise DataError(f"bad dump magic {magic!r}")
        version, dim, count = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != DUMP_VERSION:
            raise DataError(f"unsupported dump version {version}")
        dump = EmbeddingDump(dim)
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, "id length"))
            key = _read_exact(f, id_len, "record id").decode("utf-8")
            (length,) = struct.unpack("<I", _read_exact(f, 4, "token count"))
            if length == 0:
                raise DataError(f"record {key!r} has zero tokens")
            mask_bytes = _read_exact(f, (length + 7) // 8, "mask bits")
            mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8),
                                 count=length, bitorder="little").astype(bool)
            payload = _read_exact(f, 4 * length * dim, f"record {key!r} payload")
            tokens = np.frombuffer(payload, dtype="<f4").reshape(length, dim)
            dump.add(key, tokens.copy(), mask)
        trailing = f.read(1)
        if trailing:
            raise DataError("trailing bytes after final record")
    return dump


def encode_video(frames: list[TokenSequence]) -> TokenSequence:
    """Average per-frame token embeddings element-wise; masks intersect."""
    if not frames:
        raise UsageError("encode_video needs at least one frame")
    shape = frames[0].tokens.value.shape
    for fr in frames[1:]:
        if fr.tokens.value.shape != shape:
            raise ShapeError(
                f"frame shapes differ: {shape} vs {fr.tokens.value.shape}")
    stack = np.stack([fr.tokens.value for fr in frames])
    mean = np.mean(stack, axis=0, dtype=np.float64).astype(stack.dtype)
    mask = frames[0].mask.copy()
    for fr in frames[1:]:
        mask &= fr.mask
    return TokenSequence(ad.constant(mean), mask)


@dataclass
class MultimodalQuery:
    """One composed query: visual tokens plus modification and caption text."""

    q_v: TokenSequence
    q_t: list[int]
    q_c: list[int]

    def __post_init__(self):
        if not self.q_t:
            raise DataError("query modification text is empty")


@dataclass
class SurrogateTextEncoderParams:
    """Embedding table plus one block applied with kv = its own input."""

    embed: ad.ParamTensor  # (vocab, d)
    block: CaBlockParams

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]


def init_surrogate_params(store: ad.ParamStore, vocab_size: int, dim: int,
                          heads: int, rng: np.random.Generator,
                          ffn_mult: int = 4, std: float = 0.02,
                          prefix: str = "text_query",
                          dtype=np.float32) -> SurrogateTextEncoderParams:
    if vocab_size < 2:
        raise UsageError("vocabulary must include class and padding ids")
    embed = store.add(f"{prefix}.embed",
                      ad.truncated_normal(rng, vocab_size, dim, std, dtype))
    block = init_ca_block_params(store, f"{prefix}.block", dim, heads, rng,
                                 ffn_mult, std, dtype)
    return SurrogateTextEncoderParams(embed, block)


def surrogate_encode_text(ids, p: SurrogateTextEncoderParams) -> TokenSequence:
    """Embed token ids behind a prepended class token and run one block.

    Padding ids are kept in the sequence but masked out of attention.
    """
    ids = [int(i) for i in ids]
    for i in ids:
        if i < 0 or i >= p.vocab_size:
            raise DataError(f"token id {i} outside vocabulary of size {p.vocab_size}")
    full = np.array([CLASS_TOKEN_ID] + ids, dtype=np.int64)
    mask = full != PAD_TOKEN_ID
    tokens = ad.take_rows(ad.leaf(p.embed), full)
    seq = TokenSequence(tokens, mask)
    return ca_block_forward(seq, seq, p.block)
