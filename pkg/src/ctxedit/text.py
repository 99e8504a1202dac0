"""Instruction codec: tokenizer plus a frozen embedding table.

Stands in for a frozen pretrained text encoder.  Words hash into a fixed
set of buckets (no tokenizer model to ship); indicator tokens such as
"{image1}" get reserved ids so they never collide with hashed words.  The
embedding table is randomly initialized from a seed and then frozen, so
instruction semantics are learned downstream by attention, not here.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cu import MAX_IMAGE_NUMBER

DEFAULT_VOCAB_SIZE = 4096
DEFAULT_TEXT_LEN = 120

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PLAIN_IMAGE_TOKEN = "{image}"

_TOKEN_RE = re.compile(r"\{image[0-9]*\}|[a-z0-9]+")


class TextCodecError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Reserved tokens with fixed ids; everything else hashes into buckets."""

    size: int = DEFAULT_VOCAB_SIZE
    hash_seed: int = 0

    def __post_init__(self):
        if self.size <= self.reserved_count:
            raise TextCodecError(f"vocab size {self.size} leaves no room for hash buckets")

    @property
    def reserved(self) -> dict:
        tokens = [PAD_TOKEN, UNK_TOKEN, PLAIN_IMAGE_TOKEN]
        tokens += [f"{{image{k}}}" for k in range(1, MAX_IMAGE_NUMBER + 1)]
        return {tok: i for i, tok in enumerate(tokens)}

    @property
    def reserved_count(self) -> int:
        return 3 + MAX_IMAGE_NUMBER

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def indicator_id(self, k: int) -> int:
        if not 1 <= k <= MAX_IMAGE_NUMBER:
            raise TextCodecError(f"indicator id {k} outside 1..{MAX_IMAGE_NUMBER}")
        return self.reserved[f"{{image{k}}}"]

    def id_of(self, token: str) -> int:
        rid = self.reserved.get(token)
        if rid is not None:
            return rid
        digest = hashlib.sha1(f"{self.hash_seed}\x00{token}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % (self.size - self.reserved_count)
        return self.reserved_count + bucket

    def to_manifest(self) -> str:
        return json.dumps(
            {"size": self.size, "hash_seed": self.hash_seed, "reserved": self.reserved},
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_manifest(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        vocab = cls(size=int(doc["size"]), hash_seed=int(doc["hash_seed"]))
        if doc.get("reserved") != vocab.reserved:
            raise TextCodecError("manifest reserved-token table does not match this build")
        return vocab


def tokenize(instruction: str, vocab: Vocabulary, max_len: int = DEFAULT_TEXT_LEN) -> np.ndarray:
    """Lowercase, split into words and indicator tokens, map to ids, truncate the tail.

    Empty instructions yield a single pad id so downstream attention always
    has at least one key.
    """
    tokens = _TOKEN_RE.findall(instruction.lower())
    ids = [vocab.id_of(tok) for tok in tokens[:max_len]]
    if not ids:
        ids = [vocab.pad_id]
    return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class TextEmbedding:
    token_ids: np.ndarray
    vectors: np.ndarray  # (len(token_ids), dim) float32

    def __post_init__(self):
        if len(self.token_ids) != len(self.vectors):
            raise TextCodecError("one embedding per token id required")


def sinusoidal_positions(length: int, dim: int, scale: float) -> np.ndarray:
    """Fixed position offsets; without them the attention keys built from
    an instruction would be an order-free bag of word vectors."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2 * (i // 2) / dim)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return (enc * scale).astype(np.float32)


class TextCodec:
    """Vocabulary + frozen embedding table + fixed positional offsets; the
    indicator rows double as the per-frame identity embeddings added to
    visual tokens."""

    def __init__(
        self,
        vocab: Vocabulary,
        dim: int,
        seed: int = 0,
        init_std: float = 0.25,
        max_len: int = DEFAULT_TEXT_LEN,
    ):
        self.vocab = vocab
        self.dim = int(dim)
        self.seed = int(seed)
        self.init_std = float(init_std)
        self.max_len = int(max_len)
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((vocab.size, dim)) * init_std
        table[vocab.pad_id] = 0.0
        self.table = table.astype(np.float32)
        self.table.setflags(write=False)
        self.position_table = sinusoidal_positions(max_len, dim, init_std)
        self.position_table.setflags(write=False)

    def tokenize(self, instruction: str, max_len: Optional[int] = None) -> np.ndarray:
        return tokenize(instruction, self.vocab, max_len=max_len or self.max_len)

    def encode_ids(self, token_ids: np.ndarray) -> TextEmbedding:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise TextCodecError("token id out of vocabulary range")
        if len(ids) > self.max_len:
            raise TextCodecError(f"sequence of {len(ids)} tokens exceeds {self.max_len}")
        vectors = self.table[ids] + self.position_table[: len(ids)]
        return TextEmbedding(token_ids=ids, vectors=vectors)

    def encode_text(self, instruction: str) -> TextEmbedding:
        return self.encode_ids(self.tokenize(instruction))

    def indicator_embedding(self, k: int) -> np.ndarray:
        """Embedding-table row of the reserved token "{imageK}"."""
        return self.table[self.vocab.indicator_id(k)]
