"""Opcode token embeddings and per-block pooling."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cfg import Cfg
from .disasm import Instruction
from .kernels import sgns_train

UNK = "<UNK>"
EMB_MAGIC = b"EVMHEMB\x00"
EMB_VERSION = 1
_HEADER = struct.Struct("<8sIII")


def _tokens(seq: Iterable[Instruction | str]) -> list[str]:
    return [t if isinstance(t, str) else t.mnemonic for t in seq]


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK:
            raise ValueError("vocabulary must start with the UNK token")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, 0)

    def encode(self, seq: Iterable[Instruction | str]) -> np.ndarray:
        return np.array([self.lookup(t) for t in _tokens(seq)], dtype=np.int64)


def build_vocab(corpus: Iterable[Sequence[Instruction | str]]) -> Vocab:
    """Distinct mnemonics by descending frequency, ties lexicographic; UNK first."""
    freq: Counter[str] = Counter()
    for seq in corpus:
        freq.update(_tokens(seq))
    freq.pop(UNK, None)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab((UNK,) + tuple(t for t, _ in ranked), (0,) + tuple(c for _, c in ranked))


@dataclass(frozen=True)
class SkipGramConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.negatives < 0 or self.epochs < 0:
            raise ValueError("negatives and epochs must be >= 0")


@dataclass
class EmbeddingMatrix:
    vocab: Vocab
    vectors: np.ndarray  # (|V|, D)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        names = "\n".join(self.vocab.tokens).encode()
        counts = np.asarray(self.vocab.counts, dtype="<i8")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, len(self.vocab), self.dim))
            fh.write(struct.pack("<I", len(names)))
            fh.write(names)
            fh.write(counts.tobytes())
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingMatrix:
        data = Path(path).read_bytes()
        magic, version, n_vocab, dim = _HEADER.unpack_from(data, 0)
        if magic != EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        if version != EMB_VERSION:
            raise ValueError(f"{path}: unsupported embedding version {version}")
        pos = _HEADER.size
        (n_bytes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tokens = tuple(data[pos : pos + n_bytes].decode().split("\n"))
        pos += n_bytes
        counts = np.frombuffer(data, "<i8", n_vocab, pos)
        pos += 8 * n_vocab
        vectors = np.frombuffer(data, "<f8", n_vocab * dim, pos).reshape(n_vocab, dim).copy()
        if len(tokens) != n_vocab:
            raise ValueError(f"{path}: vocabulary length mismatch")
        return cls(Vocab(tokens, tuple(int(c) for c in counts)), vectors)


def init_embeddings(vocab: Vocab, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5 / dim, 0.5 / dim, size=(len(vocab), dim))


def _unigram_table(vocab: Vocab, power: float = 0.75) -> np.ndarray:
    weights = np.asarray(vocab.counts, dtype=np.float64) ** power
    cum = np.cumsum(weights)
    return np.round(cum / cum[-1] * 2**31).astype(np.int64)


def train_skipgram(
    corpus: Sequence[Sequence[Instruction | str]],
    vocab: Vocab,
    config: SkipGramConfig = SkipGramConfig(),
) -> EmbeddingMatrix:
    vectors = init_embeddings(vocab, config.dim, config.seed)
    encoded = [vocab.encode(seq) for seq in corpus]
    tokens = np.concatenate(encoded) if encoded else np.zeros(0, dtype=np.int64)
    if config.epochs == 0 or len(set(tokens.tolist())) < 2:
        return EmbeddingMatrix(vocab, vectors)
    starts = np.zeros(len(encoded) + 1, dtype=np.int64)
    starts[1:] = np.cumsum([len(e) for e in encoded])
    hidden = np.zeros_like(vectors)
    sgns_train(
        vectors,
        hidden,
        tokens,
        starts,
        _unigram_table(vocab),
        config.window,
        config.negatives,
        config.epochs,
        config.lr,
        config.seed,
    )
    return EmbeddingMatrix(vocab, vectors)


def embed_blocks(cfg: Cfg, emb: EmbeddingMatrix) -> np.ndarray:
    """Mean-pool token vectors per block; rows follow block index."""
    out = np.empty((cfg.n, emb.dim))
    for b in cfg.blocks:
        out[b.index] = emb.vectors[emb.vocab.encode(b.instructions)].mean(axis=0)
    return out


def standardize_embedding(emb: EmbeddingMatrix, cfgs: Sequence[Cfg]) -> EmbeddingMatrix:
    """Shift and scale token vectors so pooled block rows have zero mean, unit variance.

    Mean pooling commutes with a per-dimension affine map, so applying it to
    the token table is the same as standardizing every block row.
    """
    rows = [embed_blocks(g, emb) for g in cfgs if g.n]
    if not rows:
        return emb
    x = np.concatenate(rows)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return EmbeddingMatrix(emb.vocab, (emb.vectors - mu) / sd)
