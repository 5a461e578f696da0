import numpy as np
import pytest

from conftest import asm
from evmhunt.cfg import build_cfg
from evmhunt.embed import (
    UNK,
    EmbeddingMatrix,
    SkipGramConfig,
    Vocab,
    build_vocab,
    embed_blocks,
    init_embeddings,
    standardize_embedding,
    train_skipgram,
)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_vocab_examples():
    assert build_vocab([["ADD", "ADD", "STOP"]]).tokens == (UNK, "ADD", "STOP")
    assert build_vocab([["ADD"], ["MUL"]]).tokens == (UNK, "ADD", "MUL")
    assert build_vocab([["MUL", "ADD"]]).tokens == (UNK, "ADD", "MUL")
    assert build_vocab([]).tokens == (UNK,)


def test_vocab_frequency_order_and_lookup():
    v = build_vocab([["SUB", "MUL", "MUL", "ADD", "MUL", "SUB"]])
    assert v.tokens == (UNK, "MUL", "SUB", "ADD")
    assert v.counts == (0, 3, 2, 1)
    assert v.lookup("SUB") == 2 and v.lookup("NOPE") == 0
    assert v.encode(["ADD", "XOR"]).tolist() == [3, 0]


def test_vocab_requires_unk_first():
    with pytest.raises(ValueError):
        Vocab(("ADD",), (1,))


def _two_topic_corpus(rng, n=400):
    corpus = []
    for _ in range(n):
        pool = ["A", "B"] if rng.random() < 0.5 else ["C", "D"]
        corpus.append([pool[int(k)] for k in rng.integers(0, 2, size=12)])
    return corpus


def test_cooccurrence_ordering():
    corpus = _two_topic_corpus(np.random.default_rng(0))
    vocab = build_vocab(corpus)
    emb = train_skipgram(corpus, vocab, SkipGramConfig(dim=16, epochs=3, seed=1))
    a, b, c = (emb.vectors[vocab.lookup(t)] for t in "ABC")
    assert cos(a, b) > cos(a, c)


def test_deterministic():
    corpus = _two_topic_corpus(np.random.default_rng(1), 50)
    vocab = build_vocab(corpus)
    cfg = SkipGramConfig(dim=8, epochs=2, seed=5)
    e1 = train_skipgram(corpus, vocab, cfg).vectors
    e2 = train_skipgram(corpus, vocab, cfg).vectors
    assert e1.tobytes() == e2.tobytes()
    e3 = train_skipgram(corpus, vocab, SkipGramConfig(dim=8, epochs=2, seed=6)).vectors
    assert not np.array_equal(e1, e3)


def test_zero_epochs_returns_init():
    corpus = _two_topic_corpus(np.random.default_rng(2), 20)
    vocab = build_vocab(corpus)
    emb = train_skipgram(corpus, vocab, SkipGramConfig(dim=8, epochs=0, seed=3))
    assert np.array_equal(emb.vectors, init_embeddings(vocab, 8, 3))


def test_single_token_corpus_returns_init():
    corpus = [["ADD"] * 10]
    vocab = build_vocab(corpus)
    emb = train_skipgram(corpus, vocab, SkipGramConfig(dim=4, epochs=3, seed=0))
    assert np.array_equal(emb.vectors, init_embeddings(vocab, 4, 0))


def test_config_validation():
    for bad in ({"dim": 0}, {"window": 0}, {"negatives": -1}, {"epochs": -1}):
        with pytest.raises(ValueError):
            SkipGramConfig(**bad)


def _matrix():
    vocab = Vocab((UNK, "ADD", "MUL", "STOP"), (0, 3, 2, 1))
    return EmbeddingMatrix(vocab, np.arange(12, dtype=float).reshape(4, 3))


def test_pooling():
    emb = _matrix()
    g = build_cfg(asm("ADD", "JUMPDEST", "ADD", "ADD", "JUMPDEST", "ADD", "MUL", "JUMPDEST", "XOR"))
    x = embed_blocks(g, emb)
    rows = emb.vectors
    assert x.shape == (4, 3)
    assert np.array_equal(x[0], rows[1])
    # JUMPDEST is out of vocabulary here, so it pools as UNK
    assert np.allclose(x[1], (rows[0] + 2 * rows[1]) / 3)
    assert np.allclose(x[2], (rows[0] + rows[1] + rows[2]) / 3)
    assert np.allclose(x[3], rows[0])


def test_pooling_ignores_order_within_block():
    emb = _matrix()
    a = embed_blocks(build_cfg(asm("ADD", "MUL", "STOP")), emb)
    b = embed_blocks(build_cfg(asm("MUL", "ADD", "STOP")), emb)
    assert np.allclose(a, b)


def test_file_round_trip(tmp_path):
    emb = _matrix()
    path = tmp_path / "emb.bin"
    emb.save(path)
    back = EmbeddingMatrix.load(path)
    assert back.vocab == emb.vocab
    assert back.vectors.tobytes() == emb.vectors.tobytes()


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTEMBED" + bytes(20))
    with pytest.raises(ValueError):
        EmbeddingMatrix.load(path)


def test_standardize_commutes_with_pooling():
    rng = np.random.default_rng(0)
    vocab = Vocab((UNK, "ADD", "MUL", "STOP", "POP"), (0, 1, 1, 1, 1))
    emb = EmbeddingMatrix(vocab, rng.normal(size=(5, 6)))
    cfgs = [build_cfg(asm("ADD", "MUL", "JUMPDEST", "POP")), build_cfg(asm("STOP", "JUMPDEST", "ADD"))]
    std = standardize_embedding(emb, cfgs)
    x = np.concatenate([embed_blocks(g, std) for g in cfgs])
    assert np.allclose(x.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(x.std(axis=0), 1.0)
    raw = np.concatenate([embed_blocks(g, emb) for g in cfgs])
    assert np.allclose(x, (raw - raw.mean(0)) / raw.std(0))
