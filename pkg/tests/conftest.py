import numpy as np
import pytest

from madlab import asmtok, corpus, model
from madlab.staticfeat import HashSpec, StaticFeatures


TOY = dict(d_model=8, n_heads=2, n_layers=1, ffn_dim=16, max_seq_len=8,
           d_dll=8, d_str=8, head_hidden=8)


def toy_config(vocab_size=16, **overrides):
    return model.DetectorConfig(vocab_size=vocab_size, **{**TOY, **overrides})


def random_fused_input(mdl, rng):
    """A FusedInput built through embed() from random ids/counts."""
    cfg = mdl.config
    true_len = int(rng.integers(1, cfg.max_seq_len + 1))
    ids = list(rng.integers(0, cfg.vocab_size, size=cfg.max_seq_len))
    ids[true_len:] = [asmtok.PAD] * (cfg.max_seq_len - true_len)
    seq = asmtok.TokenSequence(ids=ids, true_len=true_len)
    sf = StaticFeatures(
        dll_vec=rng.poisson(1.0, size=cfg.d_dll).astype(np.float64),
        str_vec=rng.poisson(1.0, size=cfg.d_str).astype(np.float64),
    )
    return model.embed(mdl, seq, sf)


@pytest.fixture
def toy_model():
    return model.init_model(toy_config(), "toyvocab")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 40+40 synthetic corpus with vocab and encoded train/test splits."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = corpus.SynthConfig(
        n_benign=40, n_malware=40, vocab_pool=120, separability=0.9,
        seq_len_range=(30, 60), seed=11,
    )
    manifest = corpus.generate_synthetic_corpus(cfg, root)
    train_man, test_man = corpus.stratified_split(manifest, 0.2, seed=5)
    vocab = asmtok.build_vocab(
        (asmtok.tokenize(r.read_asm()) for r in train_man.records), max_size=512)
    spec = HashSpec(dll_dims=64, str_dims=64)
    dcfg = model.DetectorConfig(
        vocab_size=len(vocab), d_model=32, n_heads=2, n_layers=1, ffn_dim=64,
        max_seq_len=64, d_dll=64, d_str=64, head_hidden=32,
        epochs=3, batch_size=32, seed=9,
    )
    return {
        "root": root,
        "manifest": manifest,
        "train_man": train_man,
        "test_man": test_man,
        "vocab": vocab,
        "spec": spec,
        "config": dcfg,
        "train_set": model.encode_records(train_man.records, vocab, spec, dcfg.max_seq_len),
        "test_set": model.encode_records(test_man.records, vocab, spec, dcfg.max_seq_len),
    }


@pytest.fixture(scope="session")
def small_trained(small_corpus):
    mdl = model.init_model(small_corpus["config"], small_corpus["vocab"].fingerprint())
    mdl, history = model.train(mdl, small_corpus["train_set"])
    return mdl, history
