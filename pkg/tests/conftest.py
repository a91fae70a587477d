import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from t2ireid.data import Vocabulary  # noqa: E402
from t2ireid.ontology import default_ontology  # noqa: E402
from t2ireid.pretrain import DualEncoder, EncoderConfig  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_vocab():
    return Vocabulary.build(["the woman has long hair .", "a man is walking with a red bag"])


def tiny_encoder(vocab_size=12, in_dim=5, width=8, dim=8, max_len=10, mode="transformer", seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cfg = EncoderConfig(
        vocab_size=vocab_size, visual_in_dim=in_dim, visual_layers=1, visual_width=width, visual_heads=2,
        text_layers=1, text_width=width, text_heads=2, max_len=max_len, embed_dim=dim, mode=mode,
    )
    return DualEncoder(cfg).to(dtype)


@pytest.fixture
def tiny_model():
    return tiny_encoder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def toy_pretrain_config(seed=0, **kw):
    from t2ireid.config import TOY_PRESET
    from t2ireid.pretrain import PretrainConfig

    p = TOY_PRESET
    base = dict(
        epochs=p["pretrain_epochs"], batch_size=p["pretrain_batch_size"], lr=p["pretrain_lr"], tau=p["tau"],
        max_len=p["max_len"], encoder=dict(p["encoder"]), seed=seed,
    )
    base.update(kw)
    return PretrainConfig(**base)


def toy_finetune_config(seed=0, **kw):
    from t2ireid.config import TOY_PRESET
    from t2ireid.finetune import FinetuneConfig

    base = dict(epochs=TOY_PRESET["finetune_epochs"], batch_size=TOY_PRESET["finetune_batch_size"], seed=seed)
    base.update(kw)
    return FinetuneConfig(**base)


@pytest.fixture(scope="session")
def toy_manifest():
    from t2ireid.toy import toy_benchmark

    return toy_benchmark(0)


@pytest.fixture(scope="session")
def toy_pretrained(toy_manifest):
    from t2ireid.cli import pretrain_records
    from t2ireid.pretrain import pretrain_loop

    torch.set_num_threads(1)
    return pretrain_loop(pretrain_records(toy_manifest), toy_pretrain_config(0))
