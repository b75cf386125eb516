import numpy as np
import pytest

from jointrank.corpus import GeneratorConfig, generate_synthetic
from jointrank.trainer import TrainConfig, init_models, warm_start

TINY = GeneratorConfig(num_passages=160, num_queries=24, num_dev_queries=8, vocab_size=32,
                       topic_count=8, tokens_per_passage=12, tokens_per_query=5)
TINY_TRAIN = TrainConfig(epochs=1, batch_size=4, emb_dim=8, hidden_dim=8, out_dim=8,
                         warm_epochs=2, eval_depth=20)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY, 11)


@pytest.fixture(scope="session")
def tiny_models(tiny_data):
    init = init_models(tiny_data.corpus.vocab_size, TINY_TRAIN)
    return warm_start(tiny_data.corpus, tiny_data.train_queries, tiny_data.qrels, TINY_TRAIN, init)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark():
    """The default synthetic benchmark, warm-started and augmented at seed 7."""
    from jointrank import pipeline
    from jointrank.augmentation import AugmentConfig

    data = generate_synthetic(GeneratorConfig(), 7)
    return pipeline.prepare(data, TrainConfig(), AugmentConfig())


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
