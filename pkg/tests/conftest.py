import numpy as np
import pytest

from densecap3d import synthetic
from densecap3d.model import Model, ModelConfig

TINY = ModelConfig(k_neighbors=2, fusion_hidden=16, language_hidden=16, attention_dim=8, message_hidden=8,
                   orientation_hidden=8)


@pytest.fixture(scope="session")
def world():
    return synthetic.World.create(0)


@pytest.fixture(scope="session")
def vocab():
    return synthetic.template_vocabulary()


@pytest.fixture(scope="session")
def small_scenes(world):
    return synthetic.make_dataset(4, 4, seed=0, world=world, num_classes=6)


@pytest.fixture
def tiny_model(world, vocab):
    return Model.create(TINY, vocab, world.embedding_table(vocab), seed=0)


def jitter(model, seed, scale=0.1):
    """Move every parameter off its initial value (zero biases, zero scorer)."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = (p.data + rng.normal(0.0, scale, p.data.shape)).astype(p.data.dtype)
    return model


# One PASS/FAIL line per acceptance criterion, repeated in the terminal summary
# so it survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
