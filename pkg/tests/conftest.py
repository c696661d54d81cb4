import numpy as np
import pytest

from duet.dataset import generate_corpus
from duet.model import train_victim


@pytest.fixture(scope="session")
def small_world():
    """A 32x32 corpus and a victim trained on it, shared across test modules."""
    corpus = generate_corpus(7, m=32, n_images=160, val=0, test=60, calib=0)
    train = corpus.subset("train")
    victim = train_victim(train.images, train.labels, 4, epochs=4, seed=7)
    return corpus, victim


class LinearVictim:
    """Victim whose per-image loss is sum(c * x) with a fixed coefficient image."""

    num_classes = 2

    def __init__(self, coef):
        self.coef = np.asarray(coef, dtype=np.float64)

    def loss_and_input_grad(self, images, labels):
        images = np.asarray(images)
        per = np.sum(images * self.coef, axis=(1, 2, 3))
        return per, np.broadcast_to(self.coef, images.shape).copy()

    def losses(self, images, labels):
        return self.loss_and_input_grad(images, labels)[0]


@pytest.fixture
def linear_victim():
    return LinearVictim


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(acceptance.RESULTS.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
