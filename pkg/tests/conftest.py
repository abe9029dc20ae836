import numpy as np
import pytest

from evoked import autodiff as ad
from evoked.model import BackboneConfig
from evoked.synth import SynthConfig, synth_generate


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f with respect to array x (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    """Max relative error with an absolute floor so exact zeros compare sensibly."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def check_graph(build, arrays, h=1e-6):
    """Compare backward() against central differences for every array in ``arrays``.

    ``build(nodes)`` maps leaf nodes to a scalar node. Returns the worst error.
    """
    leaves = [ad.Node("param", (), a) for a in arrays]
    ad.backward(build(leaves))
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        def f():
            return float(build([ad.Node("param", (), b) for b in arrays]).value)
        num = numeric_grad(f, a, h)
        ana = np.zeros_like(a) if leaf.grad is None else leaf.grad
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(vocab_size=7, embed_dim=3, conv_stages=((3, 2, 2),), feature_dim=3)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(seed=3, segments_per_movie=12, viewers=3, feature_dim=8, vocab_size=40)
    manifest, truth = synth_generate(cfg, out)
    return manifest
