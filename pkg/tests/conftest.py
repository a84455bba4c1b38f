import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gnfzip.geneformer import GeneformerModel, ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**kw):
    """A model small enough for scalar-loop oracles."""
    base = dict(d_model=8, d_ff=16, n_heads=2, context_len=16, ngram=1, byte_group=2,
                conv_kernel=3, pool_kernel=2, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model: GeneformerModel, seed=0, scale=0.3):
    """Perturb every parameter and buffer so no term is trivially zero."""
    r = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = t.data + r.normal(0, scale, t.shape)
    model.buffers["bn.running_mean"] = r.normal(0, 0.1, model.buffers["bn.running_mean"].shape)
    model.buffers["bn.running_var"] = r.uniform(0.5, 1.5, model.buffers["bn.running_var"].shape)
    return model


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed and hasattr(rep.longrepr, "reprcrash"):
        detail.append(rep.longrepr.reprcrash.message.splitlines()[0])
    item.config.stash[_CRITERIA][n] = ("PASS" if rep.passed else "FAIL", title, "; ".join(detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        terminalreporter.write_line(f"{status} criterion {n:>2} {title}: {detail}")
