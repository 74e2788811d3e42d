from fractions import Fraction

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mudeep.data import ImageSet, synth_generate
from mudeep.model import ModelConfig


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    """Pin BLAS to one thread so seeded runs are bitwise reproducible."""
    with threadpool_limits(limits=1):
        yield


def tiny_config(**kw) -> ModelConfig:
    """Same topology as the full network at 1/8 width on 32x16 inputs."""
    base = dict(input_shape=(3, 32, 16), channel_scale=Fraction(1, 8), embedding_dim=16,
                verif_hidden=8, num_identities=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 identities x 3 images per camera, decoded at 32x16."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    records = synth_generate(4, 3, seed=0, out_dir=out)
    return ImageSet.from_records(records, size=(32, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, config):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    results = getattr(config, "_mudeep_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, checks = results[number]
        ok = all(c[0] for c in checks)
        detail = "; ".join(c[1] for c in checks)
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'} ({title}): {detail}")
