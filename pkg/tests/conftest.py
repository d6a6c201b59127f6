import numpy as np
import pytest

from adapterlab.backbone import ModelConfig, attach_downstream, init_encoder
from adapterlab.bench.data import Dataset, deterministic_split
from adapterlab.numkernel import make_rng


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=8, L=2, heads=2, n_tokens=5, input_dim=12, C=3, rank=2)


def make_state(cfg, seed=0, regime=None):
    from dataclasses import replace

    if regime is not None:
        cfg = replace(cfg, regime=regime)
    backbone = init_encoder(replace(cfg, regime="full_ft"), make_rng(seed))
    return attach_downstream(backbone, cfg, make_rng(seed, 1))


def blob_dataset(n_per_class=40, dim=12, C=3, seed=0, name="blobs"):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=2.0, size=(C, dim))
    X = np.concatenate([centers[c] + rng.normal(size=(n_per_class, dim)) for c in range(C)])
    y = np.repeat(np.arange(C), n_per_class)
    return deterministic_split(Dataset(name, X, y, C), (0.75, 0.25, 0.0), seed)


ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
