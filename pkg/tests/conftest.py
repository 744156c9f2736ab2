import numpy as np
import pytest

from scadatensor.ingest import MessageRecord


def random_tensor(rng, shape, density=0.3, max_count=5):
    from scadatensor.sparse_tensor import SparseTensorCOO

    dense = rng.integers(1, max_count + 1, size=shape) * (rng.random(shape) < density)
    # every slice needs a nonzero for the positivity guarantees
    for mode, n in enumerate(shape):
        for i in range(n):
            sl = [slice(None)] * len(shape)
            sl[mode] = i
            if not dense[tuple(sl)].any():
                idx = [int(rng.integers(s)) for s in shape]
                idx[mode] = i
                dense[tuple(idx)] = 1
    coords = np.argwhere(dense > 0)
    return SparseTensorCOO.from_arrays(coords, dense[dense > 0], shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_log():
    # two RTUs polled alternately; RTU_02 also uses a second point block once
    rows = [
        (1000, "RTU_01", 12, "CH_1"),
        (1500, "RTU_02", 4, "CH_2"),
        (2000, "RTU_01", 12, "CH_1"),
        (2600, "RTU_02", 4, "CH_2"),
        (3000, "RTU_01", 12, "CH_1"),
        (3700, "RTU_02", 8, "CH_2"),
        (4000, "RTU_01", 12, "CH_1"),
        (4800, "RTU_02", 4, "CH_2"),
        (5000, "RTU_01", 12, "CH_1"),
        (5900, "RTU_02", 4, "CH_2"),
    ]
    return [MessageRecord(*r) for r in rows]
