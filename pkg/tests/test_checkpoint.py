import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gltpeft import checkpoint
from gltpeft.errors import ConfigError

arrays = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=3),
    elements=st.floats(allow_nan=True, allow_infinity=True, width=64),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=12), st.sampled_from(["frozen", "head", "glt-adapted"]), arrays), max_size=5, unique_by=lambda r: r[0]))
def test_roundtrip_bit_exact(records):
    back = checkpoint.loads(checkpoint.dumps(records))
    assert [(n, t) for n, t, _ in back] == [(n, t) for n, t, _ in records]
    for (_, _, a), (_, _, b) in zip(back, records):
        assert a.shape == b.shape
        assert a.tobytes() == np.ascontiguousarray(b).tobytes()


def test_header_layout():
    data = checkpoint.dumps([("w", "frozen", np.array([1.5, -2.0]))])
    assert data[:8] == b"GLTCKPT\0"
    assert data[8] == 1
    assert struct.unpack("<I", data[9:13])[0] == 1
    assert data[-16:] == np.array([1.5, -2.0], dtype="<f8").tobytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: b"NOTACKPT" + d[8:],
        lambda d: d[:8] + b"\x02" + d[9:],
        lambda d: d[:-3],
        lambda d: d + b"\0",
    ],
)
def test_corrupt_rejected(mutate):
    data = checkpoint.dumps([("w", "frozen", np.arange(4.0))])
    with pytest.raises(ConfigError):
        checkpoint.loads(mutate(data))


def test_duplicate_names_rejected():
    with pytest.raises(ConfigError):
        checkpoint.dumps([("w", "frozen", np.zeros(1)), ("w", "head", np.zeros(1))])


def test_file_roundtrip(tmp_path):
    recs = [("a", "frozen", np.eye(3)), ("b.c", "head", np.zeros((0, 2)))]
    path = checkpoint.save(tmp_path / "x.ckpt", recs)
    back = checkpoint.load(path)
    assert np.array_equal(back[0][2], np.eye(3)) and back[1][2].shape == (0, 2)
