import json
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from stablemix import io, streams


@given(st.floats(allow_nan=False))
@settings(max_examples=500)
def test_float_round_trip(x):
    s = io.fmt_float(x)
    assert float(s.replace("Infinity", "inf")) == x
    assert not math.isfinite(x) or any(c in s for c in ".e")


def test_whole_floats_stay_floats():
    assert io.fmt_float(4.0) == "4.0"
    assert isinstance(json.loads(io.dumps({"a": 0.0}))["a"], float)


def test_dumps_parses():
    obj = {"a": [1, 2.5, True], "b": {"c": np.float64(0.1), "d": np.arange(3)}, "e": [], "f": None,
           "g": [{"x": 1}], "h": math.inf}
    back = json.loads(io.dumps(obj))
    assert back["a"] == [1, 2.5, True] and back["b"] == {"c": 0.1, "d": [0, 1, 2]}
    assert back["h"] == math.inf and back["g"] == [{"x": 1}]
    assert json.loads(io.dumps(obj, indent=None)) == back


def test_csv_and_checksum(tmp_path):
    p = tmp_path / "a.csv"
    io.write_csv(p, ["t", "v"], [(0.1, 1 / 3), (2, np.float64(2.0))])
    lines = p.read_text().splitlines()
    assert lines[0] == "t,v" and float(lines[1].split(",")[1]) == 1 / 3
    assert lines[2] == "2,2.0"
    assert len(io.sha256(p)) == 64


def test_block_sizes():
    assert streams.block_sizes(0) == []
    assert streams.block_sizes(10, 4) == [4, 4, 2]
    assert sum(streams.block_sizes(10**5)) == 10**5


def test_streams_independent_of_order():
    a = streams.split(42, 3).random(5)
    streams.split(42, 1).random(100)
    assert np.array_equal(a, streams.split(42, 3).random(5))
    assert not np.array_equal(a, streams.split(42, 4).random(5))


def _draw(rng, i, n):
    return i, rng.random(n)


def test_map_streams_worker_invariant():
    one = streams.map_streams(_draw, 6, 7, (3,), workers=1)
    many = streams.map_streams(_draw, 6, 7, (3,), workers=3)
    assert [i for i, _ in one] == list(range(6))
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(one, many))
