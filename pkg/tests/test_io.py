import struct

import numpy as np
import pytest

from conftest import random_tt
from tt_quotient import io
from tt_quotient.completion import SampleSet


def test_binary_layout(rng):
    X = random_tt(rng, (2, 3), (1, 2, 1))
    buf = io.dumps_tt(X)
    assert buf[:8] == b"TTQTENS\x00"
    assert struct.unpack_from("<II", buf, 8) == (1, 2)
    assert struct.unpack_from("<2Q", buf, 16) == (2, 3)
    assert struct.unpack_from("<3Q", buf, 32) == (1, 2, 1)
    first = np.frombuffer(buf, "<f8", count=4, offset=56)
    np.testing.assert_array_equal(first, X.cores[0].ravel(order="C"))
    assert len(buf) == 56 + 8 * (4 + 6)


def test_binary_roundtrip_is_exact(rng, tmp_path):
    X = random_tt(rng, (3, 4, 2, 5), (1, 2, 3, 2, 1))
    io.save_tt(X, tmp_path / "x.ttq")
    Y = io.load_tt(tmp_path / "x.ttq")
    for a, b in zip(X.cores, Y.cores):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXXXXXX" + b[8:],
        lambda b: b[:8] + struct.pack("<I", 9) + b[12:],
        lambda b: b[:-8],
        lambda b: b + b"\x00",
        lambda b: b[:12],
    ],
)
def test_binary_rejects_corruption(rng, mutate):
    buf = io.dumps_tt(random_tt(rng, (2, 3), (1, 2, 1)))
    with pytest.raises(io.FormatError):
        io.loads_tt(mutate(buf))


def test_json_roundtrip_is_exact(rng, tmp_path):
    X = random_tt(rng, (3, 2, 4), (1, 2, 2, 1))
    io.save_tt_json(X, tmp_path / "x.json")
    Y = io.load_tt_json(tmp_path / "x.json")
    for a, b in zip(X.cores, Y.cores):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(io.FormatError):
        io.tt_from_json('{"format": "other"}')
    with pytest.raises(io.FormatError):
        io.tt_from_json("not json")
    bad = io.tt_to_json(X).replace('"dims": [3, 2, 4]', '"dims": [3, 3, 4]')
    with pytest.raises(io.FormatError):
        io.tt_from_json(bad)


def test_sample_file_roundtrip(rng, tmp_path):
    idx = np.array([[0, 1, 2], [3, 0, 1], [1, 1, 1]])
    S = SampleSet(idx, rng.standard_normal(3), (4, 2, 3))
    path = tmp_path / "s.txt"
    io.save_samples(S, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "3 4 2 3 3"
    assert lines[1].split()[:3] == ["1", "2", "3"]
    T = io.load_samples(path)
    np.testing.assert_array_equal(T.indices, S.indices)
    np.testing.assert_array_equal(T.values, S.values)
    assert T.dims == S.dims


@pytest.mark.parametrize(
    "text",
    [
        "",
        "2 3 3 1\n1 1\n",
        "2 3 3 2\n1 1 0.5\n",
        "2 3 3 1\n0 1 0.5\n",
        "2 3 3 1\n1 1 abc\n",
        "2 3 3 2\n1 1 0.5\n1 1 0.7\n",
        "2 3 1\n1 1 0.5\n",
    ],
)
def test_sample_file_errors(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(io.FormatError):
        io.load_samples(path)


def test_sample_file_comments(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# header next\n2 2 2 1\n\n2 1 -1.5\n")
    S = io.load_samples(path)
    np.testing.assert_array_equal(S.indices, [[1, 0]])
    assert S.values[0] == -1.5
