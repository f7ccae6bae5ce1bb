import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bilevel_ssl.params import CHECKPOINT_MAGIC, ParamSet, load_params, save_params


def test_arithmetic_and_norms():
    a = ParamSet({"w": [3.0, 4.0], "b": [0.0]})
    assert a.norm() == 5.0
    assert a.dot(a) == 25.0
    np.testing.assert_array_equal((a * 2 - a)["w"], [3.0, 4.0])
    np.testing.assert_array_equal((-a)["w"], [-3.0, -4.0])


def test_mismatched_names_rejected():
    with pytest.raises(KeyError):
        ParamSet({"a": [1.0]}) + ParamSet({"b": [1.0]})
    with pytest.raises(ValueError):
        ParamSet({"a": [1.0]}) + ParamSet({"a": [1.0, 2.0]})


def test_flat_round_trip(rng):
    p = ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)})
    assert p.unflatten(p.flat()).equal(p)
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(3))


def test_copy_is_independent():
    p = ParamSet({"a": [1.0]})
    q = p.copy()
    q["a"][0] = 2.0
    assert p["a"][0] == 1.0


def test_checkpoint_layout(tmp_path):
    p = ParamSet({"enc.0.w": np.arange(6.0).reshape(2, 3), "s": 1.5})
    path = tmp_path / "p.ckpt"
    save_params(p, path)
    buf = path.read_bytes()
    expected = (
        CHECKPOINT_MAGIC + struct.pack("<II", 1, 2)
        + struct.pack("<H", 7) + b"enc.0.w" + struct.pack("<BII", 2, 2, 3) + np.arange(6.0).astype("<f8").tobytes()
        + struct.pack("<H", 1) + b"s" + struct.pack("<B", 0) + struct.pack("<d", 1.5)
    )
    assert buf == expected


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError):
        load_params(path)


names = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=6)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=False, allow_infinity=False, width=64))


@given(st.dictionaries(names, arrays, min_size=1, max_size=4))
def test_checkpoint_round_trip_is_bitwise(tmp_path_factory, tensors):
    p = ParamSet(tensors)
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_params(p, path)
    assert load_params(path).equal(p)
