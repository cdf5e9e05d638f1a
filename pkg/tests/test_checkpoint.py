import numpy as np
import pytest

from bevloc.checkpoint import ParamSet, load_params, save_params


def test_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(3)
    p = ParamSet()
    p.add("enc.mix", rng.normal(size=(12, 8)))
    p.add("reg.lam", np.array(-1.0))
    p.add("dec.bias", rng.normal(size=5) * 1e-17)
    path = tmp_path / "ckpt.txt"
    save_params(p, path)
    q = load_params(path)
    assert q.names() == p.names()
    for name, t in p.items():
        np.testing.assert_array_equal(q[name].data, t.data)
        assert q[name].data.shape == t.data.shape
    # saving the loaded set is byte-identical
    path2 = tmp_path / "ckpt2.txt"
    save_params(q, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_header_validated(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        load_params(path)


def test_flat_vector_round_trip():
    p = ParamSet()
    p.add("a", np.arange(6.0).reshape(2, 3))
    p.add("b", np.array(3.5))
    vec = p.to_vector()
    assert vec.size == 7
    vec2 = vec * 2.0
    p.from_vector(vec2)
    np.testing.assert_array_equal(p["a"].data, np.arange(6.0).reshape(2, 3) * 2)
    assert p["b"].data == 7.0
    sl = p.slice_of("b")
    assert vec2[sl] == np.array([7.0])


def test_duplicate_and_missing_names():
    p = ParamSet()
    p.add("x", np.zeros(2))
    with pytest.raises(KeyError):
        p.add("x", np.zeros(2))
    with pytest.raises(KeyError):
        p.slice_of("nope")
