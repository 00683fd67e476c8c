import numpy as np
import pytest

from pranet.params import MAGIC, ParameterStore, atomic_write_text, is_buffer_name


def make_store(rng):
    s = ParameterStore()
    s.add("layer.W", rng.normal(size=(3, 4)))
    s.add("layer.b", rng.normal(size=4))
    s.add("layer.bn.running_mean", rng.normal(size=4))
    s.add("scalar", 2.5)
    return s


def test_buffers_are_not_trainable(rng):
    s = make_store(rng)
    assert is_buffer_name("x.running_var")
    assert [n for n, _ in s.named_parameters()] == ["layer.W", "layer.b", "scalar"]
    assert s.num_parameters() == 12 + 4 + 1
    with pytest.raises(KeyError):
        s.add("layer.W", np.ones(1))


def test_prak_round_trip_is_bit_exact(tmp_path, rng):
    s = make_store(rng)
    path = tmp_path / "ck.prak"
    s.save(path)
    assert path.read_bytes()[:4] == MAGIC
    back = ParameterStore.load(path)
    assert back.names() == ["layer.W", "layer.b", "scalar", "layer.bn.running_mean"]
    for name, value in s.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[name], value)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:], lambda b: b[:2], lambda b: b[:20], lambda b: b[:-3], lambda b: b + b"\0",
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
])
def test_corrupt_containers_raise_value_error(mutate, rng):
    with pytest.raises(ValueError):
        ParameterStore.from_bytes(mutate(make_store(rng).to_bytes()))


def test_load_state_dict_strict_and_shape_checks(rng):
    s = make_store(rng)
    state = s.state_dict()
    with pytest.raises(KeyError):
        s.load_state_dict({k: v for k, v in state.items() if k != "scalar"})
    state["layer.b"] = np.ones(5)
    with pytest.raises(ValueError):
        s.load_state_dict(state)


def test_astype_copies(rng):
    s = make_store(rng)
    f = s.astype(np.float32)
    assert f.dtype == np.float32 and s.dtype == np.float64
    assert f["layer.bn.running_mean"].dtype == np.float32


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_text(tmp_path / "a.txt", "hello")
    assert (tmp_path / "a.txt").read_text() == "hello"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
