import jax
import numpy as np
import pytest

from snlds import checkpoint
from snlds.errors import ConfigurationError
from snlds.model import ModelConfig
from snlds.training import SwitchingModel, adam_init


@pytest.fixture
def params():
    return SwitchingModel(ModelConfig(K=2, H=3, D=2)).init(jax.random.PRNGKey(3))


def test_round_trip_is_bit_exact(tmp_path, params):
    path = tmp_path / "p.bin"
    checkpoint.save(path, params)
    restored = checkpoint.load(path, params)
    for (name, a), (_, b) in zip(checkpoint.flatten(params), checkpoint.flatten(restored)):
        assert a.tobytes() == b.tobytes(), name


def test_integer_leaves_keep_their_dtype(tmp_path, params):
    state = adam_init(params)
    path = tmp_path / "opt.bin"
    checkpoint.save(path, state)
    restored = checkpoint.load(path, state)
    assert restored.count.dtype == state.count.dtype


def test_save_is_deterministic(tmp_path, params):
    checkpoint.save(tmp_path / "a.bin", params)
    checkpoint.save(tmp_path / "b.bin", params)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_shape_mismatch_names_the_tensor(tmp_path, params):
    checkpoint.save(tmp_path / "p.bin", params)
    other = SwitchingModel(ModelConfig(K=3, H=3, D=2)).init(jax.random.PRNGKey(3))
    with pytest.raises(ConfigurationError, match=r"\['gen'\]\['.*'\].*shape"):
        checkpoint.load(tmp_path / "p.bin", other)


def test_structure_mismatch(tmp_path, params):
    checkpoint.save(tmp_path / "p.bin", {"a": np.zeros(2)})
    with pytest.raises(ConfigurationError, match="tensors"):
        checkpoint.load(tmp_path / "p.bin", params)


def test_missing_tensor_is_named(tmp_path):
    checkpoint.save(tmp_path / "p.bin", {"a": np.zeros(2)})
    with pytest.raises(ConfigurationError, match=r"\['b'\]"):
        checkpoint.load(tmp_path / "p.bin", {"b": np.zeros(2)})


def test_bad_magic_and_truncation(tmp_path):
    blob = checkpoint.encode([("w", np.arange(3.0))])
    with pytest.raises(ConfigurationError, match="magic"):
        checkpoint.decode(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ConfigurationError, match="trailing"):
        checkpoint.decode(blob + b"\0")


def test_layout_is_little_endian_f64():
    blob = checkpoint.encode([("w", np.array([[1.5, -2.0]]))])
    assert blob[:8] == b"SNLDSCKP"
    assert np.frombuffer(blob[-16:], "<f8").tolist() == [1.5, -2.0]
    assert checkpoint.decode(blob)[0][1].shape == (1, 2)
