"""
Checkpoint save/load tests.
"""
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from bnplab.config import Arch, Method
from bnplab.errors import BnpLabError, ShapeError
from bnplab.linalg import make_rng
from bnplab.network import CHECKPOINT_SCHEMA_VERSION, build_network, load_checkpoint, save_checkpoint
from bnplab.precond import BnpState, update_stats


def _assert_same_state(a, b):
    for la, lb in zip(a.layers, b.layers):
        sa, sb = la.state_dict(), lb.state_dict()
        assert sa.keys() == sb.keys()
        for name in sa:
            assert_array_equal(sa[name], sb[name])


def test_round_trip_is_bit_exact(tmp_path):
    source = build_network(Arch.MLP_2LAYER, (6,), 3, Method.BN, make_rng(0))
    source.forward(make_rng(1).standard_normal((8, 6)))
    path = save_checkpoint(str(tmp_path / "model"), source)
    assert path.endswith(".npz")

    target = build_network(Arch.MLP_2LAYER, (6,), 3, Method.BN, make_rng(99))
    assert load_checkpoint(path, target) == {}
    _assert_same_state(source, target)
    x = make_rng(2).standard_normal((4, 6))
    assert_array_equal(source.predict(x), target.predict(x))


def test_bnp_states_survive(tmp_path):
    network = build_network(Arch.MLP_2LAYER, (5,), 2, Method.BNP, make_rng(0))
    state = update_stats(BnpState.for_dense(5, 100, rho=0.9, eps1=0.02, use_running_stats=False),
                         make_rng(3).standard_normal((4, 5)))
    path = save_checkpoint(str(tmp_path / "bnp.npz"), network, {0: state})

    restored = load_checkpoint(path, build_network(Arch.MLP_2LAYER, (5,), 2, Method.BNP, make_rng(1)))
    assert list(restored) == [0]
    loaded = restored[0]
    assert loaded.layer_shape == (5, 100)
    assert_array_equal(loaded.mu, state.mu)
    assert_array_equal(loaded.sigma2, state.sigma2)
    assert (loaded.rho, loaded.eps1, loaded.eps2) == (0.9, 0.02, state.eps2)
    assert loaded.use_running_stats is False


def test_schema_version_checked(tmp_path):
    network = build_network(Arch.MLP_2LAYER, (3,), 2, Method.VANILLA, make_rng(0))
    path = str(tmp_path / "old.npz")
    np.savez(path, schema_version=np.array(CHECKPOINT_SCHEMA_VERSION + 1))
    with pytest.raises(BnpLabError):
        load_checkpoint(path, network)


def test_architecture_mismatch_rejected(tmp_path):
    small = build_network(Arch.MLP_2LAYER, (3,), 2, Method.VANILLA, make_rng(0))
    path = save_checkpoint(str(tmp_path / "small.npz"), small)
    with pytest.raises(ShapeError):
        load_checkpoint(path, build_network(Arch.MLP_2LAYER, (4,), 2, Method.VANILLA, make_rng(0)))
    with pytest.raises(ShapeError):
        load_checkpoint(path, build_network(Arch.MLP_3X100, (3,), 2, Method.VANILLA, make_rng(0)))
