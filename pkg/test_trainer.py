"""
Training session and condition-number trace tests on synthetic data.
"""
import numpy as np
import pytest

from bnplab.config import Arch, DatasetName, Method, Mode, RunConfig
from bnplab.data import synth_illconditioned, train_test_split
from bnplab.errors import BatchSizeError, ConfigError
from bnplab.linalg import make_rng
from bnplab.network import build_network
from bnplab.trainer import MetricsRow, TrainingSession, kappa_of_scaling, run_cond_trace, run_training


def _synth_config(tmp_path, **kwargs):
    values = dict(
        dataset=DatasetName.SYNTH, arch=Arch.MLP_2LAYER, synth_samples=200, scale_decades=0.0,
        batch_size=16, epochs=1, log_every=5, out=str(tmp_path),
    )
    values.update(kwargs)
    return RunConfig(**values)


def _synth_split(config):
    return train_test_split(
        synth_illconditioned(config.n_features, config.synth_samples, config.scale_decades, config.seed)
    )


def test_metrics_row_formatting():
    row = MetricsRow(epoch=1, step=10, train_loss=0.5, test_accuracy=None, kappa_D=[2.0, 3.5])
    assert row.as_csv_row() == ["1", "10", "0.5", "", "2.0;3.5", "", ""]


def test_bn_session_refuses_batch_size_one(tmp_path):
    config = _synth_config(tmp_path, method=Method.BN, batch_size=1)
    with pytest.raises(BatchSizeError, match="BN undefined at batch size 1"):
        TrainingSession.create(config, (20,), 2)


def test_rows_follow_logging_schedule(tmp_path):
    config = _synth_config(tmp_path, method=Method.BNP)
    train, test = _synth_split(config)
    session = run_training(config, train, test)
    assert session.step == 10
    assert [(r.step, r.test_accuracy is None) for r in session.rows] == [(5, True), (10, True), (10, False)]
    assert len(session.rows[-1].kappa_D) == len(session.bnp_states) == 3
    assert all(k >= 1.0 for k in session.rows[-1].kappa_D)
    assert kappa_of_scaling(session.bnp_states[0]) == session.rows[-1].kappa_D[0]


def test_bn_skips_lone_trailing_sample(tmp_path):
    config = _synth_config(tmp_path, method=Method.BN, batch_size=3)
    train, test = _synth_split(config)
    assert len(train) % 3 == 1
    session = run_training(config, train, test)
    assert session.step == len(train) // 3
    assert np.isfinite(session.rows[-1].train_loss)


def test_max_steps_stops_training(tmp_path):
    config = _synth_config(tmp_path, method=Method.VANILLA, epochs=3, max_steps=7)
    train, test = _synth_split(config)
    assert run_training(config, train, test).step == 7


def test_training_is_deterministic(tmp_path):
    config = _synth_config(tmp_path, method=Method.BN)
    train, test = _synth_split(config)
    a = run_training(config, train, test)
    b = run_training(config, train, test)
    assert [r.as_csv_row() for r in a.rows] == [r.as_csv_row() for r in b.rows]


@pytest.mark.parametrize("method,lr", [(Method.VANILLA, 0.01), (Method.BNP, 0.1)])
def test_batch_size_one_reduces_training_loss(tmp_path, method, lr):
    config = _synth_config(tmp_path, method=method, lr=lr, batch_size=1, synth_samples=2000, log_every=100)
    train, test = _synth_split(config)
    before = build_network(config.arch, (20,), 2, method, make_rng(config.seed)).loss(train.inputs, train.labels)
    session = run_training(config, train, test)
    after = session.network.loss(train.inputs, train.labels)
    assert session.step == len(train)
    assert after < 0.8 * before


def test_cond_trace_improves_conditioning(tmp_path):
    config = _synth_config(
        tmp_path, mode=Mode.COND_TRACE, method=Method.BNP, scale_decades=3.0, synth_samples=2000,
        batch_size=60, epochs=4, max_steps=100, log_every=10,
    )
    train, _ = _synth_split(config)
    rows, fraction = run_cond_trace(config, train)
    assert [r.step for r in rows] == list(range(0, 100, 10))
    assert fraction >= 0.9
    assert all(1e2 <= r.kappa_D_input <= 1e5 for r in rows)
    assert all(np.isfinite(r.train_loss) for r in rows)


def test_cond_trace_on_well_scaled_inputs_has_flat_input_scaling(tmp_path):
    config = _synth_config(tmp_path, mode=Mode.COND_TRACE, batch_size=60, synth_samples=500, max_steps=20)
    train, _ = _synth_split(config)
    rows, _ = run_cond_trace(config, train)
    assert all(r.kappa_D_input < 10.0 for r in rows)


def test_cond_trace_rejects_other_architectures(tmp_path):
    config = _synth_config(tmp_path, mode=Mode.COND_TRACE, arch=Arch.MLP_3X100)
    with pytest.raises(ConfigError):
        run_cond_trace(config, _synth_split(config)[0])
