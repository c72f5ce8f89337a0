"""Operator model: shapes, checkpointing, learnability, determinism."""

import numpy as np
import pytest

from quakesynth import autodiff as ad
from quakesynth.autodiff import Tensor
from quakesynth.errors import DataError
from quakesynth.geogen import GeoConfig, make_record
from quakesynth.mifno import (Mifno, MifnoHyper, evaluate_loss, relative_l2,
                              sensor_indices, train_mifno)
from quakesynth.waveprop import SimConfig

TINY = MifnoHyper(width=8, geo_layers=2, fused_layers=2, modes_x=4,
                  modes_t=4, ff_hidden=16, source_hidden=16, seed=3)
GEO_CFG = GeoConfig(nx=16, nz=16)
SIM_CFG = SimConfig(n_t=64, sponge_width=4, sponge_coeff=0.02)


@pytest.fixture(scope="module")
def tiny_record():
    return make_record(GEO_CFG, SIM_CFG, master_seed=5, index=0)


def test_forward_shape():
    from quakesynth.waveprop import GeologyModel, SourceSpec
    model = Mifno(16, 16, 64, n_comp=2, hyper=TINY)
    rng = np.random.default_rng(0)
    srcs = [(0.5, 0.5, 0.3)] * 3
    geo = model.geology_features(rng.uniform(1500, 4000, (3, 16, 16)), srcs)
    src = model.source_features(srcs)
    g = GeologyModel.homogeneous(16, 16, 40.0, 1500.0, 1500.0 * np.sqrt(3))
    s = SourceSpec(x_s=320.0, z_s=320.0, theta_s=0.3, m0=1e9, f0=2.0, t0=0.6)
    tf = model.time_features([g] * 3, [s] * 3, 0.01)
    assert tf.shape == (3, 4, 16, model.nt_lat)
    with ad.no_grad():
        out = model.forward(geo, src, tf)
    assert out.shape == (3, 16, 2, 64)
    assert np.all(np.isfinite(out.data))


def test_output_length_must_match_latent_axis():
    with pytest.raises(DataError):
        Mifno(16, 16, 65, hyper=TINY)  # 65 not a multiple of time_axis


def test_sensor_indices():
    idx = sensor_indices([0.0, 80.0, 600.0], dx=40.0, nx=16)
    assert list(idx) == [0, 2, 15]
    with pytest.raises(DataError):
        sensor_indices([25.0], dx=40.0, nx=16)       # off-grid
    with pytest.raises(DataError):
        sensor_indices([-40.0], dx=40.0, nx=16)      # left of model
    with pytest.raises(DataError):
        sensor_indices([16 * 40.0], dx=40.0, nx=16)  # right of model


def test_relative_l2_identities():
    rng = np.random.default_rng(1)
    ref = rng.normal(size=(4, 8, 2, 16))
    assert relative_l2(Tensor(ref.copy()), ref).item() < 1e-6
    assert abs(relative_l2(Tensor(np.zeros_like(ref)), ref).item() - 1.0) \
        < 1e-6


def test_single_record_overfit(tiny_record):
    model, curve, _ = train_mifno([tiny_record],
                                  MifnoHyper(width=8, geo_layers=2,
                                             fused_layers=2, modes_x=4,
                                             modes_t=4, ff_hidden=16,
                                             source_hidden=16, seed=3,
                                             batch=1, lr=2e-3, restarts=1),
                                  dt_out=SIM_CFG.dt_out, steps_override=600)
    assert curve[-1] < curve[0]
    assert evaluate_loss(model, [tiny_record]) < 0.15


def test_checkpoint_roundtrip(tiny_record):
    model, _, _ = train_mifno([tiny_record], TINY, dt_out=SIM_CFG.dt_out,
                              steps_override=20)
    clone = Mifno(16, 16, 64, n_comp=2, hyper=TINY)
    clone.load_state(model.state())
    assert clone.trace_scale == model.trace_scale
    a = model.predict(tiny_record.geology, tiny_record.source, SIM_CFG.dt_out)
    b = clone.predict(tiny_record.geology, tiny_record.source, SIM_CFG.dt_out)
    assert np.array_equal(a.data, b.data)


def test_load_state_rejects_bad_checkpoints():
    model = Mifno(16, 16, 64, hyper=TINY)
    good = model.state()
    bad = dict(good)
    bad["bogus"] = np.zeros(3)
    with pytest.raises(DataError):
        Mifno(16, 16, 64, hyper=TINY).load_state(bad)
    bad = dict(good)
    bad.pop("p_w")
    with pytest.raises(DataError):
        Mifno(16, 16, 64, hyper=TINY).load_state(bad)
    bad = dict(good)
    bad["p_w"] = np.zeros((2, 2))
    with pytest.raises(DataError):
        Mifno(16, 16, 64, hyper=TINY).load_state(bad)


def test_training_is_deterministic(tiny_record):
    runs = []
    for _ in range(2):
        model, curve, _ = train_mifno([tiny_record], TINY,
                                      dt_out=SIM_CFG.dt_out,
                                      steps_override=30)
        runs.append((model.state(), curve))
    s0, s1 = runs[0][0], runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert set(s0) == set(s1)
    for k in s0:
        assert np.array_equal(s0[k], s1[k]), k


def test_predict_sensor_subset(tiny_record):
    model = Mifno(16, 16, 64, hyper=TINY)
    geo = tiny_record.geology
    full = model.predict(geo, tiny_record.source, SIM_CFG.dt_out)
    sub_x = np.array([2, 5, 11]) * geo.dx
    sub = model.predict(geo, tiny_record.source, SIM_CFG.dt_out,
                        sensor_x=sub_x)
    assert sub.data.shape[0] == 3
    assert np.array_equal(sub.data, full.data[[2, 5, 11]])
    with pytest.raises(DataError):
        model.predict(geo, tiny_record.source, SIM_CFG.dt_out,
                      sensor_x=[geo.dx * 0.5])


def test_grid_mismatch_rejected(tiny_record):
    model = Mifno(32, 32, 64, hyper=TINY)
    with pytest.raises(DataError):
        model.predict(tiny_record.geology, tiny_record.source, SIM_CFG.dt_out)
