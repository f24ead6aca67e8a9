import numpy as np
import pytest

from twindrop.errors import DataError
from twindrop.nn_core import RngStream
from twindrop.twin_model import DropoutMode, TwinNetConfig, build_twin_net, forward
from twindrop.uncertainty import (
    BREAKDOWN_COLUMNS,
    additivity_report,
    decompose,
    mc_predict,
    read_breakdown_csv,
    relative_gaps,
    write_breakdown_csv,
)

from oracles import enumerate_decomposition


def tiny_net(dropout=0.5, seed=0, encoder_hidden=(2,), head_hidden=(1,),
             latent_dim=1):
    cfg = TwinNetConfig(input_dim=2, latent_dim=latent_dim,
                        encoder_hidden=encoder_hidden, head_hidden=head_hidden,
                        dropout=dropout, epochs=1, seed=seed)
    return build_twin_net(cfg)


def lively_net(**kw):
    """Tiny net whose ReLU units all fire on positive inputs.

    Weights are forced positive with a positive bias so no dropout site
    is dead, which keeps the enumeration variances strictly positive.
    """
    net = tiny_net(**kw)
    for layer in net.encoder + net.head0 + net.head1:
        layer.weights = np.abs(layer.weights) + 0.1
        layer.bias = layer.bias + 0.1
    return net


def test_mc_predict_off_mode_zero_variance():
    net = tiny_net(dropout=0.2)
    x = RngStream(1).uniform(-1, 1, (4, 2))
    res = mc_predict(net, x, 0, DropoutMode.OFF, 50, RngStream(2))
    assert np.array_equal(res.variance, np.zeros(4))
    assert np.array_equal(res.mean, forward(net, x, 0, DropoutMode.OFF))


def test_mc_predict_rate_zero_zero_variance():
    net = tiny_net(dropout=0.0)
    x = RngStream(3).uniform(-1, 1, (3, 2))
    for mode in DropoutMode:
        res = mc_predict(net, x, 1, mode, 20, RngStream(4))
        assert np.array_equal(res.variance, np.zeros(3))


def test_mc_predict_requires_two_samples():
    net = tiny_net()
    with pytest.raises(DataError):
        mc_predict(net, np.zeros((1, 2)), 0, DropoutMode.OFF, 1, RngStream(0))


def test_mc_variance_matches_two_outcome_enumeration():
    # single dropout unit at p=0.5: the RepOnly output is a fair coin
    # between the kept/scaled and dropped branches
    net = lively_net(dropout=0.5, seed=6, encoder_hidden=(1,), head_hidden=())
    x = np.array([[0.8, 0.4]])
    enum = enumerate_decomposition(net, x, 1, 0.5)
    res = mc_predict(net, x, 1, DropoutMode.REP_ONLY, 100_000, RngStream(7))
    sigma2 = enum["mode_rep"][0]
    assert sigma2 > 0
    # conservative MC error bound for the variance of a two-point sample
    assert abs(res.variance[0] - sigma2) < 3 * sigma2 * np.sqrt(2.0 / res.n_samples)


def test_enumeration_additivity_is_exact_and_mc_converges():
    # <= 4 dropout sites per arm: 2 encoder units + 1 head unit at p=0.5
    net = lively_net(dropout=0.5, seed=9, encoder_hidden=(2,), head_hidden=(1,))
    x = np.array([[0.7, 0.3], [0.2, 0.9]])
    for arm in (0, 1):
        enum = enumerate_decomposition(net, x, arm, 0.5)
        lhs = enum["var_tot"]
        rhs = enum["var_rep"] + enum["var_pred"]
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)

    enum1 = enumerate_decomposition(net, x, 1, 0.5)
    n = 100_000
    tot = mc_predict(net, x, 1, DropoutMode.TOTAL, n, RngStream(10))
    rep = mc_predict(net, x, 1, DropoutMode.REP_ONLY, n, RngStream(11))
    pred = mc_predict(net, x, 1, DropoutMode.PRED_ONLY, n, RngStream(12))
    for est, key in ((tot, "var_tot"), (rep, "mode_rep"), (pred, "mode_pred")):
        target = enum1[key]
        tol = 3 * np.maximum(target, 1e-12) * np.sqrt(8.0 / n) + 1e-9
        assert (np.abs(est.variance - target) < tol).all()
    mean_tol = 3 * np.sqrt(enum1["var_tot"] / n) + 1e-12
    assert (np.abs(tot.mean - enum1["mean"]) < mean_tol).all()


def test_rep_only_mc_converges_to_conditional_variance():
    # with a one-hidden-layer head the mask feeds a linear output, so
    # the RepOnly estimator converges to Var_rep of the law-of-total-
    # variance split itself
    net = lively_net(dropout=0.5, seed=13, encoder_hidden=(2,), head_hidden=(1,))
    x = np.array([[0.5, 0.1]])
    enum = enumerate_decomposition(net, x, 0, 0.5)
    assert enum["mode_rep"][0] == pytest.approx(enum["var_rep"][0], rel=1e-12)


def test_decompose_fields_and_tau_identity():
    net = tiny_net(dropout=0.3, seed=14, encoder_hidden=(4,), head_hidden=(3,),
                   latent_dim=2)
    x = RngStream(15).uniform(-1, 1, (6, 2))
    bd = decompose(net, x, 400, RngStream(16))
    assert (bd.var_rep0 >= 0).all() and (bd.var_pred1 >= 0).all()
    expected = bd.var_rep0 + bd.var_rep1 + bd.var_pred0 + bd.var_pred1
    assert np.array_equal(bd.var_tau, expected)
    assert np.array_equal(bd.tau_hat, bd.mean1 - bd.mean0)
    assert np.array_equal(bd.gap0, bd.var_tot0 - (bd.var_rep0 + bd.var_pred0))


def test_decompose_rate_zero_all_zero():
    net = tiny_net(dropout=0.0)
    x = RngStream(17).uniform(-1, 1, (5, 2))
    bd = decompose(net, x, 10, RngStream(18))
    for field in (bd.var_rep0, bd.var_rep1, bd.var_pred0, bd.var_pred1,
                  bd.var_tot0, bd.var_tot1, bd.var_tau, bd.gap0, bd.gap1):
        assert np.array_equal(field, np.zeros(5))
    summary = additivity_report([bd])
    assert summary.median == 0.0 and summary.p95 == 0.0


def test_decompose_deterministic_encoder_collapses_var_rep():
    cfg = TwinNetConfig(input_dim=2, latent_dim=3, encoder_hidden=(),
                        head_hidden=(4,), dropout=0.4, epochs=1, seed=19)
    net = build_twin_net(cfg)
    x = RngStream(20).uniform(-1, 1, (4, 2))
    bd = decompose(net, x, 3000, RngStream(21))
    assert np.array_equal(bd.var_rep0, np.zeros(4))
    assert np.array_equal(bd.var_rep1, np.zeros(4))
    # var_tot ~ var_pred within MC error
    rel = np.abs(bd.var_tot0 - bd.var_pred0) / np.maximum(bd.var_tot0, 1e-12)
    assert (rel < 0.2).all()


def test_relative_gap_floor_on_all_zero_variances():
    net = tiny_net(dropout=0.0)
    x = np.zeros((3, 2))
    bd = decompose(net, x, 5, RngStream(0))
    assert np.array_equal(relative_gaps(bd, 0), np.zeros(3))
    assert np.array_equal(relative_gaps(bd, 1), np.zeros(3))


def test_additivity_report_requires_input():
    with pytest.raises(DataError):
        additivity_report([])


def test_mc_stabilizes_with_more_samples():
    # sd across 20 repeated decompose calls shrinks when N grows 10x
    net = lively_net(dropout=0.3, seed=22, encoder_hidden=(4,), head_hidden=(2,),
                     latent_dim=2)
    x = np.array([[0.4, 0.6]])

    def spread(n_samples):
        vals = [decompose(net, x, n_samples, RngStream(100 + r)).var_tot0[0]
                for r in range(20)]
        return np.std(vals)

    assert spread(1000) / spread(100) < 0.5


def test_breakdown_csv_roundtrip(tmp_path):
    net = tiny_net(dropout=0.25, seed=23, encoder_hidden=(3,), head_hidden=(2,))
    x = RngStream(24).uniform(-1, 1, (8, 2))
    bd = decompose(net, x, 64, RngStream(25))
    path = tmp_path / "breakdown.csv"
    write_breakdown_csv(bd, path)
    cols = read_breakdown_csv(path)
    assert tuple(cols) == BREAKDOWN_COLUMNS
    assert np.array_equal(cols["unit_id"], np.arange(8))
    assert np.array_equal(cols["tau_hat"], bd.tau_hat)
    assert np.array_equal(cols["var_tau"], bd.var_tau)
    assert np.array_equal(cols["gap1"], bd.gap1)
