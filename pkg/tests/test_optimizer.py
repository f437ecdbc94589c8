"""Optimizer step against a scalar recurrence oracle, schedule anchors,
and end-to-end fit behavior on a small phantom case."""

import json

import numpy as np
import pytest

import oracles
from priorwarp.errors import NumericError
from priorwarp.optimizer import (
    FitConfig,
    OptimState,
    breakdown_to_dict,
    fit_case,
    fit_report_to_dict,
    learn_prior,
    learn_report_to_dict,
    lr_at,
    step,
    trail_to_rows,
)
from priorwarp.phantom import PhantomSpec, canonical_anatomy, sample_case
from priorwarp.prior import logits_from_labels
from priorwarp.tps import build_system, field_basis
from priorwarp.volume import Volume


@pytest.fixture(scope="module")
def spec():
    return PhantomSpec()


@pytest.fixture(scope="module")
def system(spec):
    return build_system(spec.make_grid())


@pytest.fixture(scope="module")
def basis(system, spec):
    return field_basis(system, spec.dims)


@pytest.fixture(scope="module")
def case0(spec, system, basis):
    target, _, _ = sample_case(spec, system, 0, basis)
    return target


@pytest.fixture(scope="module")
def sharp_prior(spec):
    canon = canonical_anatomy(spec)
    return Volume(logits_from_labels(canon.labels, spec.c_cls, 12.0))


FIT_CFG = FitConfig(iters=60, warmup_iters=6, lr_params=0.15, gamma=0.5, lam=1e-5)


@pytest.fixture(scope="module")
def fit60(case0, sharp_prior, system, basis):
    return fit_case(case0, sharp_prior, system, FIT_CFG, basis=basis)


# -- step ---------------------------------------------------------------------


def test_step_zero_gradient_keeps_params():
    state = OptimState(base_lr=0.1, weight_decay=0.0)
    p = np.array([1.5, -2.0, 0.25])
    out = step(state, {"p": p}, {"p": np.zeros(3)}, lr_t=0.1)
    assert np.array_equal(out["p"], p)


def test_step_decay_only_shrinks_params():
    state = OptimState(base_lr=0.1, weight_decay=0.01)
    p = np.array([4.0, -8.0])
    out = step(state, {"p": p}, {"p": np.zeros(2)}, lr_t=0.1)
    assert np.array_equal(out["p"], p - 0.1 * 0.01 * p)


def test_first_step_moves_by_signed_lr():
    state = OptimState(base_lr=0.05)
    p = np.array([1.0, 1.0])
    g = np.array([3.0, -0.7])
    out = step(state, {"p": p}, {"p": g}, lr_t=0.05)
    # mhat/(sqrt(vhat)+eps) = g/(|g|+eps) ~ sign(g) on the first step
    assert np.allclose(out["p"], p - 0.05 * np.sign(g), atol=1e-7)


def test_step_matches_scalar_recurrence():
    rng = np.random.default_rng(11)
    grads = [float(g) for g in rng.normal(size=7)]
    lr, wd = 0.1, 0.004
    want = oracles.adamw_trace(0.5, grads, lr, wd=wd)
    state = OptimState(base_lr=lr, weight_decay=wd)
    p = np.array([0.5])
    got = []
    for g in grads:
        p = step(state, {"p": p}, {"p": np.array([g])}, lr_t=lr)["p"]
        got.append(float(p[0]))
    assert got == want


def test_step_rejects_shape_mismatch():
    state = OptimState(base_lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        step(state, {"p": np.zeros(3)}, {"p": np.zeros(4)}, lr_t=0.1)


def test_step_rejects_non_finite_gradient():
    state = OptimState(base_lr=0.1)
    with pytest.raises(NumericError, match="non-finite"):
        step(state, {"p": np.zeros(2)}, {"p": np.array([1.0, np.nan])}, lr_t=0.1)


def test_step_tracks_tensors_independently():
    state = OptimState(base_lr=0.1)
    params = {"a": np.zeros(2), "b": np.zeros(3)}
    grads = {"a": np.ones(2), "b": -np.ones(3)}
    params = step(state, params, grads, lr_t=0.1)
    step(state, {"a": params["a"]}, {"a": grads["a"]}, lr_t=0.1)
    assert state.slots["a"][2] == 2
    assert state.slots["b"][2] == 1


def test_optim_state_validation():
    with pytest.raises(ValueError, match="base_lr"):
        OptimState(base_lr=0.0)
    with pytest.raises(ValueError, match="weight_decay"):
        OptimState(base_lr=0.1, weight_decay=-1.0)


# -- schedule -----------------------------------------------------------------


def test_lr_schedule_anchors():
    cfg = FitConfig(iters=100, warmup_iters=10, lr_params=0.2)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 5) == 0.1
    assert lr_at(cfg, 10) == 0.2  # warmup ends exactly at base lr
    assert lr_at(cfg, 100) == 0.0
    assert lr_at(cfg, 1000) == 0.0
    assert abs(lr_at(cfg, 55) - 0.1) < 1e-12  # cosine midpoint


def test_lr_schedule_shape():
    cfg = FitConfig(iters=50, warmup_iters=5, lr_params=1.0)
    ramp = [lr_at(cfg, t) for t in range(6)]
    assert all(x < y for x, y in zip(ramp, ramp[1:]))
    tail = [lr_at(cfg, t) for t in range(5, 51)]
    assert all(x > y for x, y in zip(tail, tail[1:]))
    assert lr_at(cfg, 20, base_lr=2.0) == 2.0 * lr_at(cfg, 20)


def test_fit_config_validation():
    with pytest.raises(ValueError, match="iters"):
        FitConfig(iters=-1)
    with pytest.raises(ValueError, match="warmup"):
        FitConfig(warmup_iters=-1)
    with pytest.raises(ValueError, match="spans"):
        FitConfig(param_span=0)
    with pytest.raises(ValueError, match="rates"):
        FitConfig(lr_prior=0.0)


# -- fit_case -----------------------------------------------------------------


def test_fit_zero_iters_returns_initial_state(case0, sharp_prior, system, basis):
    r = fit_case(case0, sharp_prior, system, FitConfig(iters=0), basis=basis)
    assert r.trail == ()
    assert np.array_equal(r.params.theta, np.zeros((4, 3)))
    assert np.array_equal(r.params.delta, np.zeros((system.n, 3)))
    assert r.initial_metrics == r.final_metrics


def test_fit_rejects_mismatched_dims(case0, system):
    small = Volume(np.zeros((4, 16, 16, 16)), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError, match="dims"):
        fit_case(case0, small, system, FitConfig(iters=1))


def test_fit_improves_overlap(fit60):
    before = fit60.initial_metrics.mean_dsc
    after = fit60.final_metrics.mean_dsc
    assert after > before + 0.05
    assert after >= 0.9


def test_fit_trail_bookkeeping(fit60):
    assert len(fit60.trail) == FIT_CFG.iters
    assert [e.iteration for e in fit60.trail] == list(range(FIT_CFG.iters))
    assert all(e.phase == "params" for e in fit60.trail)
    assert all(e.lr == lr_at(FIT_CFG, e.iteration) for e in fit60.trail)


def test_fit_loss_trends_down(fit60):
    totals = [e.loss.total for e in fit60.trail]
    assert min(totals[-10:]) < min(totals[:10])


def test_fit_is_deterministic(case0, sharp_prior, system, basis, fit60):
    again = fit_case(case0, sharp_prior, system, FIT_CFG, basis=basis)
    doc_a = fit_report_to_dict(fit60, include_wall_time=False)
    doc_b = fit_report_to_dict(again, include_wall_time=False)
    assert json.dumps(doc_a, sort_keys=True) == json.dumps(doc_b, sort_keys=True)
    assert np.array_equal(fit60.params.theta, again.params.theta)
    assert np.array_equal(fit60.params.delta, again.params.delta)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_reports_divergence(case0, sharp_prior, system, basis):
    # the overflowing pipeline casts non-finite coordinates before the
    # NumericError fires; those warnings are part of the diverging path
    cfg = FitConfig(iters=5, warmup_iters=1, lr_params=1e308)
    with pytest.raises(NumericError, match="diverged"):
        fit_case(case0, sharp_prior, system, cfg, basis=basis)


# -- learn_prior --------------------------------------------------------------


def test_learn_prior_validation(case0, sharp_prior, system):
    with pytest.raises(ValueError, match="at least one"):
        learn_prior([], sharp_prior, system, FitConfig(iters=1))
    small = Volume(np.zeros((4, 16, 16, 16)), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError, match="dims"):
        learn_prior([case0], small, system, FitConfig(iters=1))


def test_learn_prior_alternation_bookkeeping(spec, system, basis, sharp_prior):
    cases = [sample_case(spec, system, s, basis)[0] for s in (1, 2)]
    cfg = FitConfig(iters=20, warmup_iters=4, lr_params=0.15, lr_prior=0.3,
                    param_span=8, prior_span=3)
    r = learn_prior(cases, sharp_prior, system, cfg)
    log = list(r.phase_log)
    assert log.count("params") == cfg.iters
    assert log.count("prior") == 3 * cfg.prior_span  # ceil(20/8) cycles
    # spans alternate: 8p 3pr 8p 3pr 4p 3pr
    want = ["params"] * 8 + ["prior"] * 3
    assert log == want + want + ["params"] * 4 + ["prior"] * 3
    assert len(r.case_reports) == 2
    assert all(len(c.trail) == cfg.iters for c in r.case_reports)
    assert len(r.prior_trail) == 9
    assert [e.iteration for e in r.prior_trail] == list(range(9))
    assert all(e.phase == "prior" for e in r.prior_trail)
    # prior trail carries the mean prior dice as its only live component
    for e in r.prior_trail:
        assert e.loss.total == e.loss.dice_prior
        assert e.loss.dice_pred == 0.0 and e.loss.centroid == 0.0


def test_learn_prior_updates_help_the_cases(spec, system, basis, sharp_prior):
    cases = [sample_case(spec, system, s, basis)[0] for s in (3, 4)]
    cfg = FitConfig(iters=30, warmup_iters=4, lr_params=0.15, lr_prior=0.3,
                    param_span=10, prior_span=3)
    r = learn_prior(cases, sharp_prior, system, cfg)
    assert not np.array_equal(r.prior_logits.data, sharp_prior.data)
    for rep in r.case_reports:
        assert rep.final_metrics.mean_dsc > rep.initial_metrics.mean_dsc


# -- report serialization -----------------------------------------------------


def test_report_dict_layout(fit60):
    doc = fit_report_to_dict(fit60)
    assert sorted(doc) == [
        "final_metrics", "initial_metrics", "iterations", "params",
        "trail", "wall_time_s",
    ]
    assert doc["iterations"] == FIT_CFG.iters
    assert "wall_time_s" not in fit_report_to_dict(fit60, include_wall_time=False)
    row = doc["trail"][0]
    assert sorted(row) == [
        "centroid", "dice_pred", "dice_prior", "iteration", "lr",
        "phase", "reg", "total",
    ]
    bd = breakdown_to_dict(fit60.trail[0].loss)
    assert bd["total"] == fit60.trail[0].loss.total
    assert trail_to_rows(fit60.trail)[0] == row
    assert json.dumps(doc)  # JSON-ready end to end


def test_learn_report_dict_layout(spec, system, basis, sharp_prior):
    cases = [sample_case(spec, system, 5, basis)[0]]
    cfg = FitConfig(iters=4, warmup_iters=1, lr_params=0.15, lr_prior=0.3,
                    param_span=2, prior_span=1)
    doc = learn_report_to_dict(learn_prior(cases, sharp_prior, system, cfg))
    assert sorted(doc) == ["cases", "phase_log", "prior_trail"]
    assert len(doc["cases"]) == 1
    assert doc["phase_log"] == ["params", "params", "prior", "params", "params", "prior"]
    assert json.dumps(doc)
