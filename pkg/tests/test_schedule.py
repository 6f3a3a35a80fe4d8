import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dfdetect.schedule import (CosineWarmRestartSchedule, EarlyStopState, StepDecaySchedule, early_stop_update,
                               lr_at, make_schedule, schedule_from_dict, schedule_to_dict)


def step_sequence(lr0, factor, period, n):
    # running product, the way a spreadsheet column would compute it
    out, lr = [], lr0
    for e in range(n):
        if e > 0 and e % period == 0:
            lr *= factor
        out.append(lr)
    return out


def cosine_sequence(lr0, eta_min, T0, Tmult, n):
    # incremental: track position within the current cycle epoch by epoch
    out, t_cur, t_i = [], 0.0, float(T0)
    for _ in range(n):
        out.append(eta_min + (lr0 - eta_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2)
        t_cur += 1
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= Tmult
    return out


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(abs(a), abs(b))


def test_step_examples():
    s = StepDecaySchedule(1e-3)
    assert lr_at(s, 0) == 1e-3 and lr_at(s, 1) == 1e-3
    assert lr_at(s, 4) == pytest.approx(2.5e-4, rel=1e-15)


def test_cosine_examples():
    s = CosineWarmRestartSchedule(1e-4, eta_min=1e-6, T0=2, Tmult=2)
    assert lr_at(s, 1) == pytest.approx(5.05e-5, rel=1e-12)
    assert lr_at(s, 0) == 1e-4
    # cycle starts (0, 2, 6, 14) sit at lr0; the closed form reaches eta_min at elapsed == T_i
    for start in (0, 2, 6, 14):
        assert lr_at(s, start) == pytest.approx(1e-4, rel=1e-15)
    assert s.in_cycle(4, 4) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(s, 5.999999) == pytest.approx(1e-6, rel=1e-6)
    assert CosineWarmRestartSchedule(1.0).eta_min == 0.01


def test_nine_random_configs_over_thirty_epochs():
    rng = np.random.default_rng(2024)
    for _ in range(9):
        lr0 = float(10 ** rng.uniform(-6, -2))
        factor, period = float(rng.uniform(0.1, 0.9)), int(rng.integers(1, 6))
        eta_min = float(lr0 * rng.uniform(0, 0.5))
        T0, Tmult = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        step = StepDecaySchedule(lr0, factor, period)
        cos = CosineWarmRestartSchedule(lr0, eta_min, T0, Tmult)
        for e, (a, b) in enumerate(zip(step_sequence(lr0, factor, period, 30),
                                       cosine_sequence(lr0, eta_min, T0, Tmult, 30))):
            assert close(lr_at(step, e), a)
            assert close(lr_at(cos, e), b)


def test_matches_torch_warm_restarts():
    for T0, Tmult in [(2, 2), (1, 1), (3, 1), (1, 3), (4, 2)]:
        p = torch.nn.Parameter(torch.zeros(1))
        opt = torch.optim.SGD([p], lr=1e-3)
        ref = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=T0, T_mult=Tmult, eta_min=1e-5)
        ours = CosineWarmRestartSchedule(1e-3, 1e-5, T0, Tmult)
        for e in range(30):
            assert close(lr_at(ours, e), opt.param_groups[0]["lr"], 1e-10), (T0, Tmult, e)
            opt.step()
            ref.step()


@settings(max_examples=200, deadline=None)
@given(lr0=st.floats(1e-6, 1.0), frac=st.floats(0, 0.99), T0=st.floats(1, 8), Tmult=st.floats(1, 3),
       factor=st.floats(0.05, 0.95), period=st.integers(1, 5))
def test_bounds_and_monotonicity(lr0, frac, T0, Tmult, factor, period):
    cos = CosineWarmRestartSchedule(lr0, lr0 * frac, T0, Tmult)
    step = StepDecaySchedule(lr0, factor, period)
    prev = math.inf
    for t in np.linspace(0, 40, 161):
        v = lr_at(cos, float(t))
        assert cos.eta_min - 1e-15 <= v <= lr0 + 1e-15
        s = lr_at(step, float(t))
        assert s <= prev
        prev = s


@settings(max_examples=100, deadline=None)
@given(T0=st.integers(1, 5), Tmult=st.integers(1, 3), frac=st.floats(0, 0.9))
def test_replay_equals_incremental(T0, Tmult, frac):
    s = CosineWarmRestartSchedule(1e-3, 1e-3 * frac, T0, Tmult)
    for e, v in enumerate(cosine_sequence(1e-3, 1e-3 * frac, T0, Tmult, 40)):
        assert close(lr_at(s, e), v, 1e-10)


def test_schedule_validation_and_roundtrip():
    with pytest.raises(ValueError):
        lr_at(StepDecaySchedule(1e-3), -1)
    for bad in (dict(lr0=0), dict(lr0=1e-3, factor=1.0), dict(lr0=1e-3, period=0)):
        with pytest.raises(ValueError):
            StepDecaySchedule(**bad)
    for bad in (dict(lr0=1e-3, eta_min=1e-3), dict(lr0=1e-3, T0=0.5), dict(lr0=1e-3, Tmult=0.5)):
        with pytest.raises(ValueError):
            CosineWarmRestartSchedule(**bad)
    with pytest.raises(ValueError):
        make_schedule("linear", 1e-3)
    for s in (StepDecaySchedule(1e-3, 0.3, 3), CosineWarmRestartSchedule(1e-4, T0=3)):
        assert schedule_from_dict(schedule_to_dict(s)) == s


def run_trace(metrics, patience, mode="maximize"):
    state, stops = EarlyStopState(patience=patience), []
    for e, m in enumerate(metrics):
        state, stop = early_stop_update(state, e, m, mode)
        stops.append(stop)
        if stop:
            break
    return state, stops


def test_early_stop_examples():
    state, stops = run_trace([0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7], 5)
    assert stops == [False] * 6 + [True]
    assert state.best_epoch == 1
    state, stops = run_trace(list(np.linspace(0.1, 0.9, 40)), 5)
    assert not any(stops)
    assert run_trace([0.5, 0.5], 1)[1] == [False, True]


def test_early_stop_against_reference_over_random_traces():
    rng = np.random.default_rng(7)
    for _ in range(500):
        patience = int(rng.integers(1, 8))
        n = int(rng.integers(1, 40))
        # coarse values so equal metrics (non-improvements) are common
        metrics = list(np.round(rng.uniform(0, 1, n), 1))
        mode = "maximize" if rng.random() < 0.8 else "minimize"
        better = (lambda a, b: a > b) if mode == "maximize" else (lambda a, b: a < b)
        best, best_e, since, expected_stop = None, None, 0, None
        for e, m in enumerate(metrics):
            if best is None or better(m, best):
                best, best_e, since = m, e, 0
            else:
                since += 1
            if since == patience:
                expected_stop = e
                break
        state, stops = run_trace(metrics, patience, mode)
        got_stop = len(stops) - 1 if stops[-1] else None
        assert got_stop == expected_stop
        assert state.best_epoch == best_e
        seen = metrics[:len(stops)]
        target = max(seen) if mode == "maximize" else min(seen)
        assert state.best_metric == target
        assert seen.index(target) == state.best_epoch
        assert state.epochs_since_improvement <= patience


def test_early_stop_errors_and_tiebreak():
    s = EarlyStopState()
    with pytest.raises(ValueError):
        early_stop_update(s, 0, float("nan"))
    s, _ = early_stop_update(s, 0, 0.5, tiebreak=0.7)
    with pytest.raises(ValueError):
        early_stop_update(s, 0, 0.6)
    with pytest.raises(ValueError):
        early_stop_update(s, 1, 0.6, mode="sideways")
    s2, _ = early_stop_update(s, 1, 0.5, tiebreak=0.6)
    assert s2.best_epoch == 1 and s2.epochs_since_improvement == 0
    s3, _ = early_stop_update(s2, 2, 0.5, tiebreak=0.65)
    assert s3.best_epoch == 1 and s3.epochs_since_improvement == 1
