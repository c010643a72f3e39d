import math

import pytest

from pdforge.errors import InvalidParameterError, ScheduleRangeError
from pdforge.schedulers import (
    WSDLR,
    CosineLR,
    LinearDec,
    LinearInc,
    Period,
    StaticAlpha,
    WSDAlpha,
    WSDBeta,
    alpha_at,
    alpha_schedule_from_dict,
    alpha_schedule_to_dict,
    lr_at,
    lr_schedule_from_dict,
    lr_schedule_to_dict,
    wsd_windows,
)


def test_static_and_linear():
    assert alpha_at(StaticAlpha(0.9), 7, 10) == 0.9
    assert alpha_at(LinearInc(), 0, 10) == 0.0 and alpha_at(LinearInc(), 10, 10) == 1.0
    assert alpha_at(LinearDec(), 50, 100) == 0.5


def test_period_phase_and_count():
    assert [alpha_at(Period(0.9, 4), s, 100) for s in range(4)] == [0, 0, 0, 0.9]
    for total in (1, 3, 4, 17, 1000):
        highs = sum(alpha_at(Period(), s, total) == 0.9 for s in range(total))
        assert highs == total // 4


def test_wsd_alpha_landmarks():
    total = 1000
    w, d = wsd_windows(total, 0.10, 0.01)
    assert (w, d) == (100, 990)
    sched = WSDAlpha(1.0)
    assert alpha_at(sched, w, total) == 1.0
    assert alpha_at(sched, total, total) == 0.0
    assert alpha_at(sched, 0, total) == 0.0
    assert alpha_at(sched, 50, total) == 0.5


def test_wsd_alpha_shape_sweep():
    for total in (10, 97, 1000, 10_000):
        sched = WSDAlpha(0.8)
        w, d = wsd_windows(total, sched.warmup_ratio, sched.decay_ratio)
        vals = [alpha_at(sched, s, total) for s in range(total + 1)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(a <= b for a, b in zip(vals[:w], vals[1 : w + 1]))
        assert all(v == 0.8 for v in vals[w:d])
        assert all(a >= b for a, b in zip(vals[d:], vals[d + 1 :]))


def test_wsd_beta_is_complement():
    for total in (50, 1234):
        a, b = WSDAlpha(0.7, 0.2, 0.05), WSDBeta(0.7, 0.2, 0.05)
        for s in range(total + 1):
            assert abs(alpha_at(b, s, total) - (1 - alpha_at(a, s, total))) <= 1e-12


def test_cosine_landmarks():
    total = 10_000
    sched = CosineLR()
    w = 100
    assert lr_at(sched, w, total) == 6e-4
    assert lr_at(sched, total, total) == 6e-5
    assert lr_at(sched, 0, total) == 0.0
    mid = w + (total - w) // 2
    assert lr_at(sched, mid, total) == pytest.approx(3.3e-4, rel=1e-12)


def test_cosine_continuity_and_range():
    total = 10_000
    sched = CosineLR()
    w = 100
    bound = sched.lr_max * math.pi / (total - w) + sched.lr_max / w
    vals = [lr_at(sched, s, total) for s in range(total + 1)]
    assert all(0.0 <= v <= sched.lr_max for v in vals)
    assert all(v >= sched.lr_min for v in vals[w:])
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= bound


def test_wsd_lr_plateau_and_end():
    total = 2000
    sched = WSDLR()
    w, d = wsd_windows(total, sched.warmup_ratio, sched.decay_ratio)
    assert all(lr_at(sched, s, total) == sched.lr_max for s in range(w, d))
    assert lr_at(sched, total, total) == sched.lr_min
    assert all(sched.lr_min <= lr_at(sched, s, total) <= sched.lr_max for s in range(w, total + 1))


def test_exhaustive_output_ranges():
    total = 10_000
    alphas = [StaticAlpha(0.3), LinearInc(), LinearDec(), Period(), WSDAlpha(), WSDBeta()]
    for sched in alphas:
        assert all(0.0 <= alpha_at(sched, s, total) <= 1.0 for s in range(total + 1))
    for sched in (CosineLR(), WSDLR()):
        vals = [lr_at(sched, s, total) for s in range(total + 1)]
        assert all(0.0 <= v <= sched.lr_max for v in vals)
        assert all(v > 0 for v in vals[1:])


def test_range_errors():
    with pytest.raises(ScheduleRangeError):
        alpha_at(StaticAlpha(), 11, 10)
    with pytest.raises(ScheduleRangeError):
        lr_at(CosineLR(), -1, 10)
    with pytest.raises(ScheduleRangeError):
        lr_at(CosineLR(), 0, 0)


@pytest.mark.parametrize(
    "factory",
    [
        lambda: StaticAlpha(1.2),
        lambda: Period(0.9, 0),
        lambda: WSDAlpha(0.0),
        lambda: WSDAlpha(1.0, 0.6, 0.5),
        lambda: CosineLR(1e-4, 1e-3),
        lambda: WSDLR(warmup_ratio=0.0),
    ],
)
def test_invalid_parameters(factory):
    with pytest.raises(InvalidParameterError):
        factory()


def test_dict_round_trip():
    for s in (StaticAlpha(0.4), LinearInc(), LinearDec(), Period(0.5, 3), WSDAlpha(0.9), WSDBeta(0.6, 0.2, 0.1)):
        assert alpha_schedule_from_dict(alpha_schedule_to_dict(s)) == s
    for s in (CosineLR(1e-3, 1e-4, 0.05), WSDLR()):
        assert lr_schedule_from_dict(lr_schedule_to_dict(s)) == s
    with pytest.raises(InvalidParameterError):
        alpha_schedule_from_dict({"kind": "static", "alpha": 0.5, "extra": 1})
