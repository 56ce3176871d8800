import csv

import numpy as np
import pytest

from flowcl.detector import (
    NEW_TASK,
    STAY,
    DetectorConfig,
    ScriptedDetector,
    StatWindow,
    TypicalityDetector,
    batch_stats,
    switch,
    write_events,
)
from flowcl.flow import LOG_2PI, FlowModel
from flowcl.numeric import rng_create

from conftest import fixed_registry, random_flow

BS = 32
REG = fixed_registry([[[6.0, 0.0], [-6.0, 0.0]], [[0.0, 40.0], [0.0, 34.0]]])
IDENT = FlowModel(2, 2, (4,))


def _batch(rng, task, shift=0.0):
    y = rng.integers(0, 2, size=BS)
    x = REG.lookup(y, np.full(BS, task)) + rng.standard_normal((BS, 2)) + shift
    return x, y


def test_identity_flow_s3_zero():
    x, y = _batch(rng_create(0), 0)
    assert batch_stats(IDENT, REG, x, y, 0)[2] == 0.0


def test_single_point_at_mean():
    s = batch_stats(IDENT, REG, REG.mean(1, 0)[None, :], np.array([1]), 0)
    assert s[0] == pytest.approx(-LOG_2PI) and s[1] == pytest.approx(-LOG_2PI)


def test_s1_is_s2_plus_s3():
    model = random_flow(seed=1)
    x, y = _batch(rng_create(1), 0)
    s = batch_stats(model, REG, x, y, 0)
    assert s[0] == pytest.approx(s[1] + s[2], abs=1e-9)


def test_unknown_task():
    x, y = _batch(rng_create(0), 0)
    with pytest.raises(KeyError):
        batch_stats(IDENT, REG, x, y, 9)


def test_window_std_floor():
    w = StatWindow(5)
    for _ in range(5):
        w.push(np.array([-100.0, -50.0, 0.0]))
    assert np.allclose(w.std(), [1e-4 + 1e-12, 5e-5 + 1e-12, 1e-12])


def test_window_is_bounded():
    w = StatWindow(3)
    for i in range(10):
        w.push(np.full(3, float(i)))
    assert len(w) == 3 and w.mean()[0] == 8.0


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(stats=("S4",))
    with pytest.raises(ValueError):
        DetectorConfig(warmup=200, window=100)
    with pytest.raises(ValueError):
        DetectorConfig(sensitivity=-1)


def _fill(det, rng, task, n, start=0):
    out = []
    for b in range(start, start + n):
        out.append(det.update_and_check(b, IDENT, REG, *_batch(rng, task)))
    return out


def test_displaced_batch_triggers_new_task():
    det = TypicalityDetector(DetectorConfig(5.0, 100, 20, 0))
    det.task_created(0)
    rng = rng_create(3)
    assert all(d == STAY for d in _fill(det, rng, 0, 30))
    w = det.windows[0]
    mu, sd = w.mean()[0], w.std()[0]
    # Shifting every point by c along both axes lowers S1 by about BS * c^2.
    x, y = _batch(rng, 0)
    s1 = batch_stats(IDENT, REG, x, y, 0)[0]
    c = np.sqrt(max(s1 - (mu - 10 * sd), 0.0) / BS)
    x2 = x + c
    assert batch_stats(IDENT, REG, x2, y, 0)[0] < mu - 5 * sd
    assert det.update_and_check(30, IDENT, REG, x2, y) == NEW_TASK


def test_infinite_sensitivity_never_fires():
    det = TypicalityDetector(DetectorConfig(np.inf, 100, 20, 0))
    det.task_created(0)
    rng = rng_create(4)
    assert all(d == STAY for d in _fill(det, rng, 0, 40))
    assert det.update_and_check(40, IDENT, REG, *_batch(rng, 1)) == STAY


def test_zero_sensitivity_fires_after_warmup():
    det = TypicalityDetector(DetectorConfig(0.0, 100, 20, 0))
    det.task_created(0)
    decisions = _fill(det, rng_create(5), 0, 21)
    assert all(d == STAY for d in decisions[:20])
    assert decisions[20] == NEW_TASK


def test_warmup_suppresses_detection():
    det = TypicalityDetector(DetectorConfig(5.0, 100, 20, 0))
    det.task_created(0)
    rng = rng_create(6)
    _fill(det, rng, 0, 5)
    # Far away data during warm-up is absorbed, not flagged.
    assert det.update_and_check(5, IDENT, REG, *_batch(rng, 1)) == STAY


def test_recurring_task_switches_back():
    det = TypicalityDetector(DetectorConfig(5.0, 100, 20, 0))
    det.task_created(0)
    rng = rng_create(7)
    _fill(det, rng, 0, 30)
    assert det.update_and_check(30, IDENT, REG, *_batch(rng, 1)) == NEW_TASK
    det.task_created(1)
    assert all(d == STAY for d in _fill(det, rng, 1, 30, start=31))
    assert det.update_and_check(61, IDENT, REG, *_batch(rng, 0)) == switch(0)
    assert det.current == 0


def test_cooldown_after_switch():
    det = TypicalityDetector(DetectorConfig(5.0, 100, 20, 3))
    det.task_created(0)
    rng = rng_create(8)
    _fill(det, rng, 0, 30)
    det.update_and_check(30, IDENT, REG, *_batch(rng, 1))
    det.task_created(1)
    _fill(det, rng, 1, 30, start=31)
    assert det.update_and_check(61, IDENT, REG, *_batch(rng, 0)) == switch(0)
    # Next three batches, even from task 1, are inside the cooldown.
    assert all(d == STAY for d in _fill(det, rng, 1, 3, start=62))


def test_decision_strings():
    assert str(STAY) == "Stay" and str(NEW_TASK) == "NewTask" and str(switch(2)) == "Switch(2)"


def test_scripted_detector():
    det = ScriptedDetector({3: NEW_TASK, 7: switch(0)})
    det.task_created(0)
    out = [det.update_and_check(b, None, None, None, None) for b in range(10)]
    assert [str(d) for d in out if d != STAY] == ["NewTask", "Switch(0)"]


def test_events_csv(tmp_path):
    det = TypicalityDetector(DetectorConfig(5.0, 100, 2, 0))
    det.task_created(0)
    _fill(det, rng_create(9), 0, 4)
    path = tmp_path / "events.csv"
    write_events(path, det.events)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 4 and rows[0]["decision"] == "Stay"
