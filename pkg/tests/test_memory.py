import gc
import threading

import numpy as np

from pruned_rnnt import memory
from pruned_rnnt.memory import AllocationTracker


def test_register_and_release():
    tr = AllocationTracker()
    a = tr.register(np.zeros(100))
    assert tr.current == 800 and tr.peak == 800
    del a
    gc.collect()
    assert tr.current == 0 and tr.peak == 800


def test_views_are_not_counted():
    tr = AllocationTracker()
    a = tr.register(np.zeros((10, 10)))
    tr.register(a[2:5])
    tr.register(a.ravel())
    assert tr.current == 800 and tr.allocations == 1


def test_phase_peak_delta():
    tr = AllocationTracker()
    keep = tr.register(np.zeros(50))
    with tr.phase("outer") as outer:
        tmp = tr.register(np.zeros(100))
        del tmp
        with tr.phase("inner") as inner:
            tr.register(np.zeros(10))
    assert outer.baseline == 400
    assert outer.peak_delta == 800
    assert inner.peak_delta == 80
    assert outer.allocations == 2 and inner.allocations == 1
    del keep


def test_reset_peak():
    tr = AllocationTracker()
    a = tr.register(np.zeros(10))
    b = tr.register(np.zeros(10))
    del b
    gc.collect()
    tr.reset_peak()
    assert tr.peak == tr.current == 80
    del a


def test_thread_safety():
    tr = AllocationTracker()
    keep = []
    lock = threading.Lock()

    def work():
        for _ in range(200):
            arr = tr.register(np.zeros(4))
            with lock:
                keep.append(arr)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert tr.current == 4 * 200 * 32 and tr.allocations == 800


def test_module_helpers_use_global_tracker():
    before = memory.TRACKER.current
    a = memory.full((3, 3), -np.inf)
    b = memory.empty(4)
    c = memory.track(np.ones(2))
    assert memory.TRACKER.current - before == 8 * (9 + 4 + 2)
    assert (a == -np.inf).all()
    del a, b, c
