import pytest

from netopt.kernel import Channel, Deadlock, Future, Semaphore, SimKernel, gather


def test_processes_interleave_by_time():
    k = SimKernel()
    log = []

    def proc(name, delays):
        for d in delays:
            yield d
            log.append((k.now, name))

    a = k.spawn(proc("a", [5, 5]))
    b = k.spawn(proc("b", [3, 4]))
    k.run(lambda: a.done and b.done)
    assert log == [(3, "b"), (5, "a"), (7, "b"), (10, "a")]


def test_channel_and_semaphore():
    k = SimKernel()
    ch, sem = Channel(), Semaphore(1)
    got = []

    def producer():
        for i in range(3):
            yield sem.acquire()
            ch.put(i)

    def consumer():
        for _ in range(3):
            got.append((yield ch.get()))
            yield 1
            sem.release()

    procs = [k.spawn(producer()), k.spawn(consumer())]
    k.run(lambda: all(p.done for p in procs))
    assert got == [0, 1, 2]


def test_gather_and_list_yield():
    k = SimKernel()
    f1, f2 = Future(), Future()
    k.call_at(4, f1.set_result, "x")
    k.call_at(2, f2.set_result, "y")

    def proc():
        return (yield [f1, f2])

    p = k.spawn(proc())
    k.run(lambda: p.done)
    assert p.result() == ["x", "y"] and k.now == 4
    assert gather([]).result() == []


def test_process_exception_propagates():
    k = SimKernel()

    def bad():
        yield 1
        raise ValueError("boom")

    k.spawn(bad())
    with pytest.raises(ValueError):
        k.run(lambda: False)


def test_deadlock_detected():
    k = SimKernel()
    k.on_deadlock = lambda: " report"

    def stuck():
        yield Future()

    k.spawn(stuck())
    with pytest.raises(Deadlock, match="report"):
        k.run(lambda: False)


def test_stall_limit():
    k = SimKernel()
    k.every(10, lambda now: None)
    with pytest.raises(Deadlock):
        k.run(lambda: False, stall_limit=100)
