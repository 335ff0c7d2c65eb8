import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracehound.errors import MalformedLine, NonMonotoneTimestamp, SchemaViolation, TraceParseError
from tracehound.trace import (
    DuplicateFork,
    EventKind,
    SampleOutsideLifetime,
    TraceEvent,
    UnmatchedSwitchIn,
    WaitKind,
    merge_streams,
    parse_event_stream,
    serialize_event,
    serialize_events,
    validate_trace,
)

import fuzz
import oracles


def test_parse_single_exit():
    evs = parse_event_stream(b'{"kind":"exit","ts":5,"pid":2,"tid":2,"cpu":0,"exit_code":0}\n')
    assert evs == [TraceEvent.exit(5, 2, 2, 0, 0)]
    assert evs[0].kind is EventKind.EXIT


def test_parse_empty():
    assert parse_event_stream(b"") == []
    assert parse_event_stream(b"\n  \n") == []


def test_non_monotone_within_cpu():
    data = (
        b'{"kind":"switch_in","ts":10,"pid":1,"tid":1,"cpu":0}\n'
        b'{"kind":"switch_in","ts":9,"pid":1,"tid":1,"cpu":0}\n'
    )
    with pytest.raises(NonMonotoneTimestamp) as exc:
        parse_event_stream(data)
    assert exc.value.line_no == 2


def test_regression_across_cpus_is_fine():
    data = (
        b'{"kind":"switch_in","ts":10,"pid":1,"tid":1,"cpu":0}\n'
        b'{"kind":"switch_in","ts":9,"pid":1,"tid":1,"cpu":1}\n'
    )
    assert [e.ts for e in parse_event_stream(data)] == [10, 9]


def test_file_order_preserved():
    lines = [serialize_event(TraceEvent.switch_in(ts, 1, 1, cpu)) for ts, cpu in [(5, 1), (1, 0), (3, 2)]]
    evs = parse_event_stream("\n".join(lines))
    assert [(e.ts, e.cpu) for e in evs] == [(5, 1), (1, 0), (3, 2)]


def test_all_kinds_parse():
    text = "\n".join([
        '{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"stack":["0x10","0XAbC"],"period":250000}',
        '{"kind":"switch_out","ts":2,"pid":1,"tid":1,"cpu":0,"wait":"blocked","stack":["0x1"]}',
        '{"kind":"switch_out","ts":2,"pid":1,"tid":1,"cpu":0}',
        '{"kind":"switch_in","ts":3,"pid":1,"tid":1,"cpu":0}',
        '{"kind":"fork","ts":4,"pid":1,"tid":1,"cpu":0,"child_pid":2,"child_tid":2}',
        '{"kind":"exec","ts":5,"pid":2,"tid":2,"cpu":0,"image":"/bin/true"}',
        '{"kind":"exit","ts":6,"pid":2,"tid":2,"cpu":0,"exit_code":-1}',
    ])
    evs = parse_event_stream(text)
    assert evs[0].payload.stack == (0x10, 0xABC)
    assert evs[1].payload.wait_kind is WaitKind.BLOCKED
    assert evs[2].payload.wait_kind is WaitKind.UNKNOWN and evs[2].payload.stack is None
    assert evs[3].payload.stack is None
    assert (evs[4].payload.parent_tid, evs[4].payload.child_tid) == (1, 2)
    assert evs[5].payload.image == "/bin/true"
    assert evs[6].payload.exit_code == -1


@pytest.mark.parametrize(
    "line, field",
    [
        ('{"kind":"exit","ts":5,"pid":2,"tid":2,"cpu":0}', "exit_code"),
        ('{"kind":"exit","ts":5,"pid":2,"tid":2,"cpu":0,"exit_code":0,"extra":1}', "extra"),
        ('{"kind":"nope","ts":5,"pid":2,"tid":2,"cpu":0}', "kind"),
        ('{"kind":"exit","ts":-1,"pid":2,"tid":2,"cpu":0,"exit_code":0}', "ts"),
        ('{"kind":"exit","ts":1.5,"pid":2,"tid":2,"cpu":0,"exit_code":0}', "ts"),
        ('{"kind":"exit","ts":true,"pid":2,"tid":2,"cpu":0,"exit_code":0}', "ts"),
        ('{"kind":"exit","ts":1,"pid":0,"tid":2,"cpu":0,"exit_code":0}', "pid"),
        ('{"kind":"exit","ts":1,"pid":1,"tid":2,"cpu":4294967296,"exit_code":0}', "cpu"),
        ('{"kind":"exit","ts":1,"pid":1,"tid":2,"cpu":0,"exit_code":2147483648}', "exit_code"),
        ('{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"stack":[],"period":1}', "stack"),
        ('{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"stack":["12"],"period":1}', "stack"),
        ('{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"stack":["0x1"],"period":0}', "period"),
        ('{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"period":1}', "stack"),
        ('{"kind":"sample","ts":1,"pid":1,"tid":1,"cpu":0,"stack":["0x10000000000000000"],"period":1}', "stack"),
        ('{"kind":"switch_in","ts":1,"pid":1,"tid":1,"cpu":0,"stack":["0x1"]}', "stack"),
        ('{"kind":"switch_out","ts":1,"pid":1,"tid":1,"cpu":0,"wait":"unknown"}', "wait"),
        ('{"kind":"exec","ts":1,"pid":1,"tid":1,"cpu":0,"image":3}', "image"),
        ('[1, 2]', "<record>"),
    ],
)
def test_schema_violations(line, field):
    with pytest.raises(SchemaViolation) as exc:
        parse_event_stream(line)
    assert exc.value.field == field
    assert exc.value.line_no == 1


@pytest.mark.parametrize("data", [b"{not json", b'{"kind":"exit"', b"\xff\xfe", b"[" * 100000])
def test_malformed_lines(data):
    with pytest.raises(MalformedLine):
        parse_event_stream(b'{"kind":"switch_in","ts":1,"pid":1,"tid":1,"cpu":0}\n' + data)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_parse_total_on_arbitrary_bytes(data):
    try:
        evs = parse_event_stream(data)
    except TraceParseError as exc:
        assert exc.line_no >= 1
    else:
        assert isinstance(evs, list)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=5),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=5), inner, max_size=3),
    max_leaves=6,
)
record_fields = st.sampled_from(["kind", "ts", "pid", "tid", "cpu", "stack", "period", "wait", "child_pid", "child_tid", "image", "exit_code", "bogus"])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.dictionaries(record_fields, json_values | st.sampled_from(["sample", "exit", "0x1f", ["0x1"]]), max_size=8), max_size=5))
def test_parse_total_on_near_miss_records(records):
    data = "\n".join(json.dumps(r) for r in records)
    try:
        parse_event_stream(data)
    except TraceParseError:
        pass


def _canonical(line: str) -> dict:
    rec = json.loads(line)
    if "stack" in rec:
        rec["stack"] = [hex(int(a, 16)) for a in rec["stack"]]
    return rec


@pytest.mark.parametrize("seed", range(20))
def test_round_trip_canonical(seed):
    rng = random.Random(seed)
    events = fuzz.random_stream(rng, 60)
    # write with shuffled key order and upper-case hex to exercise normalization
    lines = []
    for ev in events:
        rec = json.loads(serialize_event(ev))
        if "stack" in rec:
            rec["stack"] = ["0X" + a[2:].upper() for a in rec["stack"]]
        keys = list(rec)
        rng.shuffle(keys)
        lines.append(json.dumps({k: rec[k] for k in keys}))
    parsed = parse_event_stream("\n".join(lines))
    assert parsed == events
    out = serialize_events(parsed).splitlines()
    assert [json.loads(l) for l in out] == [_canonical(l) for l in lines]
    assert parse_event_stream(serialize_events(parsed)) == parsed


def test_merge_trivial():
    a, b = TraceEvent.switch_in(1, 1, 1, 0), TraceEvent.switch_in(2, 1, 1, 1)
    assert merge_streams([[a], [b]]) == [a, b]
    assert merge_streams([[b], [a]]) == [a, b]
    assert merge_streams([[], []]) == []
    assert merge_streams([]) == []


def test_merge_tie_breaks_by_cpu_then_input_order():
    x0 = TraceEvent.exit(5, 1, 1, 2, 0)
    x1 = TraceEvent.exit(5, 1, 2, 2, 0)
    y = TraceEvent.exit(5, 1, 3, 0, 0)
    assert merge_streams([[x0, x1], [y]]) == [y, x0, x1]
    assert merge_streams([[x0], [x1]]) == [x0, x1]
    assert merge_streams([[x1], [x0]]) == [x1, x0]


@pytest.mark.parametrize("seed", range(10))
def test_merge_matches_sort_oracle(seed):
    rng = random.Random(seed)
    streams = []
    for s in range(3):
        ts = 0
        stream = []
        for _ in range(100):
            ts += rng.choice((0, 0, 1, 3))
            stream.append(TraceEvent.switch_in(ts, 1, rng.randint(1, 50), rng.randrange(3)))
        streams.append(stream)
    merged = merge_streams(streams)
    assert merged == oracles.merge_oracle(streams)
    assert len(merged) == 300
    assert sorted(map(id, merged)) == sorted(id(e) for s in streams for e in s)


def test_validate_clean_triple():
    evs = [
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.sample(1, 2, 2, 0, [0x1], 10),
        TraceEvent.exit(2, 2, 2, 0, 0),
    ]
    assert validate_trace(evs) == []


def test_validate_lone_switch_in():
    assert validate_trace([TraceEvent.switch_in(3, 7, 7, 0)]) == [UnmatchedSwitchIn(7, 3)]


def test_validate_sample_after_exit_and_duplicate_fork():
    evs = [
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.fork(1, 1, 1, 0, 2, 2),
        TraceEvent.exit(2, 2, 2, 0, 0),
        TraceEvent.sample(3, 2, 2, 0, [0x1], 10),
    ]
    assert validate_trace(evs) == [DuplicateFork(2, 1), SampleOutsideLifetime(2, 3)]


def test_validate_does_not_mutate():
    evs = [TraceEvent.switch_in(3, 7, 7, 0)]
    copy = list(evs)
    validate_trace(evs)
    assert evs == copy


@pytest.mark.parametrize("seed", range(10))
def test_validate_matches_lookback_oracle(seed):
    rng = random.Random(seed)
    events = fuzz.lifecycle_stream(rng, 500, n_tids=6, samples=0.25, switches=0.25)
    # add some sloppiness the valid generator never produces
    events += [TraceEvent.fork(events[-1].ts, 1, 1, 0, 2, 2)] * 2
    got = [(w.code, w.tid, w.ts) for w in validate_trace(events)]
    assert got == oracles.validate_oracle(events)


@pytest.mark.parametrize("seed", range(10))
def test_validate_matches_lookback_oracle_on_noise(seed):
    rng = random.Random(100 + seed)
    events = merge_streams(fuzz.split_cpus(fuzz.random_stream(rng, 400)))
    got = [(w.code, w.tid, w.ts) for w in validate_trace(events)]
    expected = oracles.validate_oracle(events)
    assert got == expected
    assert {code for code, _, _ in expected} == {"UnmatchedSwitchIn", "SampleOutsideLifetime", "DuplicateFork"}
