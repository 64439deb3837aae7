from datetime import datetime, timedelta, timezone
from zoneinfo import ZoneInfo

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from dxnat.encode import (N_CLASSES, RECURRING, EventLabel, LabeledSample, ManifestRow, TimeFeatures, decode_label,
                          encode_label, encode_time, label_for, load_samples, make_sample, manifest_row,
                          read_manifest, stack, write_manifest)
from dxnat.geodata import Event
from dxnat.raster import Tci, write_tci

CHI = ZoneInfo("America/Chicago")
START = datetime(2016, 10, 9, 18, 0, tzinfo=timezone.utc)


def ev(eid="E1", start=START, hours=3):
    return Event(eid, "football", start, start + timedelta(hours=hours), (36.15, -86.81))


# ---------------------------------------------------------------- time features

def test_monday_1300():
    v = encode_time(datetime(2016, 10, 10, 13, 25, tzinfo=CHI))
    assert sorted(np.nonzero(v)[0]) == [13, 25]


@pytest.mark.parametrize("weekday", range(7))
@pytest.mark.parametrize("hour", range(24))
def test_all_hour_weekday_pairs(hour, weekday):
    # 2016-10-09 is a Sunday
    t = datetime(2016, 10, 9 + weekday, hour, 30, tzinfo=CHI)
    v = encode_time(t)
    assert v.shape == (31,)
    assert set(np.unique(v)) <= {0.0, 1.0} and v.sum() == 2
    assert v[hour] == 1 and v[24 + weekday] == 1


def test_local_time_not_utc():
    # 03:30 UTC Monday is still Sunday evening in Chicago
    f = TimeFeatures.at(datetime(2016, 10, 10, 3, 30, tzinfo=timezone.utc))
    assert (f.hour, f.weekday) == (22, 0)


@given(st.datetimes(min_value=datetime(2000, 1, 1), max_value=datetime(2040, 1, 1), timezones=st.just(timezone.utc)))
def test_time_vector_two_hot(t):
    v = encode_time(t)
    assert v[:24].sum() == 1 and v[24:].sum() == 1


@pytest.mark.parametrize("h,w", [(-1, 0), (24, 0), (0, 7), (0, -1)])
def test_time_features_ranges(h, w):
    with pytest.raises(ValueError):
        TimeFeatures(h, w)


# ---------------------------------------------------------------- labels

def test_label_examples():
    e = [ev()]
    assert label_for(START - timedelta(minutes=90), e) == EventLabel(True, 2)
    assert label_for(START - timedelta(hours=5), e) == RECURRING
    assert label_for(START, e) == EventLabel(True, 4)
    assert label_for(START - timedelta(hours=4), e) == EventLabel(True, 0)
    assert label_for(START + timedelta(hours=4), e) == RECURRING
    assert label_for(START + timedelta(hours=4) - timedelta(minutes=1), e) == EventLabel(True, 7)


def test_windows_tile_span_at_minute_resolution():
    e = [ev()]
    counts = np.zeros(8, int)
    prev = 0
    for m in range(-5 * 60, 5 * 60):
        lab = label_for(START + timedelta(minutes=m), e)
        inside = -240 <= m < 240
        assert lab.is_nrc == inside
        if inside:
            assert lab.window >= prev  # no overlap: windows appear in order
            prev = lab.window
            counts[lab.window] += 1
    assert counts.tolist() == [60] * 8


def test_nearest_event_wins():
    a = ev("E1", START)
    b = ev("E2", START + timedelta(hours=5))
    t = START + timedelta(hours=3)  # window 7 of a, window 2 of b; b is 2h away vs 3h
    assert label_for(t, [a, b]) == EventLabel(True, 2)
    tie = START + timedelta(minutes=150)  # 2.5h from both
    assert label_for(tie, [b, a]) == EventLabel(True, 6)  # E1 by id


def test_custom_window_scheme():
    lab = label_for(START - timedelta(minutes=45), [ev()], window_len=timedelta(minutes=30),
                    windows_before=4, windows_after=4)
    assert lab == EventLabel(True, 2)


@pytest.mark.parametrize("k", range(N_CLASSES))
def test_label_vector_round_trip(k):
    lab = EventLabel.from_class(k)
    v = encode_label(lab)
    assert v.sum() == 1 and v[k] == 1
    assert decode_label(v) == lab


def test_label_layout():
    assert np.argmax(encode_label(RECURRING)) == 0
    assert np.argmax(encode_label(EventLabel(True, 0))) == 1
    assert np.argmax(encode_label(EventLabel(True, 7))) == 8


@pytest.mark.parametrize("bad", [(True, None), (True, 8), (False, 3)])
def test_label_invariants(bad):
    with pytest.raises(ValueError):
        EventLabel(*bad)


def test_decode_rejects_non_one_hot():
    with pytest.raises(ValueError):
        decode_label(np.zeros(9))
    with pytest.raises(ValueError):
        decode_label(np.ones(9))


# ---------------------------------------------------------------- samples and manifest

def _tci(t, value=0):
    return Tci(np.full((8, 8), value, np.uint8), t, "g")


def test_make_sample_and_stack():
    s = make_sample(_tci(START - timedelta(minutes=10), 255), [ev()])
    assert s.label == EventLabel(True, 3)
    x, f, y = stack([s, s])
    assert x.shape == (2, 1, 8, 8) and np.all(x == 1.0)
    assert f.shape == (2, 31) and y.tolist() == [4, 4]


def test_manifest_round_trip(tmp_path):
    samples = [make_sample(_tci(START + timedelta(minutes=m), abs(m) % 256), [ev()]) for m in (-300, -30, 0, 200)]
    rows = []
    for i, s in enumerate(samples):
        write_tci(s.tci, tmp_path / f"{i}.pgm")
        rows.append(manifest_row(s, f"{i}.pgm"))
    write_manifest(rows, tmp_path / "m.csv")
    assert read_manifest(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[:2] == ["tci_path,hour,weekday,is_nrc,window", "0.pgm,8,0,0,"]
    back = load_samples(tmp_path / "m.csv")
    assert [b.label for b in back] == [s.label for s in samples]
    assert [b.tci for b in back] == [s.tci for s in samples]


@pytest.mark.parametrize("line", ["x.pgm,24,0,0,", "x.pgm,1,0,1,", "x.pgm,1,0,0,3", "x.pgm,1,0"])
def test_manifest_rejects_bad_rows(tmp_path, line):
    (tmp_path / "m.csv").write_text("tci_path,hour,weekday,is_nrc,window\n" + line + "\n")
    with pytest.raises(ValueError, match=":2:"):
        read_manifest(tmp_path / "m.csv")


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("path,hour\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(tmp_path / "m.csv")


@pytest.mark.parametrize("t,ones", [(datetime(2016, 10, 9, 0, 15, tzinfo=CHI), [0, 24]),
                                    (datetime(2016, 10, 15, 23, 59, tzinfo=CHI), [23, 30])])
def test_boundary_examples(t, ones):
    assert sorted(np.nonzero(encode_time(t))[0]) == ones


def test_recurring_vector():
    assert encode_label(RECURRING).tolist() == [1, 0, 0, 0, 0, 0, 0, 0, 0]
