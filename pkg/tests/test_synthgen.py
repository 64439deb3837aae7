from dataclasses import replace

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from dxnat.geodata import load_events, load_segments, load_traffic
from dxnat.synthgen import (EventSpec, ScenarioSpec, acceptance_spec, build_network, centroid_distances,
                            free_flow_speeds, generate, influence, write_scenario)

BASE = ScenarioSpec(seed=3, n_segments=20, days=2)


def with_event(**kw):
    return replace(BASE, events=(EventSpec("football", 1, "12:00", **kw),))


def test_deterministic():
    a, b = generate(with_event()), generate(with_event())
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    c = generate(replace(with_event(), seed=4))
    assert c[1] != a[1]


def test_severity_zero_is_no_event():
    _, plain, _ = generate(BASE)
    _, quiet, events = generate(with_event(severity=0.0))
    assert np.array_equal(plain.speed, quiet.speed)
    assert len(events) == 1


def test_speeds_in_range():
    segs, store, _ = generate(with_event(severity=1.0))
    assert np.all(store.speed >= 0) and np.all(store.speed <= BASE.free_flow_mph)
    assert np.all((store.jam >= 0) & (store.jam <= 10))
    assert not np.isnan(store.speed).any()
    assert len(store.times) == 2 * 1440


def test_severity_one_stops_epicentre_traffic():
    spec = with_event(severity=1.0)
    segs, store, events = generate(spec)
    d = centroid_distances(segs, spec.center)
    j = int(np.argmin(d))
    t = events[0].start
    noiseless = replace(spec, noise_sigma=0.0)
    _, quiet, _ = generate(noiseless)
    expect_factor = 1 - d[j] / 450
    ff = free_flow_speeds(spec, len(segs))[j]
    assert quiet.reading(t, segs.keys[j]).speed <= ff * (1 - expect_factor) + 0.01
    # whole event period slowed well below the uncongested level
    _, plain, _ = generate(replace(noiseless, events=()))
    i = quiet.time_index(t)
    assert quiet.speed[i, j] < 0.5 * plain.speed[i, j]


def test_locality_and_monotone_falloff():
    spec = replace(with_event(severity=0.8), noise_sigma=0.0)
    segs, store, events = generate(spec)
    _, plain, _ = generate(replace(spec, events=()))
    d = centroid_distances(segs, spec.center)
    i = store.time_index(events[0].start)
    drop = 1 - store.speed[i] / plain.speed[i]
    outside = d >= 450
    assert outside.any() and (~outside).any()
    assert np.allclose(drop[outside], 0, atol=1e-3)
    order = np.argsort(d[~outside])
    # rounding to 0.01 mph limits how close the comparison can be
    assert np.all(np.diff(drop[~outside][order]) <= 1e-3)


def test_influence_profile():
    start, end = 1000, 1180
    m = np.array([start - 241, start - 240, start - 120, start, end, end + 45, end + 90, end + 91])
    np.testing.assert_allclose(influence(m, start, end, 4, 1.5), [0, 0, 0.5, 1, 1, 0.5, 0, 0])


def test_weekend_faster():
    spec = ScenarioSpec(seed=1, n_segments=10, days=7, noise_sigma=0.0, rush_depth=0.0)
    _, store, _ = generate(spec)
    per_day = store.speed.reshape(7, -1, 10).mean(axis=1)
    ratio = per_day[5] / per_day[0]  # Saturday vs Monday
    assert np.allclose(ratio, 1.1, atol=1e-3)


@given(st.integers(0, 2**16), st.integers(1, 60))
@settings(max_examples=15)
def test_network_inside_extent(seed, n):
    spec = ScenarioSpec(seed=seed, n_segments=n)
    segs = build_network(spec)
    lat_min, lat_max, lon_min, lon_max = spec.extent
    assert len(segs) == n
    for s in segs:
        for lat, lon in s.points:
            assert lat_min <= lat <= lat_max and lon_min <= lon <= lon_max


@pytest.mark.parametrize("kw", [{"severity": 1.5}, {"radius_m": 0}, {"type": "parade"}, {"duration_h": -1}])
def test_event_validation(kw):
    with pytest.raises(ValueError):
        EventSpec(**kw)


def test_scenario_validation():
    with pytest.raises(ValueError):
        replace(BASE, events=(EventSpec(day=5),))
    with pytest.raises(ValueError):
        replace(BASE, extent=(1, 1, 0, 1))


def test_spec_dict_round_trip():
    spec = acceptance_spec()
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec
    assert [e.day for e in spec.events] == [2, 6, 9, 13]
    assert all(e.severity == 0.8 for e in spec.events)


def test_written_files_load(tmp_path):
    spec = replace(with_event(), days=1, events=(EventSpec("hockey", 0, "19:00"),))
    paths = write_scenario(spec, tmp_path)
    segs, store, events = generate(spec)
    assert load_segments(paths["segments"]) == segs
    assert load_traffic(paths["traffic"]) == store
    assert load_events(paths["events"]) == events
    assert ScenarioSpec.from_json(paths["scenario"]) == spec


def test_bundled_scenario_file_matches_acceptance_spec():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "scenario_acceptance.json"
    assert ScenarioSpec.from_json(path) == acceptance_spec()


def test_severity_one_single_segment_radius():
    spec = replace(BASE, noise_sigma=0.0)
    segs = build_network(spec)
    pts = np.asarray(segs.segments[0].points)
    centre = (float(pts[:, 0].mean()), float(pts[:, 1].mean()))
    d = centroid_distances(segs, centre)
    radius = float(np.sort(d)[1]) * 0.99  # covers only segment 0
    ev = EventSpec("accident", 1, "12:00", epicenter=centre, radius_m=radius, severity=1.0)
    _, hit, events = generate(replace(spec, events=(ev,)))
    _, plain, _ = generate(spec)
    i = hit.time_index(events[0].start)
    assert hit.speed[i, 0] < 0.1 * plain.speed[i, 0]
    assert np.array_equal(hit.speed[i, 1:], plain.speed[i, 1:])
