import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piezoskin.bench import GRAVITY
from piezoskin.daq import grid5x4, palm34
from piezoskin.forest import ForestParams
from piezoskin.perception import (
    ContractError,
    Debounced,
    ThresholdDetector,
    evaluate,
    train,
    zero_baseline,
)
from piezoskin.scenario import (
    ObjectSpec,
    Patch,
    ScenarioSpec,
    distribute_force,
    generate_recognition_dataset,
    grasp_lift_sequence,
    load_catalog,
    phase_change_ratios,
    place_object,
    probe_detector,
    run_probe,
    run_probe_suite,
    suite_to_csv,
)
from piezoskin.substrate import substrate_by_name


@pytest.fixture(scope="module")
def catalog():
    return load_catalog()


@pytest.fixture(scope="module")
def hd_probe():
    return probe_detector(substrate_by_name("hd"), palm34(), seed=0)


def total_force(pressures, layout):
    return float(np.sum(pressures * layout.areas_m2))


patches = st.lists(
    st.tuples(st.floats(-60, 60), st.floats(-60, 60), st.floats(0.5, 80), st.floats(0.5, 80),
              st.floats(0.05, 1)),
    min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(patches, st.floats(0.01, 50), st.floats(-30, 30), st.floats(-30, 30), st.floats(0, 360),
       st.sampled_from(["palm34", "grid5x4"]))
def test_force_conserved(raw, force, dx, dy, theta, layout_name):
    layout = palm34() if layout_name == "palm34" else grid5x4()
    shares = np.array([r[4] for r in raw])
    shares = shares / shares.sum()
    shares[-1] = 1.0 - shares[:-1].sum()
    ps = [Patch(x, y, w, h, s) for (x, y, w, h, _), s in zip(raw, shares)]
    p = distribute_force(force, ps, layout, (dx, dy, theta))
    assert np.all(p >= 0)
    assert total_force(p, layout) == pytest.approx(force, rel=0.005)


def test_point_footprint_on_one_taxel():
    g = grid5x4()
    cx, cy = g.centers[7]
    obj = ObjectSpec("pin", (Patch(cx, cy, 0.5, 0.5),), mass_g=100)
    p = place_object(obj, (0, 0), g)
    assert np.flatnonzero(p).tolist() == [7]
    assert p[7] * g.areas_m2[7] == pytest.approx(0.1 * GRAVITY)


def test_four_taxel_symmetry():
    g = grid5x4()
    # corner shared by taxels 0, 1, 5, 6 of the 5x4 grid
    corner = (g.centers[0] + g.centers[6]) / 2
    obj = ObjectSpec("block", (Patch(*corner, 8, 8),), mass_g=200)
    p = place_object(obj, (0, 0, 0), g)
    assert np.flatnonzero(p).tolist() == [0, 1, 5, 6]
    np.testing.assert_allclose(p[[0, 1, 5, 6]], p[0], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0, 360))
def test_weight_conserved_for_any_pose(catalog, dx, dy, theta):
    g = grid5x4()
    for obj in catalog.recognition:
        p = place_object(obj, (dx, dy, theta), g)
        assert total_force(p, g) == pytest.approx(obj.mass_g * 1e-3 * GRAVITY, rel=0.005)


def test_off_array_patch_goes_to_nearest_taxel():
    g = grid5x4()
    p = distribute_force(2.0, [Patch(1000.0, 0.0, 1, 1)], g)
    assert total_force(p, g) == pytest.approx(2.0)
    assert np.count_nonzero(p) == 1


@pytest.mark.parametrize("kw", [
    dict(patches=(Patch(0, 0, 1, 1, 0.5),)),
    dict(patches=()),
    dict(patches=(Patch(0, 0, 1, 1),), topple_force=0.0),
    dict(patches=(Patch(0, 0, 1, 1),), stiffness=-1.0),
])
def test_object_spec_validation(kw):
    with pytest.raises(ContractError):
        ObjectSpec("bad", **kw)


def test_scenario_spec_validation(catalog):
    obj = catalog.probe_object("bleach")
    with pytest.raises(ContractError):
        ScenarioSpec(obj, approach_speed=0.0)
    with pytest.raises(ContractError):
        ScenarioSpec(obj, stop_latency_frames=-1)


def test_catalog_is_marked_calibrated(catalog):
    assert catalog.meta["calibrated"] is True
    assert sorted(catalog.probe) == sorted(["pitcher", "drill", "u-tower", "llama", "cheezeit",
                                            "bleach"])
    assert all(len(v) == 3 for v in catalog.probe.values())
    assert len(catalog.recognition) == 20
    assert all(o.fragile for o in catalog.probe["u-tower"])


def test_run_probe_deterministic(catalog, ld_detector):
    spec = ScenarioSpec(catalog.probe_object("llama", 1), seed=5)
    m = substrate_by_name("ld")
    a = run_probe(spec, m, palm34(), detector=Debounced(ld_detector))
    b = run_probe(spec, m, palm34(), detector=Debounced(ld_detector))
    assert a == b
    c = run_probe(dataclasses.replace(spec, seed=6), m, palm34(), detector=Debounced(ld_detector))
    assert c[1] != a[1]


def test_probe_frames_conserve_force(catalog):
    # rebuild the force trajectory and check each scanned pattern against it
    obj = catalog.probe_object("drill", 2)
    layout = palm34()
    for pen in np.linspace(0.0, 5.0, 11):
        force = min(obj.stiffness * pen * 1e-3, obj.topple_force)
        p = distribute_force(force, obj.patches, layout)
        assert total_force(p, layout) == pytest.approx(force, rel=0.005, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.005, 0.5), st.floats(0.005, 0.5), st.integers(0, 3))
def test_monotone_difficulty(f1, f2, seed):
    lo, hi = sorted((f1, f2))
    base = ObjectSpec("tower", (Patch(0, 0, 25, 25),), stiffness=25.0, topple_force=hi)
    m = substrate_by_name("hd")
    det = ThresholdDetector(6)
    out_hi, _ = run_probe(ScenarioSpec(base, seed=seed), m, palm34(), detector=det)
    weaker = dataclasses.replace(base, topple_force=lo)
    out_lo, _ = run_probe(ScenarioSpec(weaker, seed=seed), m, palm34(), detector=det)
    assert out_hi.detected or not out_lo.detected


def test_toppled_implies_peak_at_least_topple(catalog, ld_detector):
    m = substrate_by_name("ld")
    det = Debounced(ld_detector)
    for name in ("u-tower", "cheezeit"):
        for k in range(3):
            obj = catalog.probe_object(name, k)
            out, _ = run_probe(ScenarioSpec(obj, seed=k), m, palm34(), detector=det)
            if out.toppled:
                assert out.peak_force >= obj.topple_force
            assert out.peak_force <= obj.topple_force


def test_no_contact_false_positive_rate(catalog, ld_detector):
    m = substrate_by_name("ld")
    positives = total = 0
    for k in range(3):
        spec = ScenarioSpec(catalog.probe_object("pitcher", k), seed=40 + k)
        out, frames = run_probe(spec, m, palm34(), detector=Debounced(ld_detector))
        seq = grasp_lift_sequence(catalog.probe_object("pitcher", k), seed=40 + k)
        reach = seq.deviations()[: seq.phases[0][2]]
        free = [zero_baseline(f, frames[0]) for f in frames[:200]]
        positives += sum(ld_detector(x) for x in reach) + sum(ld_detector(x) for x in free)
        total += len(reach) + len(free)
    assert positives / total <= 0.01


def test_bleach_on_ld_detected_without_toppling(catalog, ld_detector):
    obj = catalog.probe_object("bleach", 0)
    out, _ = run_probe(ScenarioSpec(obj), substrate_by_name("ld"), palm34(),
                       detector=Debounced(ld_detector))
    assert out.detected and not out.toppled and not out.false_alarm
    assert out.peak_force < obj.topple_force


def test_u_tower_on_hd_not_detected(catalog, hd_probe):
    m = substrate_by_name("hd")
    for k in range(3):
        out, _ = run_probe(ScenarioSpec(catalog.probe_object("u-tower", k), seed=k), m,
                           palm34(), detector=hd_probe)
        assert not out.detected and out.toppled


def test_perfect_detector_catches_everything(catalog):
    subs = {k: substrate_by_name(k.lower()).with_(noise_sigma=0.0) for k in ("LD", "HD")}
    rows = run_probe_suite(subs, {k: ThresholdDetector(0) for k in subs}, catalog)
    assert len(rows) == 36 and all(r["detected"] for r in rows)
    csv_text = suite_to_csv(rows)
    assert csv_text.splitlines()[0].startswith("substrate,object,orientation,detected")
    assert len(csv_text.splitlines()) == 37


def test_slow_approach_still_arrests_rigid_object(catalog, ld_detector):
    obj = catalog.probe_object("bleach", 1)
    m = substrate_by_name("ld")
    latencies = []
    for speed in (50.0, 10.0, 2.0):
        spec = ScenarioSpec(obj, approach_speed=speed, start_distance=5.0, seed=3)
        out, _ = run_probe(spec, m, palm34(), detector=Debounced(ld_detector))
        assert out.detected and not out.toppled
        latencies.append(out.frames_to_detect)
    assert latencies == sorted(latencies) and latencies[-1] > latencies[0]


def test_early_trigger_is_a_false_alarm(catalog):
    obj = catalog.probe_object("bleach", 0)
    out, _ = run_probe(ScenarioSpec(obj), substrate_by_name("ld"), palm34(),
                       detector=lambda dev: True)
    assert out.false_alarm and not out.detected and out.peak_force == 0.0


def test_recognition_dataset_shape(catalog):
    data = generate_recognition_dataset(n_samples=1172, seed=0)
    assert len(data) == 1172 and data.n_features == 20
    assert data.label_names == [o.name for o in catalog.recognition]
    counts = np.bincount(data.labels, minlength=20)
    assert counts.max() - counts.min() <= 3


def test_recognition_noise_free_distinct_masses_separable():
    # masses kept inside the foam's dynamic range; heavier ones all saturate alike
    objs = [ObjectSpec(f"m{i}", (Patch(0, 0, 40, 40),), mass_g=m)
            for i, m in enumerate((10, 30, 90))]
    quiet = substrate_by_name("ld").with_(noise_sigma=0.0)
    data = generate_recognition_dataset(objs, n_samples=200, substrate=quiet,
                                        pose_jitter_mm=0.0, seed=1)
    tr, te = data.split()
    assert evaluate(train(tr, ForestParams(n_trees=10)), te)["accuracy"] >= 0.95


def test_grasp_active_sets(catalog):
    obj = catalog.probe_object("pitcher", 0)
    same = grasp_lift_sequence(obj)
    assert same.active_set("reach") == frozenset()
    assert same.active_set("grasp") == same.active_set("lift") != frozenset()
    moved = grasp_lift_sequence(obj, lift_shift=(12.0, 0.0))
    assert moved.active_set("grasp") ^ moved.active_set("lift")
    assert [name for name, _, _ in moved.phases] == ["reach", "grasp", "lift"]
    with pytest.raises(KeyError):
        moved.active_set("release")


@pytest.mark.parametrize("shift", [(12.0, 0.0), (0.0, -15.0), (20.0, 20.0)])
def test_phase_changes_stand_out(catalog, shift):
    seq = grasp_lift_sequence(catalog.probe_object("pitcher", 0), lift_shift=shift)
    ratios = phase_change_ratios(seq)
    assert len(ratios) == 2 and min(ratios) > 5


def test_grasp_sequence_conserves_force(catalog):
    layout = palm34()
    seq = grasp_lift_sequence(catalog.probe_object("drill", 0), lift_shift=(5.0, 3.0),
                              force=3.0, lift_scale=0.5)
    totals = [total_force(p, layout) for p in seq.pressures]
    want = [0.0] * 40 + [3.0] * 80 + [1.5] * 80
    np.testing.assert_allclose(totals, want, rtol=0.005)
    assert not math.isnan(sum(totals))
