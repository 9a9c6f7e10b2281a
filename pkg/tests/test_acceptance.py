"""End-to-end acceptance checks, one test per shipped guarantee.

Each test prints a single pass line on success; pytest -v adds the
per-test PASSED/FAILED verdict. Tests 1-9 exercise the Python package
only; test 10 drives the rating service through a scripted HTTP session
and runs even when the browser frontend has not been built.
"""

import csv
import io
import json
import math
from pathlib import Path
from time import perf_counter

import numpy as np
import pytest
import scipy.stats as sps

from cordwarp.centerline import (
    direction_covariance,
    fit_centerline,
    level_report,
    mad_acd,
    slice_barycenters,
)
from cordwarp.correct import (
    apply_to_series,
    estimate_field_line_align,
    estimate_field_variational,
    objective,
    reconstruct_midway,
)
from cordwarp.pipeline import (
    PipelineConfig,
    render_montages,
    run_correction,
    run_evaluation,
    write_phantom_fixture,
)
from cordwarp.simulate import (
    DisplacementField,
    PhantomSpec,
    make_phantom,
    simulate_rgp_pair,
    warp_ped,
)
from cordwarp.stats import (
    PairedSamples,
    RankingRecord,
    cross_correlation,
    mutual_information,
    paired_tukey,
    pairwise_rank_logistic,
)
from cordwarp.tensor import EigenField, eigen_decompose, fit_dti
from cordwarp.volume import AcquisitionScheme, Mask, Volume, smooth_array


def make_volume(data, ped_sign=1, spacing=(1.0, 1.0, 1.0)):
    return Volume(data=np.asarray(data, dtype=np.float64), spacing=spacing,
                  affine=np.diag([*spacing, 1.0]), ped_sign=ped_sign)


def make_field(data):
    return DisplacementField(data=np.asarray(data, dtype=np.float64),
                             spacing=(1.0, 1.0, 1.0), affine=np.eye(4))


def textured_image(shape, rng, sigma=3.0):
    img = smooth_array(rng.uniform(size=shape), sigma)
    return (img - img.min()) / (img.max() - img.min()) * 100.0 + 20.0


def smooth_random_field(shape, rng, amplitude=2.0, sigma=4.0, ramp=10.0):
    """Random smooth field vanishing near the y boundaries."""
    b = smooth_array(rng.normal(size=shape), sigma)
    y = np.arange(shape[1], dtype=float)
    taper = (np.sin(0.5 * np.pi * np.clip(y / ramp, 0, 1)) ** 2
             * np.sin(0.5 * np.pi * np.clip((shape[1] - 1 - y) / ramp, 0, 1)) ** 2)
    b *= taper[None, :, None]
    b = smooth_array(b, (0.0, 2.0, 0.0))
    b *= taper[None, :, None]
    b *= amplitude / max(np.abs(b).max(), 1e-12)
    return b


def bump_pair(shape, rng, amplitude=2.0):
    img = textured_image(shape, rng)
    v = make_volume(img)
    y = np.arange(shape[1], dtype=float)
    taper = np.sin(np.pi * y / (shape[1] - 1)) ** 2
    b = amplitude * np.broadcast_to(taper[None, :, None], shape).copy()
    f = make_field(b)
    i_f, i_b = simulate_rgp_pair(v, f)
    return v, f, i_f, i_b


@pytest.fixture(scope="module")
def default_run():
    """Default phantom, simulated reversed-polarity pair, both field
    estimates (the variational solve is timed), and corrected series."""
    spec = PhantomSpec()
    truth = make_phantom(spec)
    b0 = truth.clean_dwi.volume_at(0)
    i_f, i_b = simulate_rgp_pair(b0, truth.field)
    t0 = perf_counter()
    var = estimate_field_variational(i_f, i_b)
    var_seconds = perf_counter() - t0
    line = estimate_field_line_align(i_f, i_b)
    return {"spec": spec, "truth": truth, "b0": b0, "i_f": i_f, "i_b": i_b,
            "var": var, "line": line, "var_seconds": var_seconds}


@pytest.fixture(scope="module")
def default_reports(default_run):
    """Per-level alignment metrics before and after variational correction
    of the distorted default-phantom series."""
    truth = default_run["truth"]
    scheme = AcquisitionScheme(bvalues=truth.bvalues,
                               directions=truth.directions)
    distorted = warp_ped(truth.clean_dwi, truth.field, sign=-1,
                         modulate=True).with_data_sign(+1)
    corrected = apply_to_series(distorted, default_run["var"].field)
    centerline = fit_centerline(slice_barycenters(truth.mask), lam=1.0)
    reports = {}
    for name, series in [("uncorrected", distorted), ("variational", corrected)]:
        eigen = eigen_decompose(fit_dti(series, scheme, truth.mask))
        reports[name] = level_report(eigen, truth.mask, truth.levels, centerline)
    return {"reports": reports, "distorted": distorted, "corrected": corrected}


def straight_z_centerline(n=8):
    return fit_centerline([(float(k), np.array([0.0, 0.0, float(k)]))
                           for k in range(n)], lam=0.0)


def eigen_from_vectors(e1_map):
    shape = e1_map.shape[:3]
    lam = np.broadcast_to(np.array([1.7e-3, 0.3e-3, 0.3e-3]), shape + (3,))
    return EigenField(e1=e1_map, eigenvalues=lam, md=np.full(shape, 0.766e-3),
                      valid=np.ones(shape, bool),
                      degenerate=np.zeros(shape, bool),
                      spacing=(1.0, 1.0, 1.0), affine=np.eye(4))


def run_small_pipeline(out_dir):
    spec = PhantomSpec(dims=(40, 40, 10), field_peak_voxels=3.0, num_levels=3)
    write_phantom_fixture(spec, str(out_dir))
    cfg = PipelineConfig.from_json(str(Path(out_dir) / "config.json"))
    run_correction(cfg)
    run_evaluation(cfg)
    return cfg


def test_criterion_01_gradient_matches_finite_differences():
    rng = np.random.default_rng(100)
    shape = (6, 12, 4)
    alpha = 3.0
    h = 1e-6
    t0 = perf_counter()
    for _ in range(5):
        i_f = make_volume(textured_image(shape, rng, sigma=1.5))
        i_b = make_volume(textured_image(shape, rng, sigma=1.5), ped_sign=-1)
        # strictly inside one interpolation cell so every probed point
        # is a point of differentiability
        b = 0.25 + 0.15 * rng.uniform(size=shape)
        _, grad = objective(make_field(b), i_f, i_b, alpha)
        scale = np.abs(grad).max()
        flat = [tuple(idx) for idx in np.argwhere(np.ones(shape, bool))]
        picks = rng.choice(len(flat), size=20, replace=False)
        for k in picks:
            idx = flat[k]
            bp, bm = b.copy(), b.copy()
            bp[idx] += h
            bm[idx] -= h
            vp, _ = objective(make_field(bp), i_f, i_b, alpha)
            vm, _ = objective(make_field(bm), i_f, i_b, alpha)
            fd = (vp - vm) / (2 * h)
            assert abs(grad[idx] - fd) < 1e-4 * scale
    elapsed = perf_counter() - t0
    assert elapsed < 10.0
    print(f"criterion 1 gradient check: PASS ({elapsed:.1f}s)")


def test_criterion_02_phantom_field_recovery(default_run):
    mask = default_run["truth"].mask.data
    true_field = default_run["truth"].field.data
    var_rmse = np.sqrt(((default_run["var"].field.data - true_field)[mask] ** 2).mean())
    line_rmse = np.sqrt(((default_run["line"].field.data - true_field)[mask] ** 2).mean())
    assert var_rmse < 0.5
    assert line_rmse < 1.0
    assert default_run["var_seconds"] < 60.0
    print(f"criterion 2 field recovery: PASS (variational {var_rmse:.3f} vox "
          f"in {default_run['var_seconds']:.1f}s, line-align {line_rmse:.3f} vox)")


def test_criterion_03_mass_conservation():
    rng = np.random.default_rng(101)
    shape = (6, 40, 4)
    for _ in range(100):
        img = smooth_array(rng.uniform(size=shape), 2.0)
        v = make_volume(img)
        b = smooth_random_field(shape, rng)
        out = warp_ped(v, make_field(b), sign=+1, modulate=True)
        assert np.allclose(out.data.sum(axis=1), v.data.sum(axis=1), rtol=1e-3)
    print("criterion 3 mass conservation: PASS (100 fields)")


def test_criterion_04_midway_and_field_symmetry():
    rng = np.random.default_rng(102)
    _, f, i_f, i_b = bump_pair((10, 36, 6), rng)
    mid = reconstruct_midway(i_f, i_b, f)
    mid_swapped = reconstruct_midway(i_b.with_data_sign(+1),
                                     i_f.with_data_sign(-1),
                                     make_field(-f.data))
    assert np.array_equal(mid.data, mid_swapped.data)

    line = estimate_field_line_align(i_f, i_b)
    line_swapped = estimate_field_line_align(i_b.with_data_sign(+1),
                                             i_f.with_data_sign(-1))
    assert np.array_equal(line.field.data, -line_swapped.field.data)

    var = estimate_field_variational(i_f, i_b)
    var_swapped = estimate_field_variational(i_b.with_data_sign(+1),
                                             i_f.with_data_sign(-1))
    rms = np.sqrt(((var.field.data + var_swapped.field.data) ** 2).mean())
    assert rms < 0.1
    print(f"criterion 4 midway symmetry: PASS (variational antisymmetry "
          f"{rms:.2e} vox RMS)")


def test_criterion_05_mad_acd_closed_forms():
    shape = (3, 3, 8)
    c = straight_z_centerline()
    region = np.nonzero(np.ones(shape, bool))

    aligned = np.broadcast_to(np.array([0.0, 0.0, 1.0]), shape + (3,)).copy()
    mad, acd = mad_acd(direction_covariance(eigen_from_vectors(aligned), region, c))
    assert mad == pytest.approx(0.0, abs=1e-3)
    assert acd == pytest.approx(1.0, abs=1e-6)

    a = math.radians(10.0)
    tilted = np.broadcast_to(np.array([math.sin(a), 0.0, math.cos(a)]),
                             shape + (3,)).copy()
    mad, acd = mad_acd(direction_covariance(eigen_from_vectors(tilted), region, c))
    assert mad == pytest.approx(10.0, abs=0.05)
    assert acd == pytest.approx(1.0, abs=1e-6)

    mixed = np.empty(shape + (3,))
    mixed[:, :, :4] = [math.sin(a), 0.0, math.cos(a)]
    mixed[:, :, 4:] = [-math.sin(a), 0.0, math.cos(a)]
    mad, acd = mad_acd(direction_covariance(eigen_from_vectors(mixed), region, c))
    assert mad == pytest.approx(0.0, abs=0.05)
    assert acd == pytest.approx(math.cos(a) ** 2, abs=1e-4)
    print("criterion 5 closed forms: PASS")


def test_criterion_06_level_profile_improves(default_reports):
    unc = default_reports["reports"]["uncorrected"].rows
    var = default_reports["reports"]["variational"].rows
    unc_mad = [r.mad_deg for r in unc]
    unc_acd = [r.acd for r in unc]
    ends, middle = [0, len(unc) - 1], list(range(1, len(unc) - 1))
    # distortion concentrates at the two end levels before correction
    assert min(unc_mad[i] for i in ends) > max(unc_mad[i] for i in middle)
    assert max(unc_acd[i] for i in ends) < min(unc_acd[i] for i in middle)
    for i in ends:
        assert var[i].mad_deg < unc_mad[i]
        assert var[i].acd > unc_acd[i]
    for i in middle:
        assert abs(var[i].mad_deg - unc_mad[i]) < 1.0
        assert abs(var[i].acd - unc_acd[i]) < 0.01
    print("criterion 6 level profile: PASS "
          f"(end MAD {unc_mad[0]:.2f}/{unc_mad[-1]:.2f} -> "
          f"{var[0].mad_deg:.2f}/{var[-1].mad_deg:.2f} deg)")


def test_criterion_07_similarity_metrics(default_run, default_reports):
    rng = np.random.default_rng(103)
    x = rng.normal(size=(6, 6, 4))
    full = Mask(data=np.ones(x.shape, bool), spacing=(1.0, 1.0, 1.0),
                affine=np.eye(4))
    vx = make_volume(x)
    assert cross_correlation(vx, make_volume(2.0 * x + 1.0), full) == pytest.approx(1.0, abs=1e-12)
    assert cross_correlation(vx, make_volume(-x), full) == pytest.approx(-1.0, abs=1e-12)

    bins = 16
    counts, _ = np.histogram(x.ravel(), bins=bins)
    p = counts[counts > 0] / counts.sum()
    entropy = float(-(p * np.log(p)).sum())
    assert mutual_information(vx, vx, full, bins=bins) == pytest.approx(entropy, abs=1e-12)

    clean = default_run["truth"].clean
    mask = Mask(data=default_run["truth"].mask.data,
                spacing=clean.spacing, affine=clean.affine)
    cc_unc = cross_correlation(default_run["i_f"], clean, mask)
    cc_cor = cross_correlation(default_run["var"].corrected, clean, mask)
    assert cc_cor > cc_unc
    print(f"criterion 7 similarity: PASS (CC {cc_unc:.3f} -> {cc_cor:.3f})")


def test_criterion_08_statistics_oracles():
    rng = np.random.default_rng(104)
    a = rng.normal(size=12)
    b = a + 0.8 + 0.3 * rng.normal(size=12)
    samples = PairedSamples(values=np.stack([a, b], axis=1),
                            conditions=("base", "other"))
    (cmp,) = paired_tukey(samples, "base")
    t = sps.ttest_rel(b, a)
    assert cmp.p_adjusted == pytest.approx(t.pvalue, abs=1e-6)

    records = []
    for i in range(76):
        records.append(RankingRecord(rater="r1", subject=f"s{i}", ranking=("A", "B")))
    for i in range(76, 87):
        records.append(RankingRecord(rater="r1", subject=f"s{i}", ranking=("B", "A")))
    (lop,) = pairwise_rank_logistic(records)
    assert lop.p_value < 1e-4

    balanced = []
    for i in range(25):
        balanced.append(RankingRecord(rater="r1", subject=f"b{2 * i}", ranking=("A", "B")))
        balanced.append(RankingRecord(rater="r1", subject=f"b{2 * i + 1}", ranking=("B", "A")))
    (bal,) = pairwise_rank_logistic(balanced)
    assert bal.p_value > 0.5
    print(f"criterion 8 statistics: PASS (76-11 p={lop.p_value:.2e}, "
          f"balanced p={bal.p_value:.2f})")


def test_criterion_09_seeded_runs_bitwise_identical(tmp_path):
    run_small_pipeline(tmp_path / "a")
    run_small_pipeline(tmp_path / "b")
    rels = sorted(p.relative_to(tmp_path / "a")
                  for p in (tmp_path / "a").rglob("*")
                  if p.suffix in (".csv", ".json"))
    assert rels, "no CSV/JSON outputs found"
    for rel in rels:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    print(f"criterion 9 determinism: PASS ({len(rels)} CSV/JSON files bitwise equal)")


def test_criterion_10_rating_round_trip(tmp_path):
    from fastapi.testclient import TestClient

    from cordwarp.server import create_app

    cfg = run_small_pipeline(tmp_path)
    cases = ["case1", "case2", "case3"]
    for case_id in cases:
        render_montages(cfg, case_id=case_id)
    rating_dir = Path(cfg.out_dir) / "rating"
    client = TestClient(create_app(str(rating_dir)))

    raters = ["rater1", "rater2", "rater3"]
    payloads = []
    session = client.get("/api/session")
    payloads.append(session.text)
    assert [c["id"] for c in session.json()["cases"]] == cases
    for case_id in cases:
        case = client.get(f"/api/case/{case_id}")
        payloads.append(case.text)
        labels = [p["label"] for p in case.json()["panels"]]
        for p in case.json()["panels"]:
            payloads.append(client.get(p["image_url"]).content.decode("latin-1"))
        for i, rater in enumerate(raters):
            ranking = labels[i % len(labels):] + labels[:i % len(labels)]
            resp = client.post("/api/ranking", json={
                "rater": rater, "case_id": case_id, "ranking": ranking})
            payloads.append(resp.text)
            assert resp.json() == {"accepted": True}
            status = client.get(f"/api/case/{case_id}/status",
                                params={"rater": rater})
            payloads.append(status.text)
            assert status.json()["status"] == "completed"

    methods = list(cfg.all_methods)
    rows = list(csv.DictReader(io.StringIO(client.get("/api/export.csv").text)))
    assert len(rows) == len(raters) * len(cases) * len(methods)
    for rater in raters:
        for case_id in cases:
            got = [r for r in rows
                   if r["rater"] == rater and r["subject"] == case_id]
            assert sorted(r["method"] for r in got) == sorted(methods)
            assert sorted(int(r["rank"]) for r in got) == list(range(1, len(methods) + 1))

    hidden = json.loads((rating_dir / "hidden_map.json").read_text())
    assert set(hidden) == set(cases)
    for text in payloads:
        for method in methods:
            assert method not in text
    print(f"criterion 10 rating round-trip: PASS ({len(rows)} ranking rows)")
