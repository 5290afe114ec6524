import colorsys
import itertools
import json

import numpy as np
import pytest
from scipy import stats

from mindcine.config import MetricsConfig
from mindcine.defs import SchemaVersionError, ShapeError, UndefinedMetricError, ValidationError
from mindcine.inference import Reconstruction, ReconstructionSet, render_frames
from mindcine.metrics import (
    MetricsReport,
    NwayConfig,
    OracleClassifier,
    RandomClassifier,
    aggregate,
    build_classifiers,
    evaluate_split,
    gaussian_window,
    hue_pcc,
    nway_topk,
    nway_topk_exact,
    psnr,
    ssim,
)


# ---- N-way ------------------------------------------------------------------

def _exhaustive(logits, gt, n, k):
    others = [c for c in range(len(logits)) if c != gt]
    hits = []
    for subset in itertools.combinations(others, n - 1):
        higher = sum(logits[c] >= logits[gt] for c in subset)
        hits.append(higher < k)
    return float(np.mean(hits))


def test_exact_nway_matches_subset_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.standard_normal(7)
        gt = int(rng.integers(7))
        logits[int(rng.integers(7))] = logits[gt]
        for n in range(2, 6):
            for k in range(1, n):
                assert nway_topk_exact(logits, gt, n, k) == pytest.approx(_exhaustive(logits, gt, n, k), abs=1e-12)


def test_sampled_nway_converges_to_exact():
    logits = np.random.default_rng(1).standard_normal(10)
    exact = nway_topk_exact(logits, 4, 5, 1)
    sampled = nway_topk(logits, 4, NwayConfig(5, 1, repeats=20000, seed=3))
    assert sampled == pytest.approx(exact, abs=0.02)


def test_full_way_is_plain_top1():
    logits = np.random.default_rng(2).standard_normal(40)
    best = int(np.argmax(logits))
    assert nway_topk(logits, best, NwayConfig(40)) == 1.0
    assert nway_topk(logits, (best + 1) % 40, NwayConfig(40)) == 0.0


def test_ties_count_against_ground_truth():
    flat = np.zeros(40)
    for n in (2, 5, 40):
        assert nway_topk(flat, 0, NwayConfig(n)) == 0.0
        assert nway_topk_exact(flat, 0, n) == 0.0

    # one tied distractor among otherwise lower classes
    logits = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    assert nway_topk_exact(logits, 0, 2) == pytest.approx(0.75)
    assert nway_topk(logits, 0, NwayConfig(2, repeats=20000, seed=1)) == pytest.approx(0.75, abs=0.02)
    assert nway_topk_exact(logits, 0, 3, k=2) == 1.0
    assert _exhaustive(logits, 0, 3, 1) == pytest.approx(nway_topk_exact(logits, 0, 3))


def test_oracle_always_succeeds():
    clf = OracleClassifier({"a": 3}, 40)
    logits = clf.predict_logits(None, "a")
    for n in (2, 5, 40):
        assert nway_topk(logits, 3, NwayConfig(n)) == 1.0


@pytest.mark.parametrize("n", [2, 5, 40])
def test_random_classifier_is_at_chance(n):
    clf = RandomClassifier(40, seed=9)
    trials = 10000
    hits = 0.0
    for i in range(trials):
        logits = clf.predict_logits(None, "clip{}".format(i))
        hits += nway_topk(logits, i % 40, NwayConfig(n, repeats=1, seed=i))
    lo, hi = stats.binom.interval(0.99, trials, 1.0 / n)
    assert lo <= hits <= hi


def test_nway_config_checks():
    with pytest.raises(ValidationError):
        NwayConfig(2, 2)
    with pytest.raises(ValidationError):
        nway_topk(np.zeros(5), 0, NwayConfig(6))
    with pytest.raises(ValidationError):
        nway_topk(np.zeros(5), 5, NwayConfig(2))


# ---- pixel metrics ----------------------------------------------------------

def _naive_ssim(a, b):
    win = gaussian_window()
    n = win.shape[0]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - n + 1):
        for j in range(a.shape[1] - n + 1):
            pa, pb = a[i : i + n, j : j + n], b[i : i + n, j : j + n]
            ma, mb = np.sum(win * pa), np.sum(win * pb)
            va = np.sum(win * (pa - ma) ** 2)
            vb = np.sum(win * (pb - mb) ** 2)
            cov = np.sum(win * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _naive_hue_pcc(a, b, threshold):
    ha, hb = [], []
    for pa, pb in zip(a.reshape(-1, 3), b.reshape(-1, 3)):
        xa, xb = colorsys.rgb_to_hsv(*pa), colorsys.rgb_to_hsv(*pb)
        if xa[1] * xa[2] >= threshold and xb[1] * xb[2] >= threshold:
            ha.append(xa[0])
            hb.append(xb[0])
    return float(np.corrcoef(ha, hb)[0, 1])


def test_pixel_metrics_match_naive_versions():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a = rng.random((16, 16, 3))
        b = np.clip(a + 0.3 * rng.standard_normal((16, 16, 3)), 0, 1)
        ya, yb = a @ [0.299, 0.587, 0.114], b @ [0.299, 0.587, 0.114]
        assert ssim(a, b) == pytest.approx(_naive_ssim(ya, yb), abs=1e-6)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1.0 / np.mean((a - b) ** 2)), abs=1e-6)
        assert hue_pcc(a, b, 0.05) == pytest.approx(_naive_hue_pcc(a, b, 0.05), abs=1e-6)


def test_ssim_and_psnr_reference_values():
    a = np.random.default_rng(5).random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, a, "mean") == pytest.approx(1.0, abs=1e-12)
    assert psnr(a, a) == float("inf")
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def _checkerboard(c0, c1, size=12):
    img = np.empty((size, size, 3))
    mask = (np.add.outer(np.arange(size), np.arange(size)) % 2).astype(bool)
    img[~mask] = c0
    img[mask] = c1
    return img


def test_hue_swap_is_anticorrelated():
    red, green = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)
    a = _checkerboard(red, green)
    b = _checkerboard(green, red)
    assert hue_pcc(a, b) == pytest.approx(-1.0, abs=1e-12)
    assert hue_pcc(a, a) == pytest.approx(1.0, abs=1e-12)
    assert hue_pcc(a, a, mode="histogram") == pytest.approx(1.0, abs=1e-12)


def test_hue_ignores_saturation_and_value_rescaling():
    rng = np.random.default_rng(6)
    a = 0.3 + 0.7 * rng.random((16, 16, 3))
    b = 0.3 + 0.7 * rng.random((16, 16, 3))
    base = hue_pcc(a, b, threshold=0.0)
    assert hue_pcc(0.5 * a, 0.5 * b, threshold=0.0) == pytest.approx(base, abs=1e-9)


def test_hue_undefined_on_gray():
    gray = np.full((12, 12, 3), 0.5)
    with pytest.raises(UndefinedMetricError):
        hue_pcc(gray, gray)


# ---- report -----------------------------------------------------------------

def _perfect_recon(records, image_size, render_seed):
    items = [
        Reconstruction(r.clip_id, r.gt_latents, render_frames(r.gt_latents, image_size, render_seed))
        for r in records
    ]
    return ReconstructionSet(items, {}, [])


def test_evaluate_perfect_reconstructions(tiny_manifest, tmp_path):
    m = tiny_manifest
    rs = m.meta["render_seed"]
    test = m.test
    recon = _perfect_recon(test[1:], m.dims.image_size, rs)
    cfg = MetricsConfig(n_ways=[2, 5], repeats=20)
    classifiers = build_classifiers("oracle", m.train, test, m.dims, rs, None)
    report = evaluate_split(recon, test, classifiers, cfg, rs, m.dims.image_size, config_hash="abc")

    assert report.missing == [test[0].clip_id]
    assert len(report.rows) == 9
    for key in ("way2_v", "way5_v", "way2_i", "way5_i", "ssim", "latent_cos"):
        assert report.summary[key]["mean"] == pytest.approx(1.0)
        assert report.summary[key]["std"] == pytest.approx(0.0, abs=1e-12)
    assert all(r["psnr"] == float("inf") for r in report.rows)
    assert report.summary["psnr"]["mean"] == 100.0
    assert report.aggregation == "clip-then-subject"
    assert [c.label for c in report.columns][:4] == ["2-way-V", "5-way-V", "2-way-I", "5-way-I"]

    path = str(tmp_path / "report.json")
    report.save(path)
    with open(path) as f:
        assert json.load(f)["rows"][0]["psnr"] == "inf"
    loaded = MetricsReport.load(path)
    assert loaded.rows[0]["psnr"] == float("inf")
    assert loaded.to_dict() == report.to_dict()


def test_evaluate_flags_failures(tiny_cfg, tiny_manifest):
    m = tiny_manifest
    rs = m.meta["render_seed"]
    recon = _perfect_recon(m.test[1:], m.dims.image_size, rs)
    recon.failures.append({"clip_id": m.test[0].clip_id, "error": "diverged"})
    classifiers = build_classifiers("random", m.train, m.test, m.dims, rs, tiny_cfg)
    report = evaluate_split(recon, m.test, classifiers, MetricsConfig(n_ways=[2, 5], repeats=20), rs, m.dims.image_size)
    assert {f["clip_id"] for f in report.flagged} >= {m.test[0].clip_id}

    # summary fields recomputed from the per-clip rows
    for key in ("way2_v", "way5_i", "ssim", "latent_cos"):
        vals = [r[key] for r in report.rows]
        assert report.summary[key]["mean"] == pytest.approx(np.mean(vals), abs=1e-9)
        assert report.summary[key]["std"] == pytest.approx(np.std(vals), abs=1e-9)


def test_report_schema_is_checked():
    d = MetricsReport(n_ways=[2]).to_dict()
    d["schema"] = 99
    with pytest.raises(SchemaVersionError):
        MetricsReport.from_dict(d)


def test_aggregate_clip_then_subject():
    rows = [
        {"subject": 0, "ssim": 0.2},
        {"subject": 0, "ssim": 0.4},
        {"subject": 1, "ssim": 0.9},
    ]
    summary, subjects = aggregate(rows, ["ssim"])
    assert subjects["0"]["ssim"]["mean"] == pytest.approx(0.3)
    assert summary["ssim"]["mean"] == pytest.approx(0.6)
    assert summary["ssim"]["std"] == pytest.approx(0.3)
    assert summary["ssim"]["n"] == 2

    one, _ = aggregate(rows[:2], ["ssim"])
    assert one["ssim"]["std"] == pytest.approx(0.1)


def test_trainable_classifiers_fit_ground_truth(tiny_cfg, tiny_manifest):
    m = tiny_manifest
    cfg = tiny_cfg
    cfg.classifier_optim.epochs = 30
    rs = m.meta["render_seed"]
    clfs = build_classifiers("trainable", m.train, m.test, m.dims, rs, cfg)
    assert set(clfs) == {"video", "frame"}
    r = m.train[0]
    logits = clfs["video"].predict_logits(render_frames(r.gt_latents, m.dims.image_size, rs), r.clip_id)
    assert logits.shape == (5,)
    assert np.all(np.isfinite(logits))
