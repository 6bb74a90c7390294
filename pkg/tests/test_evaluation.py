import numpy as np
import pytest

from mkdiff.evaluation import (MetricCurve, cmc_curve, correspondence_quality,
                               curve_to_csv, descriptor_pair_distances,
                               dice_report, export_metrics_json, mean_curve,
                               robustness_sweep, roc_curve)
from mkdiff.spgraph import build_knn


def one_hot(ids, dim):
    out = np.zeros((len(ids), dim))
    out[np.arange(len(ids)), ids] = 1.0
    return out


# --- CMC ---------------------------------------------------------------------


def test_cmc_perfect_descriptors():
    n = 20
    desc = one_hot(np.arange(n), n)
    curve = cmc_curve(desc, desc, np.arange(n), k_max=5)
    assert np.all(curve.ys == 1.0)


def test_cmc_exhaustive_rank_is_one():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((30, 8))
    b = rng.standard_normal((30, 8))
    curve = cmc_curve(a, b, np.arange(30), k_max=30)
    assert curve.ys[-1] == 1.0
    assert np.all(np.diff(curve.ys) >= 0)
    assert np.all((curve.ys >= 0) & (curve.ys <= 1))


def test_cmc_random_descriptors_near_uniform():
    rng = np.random.default_rng(1)
    n = 100
    hits = []
    for _ in range(30):
        a = rng.standard_normal((n, 16))
        b = rng.standard_normal((n, 16))
        hits.append(cmc_curve(a, b, np.arange(n), k_max=10).ys[-1])
    # uniform-rank argument: CMC(10) ~ 10/100
    assert abs(np.mean(hits) - 0.1) < 0.03


def test_cmc_matches_bruteforce_ranking():
    rng = np.random.default_rng(2)
    n = 60
    a = rng.standard_normal((n, 5))
    b = rng.standard_normal((n, 5))
    mapping = rng.permutation(n)
    curve = cmc_curve(a, b, mapping, k_max=n)
    # oracle: explicit sort with (distance, index) tie-break
    ranks = []
    for i in range(n):
        d = np.linalg.norm(b - a[i], axis=1)
        order = np.lexsort((np.arange(n), d))
        ranks.append(1 + int(np.where(order == mapping[i])[0][0]))
    ys = np.array([(np.asarray(ranks) <= k).mean() for k in range(1, n + 1)])
    assert np.allclose(curve.ys, ys)


def test_cmc_corr_tuple_mapping():
    desc = one_hot([0, 1, 2], 3)
    corr_a = np.array([10, 11, 12])
    corr_b = np.array([12, 10, 11])
    curve = cmc_curve(desc, desc[[2, 0, 1]], (corr_a, corr_b), k_max=1)
    assert curve.ys[0] == 1.0


# --- ROC ---------------------------------------------------------------------


def test_roc_separated_auc_one():
    curve = roc_curve(np.array([0.1, 0.2]), np.array([0.8, 0.9]), 50)
    assert curve.meta["auc"] == 1.0
    assert np.all(np.diff(curve.xs) > 0)
    assert np.all(np.diff(curve.ys) >= 0)


def test_roc_identical_distributions_auc_half():
    rng = np.random.default_rng(3)
    d = rng.random(4000)
    curve = roc_curve(d[:2000], d[2000:], 100)
    assert abs(curve.meta["auc"] - 0.5) < 0.03


def test_roc_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    pos = rng.random(500)
    neg = rng.random(500) + 0.2
    a1 = roc_curve(pos, neg, 100).meta["auc"]
    a2 = roc_curve(np.exp(3 * pos), np.exp(3 * neg), 100).meta["auc"]
    assert a1 == pytest.approx(a2, abs=1e-12)


def test_descriptor_pair_distances():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((40, 6))
    b = rng.standard_normal((40, 6))
    pos, neg = descriptor_pair_distances(a, b, np.arange(40), seed=1)
    assert pos.shape == neg.shape == (40,)
    p2, n2 = descriptor_pair_distances(a, b, np.arange(40), seed=1)
    assert np.array_equal(pos, p2) and np.array_equal(neg, n2)


# --- correspondence quality ---------------------------------------------------


def test_correspondence_quality_perfect_matching():
    rng = np.random.default_rng(6)
    coords = rng.random((50, 3))
    nb = build_knn(coords, 5)
    desc = one_hot(np.arange(50), 50)
    curve = correspondence_quality(desc, desc, np.arange(50), nb,
                                   radii=[0.0, 0.1, 0.5])
    assert np.all(curve.ys == 1.0)


def test_correspondence_quality_monotone():
    rng = np.random.default_rng(7)
    coords = rng.random((60, 3))
    nb = build_knn(coords, 6)
    a = rng.standard_normal((60, 8))
    b = rng.standard_normal((60, 8))
    curve = correspondence_quality(a, b, np.arange(60), nb,
                                   radii=np.linspace(0, 2, 11))
    assert np.all(np.diff(curve.ys) >= 0)
    assert np.all((curve.ys >= 0) & (curve.ys <= 1))


# --- dice ----------------------------------------------------------------------


def test_dice_perfect_and_hand_case():
    gt = np.array([1, 1, 2, 2])
    assert dice_report(gt.copy(), gt, 3).mean == 1.0
    pred = np.ones(4, dtype=int)
    rep = dice_report(pred, gt, 3, class_subset=[1, 2])
    assert rep.per_class[0] == pytest.approx(2 * 2 / (4 + 2))
    assert rep.per_class[1] == 0.0
    assert rep.mean == pytest.approx((2 / 3) / 2)


def test_dice_symmetry_and_range():
    rng = np.random.default_rng(8)
    a = rng.integers(0, 4, 200)
    b = rng.integers(0, 4, 200)
    r1 = dice_report(a, b, 4)
    r2 = dice_report(b, a, 4)
    assert r1.mean == pytest.approx(r2.mean)
    assert 0 <= r1.mean <= 1


def test_dice_absent_class_skipped():
    pred = np.array([1, 1])
    gt = np.array([1, 1])
    rep = dice_report(pred, gt, 5)
    assert rep.mean == 1.0
    assert np.isnan(rep.per_class[0])       # class 0 never appears


def test_dice_matches_confusion_matrix_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(10, 1000))
        pred = rng.integers(0, c, n)
        gt = rng.integers(0, c, n)
        rep = dice_report(pred, gt, c)
        conf = np.zeros((c, c), dtype=int)
        for p_, g_ in zip(pred, gt):
            conf[p_, g_] += 1
        expect = []
        for cls in range(c):
            denom = conf[cls].sum() + conf[:, cls].sum()
            if denom == 0:
                continue
            expect.append(2 * conf[cls, cls] / denom)
        assert rep.mean == pytest.approx(np.mean(expect))


def test_dice_rejects_out_of_range():
    with pytest.raises(ValueError, match="range"):
        dice_report(np.array([0, 5]), np.array([0, 1]), 3)


def test_dice_multi_shape_aggregation():
    shapes_pred = [np.array([1, 1, 2, 2]), np.array([1, 2, 2, 2])]
    shapes_gt = [np.array([1, 1, 2, 2]), np.array([1, 1, 2, 2])]
    rep = dice_report(shapes_pred, shapes_gt, 3)
    assert rep.per_shape[0] == 1.0
    d1 = 2 * 1 / (1 + 2)
    d2 = 2 * 2 / (3 + 2)
    assert rep.per_shape[1] == pytest.approx((d1 + d2) / 2)
    assert rep.mean == pytest.approx(np.mean(rep.per_shape))
    assert rep.std == pytest.approx(np.std(rep.per_shape))


# --- exports ----------------------------------------------------------------


def test_curve_csv_and_json_export(tmp_path):
    curve = MetricCurve([1, 2, 3], [0.1, 0.5, 1.0], {"protocol": "cmc"})
    csv = tmp_path / "c.csv"
    curve_to_csv(curve, csv)
    lines = csv.read_text().splitlines()
    assert lines[0].startswith("# meta ")
    assert lines[1] == "x,y"
    assert lines[2] == "1,0.1"
    rep = dice_report(np.array([1, 1]), np.array([1, 1]), 2)
    export_metrics_json({"cmc": curve, "dice": rep, "n": np.int64(3)},
                        tmp_path / "m.json")
    import json
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["cmc"]["ys"] == [0.1, 0.5, 1.0]
    assert doc["dice"]["mean"] == 1.0
    assert doc["dice"]["per_class"][0] is None
    assert doc["n"] == 3


# --- robustness sweep ---------------------------------------------------------


def test_robustness_sweep_zero_equals_clean(tmp_path):
    from mkdiff.pointset import synthesize_dataset
    from mkdiff.tasks import TrainConfig, train_segmentation
    from mkdiff.evaluation import evaluate_segmentation

    man = synthesize_dataset(tmp_path / "ds", 8, 200, seed=2, poses_per_subject=2)
    cfg = TrainConfig(task="segmentation", epochs=2, lr=1e-3, sigmas=(0.1, 0.4),
                      k=6, t=2, hidden_width=8, n_layers=1, dropout_p=0.0, seed=1)
    ckpt = train_segmentation(cfg, man)
    table = robustness_sweep(ckpt, man, "missing", [0.0, 0.3], seed=4)
    clean = evaluate_segmentation(ckpt, man, "test")
    assert table[0.0].mean == pytest.approx(clean.mean)
    assert set(table) == {0.0, 0.3}
    t2 = robustness_sweep(ckpt, man, "noise", [0.0], seed=4)
    assert t2[0.0].mean == pytest.approx(clean.mean)
    with pytest.raises(ValueError, match="disturbance"):
        robustness_sweep(ckpt, man, "melt", [0.1], seed=0)
