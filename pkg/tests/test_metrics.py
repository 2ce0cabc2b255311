import numpy as np
import pytest

from scamkit.metrics import (
    FrameMetrics,
    MetricError,
    MetricsReport,
    auc_judd,
    cc,
    nss,
    shuffled_auc,
    sim,
)


def _brute_force_auc(ps, fl):
    # recompute TP/FP by naive counting at each fixated pixel's value
    mask = np.zeros(ps.shape, dtype=bool)
    for r, c in fl:
        mask[r, c] = True
    pos = ps[mask]
    neg = ps[~mask]
    points = [(0.0, 0.0)]
    for t in sorted(set(pos.tolist()), reverse=True):
        tp = sum(1 for v in pos if v >= t) / len(pos)
        fp = sum(1 for v in neg if v >= t) / len(neg)
        points.append((fp, tp))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def test_cc_self_is_one():
    x = np.random.default_rng(0).random((8, 8))
    assert cc(x, x) == pytest.approx(1.0, abs=1e-12)


def test_cc_anticorrelation():
    x = np.random.default_rng(1).random((8, 8))
    assert cc(x, 2.0 - x) == pytest.approx(-1.0, abs=1e-12)


def test_cc_vs_direct_covariance():
    rng = np.random.default_rng(2)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    af, bf = a.reshape(-1), b.reshape(-1)
    expected = np.cov(af, bf, bias=True)[0, 1] / (af.std() * bf.std())
    assert abs(cc(a, b) - expected) <= 1e-12


def test_cc_constant_errors():
    with pytest.raises(MetricError):
        cc(np.ones((4, 4)), np.random.default_rng(3).random((4, 4)))


def test_cc_affine_invariance():
    rng = np.random.default_rng(4)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    assert cc(3.0 * a + 1.0, b) == pytest.approx(cc(a, b), abs=1e-12)


def test_sim_identical_and_disjoint():
    x = np.random.default_rng(5).random((6, 6)) + 0.1
    assert sim(x, x) == pytest.approx(1.0, abs=1e-12)
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[0, 0] = 1.0
    b[3, 3] = 1.0
    assert sim(a, b) == 0.0


def test_sim_symmetric():
    rng = np.random.default_rng(6)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    assert sim(a, b) == pytest.approx(sim(b, a), abs=1e-15)


def test_sim_zero_sum_errors():
    with pytest.raises(MetricError):
        sim(np.zeros((3, 3)), np.ones((3, 3)))


def test_nss_hand_case():
    ps = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert nss(ps, [(0, 0)]) == pytest.approx(1.7320508, abs=1e-6)


def test_nss_all_pixels_is_zero():
    ps = np.random.default_rng(7).random((4, 4))
    fl = [(r, c) for r in range(4) for c in range(4)]
    assert nss(ps, fl) == pytest.approx(0.0, abs=1e-12)


def test_nss_scale_invariance():
    ps = np.random.default_rng(8).random((5, 5))
    fl = [(1, 2), (3, 4)]
    assert nss(5.0 * ps, fl) == pytest.approx(nss(ps, fl), abs=1e-12)
    assert nss(5.0 * ps + 2.0, fl) == pytest.approx(nss(ps, fl), abs=1e-12)


def test_nss_constant_errors():
    with pytest.raises(MetricError):
        nss(np.ones((3, 3)), [(0, 0)])


def test_auc_judd_perfect_separation():
    ps = np.zeros((5, 5))
    fl = [(0, 0), (2, 2)]
    for r, c in fl:
        ps[r, c] = 1.0
    assert auc_judd(ps, fl) == 1.0


def test_auc_judd_constant_is_half():
    assert auc_judd(np.ones((5, 5)) * 0.3, [(1, 1)]) == pytest.approx(0.5)


def test_auc_judd_matches_bruteforce_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        ps = rng.random((16, 16))
        n_fix = int(rng.integers(1, 20))
        coords = rng.choice(256, size=n_fix, replace=False)
        fl = [(int(i // 16), int(i % 16)) for i in coords]
        assert abs(auc_judd(ps, fl) - _brute_force_auc(ps, fl)) <= 1e-9


def test_auc_judd_monotone_rescale_invariance():
    rng = np.random.default_rng(10)
    ps = rng.random((8, 8))
    fl = [(1, 1), (4, 5), (7, 2)]
    a = auc_judd(ps, fl)
    b = auc_judd(np.exp(2.0 * ps), fl)
    assert a == pytest.approx(b, abs=1e-12)


def test_shuffled_auc_perfect_and_constant():
    ps = np.zeros((6, 6))
    fl = [(0, 0), (1, 1)]
    for r, c in fl:
        ps[r, c] = 1.0
    others = [[(4, 4), (5, 5)], [(3, 3)], [(2, 4)]]
    rng = np.random.default_rng(11)
    assert shuffled_auc(ps, fl, others, rng) == 1.0
    rng = np.random.default_rng(11)
    assert shuffled_auc(np.ones((6, 6)), fl, others, rng) == pytest.approx(0.5)


def test_shuffled_auc_reproducible_and_stable():
    rng1 = np.random.default_rng(12)
    rng2 = np.random.default_rng(12)
    big = np.random.default_rng(13)
    ps = big.random((16, 16))
    fl = [(2, 2), (9, 9), (14, 3)]
    others = []
    for _ in range(15):
        pts = big.choice(256, size=8, replace=False)
        others.append([(int(i // 16), int(i % 16)) for i in pts])
    v1 = shuffled_auc(ps, fl, others, rng1)
    v2 = shuffled_auc(ps, fl, others, rng2)
    assert v1 == v2
    vals = [shuffled_auc(ps, fl, others, np.random.default_rng(s)) for s in range(8)]
    assert max(vals) - min(vals) < 0.05


def test_shuffled_auc_empty_pool_errors():
    ps = np.random.default_rng(14).random((4, 4))
    with pytest.raises(MetricError):
        shuffled_auc(ps, [(0, 0)], [], np.random.default_rng(0))


def test_report_csv_shape():
    rep = MetricsReport()
    rep.add(FrameMetrics("seq000", 0, 0.9, 0.8, 1.5, 0.7, 0.6))
    rep.add(FrameMetrics("seq000", 1, 0.8, 0.7, 1.0, 0.6, 0.5))
    csv = rep.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "seq,frame,auc_j,s_auc,nss,cc,sim"
    assert len(lines) == 4
    assert lines[-1].startswith("MEAN,")
    mean_auc = float(lines[-1].split(",")[2])
    assert mean_auc == pytest.approx(0.85)
