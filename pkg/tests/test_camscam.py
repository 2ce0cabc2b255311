import numpy as np
import pytest

from scamkit.camscam import (
    GRANULARITY_SOURCES,
    CamMap,
    CoarseBox,
    FusionError,
    SamplingError,
    average_cam,
    cam,
    coarse_box,
    crop_resize,
    granularity_rng,
    multistage,
    paste_back,
    sample_cross,
    sample_long,
    sample_short,
    scam_fuse,
    scam_plus_fuse,
    soft_filter,
    zscale,
)
from scamkit.synthdata import generate_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("camscam_corpus")
    return generate_corpus(root, seed=3, classes=2, seqs_per_class=3, frames=30, hw=64)


def test_cam_identity_through_z():
    out = cam(np.array([[[0.0, 1.0]]]), tag=0)
    assert np.array_equal(out.map, [[0.0, 1.0]])


def test_cam_equals_weighted_sum():
    # equal-weight head on two channels == explicit sum f1+f2 then Z
    f1 = np.array([[2.0, 0.0]])
    f2 = np.array([[0.0, 2.0]])
    pre = np.stack([f1 + f2, np.zeros_like(f1)])
    direct = zscale(1.0 * f1 + 1.0 * f2)
    assert np.allclose(cam(pre, tag=0).map, direct)


def test_cam_constant_channel_zero():
    out = cam(np.full((2, 3, 3), 4.0), tag=1)
    assert np.array_equal(out.map, np.zeros((3, 3)))


def test_soft_filter_cases():
    assert soft_filter(np.array([0.7, 0.2, 0.1]), 0) == pytest.approx(0.7)
    assert soft_filter(np.array([0.3, 0.6, 0.1]), 0) == 0.0
    assert soft_filter(np.array([0.5, 0.5]), 0) == 0.0  # strict inequality
    assert soft_filter(np.array([0.4]), 0) == pytest.approx(0.4)


def test_soft_filter_never_exceeds_max():
    rng = np.random.default_rng(0)
    for _ in range(20):
        conf = rng.random(5)
        for tag in range(5):
            v = soft_filter(conf, tag)
            assert 0.0 <= v <= conf.max()


def test_scam_fuse_single_confidence_degeneracy():
    rng = np.random.default_rng(1)
    maps = [rng.random((6, 6)) for _ in range(3)]
    cams = [
        CamMap(map=maps[0], source="S", confidence=0.9),
        CamMap(map=maps[1], source="ST", confidence=0.0),
        CamMap(map=maps[2], source="SA", confidence=0.0),
    ]
    fused = scam_fuse(cams).map
    assert np.allclose(fused, zscale(maps[0]), atol=1e-7)


def test_scam_fuse_all_zero_confidences():
    cams = [CamMap(map=np.random.default_rng(2).random((4, 4)), source=s, confidence=0.0)
            for s in ("S", "ST", "SA")]
    assert np.array_equal(scam_fuse(cams).map, np.zeros((4, 4)))


def test_scam_fuse_hand_case():
    phi_s = np.array([[1.0, 0.0], [0.0, 0.0]])
    phi_st = np.array([[0.0, 0.0], [0.0, 1.0]])
    cams = [
        CamMap(map=phi_s, source="S", confidence=0.5),
        CamMap(map=phi_st, source="ST", confidence=0.5),
        CamMap(map=np.zeros((2, 2)), source="SA", confidence=0.0),
    ]
    fused = scam_fuse(cams).map
    assert np.allclose(fused, [[1.0, 0.0], [0.0, 1.0]], atol=1e-7)


def test_scam_fuse_confidence_scale_invariance():
    rng = np.random.default_rng(3)
    maps = [rng.random((5, 5)) for _ in range(3)]
    weights = [0.6, 0.3, 0.2]
    reference = zscale(sum(w * m for w, m in zip(weights, maps)) / sum(weights))
    for k in (0.5, 2.0):
        cams = [CamMap(map=m, source=s, confidence=k * w)
                for m, s, w in zip(maps, ("S", "ST", "SA"), weights)]
        fused = scam_fuse(cams).map
        assert np.allclose(fused, reference, atol=1e-6)


def test_scam_fuse_empty_errors():
    with pytest.raises(FusionError):
        scam_fuse([])


def test_average_cam_cases():
    same = np.random.default_rng(4).random((3, 3))
    cams = [CamMap(map=same, source=s, confidence=1.0) for s in ("S", "ST", "SA")]
    assert np.allclose(average_cam(cams).map, same)
    cams = [
        CamMap(map=np.array([[1.0, 0.0]]), source="S", confidence=1.0),
        CamMap(map=np.array([[0.0, 1.0]]), source="ST", confidence=1.0),
        CamMap(map=np.array([[0.0, 0.0]]), source="SA", confidence=1.0),
    ]
    assert np.allclose(average_cam(cams).map, [[1 / 3, 1 / 3]])


def test_scam_plus_reduces_to_scam_at_zero_granularity():
    rng = np.random.default_rng(5)
    target = [CamMap(map=rng.random((4, 4)), source=s, confidence=rng.random())
              for s in ("S", "ST", "SA")]
    gran = [CamMap(map=rng.random((4, 4)), source=s, confidence=0.0)
            for s in GRANULARITY_SOURCES]
    plus = scam_plus_fuse(target, gran).map
    plain = scam_fuse(target).map
    assert np.allclose(plus, plain, atol=1e-12)


def test_scam_plus_single_nonzero_confidence():
    rng = np.random.default_rng(6)
    target = [CamMap(map=rng.random((4, 4)), source=s, confidence=0.0)
              for s in ("S", "ST", "SA")]
    gran = [CamMap(map=rng.random((4, 4)), source=s, confidence=0.0)
            for s in GRANULARITY_SOURCES]
    gran[3] = CamMap(map=gran[3].map, source=gran[3].source, confidence=0.8)
    plus = scam_plus_fuse(target, gran).map
    assert np.allclose(plus, zscale(gran[3].map), atol=1e-6)


def test_scam_plus_missing_pair_errors():
    rng = np.random.default_rng(7)
    target = [CamMap(map=rng.random((4, 4)), source=s, confidence=0.1)
              for s in ("S", "ST", "SA")]
    gran = [CamMap(map=rng.random((4, 4)), source=s, confidence=0.1)
            for s in GRANULARITY_SOURCES[:-1]]
    with pytest.raises(FusionError):
        scam_plus_fuse(target, gran)


def test_coarse_box_hot_pixel():
    m = np.zeros((3, 3))
    m[1, 1] = 1.0
    box = coarse_box(m)
    assert (box.x0, box.y0, box.x1, box.y1) == (1, 1, 1, 1)


def test_coarse_box_uniform_full_frame():
    box = coarse_box(np.full((4, 6), 0.3))
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 5, 3)


def test_coarse_box_two_corners():
    m = np.zeros((5, 5))
    m[0, 0] = 1.0
    m[4, 4] = 1.0
    box = coarse_box(m)
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 4, 4)


def test_coarse_box_translation_equivariance():
    rng = np.random.default_rng(8)
    m = np.zeros((16, 16))
    m[4:7, 5:8] = rng.random((3, 3)) + 1.0
    b1 = coarse_box(m)
    shifted = np.roll(np.roll(m, 3, axis=0), 2, axis=1)
    b2 = coarse_box(shifted)
    assert (b2.x0 - b1.x0, b2.y0 - b1.y0) == (2, 3)
    assert (b2.x1 - b1.x1, b2.y1 - b1.y1) == (2, 3)


def test_paste_back_zeros_outside():
    fine = np.ones((4, 4))
    box = CoarseBox(2, 3, 5, 6)
    full = paste_back(fine, box, (10, 10))
    assert full[3:7, 2:6].min() == 1.0
    total = full.sum()
    assert total == 16.0  # nothing outside the box


def test_crop_resize_roundtrip_constant():
    arr = np.full((8, 8), 0.7)
    box = CoarseBox(1, 1, 6, 6)
    out = crop_resize(arr, box, (12, 12))
    assert np.allclose(out, 0.7)


def test_multistage_full_frame_fallback():
    # uniform coarse cams -> full-frame box -> fine stage sees whole frame
    rng = np.random.default_rng(9)
    fine_map = rng.random((12, 12))
    coarse_cams = [CamMap(map=np.full((8, 8), 0.5), source=s, confidence=0.3)
                   for s in ("S", "ST", "SA")]
    seen = {}

    def fine_fn(box):
        seen["box"] = box
        return [CamMap(map=fine_map, source=s, confidence=0.5) for s in ("S", "ST", "SA")]

    coarse, fine, box = multistage(coarse_cams, fine_fn, (8, 8))
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 7, 7)
    assert fine.map.shape == (8, 8)
    assert fine.stage == "fine" and coarse.stage == "coarse"


def test_multistage_paste_back_confined():
    m = np.zeros((8, 8))
    m[2:4, 2:4] = 1.0
    coarse_cams = [CamMap(map=m, source=s, confidence=0.5) for s in ("S", "ST", "SA")]

    def fine_fn(box):
        return [CamMap(map=np.ones((6, 6)), source=s, confidence=0.5)
                for s in ("S", "ST", "SA")]

    _, fine, box = multistage(coarse_cams, fine_fn, (8, 8))
    outside = fine.map.copy()
    outside[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = 0.0
    assert outside.sum() == 0.0


def test_sample_short_adjacent_groups(corpus):
    frag = corpus.fragment("seq000", 10)
    sample = sample_short(frag, corpus)
    assert sample.kind == "short"
    centers = [f.frame_index for f in sample.fragments]
    assert centers == [8, 12]  # groups {7,8,9} and {11,12,13}


def test_sample_long_excludes_neighborhood(corpus):
    frag = corpus.fragment("seq000", 15)
    for seed in range(5):
        sample = sample_long(frag, corpus, granularity_rng(3, "long", "seq000", seed))
        for f in sample.fragments:
            assert abs(f.frame_index - 15) > 4
            assert f.sequence_id == "seq000"


class _NineFrameStub:
    """9-frame single-sequence corpus; the 8-frame neighborhood of the middle
    frame covers everything, forcing the farthest-frames fallback."""

    class _Seq:
        n_frames = 9

    sequences = {"seq000": _Seq()}

    def fragment(self, seq_id, t):
        from scamkit.synthdata import VideoFragment

        frames = np.zeros((3, 8, 8, 3))
        return VideoFragment(frames=frames, spectrogram=np.zeros((4, 4)), tag=0,
                             sequence_id=seq_id, frame_index=int(t))


def test_sample_long_fallback_short_sequence():
    stub = _NineFrameStub()
    frag = stub.fragment("seq000", 4)
    sample = sample_long(frag, stub, np.random.default_rng(0))
    centers = sorted(f.frame_index for f in sample.fragments)
    assert centers == [0, 8]


def test_sample_cross_same_tag_other_sequence(corpus):
    frag = corpus.fragment("seq000", 5)
    sample = sample_cross(frag, corpus, np.random.default_rng(1))
    for f in sample.fragments:
        assert f.tag == frag.tag
        assert f.sequence_id != "seq000"


def test_sample_cross_errors_single_sequence(tmp_path):
    solo = generate_corpus(tmp_path / "solo", seed=5, classes=2, seqs_per_class=1,
                           frames=12, hw=32)
    frag = solo.fragment("seq000", 3)
    with pytest.raises(SamplingError):
        sample_cross(frag, solo, np.random.default_rng(0))


def test_granularity_rng_deterministic():
    a = granularity_rng(7, "long", "seq003", 9).integers(0, 1000, 5)
    b = granularity_rng(7, "long", "seq003", 9).integers(0, 1000, 5)
    c = granularity_rng(7, "cross", "seq003", 9).integers(0, 1000, 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
