import hashlib
from pathlib import Path

import numpy as np
import pytest

from scamkit.synthdata import (
    Corpus,
    band_energies,
    generate_corpus,
    glyph_patch,
    mass_in_region,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(root, seed=11, classes=3, seqs_per_class=4, frames=14, hw=64)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_corpus(a, seed=5, classes=2, seqs_per_class=2, frames=12, hw=32)
    generate_corpus(b, seed=5, classes=2, seqs_per_class=2, frames=12, hw=32)
    assert _tree_digest(a) == _tree_digest(b)


def test_counts_arithmetic(small_corpus):
    m = small_corpus.manifest
    assert len(m.sequences) == 3 * 4
    n_frames = sum(s.n_frames for s in m.sequences.values())
    assert n_frames == 3 * 4 * 14


def test_every_frame_box_recorded(small_corpus):
    for seq in small_corpus.manifest.sequences.values():
        assert len(seq.boxes) == seq.n_frames
        for x0, y0, x1, y1 in seq.boxes:
            assert 0 <= x0 <= x1 < 64 and 0 <= y0 <= y1 < 64


def test_split_assignment(small_corpus):
    per_class = {}
    for seq in small_corpus.manifest.sequences.values():
        per_class.setdefault(seq.class_id, []).append(seq.split)
    for splits in per_class.values():
        assert splits.count("train") == 3 and splits.count("held") == 1


def test_motion_bounded(small_corpus):
    for seq in small_corpus.manifest.sequences.values():
        boxes = seq.boxes
        for a, b in zip(boxes, boxes[1:]):
            assert abs(a[0] - b[0]) <= 2 and abs(a[1] - b[1]) <= 2


def test_ground_truth_peak_and_points(small_corpus):
    cf, points = small_corpus.ground_truth("seq000", 3)
    x0, y0, x1, y1 = small_corpus.glyph_box("seq000", 3)
    cy, cx = np.unravel_index(np.argmax(cf), cf.shape)
    assert x0 <= cx <= x1 and y0 <= cy <= y1
    assert cf.max() == pytest.approx(1.0)
    assert len(points) == 20
    assert len(set(points)) == 20
    for r, c in points:
        assert 0 <= r < 64 and 0 <= c < 64


def test_gt_mass_inside_glyph_box(small_corpus):
    # numeric integration of the density over the planted box
    cf, _ = small_corpus.ground_truth("seq001", 5)
    box = small_corpus.glyph_box("seq001", 5)
    assert mass_in_region(cf, box) >= 0.6


def test_fragment_invariants(small_corpus):
    frag = small_corpus.fragment("seq000", 0)
    assert frag.frames.shape == (3, 64, 64, 3)
    assert np.all(frag.spectrogram >= 0)
    assert frag.tag == small_corpus.manifest.sequences["seq000"].class_id
    # edge frame replicates
    assert np.array_equal(frag.frames[0], frag.frames[1])


def test_glyphs_nearest_template_100_percent(small_corpus):
    # class glyphs must be pairwise distinguishable from their crops
    m = small_corpus.manifest
    templates = []
    for cid in range(m.classes):
        mask, patch = glyph_patch(cid, m.classes)
        tpl = np.full((16, 16, 3), 0.3)
        tpl[mask] = patch[mask]
        templates.append(tpl)
    correct = 0
    total = 0
    for sid, seq in m.sequences.items():
        for t in range(0, seq.n_frames, 5):
            x0, y0, x1, y1 = seq.boxes[t]
            crop = small_corpus.frame(sid, t)[y0 : y1 + 1, x0 : x1 + 1]
            dists = [np.mean((crop - tpl) ** 2) for tpl in templates]
            correct += int(np.argmin(dists) == seq.class_id)
            total += 1
    assert correct == total


def test_audio_band_separable(small_corpus):
    m = small_corpus.manifest
    for sid, seq in m.sequences.items():
        spect = small_corpus.spectrogram(sid, 2)
        energies = band_energies(spect, m.classes)
        if seq.audio_relevant:
            assert int(np.argmax(energies)) == seq.class_id
        else:
            # uniform noise: no band dominates strongly
            assert energies.max() / max(energies.min(), 1e-9) < 2.0


def test_mass_in_region_cases():
    full = np.zeros((8, 8))
    full[2:4, 2:4] = 1.0
    assert mass_in_region(full, (2, 2, 3, 3)) == 1.0
    uniform = np.ones((64, 64))
    assert mass_in_region(uniform, (0, 0, 15, 15)) == pytest.approx(0.0625)
    assert mass_in_region(3.7 * uniform, (0, 0, 15, 15)) == pytest.approx(0.0625)
    assert mass_in_region(np.zeros((4, 4)), (0, 0, 1, 1)) == 0.0


def test_corpus_reload_roundtrip(small_corpus):
    again = Corpus(small_corpus.root)
    assert again.manifest.sequences.keys() == small_corpus.manifest.sequences.keys()
    s0 = again.manifest.sequences["seq000"]
    assert s0.boxes == small_corpus.manifest.sequences["seq000"].boxes
    f1 = again.frame("seq003", 7)
    f2 = small_corpus.frame("seq003", 7)
    assert np.array_equal(f1, f2)
