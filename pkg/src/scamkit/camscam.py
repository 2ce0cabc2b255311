"""CAM extraction, selective fusion, coarse-to-fine staging, and
multi-granularity sampling.

A CAM is the min-max normalized tag channel of the classifier's pre-GAP map
(the 1x1-conv head folds the class weights into that channel, so this equals
the weighted feature sum).  Selective fusion weights each source's map by its
winner-gated confidence and renormalizes pixelwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import Corpus, VideoFragment
from .tensor import Tensor, resize_bilinear

LAMBDA = 1e-8

TARGET_SOURCES = ("S", "ST", "SA")
GRANULARITY_SOURCES = (
    "S+short", "ST+short",
    "S+long", "ST+long", "SA+long",
    "S+cross", "ST+cross", "SA+cross",
)


class FusionError(ValueError):
    """Raised on empty or inconsistent fusion inputs."""


class SamplingError(ValueError):
    """Raised when the corpus cannot satisfy a granularity sample."""


@dataclass
class CamMap:
    map: np.ndarray  # values in [0,1]
    source: str
    confidence: float  # soft-filtered, >= 0

    def __post_init__(self):
        if self.confidence < 0:
            raise FusionError(f"negative confidence for {self.source}")


@dataclass
class PseudoFixation:
    map: np.ndarray  # H x W in [0,1]
    stage: str  # "coarse" | "fine"
    method: str  # "CAM" | "AC" | "SCAM" | "SCAM+"


@dataclass
class CoarseBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise FusionError(f"malformed box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1


@dataclass
class GranularitySample:
    kind: str  # "short" | "long" | "cross"
    fragments: list  # VideoFragment references


def zscale(m: np.ndarray) -> np.ndarray:
    """Min-max normalization; constant maps go to zero."""
    mn, mx = float(m.min()), float(m.max())
    if mx == mn:
        return np.zeros_like(m)
    return (m - mn) / (mx - mn)


def cam(pre_gap, tag: int, source: str = "S", confidence: float = 0.0) -> CamMap:
    """Normalized tag channel of a (c,h,w) pre-GAP classifier map."""
    arr = pre_gap.data if isinstance(pre_gap, Tensor) else np.asarray(pre_gap)
    if arr.ndim != 3:
        raise FusionError(f"pre-GAP map must be (c,h,w), got {arr.shape}")
    if not 0 <= tag < arr.shape[0]:
        raise FusionError(f"tag {tag} out of range for {arr.shape[0]} classes")
    return CamMap(map=zscale(arr[tag]), source=source, confidence=confidence)


def soft_filter(confidences: np.ndarray, tag: int) -> float:
    """confidences[tag] iff it strictly beats every other class, else 0."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if not 0 <= tag < conf.size:
        raise FusionError(f"tag {tag} out of range for {conf.size} classes")
    own = conf[tag]
    others = np.delete(conf, tag)
    if others.size and own <= others.max():
        return 0.0
    return float(own)


def _weighted_fuse(cams: list, lam: float = LAMBDA) -> np.ndarray:
    if not cams:
        raise FusionError("fusion of empty cam list")
    shape = cams[0].map.shape
    for c in cams:
        if c.map.shape != shape:
            raise FusionError(f"cam dims differ: {[c.map.shape for c in cams]}")
    num = np.full(shape, lam)
    den = lam
    for c in cams:
        num = num + c.confidence * c.map
        den = den + c.confidence
    return zscale(num / den)


def scam_fuse(cams: list, lam: float = LAMBDA) -> PseudoFixation:
    """Confidence-weighted selective fusion of sourcewise CAMs."""
    return PseudoFixation(map=_weighted_fuse(cams, lam), stage="coarse", method="SCAM")


def average_cam(cams: list) -> PseudoFixation:
    """Plain mean of the sourcewise CAMs (the non-selective baseline)."""
    if not cams:
        raise FusionError("average of empty cam list")
    shape = cams[0].map.shape
    for c in cams:
        if c.map.shape != shape:
            raise FusionError("cam dims differ")
    mean = np.mean([c.map for c in cams], axis=0)
    return PseudoFixation(map=mean, stage="coarse", method="AC")


def scam_plus_fuse(target_cams: list, granularity_cams: list, lam: float = LAMBDA) -> PseudoFixation:
    """Selective fusion extended over target + 8 granularity pairs."""
    got = sorted(c.source for c in granularity_cams)
    want = sorted(GRANULARITY_SOURCES)
    if got != want:
        raise FusionError(f"granularity pairs mismatch: got {got}, need {want}")
    if sorted(c.source for c in target_cams) != sorted(TARGET_SOURCES):
        raise FusionError("target pairs must be exactly S, ST, SA")
    fused = _weighted_fuse(list(target_cams) + list(granularity_cams), lam)
    return PseudoFixation(map=fused, stage="coarse", method="SCAM+")


def coarse_box(p) -> CoarseBox:
    """Tight box around pixels above 2x the map mean; full frame if none."""
    m = p.map if isinstance(p, PseudoFixation) else np.asarray(p)
    h, w = m.shape
    thr = 2.0 * float(m.mean())
    pos = m > thr
    if not pos.any():
        return CoarseBox(0, 0, w - 1, h - 1)
    rows = np.where(pos.any(axis=1))[0]
    cols = np.where(pos.any(axis=0))[0]
    return CoarseBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def crop_resize(arr: np.ndarray, box: CoarseBox, out_hw: tuple[int, int]) -> np.ndarray:
    """Crop an (H,W) or (H,W,C) array to the box and bilinearly resize."""
    if arr.ndim == 2:
        crop = arr[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1]
        return resize_bilinear(crop, out_hw)
    crop = arr[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1, :]
    chans = [resize_bilinear(crop[:, :, c], out_hw) for c in range(crop.shape[2])]
    return np.stack(chans, axis=2)


def paste_back(fine_map: np.ndarray, box: CoarseBox, frame_hw: tuple[int, int]) -> np.ndarray:
    """Map the fine patch back into full-frame coordinates, zero outside the
    box, nearest coordinate sampling inside."""
    full = np.zeros(frame_hw)
    fh, fw = fine_map.shape
    bh, bw = box.height, box.width
    ys = np.zeros(bh, dtype=int) if bh == 1 else np.rint(
        np.arange(bh) * (fh - 1) / (bh - 1)).astype(int)
    xs = np.zeros(bw, dtype=int) if bw == 1 else np.rint(
        np.arange(bw) * (fw - 1) / (bw - 1)).astype(int)
    full[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = fine_map[np.ix_(ys, xs)]
    return full


def multistage(coarse_cams: list, fine_cams_fn, frame_hw: tuple[int, int],
               method: str = "SCAM", granularity_cams: list | None = None,
               lam: float = LAMBDA) -> tuple[PseudoFixation, PseudoFixation, CoarseBox]:
    """Two-stage coarse-to-fine selective fusion.

    Stage 1 fuses the frame-resolution coarse CAMs (plus granularity CAMs for
    SCAM+), derives the coarse box, and hands it to fine_cams_fn, which must
    return the fine-stage CAMs computed on the cropped patch.  The fine fusion
    is pasted back into full-frame coordinates, zero outside the box.
    """
    if granularity_cams is not None:
        coarse = scam_plus_fuse(coarse_cams, granularity_cams, lam)
    else:
        coarse = scam_fuse(coarse_cams, lam)
    coarse = PseudoFixation(map=coarse.map, stage="coarse", method=method)
    box = coarse_box(coarse)
    fine_cams = fine_cams_fn(box)
    if granularity_cams is not None:
        cropped = [
            CamMap(map=zscale(crop_resize(g.map, box, fine_cams[0].map.shape)),
                   source=g.source, confidence=g.confidence)
            for g in granularity_cams
        ]
        fine_patch = scam_plus_fuse(fine_cams, cropped, lam)
    else:
        fine_patch = scam_fuse(fine_cams, lam)
    full = paste_back(fine_patch.map, box, frame_hw)
    fine = PseudoFixation(map=full, stage="fine", method=method)
    return coarse, fine, box


# ---------------------------------------------------------------------------
# multi-granularity sampling


def _fragment_center(corpus: Corpus, seq_id: str, center: int) -> VideoFragment:
    n = corpus.sequences[seq_id].n_frames
    return corpus.fragment(seq_id, int(np.clip(center, 0, n - 1)))


def sample_short(target: VideoFragment, corpus: Corpus,
                 rng: np.random.Generator | None = None) -> GranularitySample:
    """The two 3-frame groups adjacent to the target triplet."""
    t = target.frame_index
    frags = [
        _fragment_center(corpus, target.sequence_id, t - 2),
        _fragment_center(corpus, target.sequence_id, t + 2),
    ]
    return GranularitySample(kind="short", fragments=frags)


def sample_long(target: VideoFragment, corpus: Corpus,
                rng: np.random.Generator) -> GranularitySample:
    """Two random fragments outside the target's 8-frame neighborhood; falls
    back to the farthest available frames in short sequences."""
    t = target.frame_index
    n = corpus.sequences[target.sequence_id].n_frames
    candidates = [c for c in range(n) if abs(c - t) > 4]
    if len(candidates) >= 2:
        picked = sorted(int(i) for i in rng.choice(candidates, size=2, replace=False))
    else:
        by_distance = sorted(range(n), key=lambda c: (-abs(c - t), c))
        picked = sorted(by_distance[:2])
    frags = [_fragment_center(corpus, target.sequence_id, c) for c in picked]
    return GranularitySample(kind="long", fragments=frags)


def sample_cross(target: VideoFragment, corpus: Corpus,
                 rng: np.random.Generator) -> GranularitySample:
    """Two random fragments from other sequences sharing the target's tag."""
    peers = corpus.same_tag_sequences(target.tag, exclude=target.sequence_id)
    if not peers:
        raise SamplingError(
            f"no other sequence carries tag {target.tag}; cross-term sampling impossible"
        )
    frags = []
    for _ in range(2):
        sid = peers[int(rng.integers(0, len(peers)))]
        n = corpus.sequences[sid].n_frames
        frags.append(corpus.fragment(sid, int(rng.integers(0, n))))
    return GranularitySample(kind="cross", fragments=frags)


def granularity_rng(seed: int, kind: str, seq_id: str, frame: int) -> np.random.Generator:
    """Deterministic per-(kind, frame) sampling stream."""
    kind_code = {"short": 0, "long": 1, "cross": 2}[kind]
    return np.random.default_rng([seed, 7, kind_code, int(seq_id[3:]), frame])
