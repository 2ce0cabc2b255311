"""Deterministic synthetic visual-audio corpus with known ground truth.

Each sequence plants one class-discriminative glyph (class-unique shape,
color, and texture frequency) drifting over a noisy background among
class-agnostic gray distractors.  Spectrograms carry a class-specific band
pattern when the sequence is audio-relevant, else uniform noise.  Fixation
ground truth is an isotropic Gaussian density on the glyph center plus 20
sampled fixation points.

On-disk layout:
    <root>/corpus/<class>/<seq>/frame_%04d.ppm   P6 pixmap
    <root>/corpus/<class>/<seq>/audio_%04d.f64   F x T raw LE
    <root>/manifest.txt                          key = value lines
    <root>/gt/<seq>/%04d.{pgm,f64,pts}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgmio import read_f64, read_ppm, write_f64, write_map_pair, write_points, write_ppm
from .serial import atomic_write_text

GLYPH_SIZE = 16
DISTRACTOR_SIZE = 10
SPECT_F = 32
SPECT_T = 32
GT_SIGMA = 4.0
N_FIXATIONS = 20


@dataclass
class VideoFragment:
    """3 frames + 1 spectrogram + class tag: the atomic pipeline input."""

    frames: np.ndarray  # (3, H, W, 3) in [0,1]
    spectrogram: np.ndarray  # (F, T) nonnegative
    tag: int
    sequence_id: str
    frame_index: int
    audio_relevant: bool = False

    def __post_init__(self):
        if self.frames.shape[0] != 3:
            raise ValueError(f"fragment needs exactly 3 frames, got {self.frames.shape[0]}")
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be (3,H,W,3), got {self.frames.shape}")
        if np.any(self.spectrogram < 0):
            raise ValueError("spectrogram entries must be nonnegative")


@dataclass
class SequenceInfo:
    seq_id: str
    class_id: int
    split: str  # "train" | "held"
    audio_relevant: bool
    n_frames: int
    boxes: list = field(default_factory=list)  # per-frame (x0,y0,x1,y1) inclusive


@dataclass
class CorpusManifest:
    seed: int
    classes: int
    seqs_per_class: int
    frames_per_seq: int
    frame_hw: int
    spect_f: int = SPECT_F
    spect_t: int = SPECT_T
    gt_sigma: float = GT_SIGMA
    sequences: dict = field(default_factory=dict)  # seq_id -> SequenceInfo


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _shape_mask(kind: int, size: int) -> np.ndarray:
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(ax, ax, indexing="ij")
    r = np.sqrt(u * u + v * v)
    kind = kind % 6
    if kind == 0:
        return r <= 0.95
    if kind == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if kind == 2:
        return (v >= -0.85) & (np.abs(u) <= (0.95 - v) / 2.0)
    if kind == 3:
        return (np.abs(u) <= 0.35) | (np.abs(v) <= 0.35)
    if kind == 4:
        return (r <= 0.95) & (r >= 0.45)
    return np.abs(u) + np.abs(v) <= 1.0


def class_color(class_id: int, classes: int) -> np.ndarray:
    return _hsv_to_rgb(class_id / max(classes, 1), 0.9, 1.0)


def glyph_patch(class_id: int, classes: int, size: int = GLYPH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Return (mask, rgb texture patch) for a class glyph."""
    mask = _shape_mask(class_id, size)
    ax = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(ax, ax, indexing="ij")
    freq = 1.0 + 0.5 * class_id
    tex = 0.8 + 0.2 * np.sin(2.0 * np.pi * freq * (u + v))
    color = class_color(class_id, classes)
    patch = tex[:, :, None] * color[None, None, :]
    return mask, patch


def _distractor_patch(kind: int, size: int = DISTRACTOR_SIZE) -> tuple[np.ndarray, np.ndarray]:
    mask = _shape_mask(kind % 2, size)  # disk or square, shared by every class
    ax = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(ax, ax, indexing="ij")
    tex = 0.8 + 0.2 * np.sin(2.0 * np.pi * 3.0 * (u + v))
    patch = (0.55 * tex)[:, :, None] * np.ones(3)[None, None, :]
    return mask, patch


class _Track:
    """Integer center track with per-frame drift <= 2 px and wall bounce."""

    def __init__(self, rng: np.random.Generator, hw: int, half: int):
        lo, hi = half, hw - half - 1
        self.lo, self.hi = lo, hi
        self.cx = int(rng.integers(lo, hi + 1))
        self.cy = int(rng.integers(lo, hi + 1))
        while True:
            self.vx = int(rng.integers(-2, 3))
            self.vy = int(rng.integers(-2, 3))
            if self.vx or self.vy:
                break

    def step(self) -> tuple[int, int]:
        pos = (self.cx, self.cy)
        nx, ny = self.cx + self.vx, self.cy + self.vy
        if not self.lo <= nx <= self.hi:
            self.vx = -self.vx
            nx = self.cx + self.vx
        if not self.lo <= ny <= self.hi:
            self.vy = -self.vy
            ny = self.cy + self.vy
        self.cx, self.cy = int(np.clip(nx, self.lo, self.hi)), int(np.clip(ny, self.lo, self.hi))
        return pos


def _stamp(frame: np.ndarray, cx: int, cy: int, mask: np.ndarray, patch: np.ndarray) -> None:
    size = mask.shape[0]
    half = size // 2
    y0, x0 = cy - half, cx - half
    region = frame[y0 : y0 + size, x0 : x0 + size]
    region[mask] = patch[mask]


def _band_row(class_id: int, classes: int) -> int:
    if classes <= 1:
        return SPECT_F // 2
    return int(round(4 + class_id * (SPECT_F - 9) / (classes - 1)))


def make_spectrogram(class_id: int, classes: int, relevant: bool, rng: np.random.Generator) -> np.ndarray:
    if not relevant:
        return 0.3 * rng.random((SPECT_F, SPECT_T))
    row = _band_row(class_id, classes)
    rows = np.arange(SPECT_F)
    profile = np.exp(-((rows - row) ** 2) / (2.0 * 1.5**2))
    t = np.arange(SPECT_T)
    mod = 0.6 + 0.4 * np.sin(2.0 * np.pi * (0.5 + 0.35 * class_id) * t / SPECT_T + rng.random() * 2 * np.pi)
    spect = 1.2 * np.outer(profile, mod) + 0.05 * np.abs(rng.standard_normal((SPECT_F, SPECT_T)))
    return spect


def band_energies(spect: np.ndarray, classes: int) -> np.ndarray:
    """Mean energy in each class band; the generation-time separability oracle."""
    out = np.zeros(classes)
    for cid in range(classes):
        row = _band_row(cid, classes)
        lo, hi = max(0, row - 2), min(SPECT_F, row + 3)
        out[cid] = spect[lo:hi].mean()
    return out


def _render_sequence(seq: SequenceInfo, manifest: CorpusManifest, root: Path) -> None:
    hw = manifest.frame_hw
    seed = manifest.seed
    sidx = int(seq.seq_id[3:])
    rng = np.random.default_rng([seed, 1, sidx])
    gmask, gpatch = glyph_patch(seq.class_id, manifest.classes)
    glyph_track = _Track(rng, hw, GLYPH_SIZE // 2)
    distractors = []
    for d in range(2):
        dm, dp = _distractor_patch(d)
        distractors.append((dm, dp, _Track(rng, hw, DISTRACTOR_SIZE // 2)))
    # flat background: sequence identity must not leak through luminance,
    # and the glyph has to stay the dominant class-varying signal
    ax = np.arange(hw) / hw
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    base = 0.25 + 0.03 * (xx + yy) / 2.0

    seq_dir = root / "corpus" / str(seq.class_id) / seq.seq_id
    os.makedirs(seq_dir, exist_ok=True)
    half = GLYPH_SIZE // 2
    for t in range(seq.n_frames):
        frng = np.random.default_rng([seed, 2, sidx, t])
        frame = np.broadcast_to(base[:, :, None], (hw, hw, 3)).copy()
        frame += 0.02 * frng.standard_normal((hw, hw, 3))
        for dm, dp, track in distractors:
            dcx, dcy = track.step()
            _stamp(frame, dcx, dcy, dm, dp)
        cx, cy = glyph_track.step()
        _stamp(frame, cx, cy, gmask, gpatch)
        frame = np.clip(frame, 0.0, 1.0)
        box = (cx - half, cy - half, cx + half - 1, cy + half - 1)
        seq.boxes.append(box)
        write_ppm(seq_dir / f"frame_{t:04d}.ppm", frame)
        arng = np.random.default_rng([seed, 3, sidx, t])
        spect = make_spectrogram(seq.class_id, manifest.classes, seq.audio_relevant, arng)
        write_f64(seq_dir / f"audio_{t:04d}.f64", spect)
        _write_ground_truth(root, seq, manifest, t, cx, cy)


def _write_ground_truth(root: Path, seq: SequenceInfo, manifest: CorpusManifest, t: int, cx: int, cy: int) -> None:
    hw = manifest.frame_hw
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    cf = np.exp(-d2 / (2.0 * manifest.gt_sigma**2))
    cf = cf / cf.max()
    sidx = int(seq.seq_id[3:])
    rng = np.random.default_rng([manifest.seed, 4, sidx, t])
    prob = (cf / cf.sum()).reshape(-1)
    chosen: list[int] = []
    seen = set()
    while len(chosen) < N_FIXATIONS:
        draw = rng.choice(hw * hw, size=N_FIXATIONS, p=prob)
        for idx in draw:
            if idx not in seen:
                seen.add(int(idx))
                chosen.append(int(idx))
                if len(chosen) == N_FIXATIONS:
                    break
    points = [(idx // hw, idx % hw) for idx in chosen]
    gt_dir = root / "gt" / seq.seq_id
    os.makedirs(gt_dir, exist_ok=True)
    write_map_pair(gt_dir / f"{t:04d}", cf)
    write_points(gt_dir / f"{t:04d}.pts", points)


def generate_corpus(root, seed: int = 7, classes: int = 6, seqs_per_class: int = 10,
                    frames: int = 30, hw: int = 64) -> "Corpus":
    """Generate the corpus under root; pure function of its arguments."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if frames < 12:
        raise ValueError("need at least 12 frames per sequence for granularity sampling")
    if hw % 8 != 0 or hw < 32:
        raise ValueError("frame size must be a multiple of 8 and >= 32")
    root = Path(root)
    manifest = CorpusManifest(seed=seed, classes=classes, seqs_per_class=seqs_per_class,
                              frames_per_seq=frames, frame_hw=hw)
    n_train = max(1, int(round(seqs_per_class * 0.7)))
    sidx = 0
    for cid in range(classes):
        crng = np.random.default_rng([seed, 5, cid])
        order = crng.permutation(seqs_per_class)
        relevant = crng.random(seqs_per_class) < 0.5
        # guarantee both relevance values appear so the switch has signal
        if seqs_per_class >= 2:
            relevant[0], relevant[1] = True, False
        for j in range(seqs_per_class):
            split = "train" if order[j] < n_train else "held"
            seq = SequenceInfo(seq_id=f"seq{sidx:03d}", class_id=cid, split=split,
                               audio_relevant=bool(relevant[j]), n_frames=frames)
            manifest.sequences[seq.seq_id] = seq
            sidx += 1
    for seq in manifest.sequences.values():
        _render_sequence(seq, manifest, root)
    _write_manifest(root, manifest)
    return Corpus(root)


def _write_manifest(root: Path, m: CorpusManifest) -> None:
    lines = [
        "# synthetic corpus manifest",
        f"seed = {m.seed}",
        f"classes = {m.classes}",
        f"seqs_per_class = {m.seqs_per_class}",
        f"frames_per_seq = {m.frames_per_seq}",
        f"frame_hw = {m.frame_hw}",
        f"spect_f = {m.spect_f}",
        f"spect_t = {m.spect_t}",
        f"gt_sigma = {m.gt_sigma}",
    ]
    for seq in m.sequences.values():
        lines.append(f"seq.{seq.seq_id}.class = {seq.class_id}")
        lines.append(f"seq.{seq.seq_id}.split = {seq.split}")
        lines.append(f"seq.{seq.seq_id}.audio = {int(seq.audio_relevant)}")
        for t, box in enumerate(seq.boxes):
            lines.append(f"box.{seq.seq_id}.{t:04d} = {box[0]},{box[1]},{box[2]},{box[3]}")
    atomic_write_text(root / "manifest.txt", "\n".join(lines) + "\n")


class Corpus:
    """Read access to a generated corpus; frames cached as uint8."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = self._read_manifest()
        self._frame_cache: dict = {}
        self._spect_cache: dict = {}

    def _read_manifest(self) -> CorpusManifest:
        path = self.root / "manifest.txt"
        if not path.exists():
            raise FileNotFoundError(f"no corpus manifest at {path}")
        kv: dict[str, str] = {}
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        m = CorpusManifest(
            seed=int(kv["seed"]), classes=int(kv["classes"]),
            seqs_per_class=int(kv["seqs_per_class"]), frames_per_seq=int(kv["frames_per_seq"]),
            frame_hw=int(kv["frame_hw"]), spect_f=int(kv["spect_f"]), spect_t=int(kv["spect_t"]),
            gt_sigma=float(kv["gt_sigma"]),
        )
        seq_ids = sorted({k.split(".")[1] for k in kv if k.startswith("seq.")})
        for sid in seq_ids:
            seq = SequenceInfo(
                seq_id=sid, class_id=int(kv[f"seq.{sid}.class"]), split=kv[f"seq.{sid}.split"],
                audio_relevant=bool(int(kv[f"seq.{sid}.audio"])), n_frames=m.frames_per_seq,
            )
            for t in range(m.frames_per_seq):
                x0, y0, x1, y1 = (int(v) for v in kv[f"box.{sid}.{t:04d}"].split(","))
                seq.boxes.append((x0, y0, x1, y1))
            m.sequences[sid] = seq
        return m

    @property
    def sequences(self) -> dict:
        return self.manifest.sequences

    def _seq_dir(self, seq_id: str) -> Path:
        seq = self.manifest.sequences[seq_id]
        return self.root / "corpus" / str(seq.class_id) / seq_id

    def frame(self, seq_id: str, t: int) -> np.ndarray:
        key = (seq_id, t)
        u8 = self._frame_cache.get(key)
        if u8 is None:
            arr = read_ppm(self._seq_dir(seq_id) / f"frame_{t:04d}.ppm")
            u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
            self._frame_cache[key] = u8
        return u8.astype(np.float64) / 255.0

    def spectrogram(self, seq_id: str, t: int) -> np.ndarray:
        key = (seq_id, t)
        sp = self._spect_cache.get(key)
        if sp is None:
            m = self.manifest
            sp = read_f64(self._seq_dir(seq_id) / f"audio_{t:04d}.f64", (m.spect_f, m.spect_t))
            self._spect_cache[key] = sp
        return sp

    def fragment(self, seq_id: str, t: int) -> VideoFragment:
        """Fragment centered on frame t; edge frames replicate."""
        seq = self.manifest.sequences[seq_id]
        n = seq.n_frames
        idx = [max(t - 1, 0), t, min(t + 1, n - 1)]
        frames = np.stack([self.frame(seq_id, i) for i in idx])
        return VideoFragment(
            frames=frames, spectrogram=self.spectrogram(seq_id, t), tag=seq.class_id,
            sequence_id=seq_id, frame_index=t, audio_relevant=seq.audio_relevant,
        )

    def ground_truth(self, seq_id: str, t: int) -> tuple[np.ndarray, list]:
        from .pgmio import read_points

        hw = self.manifest.frame_hw
        stem = self.root / "gt" / seq_id / f"{t:04d}"
        cf = read_f64(str(stem) + ".f64", (hw, hw))
        points = read_points(str(stem) + ".pts")
        return cf, points

    def glyph_box(self, seq_id: str, t: int) -> tuple[int, int, int, int]:
        return self.manifest.sequences[seq_id].boxes[t]

    def items(self, split: str | None = None, frame_stride: int = 1) -> list[tuple[str, int]]:
        out = []
        for sid in sorted(self.manifest.sequences):
            seq = self.manifest.sequences[sid]
            if split is not None and seq.split != split:
                continue
            for t in range(0, seq.n_frames, frame_stride):
                out.append((sid, t))
        return out

    def same_tag_sequences(self, tag: int, exclude: str) -> list[str]:
        return [sid for sid, s in sorted(self.manifest.sequences.items())
                if s.class_id == tag and sid != exclude]


def mass_in_region(saliency: np.ndarray, box: tuple[int, int, int, int]) -> float:
    """Fraction of map mass inside an inclusive (x0,y0,x1,y1) box."""
    x0, y0, x1, y1 = box
    total = float(saliency.sum())
    if total <= 0.0:
        return 0.0
    inside = float(saliency[y0 : y1 + 1, x0 : x1 + 1].sum())
    return inside / total
