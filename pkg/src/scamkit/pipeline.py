"""Pipeline orchestration: staged training, pseudofixation generation,
distillation, prediction, and evaluation over the synthetic corpus.

Every command is deterministic given (config, seed): shuffles, samplers, and
weight init all derive from named rng streams, artifacts are written
atomically, and reruns produce byte-identical outputs.
"""

from __future__ import annotations

import copy
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import camscam, metrics as metrics_mod
from .camscam import (
    CamMap,
    GranularitySample,
    average_cam,
    cam,
    coarse_box,
    crop_resize,
    granularity_rng,
    multistage,
    sample_cross,
    sample_long,
    sample_short,
    scam_fuse,
    soft_filter,
    zscale,
)
from .config import RunConfig
from .fixation import STANet, STAPlusNet, bce_loss, fuse_agg, fuse_final, kl_loss
from .nets import (
    AudioSwitchNet,
    PlusNet,
    SANet,
    SNet,
    STNet,
    load_net,
    msm_loss,
    one_hot,
    save_net,
)
from .pgmio import read_f64, write_map_pair
from .serial import atomic_write_text
from .synthdata import Corpus, generate_corpus, mass_in_region
from .tensor import Tape, Tensor, resize_bilinear, sgd_step


class DependencyError(RuntimeError):
    """A required upstream artifact is missing (exit code 3)."""


# plain-SGD conditioning at desk scale: heavy-ball momentum plus a faster
# classifier head (the GAP bottleneck dilutes the head's gradient signal)
MOMENTUM = 0.9
HEAD_LR_MULT = 20.0


class MomentumSGD:
    """Heavy-ball SGD over named lr groups; updates go through sgd_step."""

    def __init__(self, groups):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.vel = {id(p): np.zeros_like(p.data)
                    for params, _ in self.groups for p in params}

    def step(self) -> None:
        for params, lr in self.groups:
            for p in params:
                v = self.vel[id(p)]
                v *= MOMENTUM
                v += p.grad
                p.grad = v.copy()
            sgd_step(params, lr)


def _split_head(net):
    """(backbone params, classifier-head params) by name prefix."""
    backbone, head = [], []
    for name, p in net.params():
        (head if name.startswith("cls.") else backbone).append(p)
    return backbone, head


_NET_CODES = {
    "s-coarse": 1, "sa-coarse": 2, "st-coarse": 3,
    "s-fine": 4, "sa-fine": 5, "st-fine": 6,
    "splus": 7, "saplus": 8, "stplus": 9,
    "switch": 10, "sta": 11, "staplus-short": 12, "staplus-long": 13,
}

PLUS_KINDS = {"s+": ("short", "long", "cross"),
              "st+": ("short", "long", "cross"),
              "sa+": ("long", "cross")}

_SAMPLERS = {"short": sample_short, "long": sample_long, "cross": sample_cross}


class Paths:
    def __init__(self, cfg: RunConfig):
        self.out = Path(cfg.out_dir)
        self.data = self.out / "data"
        self.ckpt = self.out / "ckpt"
        self.pgt = self.out / "pgt"
        self.pred = self.out / "pred"
        self.report = self.out / "report"
        self.logs = self.out / "logs"
        self.cache = self.out / "cache"

    def checkpoint(self, name: str) -> Path:
        return self.ckpt / f"{name}.stan"


def _net_rng(cfg: RunConfig, name: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 10, _NET_CODES[name]])


def _epoch_rng(cfg: RunConfig, name: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 20, _NET_CODES[name], epoch])


def _load_corpus(paths: Paths) -> Corpus:
    try:
        return Corpus(paths.data)
    except FileNotFoundError:
        raise DependencyError(
            f"corpus manifest not found at {paths.data / 'manifest.txt'}; run gen-data first"
        )


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing dependency {path}; run `{producer}` first")
    return path


def _write_log(paths: Paths, name: str, cfg: RunConfig, lines: list[str]) -> None:
    body = [f"command = {name}", f"config_hash = {cfg.config_hash()}"] + lines
    atomic_write_text(paths.logs / f"{name}.log", "\n".join(body) + "\n")


def _parallel(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _chunks(seq, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


# ---------------------------------------------------------------------------
# net construction / loading


def _stage_hw(cfg: RunConfig, stage: str) -> int:
    return cfg.frame_hw if stage == "coarse" else cfg.fine_hw


def build_classifier(cfg: RunConfig, kind: str, stage: str):
    name = f"{kind}-{stage}"
    rng = _net_rng(cfg, name)
    grid = _stage_hw(cfg, stage) // 8
    if kind == "s":
        return SNet(rng, cfg.classes)
    if kind == "sa":
        return SANet(rng, cfg.classes, grid)
    if kind == "st":
        return STNet(rng, cfg.classes)
    raise ValueError(kind)


def build_plus(cfg: RunConfig, kind: str) -> PlusNet:
    name = {"s+": "splus", "sa+": "saplus", "st+": "stplus"}[kind]
    branch_channels = 32 if kind == "s+" else 64
    return PlusNet(_net_rng(cfg, name), branch_channels, cfg.classes,
                   steps=cfg.m, td=cfg.td, tr=cfg.tr)


def load_classifier(cfg: RunConfig, paths: Paths, kind: str, stage: str):
    net = build_classifier(cfg, kind, stage)
    path = _require(paths.checkpoint(f"{kind}-{stage}"),
                    f"train-cls --net {kind} --stage {stage}")
    load_net(net, path)
    return net


def load_plus(cfg: RunConfig, paths: Paths, kind: str) -> PlusNet:
    net = build_plus(cfg, kind)
    name = {"s+": "splus", "sa+": "saplus", "st+": "stplus"}[kind]
    path = _require(paths.checkpoint(name), f"train-cls --net {kind} --stage coarse")
    load_net(net, path)
    return net


def load_switch(cfg: RunConfig, paths: Paths) -> AudioSwitchNet:
    net = AudioSwitchNet(_net_rng(cfg, "switch"), cfg.frame_hw // 8)
    load_net(net, _require(paths.checkpoint("switch"), "train-switch"))
    return net


# ---------------------------------------------------------------------------
# cached inference products (gates, branch features)


def _ckpt_digest(paths: Paths, *names: str) -> str:
    h = hashlib.sha256()
    for name in names:
        p = paths.checkpoint(name)
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


class _DiskCache:
    """Per-frame f64 arrays of a fixed shape, invalidated by a header hash."""

    def __init__(self, paths: Paths, name: str, header: str, shape: tuple):
        self.blob = paths.cache / f"{name}.f64"
        self.meta = paths.cache / f"{name}.txt"
        self.header = header
        self.shape = tuple(shape)

    def load(self, keys: list) -> dict | None:
        if not self.blob.exists() or not self.meta.exists():
            return None
        lines = self.meta.read_text().splitlines()
        if not lines or lines[0] != self.header:
            return None
        stored = lines[1:]
        want = [f"{sid}:{t}" for sid, t in keys]
        if stored != want:
            return None
        count = len(keys)
        per = int(np.prod(self.shape))
        arr = read_f64(self.blob, (count, *self.shape)) if count else {}
        if count and arr.size != count * per:
            return None
        return {k: arr[i] for i, k in enumerate(keys)}

    def save(self, keys: list, table: dict) -> None:
        from .pgmio import write_f64

        stack = np.stack([table[k] for k in keys]) if keys else np.zeros((0, *self.shape))
        write_f64(self.blob, stack)
        lines = [self.header] + [f"{sid}:{t}" for sid, t in keys]
        atomic_write_text(self.meta, "\n".join(lines) + "\n")


def compute_gates(cfg: RunConfig, paths: Paths, corpus: Corpus) -> dict:
    """Trained-switch gate per frame, disk-cached."""
    keys = corpus.items()
    header = f"{cfg.config_hash()} {_ckpt_digest(paths, 'switch')}"
    cache = _DiskCache(paths, "gates", header, (1,))
    found = cache.load(keys)
    if found is not None:
        return {k: float(v[0]) for k, v in found.items()}
    net = load_switch(cfg, paths)

    def gate_of(key):
        sid, t = key
        frag = corpus.fragment(sid, t)
        return net.gate(frag.frames[1], frag.spectrogram)

    values = _parallel(gate_of, keys, cfg.threads)
    table = {k: np.array([v]) for k, v in zip(keys, values)}
    cache.save(keys, table)
    return {k: float(v) for k, v in zip(keys, values)}


def compute_branch_features(cfg: RunConfig, paths: Paths, corpus: Corpus,
                            kind: str, gates: dict | None = None) -> dict:
    """Frozen coarse branch features for every frame, disk-cached.

    kind s -> (32,g,g); sa/st -> (64,g,g).  SA features use the trained
    switch gates.
    """
    grid = cfg.frame_hw // 8
    shape = (32, grid, grid) if kind == "s" else (64, grid, grid)
    dig = _ckpt_digest(paths, f"{kind}-coarse", "switch" if kind == "sa" else "")
    header = f"{cfg.config_hash()} {kind} {dig}"
    cache = _DiskCache(paths, f"feat_{kind}", header, shape)
    keys = corpus.items()
    found = cache.load(keys)
    if found is not None:
        return found
    net = load_classifier(cfg, paths, kind, "coarse")
    if kind == "sa" and gates is None:
        gates = compute_gates(cfg, paths, corpus)
    table = {}
    for chunk in _chunks(keys, 16):
        frags = [corpus.fragment(sid, t) for sid, t in chunk]
        if kind == "s":
            frames = np.stack([f.frames[1] for f in frags])
            feats = net.branch(frames)
        elif kind == "st":
            frames = np.stack([f.frames for f in frags])
            feats = net.branch(frames)
        else:
            frames = np.stack([f.frames[1] for f in frags])
            spects = np.stack([f.spectrogram for f in frags])
            gvec = np.array([gates[k] for k in chunk])
            feats = net.branch(frames, spects, gvec)
        for key, arr in zip(chunk, feats.data):
            table[key] = arr.copy()
    cache.save(keys, table)
    return table


def compute_sta_features(cfg: RunConfig, paths: Paths, corpus: Corpus,
                         gates: dict) -> dict:
    """Frozen STA-branch features per frame: stacked (sta, s_feat)."""
    grid = cfg.frame_hw // 8
    header = f"{cfg.config_hash()} sta {_ckpt_digest(paths, 'sta', 'switch')}"
    cache = _DiskCache(paths, "feat_sta", header, (64, grid, grid))
    keys = corpus.items()
    found = cache.load(keys)
    if found is not None:
        return found
    net = STANet(_net_rng(cfg, "sta"), grid)
    load_net(net, _require(paths.checkpoint("sta"), "train-fp --net sta"))
    table = {}
    for chunk in _chunks(keys, 16):
        frags = [corpus.fragment(sid, t) for sid, t in chunk]
        frames = np.stack([f.frames for f in frags])
        spects = np.stack([f.spectrogram for f in frags])
        gvec = np.array([gates[k] for k in chunk])
        sta, feat = net.branch(frames, spects, gvec)
        for i, key in enumerate(chunk):
            table[key] = np.concatenate([sta.data[i], feat.s.data[i]], axis=0)
    cache.save(keys, table)
    return table


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    corpus = generate_corpus(paths.data, seed=cfg.seed, classes=cfg.classes,
                             seqs_per_class=cfg.seqs_per_class,
                             frames=cfg.frames_per_seq, hw=cfg.frame_hw)
    n_train = len(corpus.items("train"))
    n_held = len(corpus.items("held"))
    _write_log(paths, "gen-data", cfg, [
        f"sequences = {len(corpus.sequences)}",
        f"frames_train = {n_train}",
        f"frames_held = {n_held}",
    ])
    return {"sequences": len(corpus.sequences), "train": n_train, "held": n_held}


def _oracle_gate(frag) -> float:
    return 1.0 if frag.audio_relevant else 0.0


def _cls_forward(net, kind: str, frags, stage_hw: int, cfg: RunConfig,
                 boxes: dict | None):
    """Batched classification forward; fine stage crops via coarse boxes."""

    def prep_frame(frame, key):
        if boxes is None:
            return frame
        return crop_resize(frame, boxes[key], (stage_hw, stage_hw))

    keys = [(f.sequence_id, f.frame_index) for f in frags]
    if kind == "s":
        frames = np.stack([prep_frame(f.frames[1], k) for f, k in zip(frags, keys)])
        return net.head(net.branch(frames))
    if kind == "st":
        frames = np.stack([
            np.stack([prep_frame(fr, k) for fr in f.frames])
            for f, k in zip(frags, keys)
        ])
        return net.head(net.branch(frames))
    frames = np.stack([prep_frame(f.frames[1], k) for f, k in zip(frags, keys)])
    spects = np.stack([f.spectrogram for f in frags])
    gates = np.array([_oracle_gate(f) for f in frags])
    return net.head(net.branch(frames, spects, gates))


def _train_accuracy(net, kind: str, corpus: Corpus, items, stage_hw, cfg, boxes) -> float:
    correct = 0
    for chunk in _chunks(items, 16):
        frags = [corpus.fragment(sid, t) for sid, t in chunk]
        out = _cls_forward(net, kind, frags, stage_hw, cfg, boxes)
        pred = np.argmax(out.confidences.data, axis=1)
        tags = np.array([f.tag for f in frags])
        correct += int(np.sum(pred == tags))
    return correct / max(len(items), 1)


def coarse_boxes(cfg: RunConfig, paths: Paths, corpus: Corpus) -> dict:
    """Stage-1 SCAM boxes for every frame (used to train the fine nets)."""
    gates = compute_gates(cfg, paths, corpus)
    feats = {k: compute_branch_features(cfg, paths, corpus, k, gates)
             for k in ("s", "sa", "st")}
    heads = {k: load_classifier(cfg, paths, k, "coarse").head for k in ("s", "sa", "st")}
    boxes = {}
    for key in corpus.items():
        sid, t = key
        tag = corpus.sequences[sid].class_id
        cams = _coarse_cams_from_feats(cfg, heads, feats, key, tag)
        fused = scam_fuse(cams, cfg.lam)
        boxes[key] = coarse_box(fused)
    return boxes


def _coarse_cams_from_feats(cfg: RunConfig, heads: dict, feats: dict, key, tag: int):
    hw = cfg.frame_hw
    out = []
    for kind, source in (("s", "S"), ("st", "ST"), ("sa", "SA")):
        res = heads[kind](Tensor(feats[kind][key]))
        conf = soft_filter(res.confidences.data, tag)
        grid_map = zscale(res.pre_gap.data[tag])
        out.append(CamMap(map=resize_bilinear(grid_map, (hw, hw)),
                          source=source, confidence=conf))
    return out


def cmd_train_cls(cfg: RunConfig, net_kind: str | None = None, stage: str | None = None) -> dict:
    from .config import ConfigError

    kind = net_kind or cfg.net
    stage = stage or cfg.stage
    if kind in ("s+", "sa+", "st+"):
        if stage != "coarse":
            raise ConfigError(
                "multi-granularity nets run at the coarse stage only; "
                "their fine-stage fusion reuses box-cropped coarse maps"
            )
        return _train_plus(cfg, kind)
    if kind not in ("s", "sa", "st"):
        raise ConfigError(f"train-cls needs --net s|sa|st|s+|sa+|st+, got {kind!r}")
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    name = f"{kind}-{stage}"
    stage_hw = _stage_hw(cfg, stage)
    boxes = None
    if stage == "fine":
        boxes = coarse_boxes(cfg, paths, corpus)
    net = build_classifier(cfg, kind, stage)
    items = corpus.items("train", frame_stride=cfg.cls_stride)
    backbone, head = _split_head(net)
    opt = MomentumSGD([(backbone, cfg.lr_cls), (head, cfg.lr_cls * HEAD_LR_MULT)])
    batch = cfg.batch_coarse if stage == "coarse" else cfg.batch_fine
    log_lines = []
    for epoch in range(cfg.epochs_cls):
        order = _epoch_rng(cfg, name, epoch).permutation(len(items))
        epoch_losses = []
        for chunk_idx in _chunks(list(order), batch):
            frags = [corpus.fragment(*items[i]) for i in chunk_idx]
            tags = np.stack([one_hot(f.tag, cfg.classes) for f in frags])
            with Tape() as tape:
                out = _cls_forward(net, kind, frags, stage_hw, cfg, boxes)
                loss = msm_loss(out.logits, tags)
                tape.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        log_lines.append(f"epoch.{epoch}.loss = {float(np.mean(epoch_losses))!r}")
    acc = _train_accuracy(net, kind, corpus, items, stage_hw, cfg, boxes)
    log_lines.append(f"train_accuracy = {acc!r}")
    save_net(net, paths.checkpoint(name), net_id=name, epoch=cfg.epochs_cls,
             seed=cfg.seed, config_hash=cfg.config_hash(),
             extra={"train_accuracy": acc})
    _write_log(paths, f"train-cls-{kind}-{stage}", cfg, log_lines)
    return {"net": name, "train_accuracy": acc}


def _plus_nodes(cfg: RunConfig, corpus: Corpus, feats: dict, kind: str,
                key, gkind: str):
    """Node feature arrays (target, [mg1, mg2]) for one granularity draw."""
    sid, t = key
    frag = corpus.fragment(sid, t)
    rng = granularity_rng(cfg.seed, gkind, sid, t)
    sample: GranularitySample = _SAMPLERS[gkind](frag, corpus, rng)
    src = {"s+": "s", "sa+": "sa", "st+": "st"}[kind]
    target = feats[src][key]
    mgs = [feats[src][(f.sequence_id, f.frame_index)] for f in sample.fragments]
    return target, mgs


def _train_plus(cfg: RunConfig, kind: str) -> dict:
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    name = {"s+": "splus", "sa+": "saplus", "st+": "stplus"}[kind]
    src = {"s+": "s", "sa+": "sa", "st+": "st"}[kind]
    gates = compute_gates(cfg, paths, corpus)
    feats = {src: compute_branch_features(cfg, paths, corpus, src, gates)}
    net = build_plus(cfg, kind)
    backbone, head = _split_head(net)
    opt = MomentumSGD([(backbone, cfg.lr_plus), (head, cfg.lr_plus * HEAD_LR_MULT)])
    items = corpus.items("train", frame_stride=cfg.cls_stride)
    kinds = PLUS_KINDS[kind]
    log_lines = []
    for epoch in range(cfg.epochs_plus):
        order = _epoch_rng(cfg, name, epoch).permutation(len(items))
        epoch_losses = []
        for chunk_idx in _chunks(list(order), cfg.batch_plus):
            with Tape() as tape:
                total = None
                for j in chunk_idx:
                    key = items[j]
                    gkind = kinds[j % len(kinds)]
                    target, mgs = _plus_nodes(cfg, corpus, feats, kind, key, gkind)
                    out, _ = net.forward(Tensor(target), [Tensor(m) for m in mgs],
                                         frl=cfg.frl_on)
                    tag = corpus.sequences[key[0]].class_id
                    loss = msm_loss(out.logits, one_hot(tag, cfg.classes))
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(chunk_idx))
                tape.backward(total)
            opt.step()
            epoch_losses.append(total.item())
        log_lines.append(f"epoch.{epoch}.loss = {float(np.mean(epoch_losses))!r}")
    # end-of-training tag accuracy over the same items (round-robin kinds)
    correct = 0
    for j, key in enumerate(items):
        gkind = kinds[j % len(kinds)]
        target, mgs = _plus_nodes(cfg, corpus, feats, kind, key, gkind)
        out, _ = net.forward(Tensor(target), [Tensor(m) for m in mgs], frl=cfg.frl_on)
        correct += int(np.argmax(out.confidences.data) == corpus.sequences[key[0]].class_id)
    acc = correct / max(len(items), 1)
    log_lines.append(f"train_accuracy = {acc!r}")
    save_net(net, paths.checkpoint(name), net_id=name, epoch=cfg.epochs_plus,
             seed=cfg.seed, config_hash=cfg.config_hash(),
             extra={"train_accuracy": acc})
    _write_log(paths, f"train-cls-{kind}-coarse", cfg, log_lines)
    return {"net": name, "train_accuracy": acc}


def cmd_train_switch(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    net = AudioSwitchNet(_net_rng(cfg, "switch"), cfg.frame_hw // 8)
    backbone, head = _split_head(net)
    opt = MomentumSGD([(backbone, cfg.lr_switch), (head, cfg.lr_switch * HEAD_LR_MULT)])
    items = corpus.items("train", frame_stride=cfg.cls_stride)
    log_lines = []
    for epoch in range(cfg.epochs_switch):
        order = _epoch_rng(cfg, "switch", epoch).permutation(len(items))
        epoch_losses = []
        for chunk_idx in _chunks(list(order), cfg.batch_coarse):
            frags = [corpus.fragment(*items[i]) for i in chunk_idx]
            frames = np.stack([f.frames[1] for f in frags])
            spects = np.stack([f.spectrogram for f in frags])
            flags = np.array([[_oracle_gate(f)] for f in frags])
            with Tape() as tape:
                s = net.enc(Tensor(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))).s
                amap = net.aproj(net.aenc(Tensor(spects)))
                from .nets import sa_fuse

                out = net.head(sa_fuse(s, amap))
                loss = msm_loss(out.logits, flags)
                tape.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        log_lines.append(f"epoch.{epoch}.loss = {float(np.mean(epoch_losses))!r}")

    def gate_accuracy(split: str) -> float:
        eval_items = corpus.items(split, frame_stride=5)
        good = 0
        for sid, t in eval_items:
            frag = corpus.fragment(sid, t)
            good += int(net.gate(frag.frames[1], frag.spectrogram) == _oracle_gate(frag))
        return good / max(len(eval_items), 1)

    train_acc = gate_accuracy("train")
    held_acc = gate_accuracy("held")
    log_lines += [f"train_gate_accuracy = {train_acc!r}",
                  f"held_gate_accuracy = {held_acc!r}"]
    save_net(net, paths.checkpoint("switch"), net_id="switch", epoch=cfg.epochs_switch,
             seed=cfg.seed, config_hash=cfg.config_hash(),
             extra={"train_gate_accuracy": train_acc, "held_gate_accuracy": held_acc})
    _write_log(paths, "train-switch", cfg, log_lines)
    return {"train_gate_accuracy": train_acc, "held_gate_accuracy": held_acc}


# ---------------------------------------------------------------------------
# pseudofixation generation


class PgtEngine:
    """Loaded nets + frozen-feature caches for pseudofixation computation."""

    def __init__(self, cfg: RunConfig, paths: Paths, corpus: Corpus,
                 need_fine: bool, need_plus: bool):
        self.cfg = cfg
        self.corpus = corpus
        self.hw = cfg.frame_hw
        self.gates = compute_gates(cfg, paths, corpus)
        self.feats = {k: compute_branch_features(cfg, paths, corpus, k, self.gates)
                      for k in ("s", "sa", "st")}
        self.heads = {k: load_classifier(cfg, paths, k, "coarse").head
                      for k in ("s", "sa", "st")}
        self.fine_nets = None
        if need_fine:
            self.fine_nets = {k: load_classifier(cfg, paths, k, "fine")
                              for k in ("s", "sa", "st")}
        self.plus_nets = None
        if need_plus:
            self.plus_nets = {k: load_plus(cfg, paths, k) for k in ("s+", "sa+", "st+")}

    def coarse_cams(self, key, tag: int):
        return _coarse_cams_from_feats(self.cfg, self.heads, self.feats, key, tag)

    def granularity_cams(self, key, tag: int, frl: bool):
        sid, t = key
        out = []
        for kind in ("s+", "st+", "sa+"):
            src = {"s+": "S", "sa+": "SA", "st+": "ST"}[kind]
            net = self.plus_nets[kind]
            for gkind in PLUS_KINDS[kind]:
                target, mgs = _plus_nodes(self.cfg, self.corpus, self.feats, kind,
                                          key, gkind)
                res, _ = net.forward(Tensor(target), [Tensor(m) for m in mgs], frl=frl)
                conf = soft_filter(res.confidences.data, tag)
                grid_map = zscale(res.pre_gap.data[tag])
                out.append(CamMap(map=resize_bilinear(grid_map, (self.hw, self.hw)),
                                  source=f"{src}+{gkind}", confidence=conf))
        return out

    def fine_cams_fn(self, key, tag: int):
        frag = self.corpus.fragment(*key)
        fine_hw = self.cfg.fine_hw

        def run(box) -> list:
            cams = []
            cropped = [crop_resize(fr, box, (fine_hw, fine_hw)) for fr in frag.frames]
            for kind, source in (("s", "S"), ("st", "ST"), ("sa", "SA")):
                net = self.fine_nets[kind]
                if kind == "s":
                    res = net.head(net.branch(cropped[1]))
                elif kind == "st":
                    res = net.head(net.branch(np.stack(cropped)))
                else:
                    res = net.head(net.branch(cropped[1], frag.spectrogram,
                                              self.gates[key]))
                conf = soft_filter(res.confidences.data, tag)
                grid_map = zscale(res.pre_gap.data[tag])
                cams.append(CamMap(map=resize_bilinear(grid_map, (fine_hw, fine_hw)),
                                   source=source, confidence=conf))
            return cams

        return run

    def pseudofixation(self, key, method: str, frl: bool | None = None):
        """Final pseudofixation map for one frame under the given method."""
        sid, t = key
        tag = self.corpus.sequences[sid].class_id
        use_frl = self.cfg.frl_on if frl is None else frl
        coarse = self.coarse_cams(key, tag)
        if method == "cam":
            return camscam.PseudoFixation(map=coarse[0].map, stage="coarse", method="CAM")
        if method == "ac":
            return average_cam(coarse)
        if method == "scam":
            _, fine, _ = multistage(coarse, self.fine_cams_fn(key, tag),
                                    (self.hw, self.hw), method="SCAM", lam=self.cfg.lam)
            return fine
        gran = self.granularity_cams(key, tag, use_frl)
        _, fine, _ = multistage(coarse, self.fine_cams_fn(key, tag),
                                (self.hw, self.hw), method="SCAM+",
                                granularity_cams=gran, lam=self.cfg.lam)
        return fine

    def stage_maps(self, key, method: str, frl: bool | None = None):
        """(coarse, fine) pseudofixations for the staged methods."""
        sid, t = key
        tag = self.corpus.sequences[sid].class_id
        use_frl = self.cfg.frl_on if frl is None else frl
        coarse = self.coarse_cams(key, tag)
        gran = None
        if method == "scam+":
            gran = self.granularity_cams(key, tag, use_frl)
        c, f, box = multistage(coarse, self.fine_cams_fn(key, tag), (self.hw, self.hw),
                               method="SCAM+" if gran is not None else "SCAM",
                               granularity_cams=gran, lam=self.cfg.lam)
        return c, f, box


def pgt_dir(paths: Paths, method: str) -> Path:
    return paths.pgt / method


def cmd_gen_pgt(cfg: RunConfig, method: str | None = None) -> dict:
    method = method or cfg.method
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    need_fine = method in ("scam", "scam+")
    need_plus = method == "scam+"
    engine = PgtEngine(cfg, paths, corpus, need_fine, need_plus)
    out_dir = pgt_dir(paths, method)
    keys = corpus.items()

    def emit(key):
        sid, t = key
        pf = engine.pseudofixation(key, method)
        write_map_pair(out_dir / f"{sid}_{t:04d}", pf.map)
        return float(pf.map.mean())

    means = _parallel(emit, keys, cfg.threads)
    _write_log(paths, f"gen-pgt-{method}", cfg, [
        f"frames = {len(keys)}",
        f"mean_map_mass = {float(np.mean(means))!r}",
    ])
    return {"frames": len(keys), "method": method}


def load_pgt(paths: Paths, method: str, sid: str, t: int, hw: int) -> np.ndarray:
    stem = pgt_dir(paths, method) / f"{sid}_{t:04d}"
    if not (stem.parent / (stem.name + ".f64")).exists():
        raise DependencyError(
            f"missing pseudofixation {stem}.f64; run `gen-pgt --method {method}` first"
        )
    return read_f64(str(stem) + ".f64", (hw, hw))


# ---------------------------------------------------------------------------
# fixation-prediction training


def _init_sta_from_classifiers(cfg: RunConfig, paths: Paths, net: STANet) -> None:
    """Adopt the trained coarse classification encoders as the backbone init."""
    s_net = load_classifier(cfg, paths, "s", "coarse")
    st_net = load_classifier(cfg, paths, "st", "coarse")
    sa_net = load_classifier(cfg, paths, "sa", "coarse")
    for dst, src in ((net.branch.enc, s_net.enc), (net.branch.tenc, st_net.tenc),
                     (net.branch.aenc, sa_net.aenc), (net.branch.aproj, sa_net.aproj)):
        for (_, a), (_, b) in zip(dst.params("x"), src.params("x")):
            a.data = b.data.copy()


def _held_cc(cfg: RunConfig, corpus: Corpus, paths: Paths, predict_fn, method: str) -> float:
    items = corpus.items("held", frame_stride=5)
    vals = []
    for sid, t in items:
        pred = predict_fn(sid, t)
        pgt = load_pgt(paths, method, sid, t, cfg.frame_hw)
        try:
            vals.append(metrics_mod.cc(pred, pgt))
        except metrics_mod.MetricError:
            vals.append(0.0)
    return float(np.mean(vals)) if vals else 0.0


def cmd_train_fp(cfg: RunConfig, net_kind: str | None = None) -> dict:
    from .config import ConfigError

    kind = net_kind or cfg.net
    if kind == "sta":
        return _train_sta(cfg)
    if kind in ("sta+short", "sta+long"):
        return _train_sta_plus(cfg, kind.split("+")[1])
    raise ConfigError(f"train-fp needs --net sta|sta+short|sta+long, got {kind!r}")


def _train_sta(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    method = cfg.method
    grid = cfg.frame_hw // 8
    gates = compute_gates(cfg, paths, corpus)
    net = STANet(_net_rng(cfg, "sta"), grid)
    _init_sta_from_classifiers(cfg, paths, net)
    params = [t for _, t in net.params()]
    branch_params = [t for _, t in net.branch.params("branch")]
    dec_params = [t for _, t in net.dec.params("dec")]
    items = corpus.items("train", frame_stride=cfg.fp_stride)
    # fail fast if pseudofixations are missing
    load_pgt(paths, method, items[0][0], items[0][1], cfg.frame_hw)
    lr = cfg.fp_learning_rate
    opt = MomentumSGD([(branch_params, lr), (dec_params, lr * HEAD_LR_MULT)])
    best = (-np.inf, None, -1)
    log_lines = []

    def predict_one(sid, t):
        frag = corpus.fragment(sid, t)
        return net.forward_map(frag.frames, frag.spectrogram, gates[(sid, t)]).data

    for epoch in range(cfg.epochs_fp):
        order = _epoch_rng(cfg, "sta", epoch).permutation(len(items))
        epoch_losses = []
        for chunk_idx in _chunks(list(order), cfg.batch_fp):
            frags = [corpus.fragment(*items[i]) for i in chunk_idx]
            frames = np.stack([f.frames for f in frags])
            spects = np.stack([f.spectrogram for f in frags])
            gvec = np.array([gates[(f.sequence_id, f.frame_index)] for f in frags])
            pgts = [load_pgt(paths, method, f.sequence_id, f.frame_index, cfg.frame_hw)
                    for f in frags]
            with Tape() as tape:
                maps = net.forward_map(frames, spects, gvec)
                total = None
                from .tensor import take_batch

                for i in range(len(frags)):
                    m = take_batch(maps, i)
                    term = bce_loss(m, pgts[i]) + kl_loss(m, pgts[i])
                    total = term if total is None else total + term
                total = total * (1.0 / len(frags))
                tape.backward(total)
            opt.step()
            epoch_losses.append(total.item())
        held = _held_cc(cfg, corpus, paths, predict_one, method)
        log_lines.append(f"epoch.{epoch}.loss = {float(np.mean(epoch_losses))!r}")
        log_lines.append(f"epoch.{epoch}.held_cc = {held!r}")
        if held > best[0]:
            best = (held, [p.data.copy() for p in params], epoch)
    if best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data = data
    save_net(net, paths.checkpoint("sta"), net_id="sta", epoch=best[2],
             seed=cfg.seed, config_hash=cfg.config_hash(),
             extra={"held_cc": best[0]})
    log_lines.append(f"best_epoch = {best[2]}")
    log_lines.append(f"best_held_cc = {best[0]!r}")
    _write_log(paths, "train-fp-sta", cfg, log_lines)
    return {"net": "sta", "held_cc": best[0], "best_epoch": best[2]}


def _sta_plus_node_keys(cfg: RunConfig, corpus: Corpus, sid: str, t: int, kind: str):
    frag = corpus.fragment(sid, t)
    rng = granularity_rng(cfg.seed, kind, sid, t)
    sample = _SAMPLERS[kind](frag, corpus, rng)
    return [(f.sequence_id, f.frame_index) for f in sample.fragments]


def _train_sta_plus(cfg: RunConfig, kind: str) -> dict:
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    method = cfg.method
    name = f"staplus-{kind}"
    grid = cfg.frame_hw // 8
    gates = compute_gates(cfg, paths, corpus)
    sta_feats = compute_sta_features(cfg, paths, corpus, gates)
    net = STAPlusNet(_net_rng(cfg, name), grid, steps=cfg.m, td=cfg.td, tr=cfg.tr)
    # adopt the trained STA branch, frozen
    sta_net = STANet(_net_rng(cfg, "sta"), grid)
    load_net(sta_net, _require(paths.checkpoint("sta"), "train-fp --net sta"))
    for (_, a), (_, b) in zip(net.branch.params("x"), sta_net.branch.params("x")):
        a.data = b.data.copy()
    params = [t for _, t in net.trainable_params()]
    cgcn_params = [t for _, t in net.cgcn.params()]
    ro_params = [t for _, t in net.readout.params("readout")]
    items = corpus.items("train", frame_stride=cfg.fp_stride)
    load_pgt(paths, method, items[0][0], items[0][1], cfg.frame_hw)
    lr = cfg.fp_learning_rate
    opt = MomentumSGD([(cgcn_params, lr), (ro_params, lr * HEAD_LR_MULT)])
    hw = cfg.frame_hw
    best = (-np.inf, None, -1)
    log_lines = []

    def node_maps(sid, t, frl=True):
        mg_keys = _sta_plus_node_keys(cfg, corpus, sid, t, kind)
        packed = sta_feats[(sid, t)]
        sta_ta = Tensor(packed[:32])
        s_feat = Tensor(packed[32:])
        mgs = [Tensor(sta_feats[k][:32]) for k in mg_keys]
        maps = net.forward_from_feats(sta_ta, mgs, s_feat, (hw, hw), frl=frl)
        return maps, [(sid, t)] + mg_keys

    def predict_one(sid, t):
        maps, _ = node_maps(sid, t, frl=cfg.frl_on)
        return maps[0].data

    for epoch in range(cfg.epochs_fp):
        order = _epoch_rng(cfg, name, epoch).permutation(len(items))
        epoch_losses = []
        for chunk_idx in _chunks(list(order), cfg.batch_fp):
            with Tape() as tape:
                total = None
                for i in chunk_idx:
                    sid, t = items[i]
                    maps, keys = node_maps(sid, t, frl=cfg.frl_on)
                    # one BCE+KL pair per node against its own pseudofixation
                    for m, key in zip(maps, keys):
                        pgt = load_pgt(paths, method, key[0], key[1], hw)
                        term = bce_loss(m, pgt) + kl_loss(m, pgt)
                        total = term if total is None else total + term
                total = total * (1.0 / (3 * len(chunk_idx)))
                tape.backward(total)
            opt.step()
            epoch_losses.append(total.item())
        held = _held_cc(cfg, corpus, paths, predict_one, method)
        log_lines.append(f"epoch.{epoch}.loss = {float(np.mean(epoch_losses))!r}")
        log_lines.append(f"epoch.{epoch}.held_cc = {held!r}")
        if held > best[0]:
            best = (held, [p.data.copy() for p in params], epoch)
    if best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data = data
    save_net(net, paths.checkpoint(name), net_id=name, epoch=best[2],
             seed=cfg.seed, config_hash=cfg.config_hash(),
             extra={"held_cc": best[0]})
    log_lines.append(f"best_epoch = {best[2]}")
    log_lines.append(f"best_held_cc = {best[0]!r}")
    _write_log(paths, f"train-fp-{name}", cfg, log_lines)
    return {"net": name, "held_cc": best[0], "best_epoch": best[2]}


# ---------------------------------------------------------------------------
# prediction and evaluation


class PredictEngine:
    """Loads the three fixation nets and predicts per-frame maps."""

    def __init__(self, cfg: RunConfig, paths: Paths, corpus: Corpus, fuse: str):
        self.cfg = cfg
        self.corpus = corpus
        self.fuse = fuse
        self.hw = cfg.frame_hw
        grid = cfg.frame_hw // 8
        self.gates = compute_gates(cfg, paths, corpus)
        self.sta = STANet(_net_rng(cfg, "sta"), grid)
        load_net(self.sta, _require(paths.checkpoint("sta"), "train-fp --net sta"))
        self.plus = {}
        if fuse != "single":
            for kind in ("short", "long"):
                net = STAPlusNet(_net_rng(cfg, f"staplus-{kind}"), grid,
                                 steps=cfg.m, td=cfg.td, tr=cfg.tr)
                load_net(net, _require(paths.checkpoint(f"staplus-{kind}"),
                                       f"train-fp --net sta+{kind}"))
                self.plus[kind] = net
        self._feat_cache: dict = {}

    def _branch_feats(self, branch, digest: str, sid: str, t: int):
        key = (digest, sid, t)
        hit = self._feat_cache.get(key)
        if hit is not None:
            return hit
        frag = self.corpus.fragment(sid, t)
        sta, feat = branch(frag.frames, frag.spectrogram, self.gates[(sid, t)])
        out = (sta, feat)
        self._feat_cache[key] = out
        return out

    @staticmethod
    def _digest(net) -> str:
        h = hashlib.sha256()
        for _, p in net.params():
            h.update(p.data.tobytes())
        return h.hexdigest()[:16]

    def component_maps(self, sid: str, t: int) -> dict:
        out = {}
        frag = self.corpus.fragment(sid, t)
        out["sta"] = self.sta.forward_map(frag.frames, frag.spectrogram,
                                          self.gates[(sid, t)]).data
        for kind, net in self.plus.items():
            digest = self._digest(net)
            sta_ta, feat = self._branch_feats(net.branch, digest, sid, t)
            mg_keys = _sta_plus_node_keys(self.cfg, self.corpus, sid, t, kind)
            mgs = [self._branch_feats(net.branch, digest, k[0], k[1])[0]
                   for k in mg_keys]
            maps = net.forward_from_feats(sta_ta, mgs, feat.s, (self.hw, self.hw),
                                          frl=self.cfg.frl_on)
            out[kind] = maps[0].data
        return out

    def predict(self, sid: str, t: int) -> np.ndarray:
        parts = self.component_maps(sid, t)
        if self.fuse == "single":
            return parts["sta"]
        if self.fuse == "final":
            return fuse_final(parts["sta"], parts["short"], parts["long"])
        return fuse_agg(parts["sta"], parts["short"], parts["long"])


def cmd_predict(cfg: RunConfig, fuse: str | None = None) -> dict:
    fuse = fuse or cfg.fuse
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    engine = PredictEngine(cfg, paths, corpus, fuse)
    items = corpus.items("held")
    out_dir = paths.pred / fuse

    def emit(key):
        sid, t = key
        pred = engine.predict(sid, t)
        write_map_pair(out_dir / f"{sid}_{t:04d}", pred)
        return float(pred.mean())

    means = _parallel(emit, items, cfg.threads)
    _write_log(paths, f"predict-{fuse}", cfg, [
        f"frames = {len(items)}",
        f"mean_prediction = {float(np.mean(means))!r}",
    ])
    return {"frames": len(items), "fuse": fuse}


def cmd_evaluate(cfg: RunConfig) -> dict:
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    items = corpus.items("held")
    pred_root = paths.pred / cfg.fuse
    if not pred_root.exists():
        raise DependencyError(
            f"missing predictions at {pred_root}; run `predict --fuse {cfg.fuse}` first"
        )
    hw = cfg.frame_hw
    fls = {}
    for sid, t in items:
        _, pts = corpus.ground_truth(sid, t)
        fls[(sid, t)] = pts

    def one(indexed):
        idx, key = indexed
        sid, t = key
        stem = pred_root / f"{sid}_{t:04d}"
        if not (pred_root / f"{sid}_{t:04d}.f64").exists():
            raise DependencyError(f"missing prediction {stem}.f64")
        ps = read_f64(str(stem) + ".f64", (hw, hw))
        cf, fl = corpus.ground_truth(sid, t)
        others = [fls[k] for k in items if k != key]
        rng = np.random.default_rng([cfg.seed, 30, idx])
        return metrics_mod.FrameMetrics(
            seq_id=sid, frame=t,
            auc_j=metrics_mod.auc_judd(ps, fl),
            s_auc=metrics_mod.shuffled_auc(ps, fl, others, rng),
            nss=metrics_mod.nss(ps, fl),
            cc=metrics_mod.cc(ps, cf),
            sim=metrics_mod.sim(ps, cf),
        )

    frames = _parallel(one, list(enumerate(items)), cfg.threads)
    report = metrics_mod.MetricsReport(frames=frames)
    csv_path = paths.report / "metrics.csv"
    atomic_write_text(csv_path, report.to_csv())
    from .report import render_figures

    figures = render_figures(cfg, paths, corpus, report)
    means = report.means()
    _write_log(paths, "evaluate", cfg, [
        f"frames = {len(frames)}",
        f"csv = {csv_path}",
    ] + [f"mean.{k} = {v!r}" for k, v in sorted(means.items())]
      + [f"figure = {f}" for f in figures])
    return {"means": means, "csv": str(csv_path), "figures": figures}


# ---------------------------------------------------------------------------
# localization study (direction-of-effect evidence over planted glyph boxes)


def localization_study(cfg: RunConfig, frame_stride: int = 1) -> dict:
    """Mean in-box mass for every map variant the acceptance criteria compare.

    Reads the stored pseudofixations for the four methods and recomputes the
    cheap coarse-stage variants (single sources, AC, SCAM, SCAM+ with FRL
    on/off) from the frozen feature caches.
    """
    paths = Paths(cfg)
    corpus = _load_corpus(paths)
    engine = PgtEngine(cfg, paths, corpus, need_fine=False, need_plus=True)
    keys = corpus.items(frame_stride=frame_stride)
    masses: dict[str, list] = {k: [] for k in (
        "cam_s_coarse", "cam_st_coarse", "cam_sa_coarse", "ac_coarse", "scam_coarse",
        "scamplus_coarse", "scamplus_coarse_frl_off",
        "pgt_cam", "pgt_ac", "pgt_scam", "pgt_scam+",
    )}

    def one(key):
        sid, t = key
        tag = corpus.sequences[sid].class_id
        box = corpus.glyph_box(sid, t)
        out = {}
        coarse = engine.coarse_cams(key, tag)
        out["cam_s_coarse"] = mass_in_region(coarse[0].map, box)
        out["cam_st_coarse"] = mass_in_region(coarse[1].map, box)
        out["cam_sa_coarse"] = mass_in_region(coarse[2].map, box)
        out["ac_coarse"] = mass_in_region(average_cam(coarse).map, box)
        out["scam_coarse"] = mass_in_region(scam_fuse(coarse, cfg.lam).map, box)
        gran_on = engine.granularity_cams(key, tag, True)
        gran_off = engine.granularity_cams(key, tag, False)
        out["scamplus_coarse"] = mass_in_region(
            camscam.scam_plus_fuse(coarse, gran_on, cfg.lam).map, box)
        out["scamplus_coarse_frl_off"] = mass_in_region(
            camscam.scam_plus_fuse(coarse, gran_off, cfg.lam).map, box)
        for method in ("cam", "ac", "scam", "scam+"):
            stem = pgt_dir(paths, method) / f"{sid}_{t:04d}"
            if (pgt_dir(paths, method) / f"{sid}_{t:04d}.f64").exists():
                m = read_f64(str(stem) + ".f64", (cfg.frame_hw, cfg.frame_hw))
                out[f"pgt_{method}"] = mass_in_region(m, box)
        return out

    rows = _parallel(one, keys, cfg.threads)
    for row in rows:
        for k, v in row.items():
            masses[k].append(v)
    result = {k: float(np.mean(v)) for k, v in masses.items() if v}
    lines = ["variant,mean_mass_in_box"]
    for k in sorted(result):
        lines.append(f"{k},{result[k]:.9f}")
    atomic_write_text(paths.report / "localization.csv", "\n".join(lines) + "\n")
    return result
