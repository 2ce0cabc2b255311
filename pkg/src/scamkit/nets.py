"""Trainable encoders and classification nets.

Small conv encoders replace pretrained backbones: a 4-block spatial encoder
(strides 1/2/2/2, channels 8/16/24/32) maps an HxW frame to a 32-channel
H/8 grid with side taps for the decoder; a 3D-conv temporal encoder and a
small audio encoder produce grid-aligned temporal and audio features.  The
SA/ST fuse modules, GAP classifier head, multilabel soft-margin loss, the
audio switch, and the multi-granularity (+) classification nets live here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cgcn import CGCN, GraphState
from .serial import Checkpoint
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    conv3d,
    deconv2d,
    gap,
    log,
    mean_all,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
)

ENCODER_CHANNELS = (8, 16, 24, 32)
AUDIO_DIM = 32

# fixed input gain: raw frames/spectrograms live in [0,1]; scaling them up
# keeps activations O(1) through the stack, which plain SGD needs to make
# the class signal visible at the GAP bottleneck
INPUT_GAIN = 6.0
# identity-passthrough strength: fresh conv weights are scaled down and an
# identity center tap is added so low-level color/intensity statistics reach
# the classifier head from the very first step
DIRAC_NOISE = 0.35


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def head_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def _add_dirac_2d(w: np.ndarray) -> np.ndarray:
    w = w * DIRAC_NOISE
    c = w.shape[2] // 2
    for i in range(min(w.shape[0], w.shape[1])):
        w[i, i, c, c] += 1.0
    return w


class ConvLayer:
    def __init__(self, rng, co: int, ci: int, k: int, stride: int = 1, pad: int = 0,
                 head: bool = False, dirac: bool = True):
        fan_in = ci * k * k
        init = head_uniform if head else he_uniform
        w = init(rng, (co, ci, k, k), fan_in)
        if dirac:
            w = _add_dirac_2d(w)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(co), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return add(conv2d(x, self.w, stride=self.stride, pad=self.pad), self.b)

    def params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Conv3dLayer:
    def __init__(self, rng, co: int, ci: int, kt: int, k: int, stride: int = 1, pad: int = 0):
        fan_in = ci * kt * k * k
        w = he_uniform(rng, (co, ci, kt, k, k), fan_in) * DIRAC_NOISE
        for i in range(min(co, ci)):
            w[i, i, kt // 2, k // 2, k // 2] += 1.0
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(co), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        out = conv3d(x, self.w, stride=self.stride, pad=self.pad)
        # collapse the singleton time axis
        if out.ndim == 4:
            out = reshape(out, (out.shape[0], out.shape[2], out.shape[3]))
        else:
            out = reshape(out, (out.shape[0], out.shape[1], out.shape[3], out.shape[4]))
        return add(out, self.b)

    def params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class DeconvLayer:
    def __init__(self, rng, ci: int, co: int, k: int, stride: int):
        # kernel layout matches conv2d: (ci, co, k, k) with ci the input side
        w = he_uniform(rng, (ci, co, k, k), ci * k * k) * DIRAC_NOISE
        for i in range(min(ci, co)):
            w[i, i] += 1.0 / (k * k)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(co), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return add(deconv2d(x, self.w, stride=self.stride), self.b)

    def params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class SpatialFeature:
    """Final grid feature plus the decoder side taps, shallow to deep."""

    s: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor


@dataclass
class ClassifierOutput:
    pre_gap: Tensor  # (c,h,w) map the CAM reads
    logits: Tensor
    confidences: Tensor


class SpatialEncoder:
    def __init__(self, rng):
        c1, c2, c3, c4 = ENCODER_CHANNELS
        self.conv1 = ConvLayer(rng, c1, 3, 3, stride=1, pad=1)
        self.conv2 = ConvLayer(rng, c2, c1, 3, stride=2, pad=1)
        self.conv3 = ConvLayer(rng, c3, c2, 3, stride=2, pad=1)
        self.conv4 = ConvLayer(rng, c4, c3, 3, stride=2, pad=1)

    def __call__(self, frame: Tensor) -> SpatialFeature:
        t1 = relu(self.conv1(mul(frame, Tensor(INPUT_GAIN))))
        f3 = relu(self.conv2(t1))
        f4 = relu(self.conv3(f3))
        s = relu(self.conv4(f4))
        return SpatialFeature(s=s, f3=f3, f4=f4, f5=s)

    def params(self, prefix: str):
        return (self.conv1.params(f"{prefix}.conv1") + self.conv2.params(f"{prefix}.conv2")
                + self.conv3.params(f"{prefix}.conv3") + self.conv4.params(f"{prefix}.conv4"))


class TemporalEncoder:
    """3D conv over the 3-frame stack, then the spatial downsampling stack."""

    def __init__(self, rng):
        c1, c2, c3, c4 = ENCODER_CHANNELS
        self.conv3d = Conv3dLayer(rng, c1, 3, 3, 3, stride=1, pad=1)
        self.conv2 = ConvLayer(rng, c2, c1, 3, stride=2, pad=1)
        self.conv3 = ConvLayer(rng, c3, c2, 3, stride=2, pad=1)
        self.conv4 = ConvLayer(rng, c4, c3, 3, stride=2, pad=1)

    def __call__(self, frames: Tensor) -> Tensor:
        t1 = relu(self.conv3d(mul(frames, Tensor(INPUT_GAIN))))
        t2 = relu(self.conv2(t1))
        t3 = relu(self.conv3(t2))
        return relu(self.conv4(t3))

    def params(self, prefix: str):
        return (self.conv3d.params(f"{prefix}.conv3d") + self.conv2.params(f"{prefix}.conv2")
                + self.conv3.params(f"{prefix}.conv3") + self.conv4.params(f"{prefix}.conv4"))


class AudioEncoder:
    def __init__(self, rng):
        self.conv1 = ConvLayer(rng, 8, 1, 3, stride=2, pad=1)
        self.conv2 = ConvLayer(rng, 16, 8, 3, stride=2, pad=1)
        self.conv3 = ConvLayer(rng, AUDIO_DIM, 16, 3, stride=2, pad=1)

    def __call__(self, spect: Tensor) -> Tensor:
        x = spect
        if x.ndim == 2:
            x = reshape(x, (1,) + x.shape)
        elif x.ndim == 3:
            x = reshape(x, (x.shape[0], 1, x.shape[1], x.shape[2]))
        h = relu(self.conv1(mul(x, Tensor(INPUT_GAIN))))
        h = relu(self.conv2(h))
        h = relu(self.conv3(h))
        return gap(h)

    def params(self, prefix: str):
        return (self.conv1.params(f"{prefix}.conv1") + self.conv2.params(f"{prefix}.conv2")
                + self.conv3.params(f"{prefix}.conv3"))


def _grid_factors(grid: int) -> list[int]:
    factors = []
    g = grid
    for f in (5, 3, 2):
        while g % f == 0 and g > 1:
            factors.append(f)
            g //= f
    if g != 1:
        raise ShapeError(f"audio projector cannot reach a {grid}x{grid} grid")
    return sorted(factors)


class AudioProjector:
    """Deconvolution stack lifting the audio vector onto the spatial grid."""

    def __init__(self, rng, grid: int, out_channels: int = ENCODER_CHANNELS[-1]):
        factors = _grid_factors(grid)
        chans = [AUDIO_DIM] + [24] * (len(factors) - 1) + [out_channels]
        self.layers = []
        for i, f in enumerate(factors):
            self.layers.append(DeconvLayer(rng, chans[i], chans[i + 1], f, f))
        self.grid = grid

    def __call__(self, a: Tensor) -> Tensor:
        if a.ndim == 1:
            x = reshape(a, (a.shape[0], 1, 1))
        else:
            x = reshape(a, (a.shape[0], a.shape[1], 1, 1))
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = relu(x)
        return x

    def params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.params(f"{prefix}.deconv{i}")
        return out


def sa_fuse(s: Tensor, audio_map: Tensor) -> Tensor:
    """Relu(sigmoid(audio_map) . s + s) concat s; channel count doubles."""
    if audio_map.shape != s.shape:
        raise ShapeError(f"audio map grid {audio_map.shape} != spatial grid {s.shape}")
    fused = relu(add(mul(sigmoid(audio_map), s), s))
    return concat([fused, s])


def st_fuse(s: Tensor, v: Tensor) -> Tensor:
    """Relu(sigmoid(v) . s + s) concat s."""
    if v.shape != s.shape:
        raise ShapeError(f"temporal grid {v.shape} != spatial grid {s.shape}")
    fused = relu(add(mul(sigmoid(v), s), s))
    return concat([fused, s])


class ClassifierHead:
    """1x1 conv to c channels, GAP, sigmoid; exposes the pre-GAP map."""

    def __init__(self, rng, in_channels: int, classes: int):
        self.conv = ConvLayer(rng, classes, in_channels, 1, head=True)
        self.classes = classes

    def __call__(self, feat: Tensor) -> ClassifierOutput:
        pre = self.conv(feat)
        logits = gap(pre)
        return ClassifierOutput(pre_gap=pre, logits=logits, confidences=sigmoid(logits))

    def params(self, prefix: str):
        return self.conv.params(f"{prefix}.head")


def msm_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Multilabel soft-margin: mean over classes (and batch) of the
    per-class sigmoid cross-entropy against a one-hot tag."""
    y = Tensor(np.asarray(target, dtype=np.float64))
    if y.shape != logits.shape:
        raise ShapeError(f"tag shape {y.shape} != logits shape {logits.shape}")
    p = sigmoid(logits)
    ones = Tensor(np.ones(p.shape))
    term = add(mul(y, log(p)), mul(add(ones, neg(y)), log(add(ones, neg(p)))))
    return neg(mean_all(term))


def one_hot(tag: int, classes: int) -> np.ndarray:
    v = np.zeros(classes)
    v[tag] = 1.0
    return v


def _frame_to_chw(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 3:
        return np.ascontiguousarray(frame.transpose(2, 0, 1))
    return np.ascontiguousarray(frame.transpose(0, 3, 1, 2))


def _frames_to_ctHW(frames: np.ndarray) -> np.ndarray:
    # (3,H,W,3) -> (C=3, T=3, H, W);  (N,3,H,W,3) -> (N,3,3,H,W)
    if frames.ndim == 4:
        return np.ascontiguousarray(frames.transpose(3, 0, 1, 2))
    return np.ascontiguousarray(frames.transpose(0, 4, 1, 2, 3))


class SNet:
    """Spatial classification net: encoder + GAP classifier."""

    def __init__(self, rng: np.random.Generator, classes: int):
        self.enc = SpatialEncoder(rng)
        self.head = ClassifierHead(rng, ENCODER_CHANNELS[-1], classes)
        self.classes = classes

    def features(self, frame: np.ndarray) -> SpatialFeature:
        return self.enc(Tensor(_frame_to_chw(frame)))

    def branch(self, frame: np.ndarray) -> Tensor:
        return self.features(frame).s

    def forward(self, frame: np.ndarray) -> ClassifierOutput:
        return self.head(self.branch(frame))

    def params(self):
        return self.enc.params("enc") + self.head.params("cls")


class SANet:
    """Spatial-audio net: audio serves the spatial feature through the
    deconvolved, switch-gated attention of the SA fuse module."""

    def __init__(self, rng: np.random.Generator, classes: int, grid: int):
        self.enc = SpatialEncoder(rng)
        self.aenc = AudioEncoder(rng)
        self.aproj = AudioProjector(rng, grid)
        self.head = ClassifierHead(rng, 2 * ENCODER_CHANNELS[-1], classes)
        self.classes = classes

    def audio_map(self, spect: np.ndarray, gate) -> Tensor:
        a = self.aenc(Tensor(spect))
        if a.ndim == 2:
            gates = np.broadcast_to(np.asarray(gate, dtype=np.float64).reshape(-1, 1),
                                    a.shape).copy()
        else:
            gates = np.full(a.shape, float(gate))
        gated = mul(a, Tensor(gates))
        return self.aproj(gated)

    def branch(self, frame: np.ndarray, spect: np.ndarray, gate: float) -> Tensor:
        s = self.enc(Tensor(_frame_to_chw(frame))).s
        amap = self.audio_map(spect, gate)
        return sa_fuse(s, amap)

    def forward(self, frame: np.ndarray, spect: np.ndarray, gate: float) -> ClassifierOutput:
        return self.head(self.branch(frame, spect, gate))

    def params(self):
        return (self.enc.params("enc") + self.aenc.params("aenc")
                + self.aproj.params("aproj") + self.head.params("cls"))


class STNet:
    """Spatial-temporal net: 3D-conv temporal feature gates the spatial one."""

    def __init__(self, rng: np.random.Generator, classes: int):
        self.enc = SpatialEncoder(rng)
        self.tenc = TemporalEncoder(rng)
        self.head = ClassifierHead(rng, 2 * ENCODER_CHANNELS[-1], classes)
        self.classes = classes

    def branch(self, frames: np.ndarray) -> Tensor:
        mid = frames[1] if frames.ndim == 4 else frames[:, 1]
        s = self.enc(Tensor(_frame_to_chw(mid))).s
        v = self.tenc(Tensor(_frames_to_ctHW(frames)))
        return st_fuse(s, v)

    def forward(self, frames: np.ndarray) -> ClassifierOutput:
        return self.head(self.branch(frames))

    def params(self):
        return self.enc.params("enc") + self.tenc.params("tenc") + self.head.params("cls")


class AudioSwitchNet:
    """SA-structured binary gate: 1 iff the audio agrees with the visuals.

    Its internal fuse runs ungated; downstream nets consume its output."""

    def __init__(self, rng: np.random.Generator, grid: int):
        self.aenc = AudioEncoder(rng)
        self.aproj = AudioProjector(rng, grid)
        self.enc = SpatialEncoder(rng)
        self.head = ClassifierHead(rng, 2 * ENCODER_CHANNELS[-1], 1)

    def forward(self, frame: np.ndarray, spect: np.ndarray) -> Tensor:
        s = self.enc(Tensor(_frame_to_chw(frame))).s
        amap = self.aproj(self.aenc(Tensor(spect)))
        fused = sa_fuse(s, amap)
        return self.head(fused).confidences

    def gate(self, frame: np.ndarray, spect: np.ndarray) -> float:
        prob = self.forward(frame, spect)
        value = float(prob.data.reshape(-1)[0])
        return 1.0 if value > 0.5 else 0.0

    def params(self):
        return (self.enc.params("enc") + self.aenc.params("aenc")
                + self.aproj.params("aproj") + self.head.params("cls"))


class PlusNet:
    """Multi-granularity classification net: frozen source-branch features are
    projected to class channels, reasoned over by the C-GCN, and classified."""

    def __init__(self, rng: np.random.Generator, branch_channels: int, classes: int,
                 steps: int, td: float, tr: float):
        self.node_proj = ConvLayer(rng, classes, branch_channels, 1, head=True)
        self.cgcn = CGCN(rng, classes, td=td, tr=tr)
        self.head = ClassifierHead(rng, classes, classes)
        self.steps = steps
        self.classes = classes

    def forward(self, target_feat: Tensor, mg_feats: list, frl: bool = True):
        h_ta = self.node_proj(target_feat)
        h_mg = [self.node_proj(f) for f in mg_feats]
        state = self.cgcn.reason(GraphState(h_ta=h_ta, h_mg=h_mg), m=self.steps, frl=frl)
        return self.head(state.h_ta), state

    def params(self):
        return (self.node_proj.params("proj") + self.cgcn.params()
                + self.head.params("cls"))


def save_net(net, path, net_id: str, epoch: int = 0, seed: int = 0,
             config_hash: str = "", extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in net.params()}
    ck = Checkpoint(net_id=net_id, tensors=tensors, epoch=epoch, seed=seed,
                    config_hash=config_hash, extra=dict(extra or {}))
    ck.save(path)


def load_net(net, path) -> Checkpoint:
    ck = Checkpoint.load(path)
    own = dict(net.params())
    missing = set(own) - set(ck.tensors)
    extra_names = set(ck.tensors) - set(own)
    if missing or extra_names:
        raise ShapeError(
            f"checkpoint/net mismatch: missing {sorted(missing)}, unexpected {sorted(extra_names)}"
        )
    for name, t in own.items():
        arr = ck.tensors[name]
        if arr.shape != t.data.shape:
            raise ShapeError(f"tensor {name} shape {arr.shape} != net shape {t.data.shape}")
        t.data = arr.copy()
        t.grad = None
    return ck
