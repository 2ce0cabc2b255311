"""Tag-free distilled fixation predictors.

The STA net fuses spatial, temporal, and gated audio features and decodes
them through three refine/concat/upsample stages into a full-resolution map.
The two STA+ nets reason over a target branch output plus two granularity
branch outputs with the C-GCN and read each node out against the spatial
feature.  Final maps combine the three predictors by consistency-plus-sum
fusion.
"""

from __future__ import annotations

import numpy as np

from .camscam import zscale
from .cgcn import CGCN, GraphState
from .nets import (
    AudioEncoder,
    AudioProjector,
    ConvLayer,
    ENCODER_CHANNELS,
    SpatialEncoder,
    SpatialFeature,
    TemporalEncoder,
    _frame_to_chw,
    _frames_to_ctHW,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    div,
    log,
    mean_all,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    sum_all,
    upsample_bilinear,
)

STA_CHANNELS = 32
KL_EPS = 1e-12


def bce_loss(pred: Tensor, pgt: np.ndarray) -> Tensor:
    """Pixel-mean binary cross-entropy of a (H,W) prediction in (0,1)."""
    g = np.asarray(pgt, dtype=np.float64)
    if g.shape != pred.shape:
        raise ShapeError(f"bce shapes differ: {pred.shape} vs {g.shape}")
    gt = Tensor(g)
    ones = Tensor(np.ones(g.shape))
    term = add(mul(gt, log(pred)), mul(add(ones, neg(gt)), log(add(ones, neg(pred)))))
    return neg(mean_all(term))


def kl_loss(pred: Tensor, pgt: np.ndarray) -> Tensor:
    """KL divergence of the sum-normalized target from the sum-normalized
    prediction, with 1e-12 smoothing."""
    g = np.asarray(pgt, dtype=np.float64)
    if g.shape != pred.shape:
        raise ShapeError(f"kl shapes differ: {pred.shape} vs {g.shape}")
    ghat = (g + KL_EPS) / (g + KL_EPS).sum()
    pe = add(pred, Tensor(np.full(pred.shape, KL_EPS)))
    phat = div(pe, sum_all(pe))
    cross = neg(sum_all(mul(Tensor(ghat), log(phat))))
    entropy = float(np.sum(ghat * np.log(ghat)))
    return add(cross, Tensor(entropy))


class STAFuse:
    """Eq-15 style fusion: audio- and temporal-gated spatial branches are
    concatenated and mixed by a 1x1 conv."""

    def __init__(self, rng: np.random.Generator):
        self.cov = ConvLayer(rng, STA_CHANNELS, 2 * ENCODER_CHANNELS[-1], 1, head=True)

    def __call__(self, s: Tensor, v: Tensor, audio_map: Tensor) -> Tensor:
        if v.shape != s.shape or audio_map.shape != s.shape:
            raise ShapeError(
                f"sta_fuse grids differ: s={s.shape} v={v.shape} a={audio_map.shape}"
            )
        audio_branch = add(mul(sigmoid(audio_map), s), s)
        temporal_branch = add(mul(sigmoid(v), s), s)
        return relu(self.cov(concat([audio_branch, temporal_branch])))

    def params(self, prefix: str):
        return self.cov.params(f"{prefix}.cov")


class Decoder:
    """Three refine/concat/upsample stages from the fused grid feature and the
    encoder side taps up to frame resolution, then a 1-channel sigmoid head."""

    def __init__(self, rng: np.random.Generator):
        c1, c2, c3, c4 = ENCODER_CHANNELS
        self.ref5 = ConvLayer(rng, 32, c4, 1, head=True)
        self.ref4 = ConvLayer(rng, 32, c3, 1, head=True)
        self.ref3 = ConvLayer(rng, 32, c2, 1, head=True)
        self.mix5 = ConvLayer(rng, 32, 32 + STA_CHANNELS, 1, head=True)
        self.mix4 = ConvLayer(rng, 32, 64, 1, head=True)
        self.mix3 = ConvLayer(rng, 32, 64, 1, head=True)
        self.head = ConvLayer(rng, 1, 32, 1, head=True)

    def __call__(self, sta: Tensor, feat: SpatialFeature) -> Tensor:
        if feat.f5.shape[-2:] != sta.shape[-2:]:
            raise ShapeError(
                f"decoder stride mismatch: sta {sta.shape} vs f5 {feat.f5.shape}"
            )
        d = relu(self.mix5(concat([relu(self.ref5(feat.f5)), sta])))
        d = upsample_bilinear(d, feat.f4.shape[-2:])
        d = relu(self.mix4(concat([relu(self.ref4(feat.f4)), d])))
        d = upsample_bilinear(d, feat.f3.shape[-2:])
        d = relu(self.mix3(concat([relu(self.ref3(feat.f3)), d])))
        d = upsample_bilinear(d, (feat.f3.shape[-2] * 2, feat.f3.shape[-1] * 2))
        out = sigmoid(self.head(d))
        if out.ndim == 3:
            return reshape(out, out.shape[-2:])
        return reshape(out, (out.shape[0],) + out.shape[-2:])

    def params(self, prefix: str):
        out = []
        for name in ("ref5", "ref4", "ref3", "mix5", "mix4", "mix3", "head"):
            out += getattr(self, name).params(f"{prefix}.{name}")
        return out


class STABranch:
    """Encoder stack + STA fuse; emits the fused grid feature and the spatial
    feature (with decoder taps) of the middle frame."""

    def __init__(self, rng: np.random.Generator, grid: int):
        self.enc = SpatialEncoder(rng)
        self.tenc = TemporalEncoder(rng)
        self.aenc = AudioEncoder(rng)
        self.aproj = AudioProjector(rng, grid)
        self.fuse = STAFuse(rng)

    def __call__(self, frames: np.ndarray, spect: np.ndarray, gate) -> tuple[Tensor, SpatialFeature]:
        batched = frames.ndim == 5
        mid = frames[:, 1] if batched else frames[1]
        feat = self.enc(Tensor(_frame_to_chw(mid)))
        v = self.tenc(Tensor(_frames_to_ctHW(frames)))
        a = self.aenc(Tensor(np.asarray(spect)))
        if batched:
            gates = np.broadcast_to(np.asarray(gate, dtype=np.float64).reshape(-1, 1),
                                    a.shape).copy()
        else:
            gates = np.full(a.shape, float(gate))
        amap = self.aproj(mul(a, Tensor(gates)))
        sta = self.fuse(feat.s, v, amap)
        return sta, feat

    def params(self, prefix: str):
        return (self.enc.params(f"{prefix}.enc") + self.tenc.params(f"{prefix}.tenc")
                + self.aenc.params(f"{prefix}.aenc") + self.aproj.params(f"{prefix}.aproj")
                + self.fuse.params(f"{prefix}.fuse"))


class STANet:
    """Sourcewise fixation predictor: STA branch + decoder."""

    def __init__(self, rng: np.random.Generator, grid: int = 8):
        self.branch = STABranch(rng, grid)
        self.dec = Decoder(rng)

    def forward_map(self, frames: np.ndarray, spect: np.ndarray, gate) -> Tensor:
        sta, feat = self.branch(frames, spect, gate)
        return self.dec(sta, feat)

    def params(self):
        return self.branch.params("branch") + self.dec.params("dec")


class ReadOut:
    """Per-node map head: refine the node (concat the spatial feature) to 32
    channels, upsample to frame resolution, 1-channel conv, sigmoid."""

    def __init__(self, rng: np.random.Generator):
        self.ref32 = ConvLayer(rng, 32, STA_CHANNELS + ENCODER_CHANNELS[-1], 1, head=True)
        self.ref1 = ConvLayer(rng, 1, 32, 1, head=True)

    def __call__(self, h_node: Tensor, s_feat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        x = relu(self.ref32(concat([h_node, s_feat])))
        x = upsample_bilinear(x, out_hw)
        out = sigmoid(self.ref1(x))
        return reshape(out, out_hw)

    def params(self, prefix: str):
        return self.ref32.params(f"{prefix}.ref32") + self.ref1.params(f"{prefix}.ref1")


class STAPlusNet:
    """Granularity fixation predictor: three STA-branch outputs reasoned over
    by the C-GCN, one ReadOut per node (shared weights)."""

    def __init__(self, rng: np.random.Generator, grid: int = 8, steps: int = 3,
                 td: float = 0.8, tr: float = 0.6):
        self.branch = STABranch(rng, grid)
        self.cgcn = CGCN(rng, STA_CHANNELS, td=td, tr=tr)
        self.readout = ReadOut(rng)
        self.steps = steps

    def forward_from_feats(self, sta_ta: Tensor, sta_mgs: list, s_feat: Tensor,
                           out_hw: tuple[int, int], frl: bool = True) -> list:
        if len(sta_mgs) != 2:
            raise ShapeError(f"expected 2 granularity nodes, got {len(sta_mgs)}")
        state = self.cgcn.reason(GraphState(h_ta=sta_ta, h_mg=list(sta_mgs)),
                                 m=self.steps, frl=frl)
        nodes = [state.h_ta] + list(state.h_mg)
        return [self.readout(h, s_feat, out_hw) for h in nodes]

    def params(self):
        return (self.branch.params("branch") + self.cgcn.params()
                + self.readout.params("readout"))

    def trainable_params(self):
        # source branches stay frozen; only reasoning + readout learn
        return self.cgcn.params() + self.readout.params("readout")


def fuse_final(pf_sta: np.ndarray, pf_short: np.ndarray, pf_long: np.ndarray) -> np.ndarray:
    """Half consistency product + half normalized sum."""
    if pf_sta.shape != pf_short.shape or pf_sta.shape != pf_long.shape:
        raise ShapeError("fuse_final needs same-dim maps")
    prod = zscale(zscale(pf_sta) * zscale(pf_short) * zscale(pf_long))
    total = zscale(pf_sta + pf_short + pf_long)
    return 0.5 * prod + 0.5 * total


def fuse_agg(pf_sta: np.ndarray, pf_short: np.ndarray, pf_long: np.ndarray) -> np.ndarray:
    """Multiplicative alternative: the product of the same two halves."""
    if pf_sta.shape != pf_short.shape or pf_sta.shape != pf_long.shape:
        raise ShapeError("fuse_agg needs same-dim maps")
    prod = zscale(zscale(pf_sta) * zscale(pf_short) * zscale(pf_long))
    total = zscale(pf_sta + pf_short + pf_long)
    return (0.5 * prod) * (0.5 * total)
