"""The gradient verification suite behind the `gradcheck` command.

Runs central finite-difference checks (h=1e-5) over every differentiable op
and each composite net, reporting the max relative error per case.
"""

from __future__ import annotations

import numpy as np

from .cgcn import CGCN, GraphState
from .fixation import Decoder, STAFuse, bce_loss, kl_loss
from .gradcheck import check_gradient
from .nets import SANet, SNet, STNet, msm_loss, one_hot, sa_fuse, st_fuse
from .tensor import (
    Tensor,
    add,
    channel_mean,
    concat,
    conv2d,
    conv3d,
    deconv2d,
    div,
    expand_channel,
    gap,
    log,
    matmul,
    minmax_normalize,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    sum_all,
    take_batch,
    take_channel,
    transpose2d,
    upsample_bilinear,
)

TOLERANCE = 1e-4


def _probe(x, w):
    """Weighted-sum readout so non-scalar outputs become a scalar loss."""
    return sum_all(mul(x, w))


def op_cases(rng: np.random.Generator):
    """(name, fn, values) triplets for the elementary differentiable ops."""
    a = rng.standard_normal((3, 4, 4))
    b = rng.standard_normal((3, 4, 4))
    w = Tensor(rng.standard_normal((3, 4, 4)))
    vec = rng.standard_normal(3)
    m1 = rng.standard_normal((4, 5))
    m2 = rng.standard_normal((5, 3))
    wm = Tensor(rng.standard_normal((4, 3)))
    x_img = rng.standard_normal((2, 6, 6))
    k2 = rng.standard_normal((3, 2, 3, 3))
    w_conv = Tensor(rng.standard_normal((3, 3, 3)))
    y_img = rng.standard_normal((3, 3, 3))
    kd = rng.standard_normal((3, 2, 2, 2))
    wd = Tensor(rng.standard_normal((2, 6, 6)))
    x3 = rng.standard_normal((2, 3, 5, 5))
    k3 = rng.standard_normal((3, 2, 3, 3, 3))
    w3 = Tensor(rng.standard_normal((3, 1, 3, 3)))
    pos = rng.random((4, 4)) * 0.9 + 0.05
    w44 = Tensor(rng.standard_normal((4, 4)))
    wu = Tensor(rng.standard_normal((2, 8, 8)))
    batch = rng.standard_normal((3, 2, 2))
    # probes must be fixed before the lambdas close over them: a fresh draw
    # per call would change the function between finite-difference evals
    w_gap = Tensor(rng.standard_normal(3))
    w_316 = Tensor(rng.standard_normal((3, 16)))
    w_644 = Tensor(rng.standard_normal((6, 4, 4)))
    w_54 = Tensor(rng.standard_normal((5, 4)))
    w_22 = Tensor(rng.standard_normal((2, 2)))
    ones44 = Tensor(np.ones((4, 4)))
    target44 = rng.random((4, 4))

    return [
        ("add", lambda xs: _probe(add(xs[0], xs[1]), w), [a, b]),
        ("add_channel_vec", lambda xs: _probe(add(xs[0], xs[1]), w), [a, vec]),
        ("mul", lambda xs: _probe(mul(xs[0], xs[1]), w), [a, b]),
        ("div", lambda xs: _probe(div(xs[0], xs[1]), w), [a, np.array(1.7)]),
        ("relu", lambda xs: _probe(relu(xs[0]), w), [a]),
        ("sigmoid", lambda xs: _probe(sigmoid(xs[0]), w), [a]),
        ("log", lambda xs: _probe(log(xs[0]), ones44), [pos]),
        ("matmul", lambda xs: _probe(matmul(xs[0], xs[1]), wm), [m1, m2]),
        ("conv2d", lambda xs: _probe(conv2d(xs[0], xs[1], stride=2, pad=1), w_conv),
         [x_img, k2]),
        ("deconv2d", lambda xs: _probe(deconv2d(xs[0], xs[1], stride=2), wd),
         [y_img, kd]),
        ("conv3d", lambda xs: _probe(conv3d(xs[0], xs[1], stride=2, pad=1), w3),
         [x3, k3]),
        ("gap", lambda xs: _probe(gap(xs[0]), w_gap), [a]),
        ("softmax_rows", lambda xs: _probe(softmax_rows(xs[0]), w44),
         [rng.standard_normal((4, 4))]),
        ("minmax_normalize", lambda xs: _probe(minmax_normalize(xs[0]), w44),
         [rng.standard_normal((4, 4))]),
        ("reshape", lambda xs: _probe(reshape(xs[0], (3, 16)), w_316), [a]),
        ("concat", lambda xs: _probe(concat([xs[0], xs[1]]), w_644), [a, b]),
        ("transpose2d", lambda xs: _probe(transpose2d(xs[0]), w_54), [m1]),
        ("take_channel", lambda xs: _probe(take_channel(xs[0], 1), w44), [a]),
        ("take_batch", lambda xs: _probe(take_batch(xs[0], 1), w_22), [batch]),
        ("channel_mean", lambda xs: _probe(channel_mean(xs[0]), w44), [a]),
        ("expand_channel", lambda xs: _probe(expand_channel(xs[0], 3), w),
         [rng.standard_normal((4, 4))]),
        ("upsample_bilinear", lambda xs: _probe(upsample_bilinear(xs[0], (8, 8)), wu),
         [rng.standard_normal((2, 3, 3))]),
        ("sa_fuse", lambda xs: _probe(sa_fuse(xs[0], xs[1]), w_644), [a, b]),
        ("st_fuse", lambda xs: _probe(st_fuse(xs[0], xs[1]), w_644), [a, b]),
        ("msm_loss", lambda xs: msm_loss(xs[0], one_hot(1, 4)),
         [rng.standard_normal(4)]),
        ("bce_loss", lambda xs: bce_loss(sigmoid(xs[0]), target44),
         [rng.standard_normal((4, 4))]),
        ("kl_loss", lambda xs: kl_loss(sigmoid(xs[0]), target44),
         [rng.standard_normal((4, 4))]),
    ]


def composite_cases(rng: np.random.Generator):
    """Gradient checks through each composite net at reduced resolution."""
    frame = np.ascontiguousarray(rng.random((16, 16, 3)).transpose(2, 0, 1))
    frames = np.ascontiguousarray(rng.random((3, 16, 16, 3)).transpose(3, 0, 1, 2))
    spect = rng.random((32, 32))
    tag = one_hot(1, 2)

    s_net = SNet(np.random.default_rng(101), classes=2)
    sa_net = SANet(np.random.default_rng(102), classes=2, grid=2)
    st_net = STNet(np.random.default_rng(103), classes=2)
    cgcn = CGCN(np.random.default_rng(104), channels=3)
    sta_fuse_mod = STAFuse(np.random.default_rng(105))
    decoder = Decoder(np.random.default_rng(106))

    def s_case(xs):
        return msm_loss(s_net.head(s_net.enc(xs[0]).s).logits, tag)

    def sa_case(xs):
        s = sa_net.enc(xs[0]).s
        amap = sa_net.aproj(sa_net.aenc(xs[1]))
        return msm_loss(sa_net.head(sa_fuse(s, amap)).logits, tag)

    def st_case(xs):
        return msm_loss(st_net.head(
            st_fuse(st_net.enc(xs[0]).s, st_net.tenc(xs[1]))).logits, tag)

    def cgcn_case(xs):
        state = cgcn.step(GraphState(h_ta=xs[0], h_mg=[xs[1], xs[2]]))
        return sum_all(mul(sigmoid(state.h_ta), xs[3]))

    def sta_case(xs):
        fused = sta_fuse_mod(xs[0], xs[1], xs[2])
        return sum_all(mul(fused, xs[3]))

    dec_target = rng.random((16, 16))
    dec_enc = SNet(np.random.default_rng(107), classes=2).enc

    def decoder_case(xs):
        feat = dec_enc(xs[0])
        return bce_loss(decoder(xs[1], feat), dec_target)

    g = rng.standard_normal
    return [
        ("net_s", s_case, [frame]),
        ("net_sa", sa_case, [frame, spect]),
        ("net_st", st_case, [frame, frames]),
        ("cgcn_step", cgcn_case, [g((3, 4, 4)), g((3, 4, 4)), g((3, 4, 4)), g((3, 4, 4))]),
        ("sta_fuse", sta_case, [g((32, 2, 2)), g((32, 2, 2)), g((32, 2, 2)),
                                g((32, 2, 2))]),
        ("decoder", decoder_case, [frame, g((32, 2, 2))]),
    ]


def run_suite(seed: int = 0, instances: int = 10):
    """Run the whole gradient suite; yields (name, max_rel_err, passed)."""
    results = []
    for trial in range(instances):
        rng = np.random.default_rng([seed, 40, trial])
        for name, fn, values in op_cases(rng):
            err = check_gradient(fn, values, max_coords=25,
                                 rng=np.random.default_rng([seed, 41, trial]))
            results.append((f"{name}[{trial}]", err, err <= TOLERANCE))
    rng = np.random.default_rng([seed, 42])
    for name, fn, values in composite_cases(rng):
        err = check_gradient(fn, values, max_coords=30,
                             rng=np.random.default_rng([seed, 43]))
        results.append((name, err, err <= TOLERANCE))
    return results
