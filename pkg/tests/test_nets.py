import numpy as np
import pytest

from scamkit.gradcheck import check_gradient
from scamkit.nets import (
    AudioEncoder,
    AudioSwitchNet,
    ClassifierHead,
    PlusNet,
    SANet,
    SNet,
    STNet,
    SpatialEncoder,
    TemporalEncoder,
    load_net,
    msm_loss,
    one_hot,
    sa_fuse,
    save_net,
    st_fuse,
)
from scamkit.tensor import ShapeError, Tensor, conv2d, sum_all


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_spatial_encoder_output_shape():
    enc = SpatialEncoder(_rng(1))
    frame = _rng(2).random((64, 64, 3))
    feat = enc(Tensor(np.ascontiguousarray(frame.transpose(2, 0, 1))))
    assert feat.s.shape == (32, 8, 8)
    assert feat.f3.shape == (16, 32, 32)
    assert feat.f4.shape == (24, 16, 16)
    assert feat.f5.shape == (32, 8, 8)


def test_spatial_encoder_zero_frame_zero_feature():
    enc = SpatialEncoder(_rng(3))
    feat = enc(Tensor(np.zeros((3, 64, 64))))
    assert np.array_equal(feat.s.data, np.zeros((32, 8, 8)))


def test_spatial_encoder_deterministic():
    net = SNet(_rng(4), classes=3)
    frame = _rng(5).random((64, 64, 3))
    a = net.features(frame).s.data
    b = net.features(frame).s.data
    assert a.tobytes() == b.tobytes()


def test_spatial_encoder_fine_resolution():
    net = SNet(_rng(6), classes=3)
    frame = _rng(7).random((96, 96, 3))
    assert net.features(frame).s.shape == (32, 12, 12)


def test_audio_encoder_zero_spectrogram():
    aenc = AudioEncoder(_rng(8))
    a = aenc(Tensor(np.zeros((32, 32))))
    assert np.array_equal(a.data, np.zeros(32))


def test_temporal_center_slice_matches_2d():
    # zero temporal gradient: only the center time slice is active, so three
    # identical frames produce exactly the single-frame response
    tenc = TemporalEncoder(_rng(9))
    k = tenc.conv3d.w.data.copy()
    k[:, :, 0] = 0.0
    k[:, :, 2] = 0.0
    tenc.conv3d.w.data = k
    frame = _rng(10).random((3, 64, 64))
    frames = Tensor(np.stack([frame, frame, frame], axis=1))  # (C,T,H,W)
    out3d = tenc.conv3d(frames)
    ref = conv2d(Tensor(frame), Tensor(k[:, :, 1]), stride=1, pad=1)
    assert np.allclose(out3d.data, ref.data + tenc.conv3d.b.data[:, None, None], atol=1e-12)


def test_temporal_sensitive_spatial_not():
    net = STNet(_rng(11), classes=3)
    rng = _rng(12)
    mid = rng.random((64, 64, 3))
    a = np.stack([rng.random((64, 64, 3)), mid, rng.random((64, 64, 3))])
    b = np.stack([rng.random((64, 64, 3)), mid, rng.random((64, 64, 3))])
    va = net.tenc(Tensor(np.ascontiguousarray(a.transpose(3, 0, 1, 2)))).data
    vb = net.tenc(Tensor(np.ascontiguousarray(b.transpose(3, 0, 1, 2)))).data
    assert not np.allclose(va, vb)
    sa = net.enc(Tensor(np.ascontiguousarray(mid.transpose(2, 0, 1)))).s.data
    sb = net.enc(Tensor(np.ascontiguousarray(mid.transpose(2, 0, 1)))).s.data
    assert np.array_equal(sa, sb)


def test_sa_fuse_gate_zero_identity():
    # zero-initialized deconv biases: gate 0 silences the audio path entirely,
    # sigma(0)=0.5, so sa = Relu(0.5 s + s) concat s
    net = SANet(_rng(13), classes=3, grid=8)
    frame = _rng(14).random((64, 64, 3))
    spect = _rng(15).random((32, 32))
    s = net.enc(Tensor(np.ascontiguousarray(frame.transpose(2, 0, 1)))).s
    sa = net.branch(frame, spect, gate=0.0)
    expected = np.concatenate([np.maximum(1.5 * s.data, 0.0), s.data], axis=0)
    assert np.allclose(sa.data, expected, atol=1e-12)


def test_sa_fuse_zero_spatial_is_zero():
    amap = Tensor(_rng(16).standard_normal((32, 8, 8)))
    out = sa_fuse(Tensor(np.zeros((32, 8, 8))), amap)
    assert np.array_equal(out.data, np.zeros((64, 8, 8)))


def test_sa_fuse_channel_doubling():
    s = Tensor(_rng(17).random((32, 8, 8)))
    amap = Tensor(_rng(18).standard_normal((32, 8, 8)))
    assert sa_fuse(s, amap).shape == (64, 8, 8)
    with pytest.raises(ShapeError):
        sa_fuse(s, Tensor(np.zeros((32, 4, 4))))


def test_st_fuse_limit_and_zero():
    rng = _rng(19)
    s = rng.random((16, 4, 4))
    st = st_fuse(Tensor(s), Tensor(np.full((16, 4, 4), -1e4)))
    expected = np.concatenate([np.maximum(s, 0.0), s], axis=0)
    assert np.allclose(st.data, expected, atol=1e-10)
    zero = st_fuse(Tensor(np.zeros((16, 4, 4))), Tensor(rng.standard_normal((16, 4, 4))))
    assert np.array_equal(zero.data, np.zeros((32, 4, 4)))


def test_st_fuse_matches_direct_formula():
    rng = _rng(20)
    s = rng.standard_normal((8, 5, 5))
    v = rng.standard_normal((8, 5, 5))
    out = st_fuse(Tensor(s), Tensor(v)).data
    sig = 1.0 / (1.0 + np.exp(-v))
    expected = np.concatenate([np.maximum(sig * s + s, 0.0), s], axis=0)
    assert np.allclose(out, expected, atol=1e-12)


def test_classifier_zero_feature_is_half():
    head = ClassifierHead(_rng(21), in_channels=4, classes=3)
    out = head(Tensor(np.zeros((4, 8, 8))))
    assert np.allclose(out.confidences.data, 0.5, atol=1e-15)


def test_classifier_hand_weights_pick_channel_means():
    head = ClassifierHead(_rng(22), in_channels=2, classes=2)
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    head.conv.w.data = w
    head.conv.b.data = np.zeros(2)
    feat = _rng(23).random((2, 4, 4))
    out = head(Tensor(feat))
    means = feat.reshape(2, -1).mean(axis=1)
    assert np.allclose(out.logits.data, means, atol=1e-12)
    assert np.allclose(out.confidences.data, 1.0 / (1.0 + np.exp(-means)), atol=1e-12)


def test_classifier_argmax_consistency():
    head = ClassifierHead(_rng(24), in_channels=4, classes=5)
    feat = _rng(25).standard_normal((4, 8, 8))
    out = head(Tensor(feat))
    assert int(np.argmax(out.confidences.data)) == int(np.argmax(out.logits.data))
    assert np.all(out.confidences.data > 0) and np.all(out.confidences.data < 1)


def test_msm_loss_log2_at_zero():
    for c in (2, 4, 7):
        loss = msm_loss(Tensor(np.zeros(c)), one_hot(0, c))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_msm_loss_limit_to_zero():
    logits = np.full(3, -40.0)
    logits[1] = 40.0
    loss = msm_loss(Tensor(logits), one_hot(1, 3))
    assert loss.item() < 1e-6


def test_msm_loss_gradient_vs_fd():
    rng = _rng(26)
    logits = rng.standard_normal(4)
    target = one_hot(2, 4)
    err = check_gradient(lambda xs: msm_loss(xs[0], target), [logits])
    assert err <= 1e-4


def test_msm_loss_batched_mean():
    rng = _rng(27)
    batch = rng.standard_normal((3, 4))
    targets = np.stack([one_hot(i % 4, 4) for i in range(3)])
    batched = msm_loss(Tensor(batch), targets).item()
    singles = [msm_loss(Tensor(batch[i]), targets[i]).item() for i in range(3)]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


def test_switch_zero_weights_gate_zero():
    net = AudioSwitchNet(_rng(28), grid=8)
    for _, p in net.params():
        p.data = np.zeros_like(p.data)
    frame = _rng(29).random((64, 64, 3))
    spect = _rng(30).random((32, 32))
    prob = net.forward(frame, spect)
    assert prob.data.reshape(-1)[0] == pytest.approx(0.5, abs=1e-15)
    assert net.gate(frame, spect) == 0.0  # strict > at the 0.5 boundary


def test_plusnet_forward_shapes():
    rng = _rng(31)
    net = PlusNet(rng, branch_channels=32, classes=4, steps=2, td=0.8, tr=0.6)
    feats = [Tensor(rng.standard_normal((32, 8, 8))) for _ in range(3)]
    out, state = net.forward(feats[0], feats[1:])
    assert out.pre_gap.shape == (4, 8, 8)
    assert out.logits.shape == (4,)
    assert state.step == 2
    out2, _ = net.forward(feats[0], feats[1:], frl=False)
    assert not np.allclose(out.pre_gap.data, out2.pre_gap.data)


def test_classification_loss_gradcheck_small_nets():
    # composite gradient check through each classification net at 16x16
    rng = _rng(32)
    frame = rng.random((16, 16, 3))
    frames = rng.random((3, 16, 16, 3))
    spect = rng.random((32, 32))
    tag = one_hot(1, 2)

    s_net = SNet(_rng(33), classes=2)
    err = check_gradient(
        lambda xs: msm_loss(s_net.head(s_net.enc(xs[0]).s).logits, tag),
        [np.ascontiguousarray(frame.transpose(2, 0, 1))], max_coords=40)
    assert err <= 1e-4

    st_net = STNet(_rng(34), classes=2)
    err = check_gradient(
        lambda xs: msm_loss(st_net.head(
            __import__("scamkit.nets", fromlist=["st_fuse"]).st_fuse(
                st_net.enc(xs[0]).s, st_net.tenc(xs[1]))).logits, tag),
        [np.ascontiguousarray(frame.transpose(2, 0, 1)),
         np.ascontiguousarray(frames.transpose(3, 0, 1, 2))], max_coords=40)
    assert err <= 1e-4

    sa_net = SANet(_rng(35), classes=2, grid=2)
    def sa_loss(xs):
        s = sa_net.enc(xs[0]).s
        amap = sa_net.aproj(sa_net.aenc(xs[1]))
        return msm_loss(sa_net.head(sa_fuse(s, amap)).logits, tag)
    err = check_gradient(
        sa_loss, [np.ascontiguousarray(frame.transpose(2, 0, 1)), spect], max_coords=40)
    assert err <= 1e-4


def test_save_load_roundtrip(tmp_path):
    net = SNet(_rng(36), classes=3)
    path = tmp_path / "s.stan"
    save_net(net, path, net_id="s-coarse", epoch=5, seed=7, config_hash="abc123")
    other = SNet(_rng(99), classes=3)
    ck = load_net(other, path)
    assert ck.net_id == "s-coarse" and ck.epoch == 5 and ck.seed == 7
    assert ck.config_hash == "abc123"
    for (_, a), (_, b) in zip(net.params(), other.params()):
        assert a.data.tobytes() == b.data.tobytes()
    # byte-identical rewrite
    save_net(other, tmp_path / "s2.stan", net_id="s-coarse", epoch=5, seed=7,
             config_hash="abc123")
    assert (tmp_path / "s.stan").read_bytes() == (tmp_path / "s2.stan").read_bytes()
