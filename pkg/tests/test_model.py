import numpy as np
import pytest
from pydantic import ValidationError

from mmcla.data import TASKS
from mmcla.model import DEFAULT_INCEPTION, InceptionWidths, MMNet, ModelConfig, crossmodal_attention
from mmcla.tensor import Rng, ShapeError, Tensor, no_grad, read_archive
from mmcla.training import bce_loss, global_loss

from conftest import relative_error

TINY = dict(
    audio_channels=(2, 3),
    audio_pool=(2, 2),
    video_stem_channels=2,
    inception=(InceptionWidths(b1=1, b2_reduce=1, b2=2, b3_reduce=1, b3=1, b4=1),),
    feature_dim=8,
    heads=2,
    branch_hidden=4,
    audio_shape=(8, 12),
    video_shape=(4, 10, 10),
)


def tiny(**overrides):
    return ModelConfig(**{**TINY, **overrides})


def inputs(cfg, batch=3, seed=0):
    g = np.random.default_rng(seed)
    mel = g.normal(size=(batch, 1) + tuple(cfg.audio_shape))
    vol = g.uniform(-1, 1, size=(batch, 1) + tuple(cfg.video_shape))
    return mel, vol


# -- configuration -----------------------------------------------------------


def test_default_widths():
    cfg = ModelConfig()
    assert cfg.audio_channels == (16, 32, 64, 128)
    assert [w.out for w in cfg.inception] == [64, 128]
    assert cfg.feature_dim == 128 and cfg.heads == 4 and cfg.head_dim == 32
    assert cfg.query_from == "audio" and cfg.attention_mode == "faithful"


def test_quartered_widths():
    cfg = ModelConfig.quartered()
    assert cfg.audio_channels == (4, 8, 16, 32)
    assert cfg.video_stem_channels == 4
    assert [w.out for w in cfg.inception] == [16, 32]


def test_heads_must_divide_width():
    with pytest.raises(ValidationError):
        ModelConfig(heads=3)
    with pytest.raises(ValidationError):
        ModelConfig(colour="blue")


# -- parameter count ---------------------------------------------------------


def closed_form_count(cfg: ModelConfig) -> int:
    # per-layer arithmetic: conv weights (no bias, batch norm follows) + 2 per channel for norm affine
    def conv(c_in, c_out, taps):
        return c_in * c_out * taps + 2 * c_out

    def dense(n_in, n_out):
        return n_in * n_out + n_out

    d = cfg.feature_dim
    total = 0
    chans = (1,) + tuple(cfg.audio_channels)
    total += sum(conv(a, b, 9) for a, b in zip(chans, chans[1:]))
    total += dense(chans[-1] * cfg.audio_pool[0] * cfg.audio_pool[1], d)
    total += conv(1, cfg.video_stem_channels, 343)
    c = cfg.video_stem_channels
    for w in cfg.inception:
        total += conv(c, w.b1, 1)
        total += conv(c, w.b2_reduce, 1) + conv(w.b2_reduce, w.b2, 27)
        total += conv(c, w.b3_reduce, 1) + conv(w.b3_reduce, w.b3, 27)
        total += conv(c, w.b4, 1)
        c = w.b1 + w.b2 + w.b3 + w.b4
    total += dense(c, d)
    total += 3 * cfg.heads * d * (d // cfg.heads) + d * d
    total += dense(d, d)
    total += 3 * (dense(d, cfg.branch_hidden) + dense(cfg.branch_hidden, 1))
    return total


@pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig.quartered(), tiny()], ids=["default", "quartered", "tiny"])
def test_parameter_count_closed_form(cfg):
    assert MMNet(cfg).num_parameters() == closed_form_count(cfg)


def test_default_parameter_count_frozen():
    assert MMNet(ModelConfig()).num_parameters() == 576_043


# -- attention ---------------------------------------------------------------


def random_projections(g, d, heads):
    dk = d // heads
    w = lambda *s: Tensor(g.normal(size=s))
    return [w(d, dk) for _ in range(heads)], [w(d, dk) for _ in range(heads)], [w(d, dk) for _ in range(heads)], w(d, d)


def test_pooled_attention_weights_are_exactly_one():
    g = np.random.default_rng(5)
    wq, wk, wv, wo = random_projections(g, 16, 4)
    seen = []
    crossmodal_attention(Tensor(g.normal(size=(7, 16)) * 50), Tensor(g.normal(size=(7, 16))), wq, wk, wv, wo, seen)
    assert len(seen) == 4
    for w in seen:
        assert w.shape == (7, 1, 1)
        assert (w == 1.0).all()


def test_pooled_attention_closed_form():
    g = np.random.default_rng(6)
    wq, wk, wv, wo = random_projections(g, 128, 4)
    a, v = g.normal(size=(5, 128)), g.normal(size=(5, 128))
    out = crossmodal_attention(Tensor(a), Tensor(v), wq, wk, wv, wo).data
    expected = np.concatenate([v @ h.data for h in wv], axis=1) @ wo.data
    np.testing.assert_allclose(out, expected, atol=1e-6, rtol=0)


def test_identity_projection_returns_key_value_features():
    g = np.random.default_rng(7)
    eye = Tensor(np.eye(8))
    a, v = g.normal(size=(4, 8)), g.normal(size=(4, 8))
    out = crossmodal_attention(Tensor(a), Tensor(v), [Tensor(g.normal(size=(8, 8)))], [Tensor(g.normal(size=(8, 8)))], [eye], eye)
    np.testing.assert_array_equal(out.data, v)


def test_sequence_attention_matches_explicit_softmax():
    g = np.random.default_rng(8)
    wq, wk, wv, wo = random_projections(g, 8, 2)
    q_src, kv_src = g.normal(size=(3, 5, 8)), g.normal(size=(3, 6, 8))
    seen = []
    out = crossmodal_attention(Tensor(q_src), Tensor(kv_src), wq, wk, wv, wo, seen).data
    heads = []
    for h in range(2):
        q, k, v = q_src @ wq[h].data, kv_src @ wk[h].data, kv_src @ wv[h].data
        s = q @ k.transpose(0, 2, 1) / 2.0
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(seen[h], w, atol=1e-12)
        heads.append(w @ v)
    np.testing.assert_allclose(out, np.concatenate(heads, axis=-1) @ wo.data, atol=1e-10)


def test_attention_width_mismatch():
    g = np.random.default_rng(9)
    wq, wk, wv, wo = random_projections(g, 8, 2)
    with pytest.raises(ShapeError):
        crossmodal_attention(Tensor(np.zeros((2, 9))), Tensor(np.zeros((2, 8))), wq, wk, wv, wo)
    with pytest.raises(ShapeError):
        crossmodal_attention(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 3, 8))), wq, wk, wv, wo)


# -- forward contracts -------------------------------------------------------


@pytest.fixture(scope="module")
def default_model():
    return MMNet(ModelConfig(), seed=0)


def test_full_size_shapes(default_model):
    cfg = default_model.config
    mel, vol = inputs(cfg, batch=2)
    with no_grad():
        assert default_model.audionet(mel).shape == (2, 128)
        v_maps = default_model.video_maps(vol)
        assert v_maps.shape[1] == DEFAULT_INCEPTION[-1].out
        assert default_model.videonet(vol, maps=v_maps).shape == (2, 128)
        outs = default_model(mel, vol)
    assert len(outs) == 3
    for p in outs:
        assert p.shape == (2,)
        assert ((p.data > 0) & (p.data < 1)).all()


def test_wrong_audio_shape_names_expected(default_model):
    with pytest.raises(ShapeError, match=r"80, 601"):
        default_model.audionet(np.zeros((1, 1, 80, 600)))
    with pytest.raises(ShapeError, match=r"30, 148, 144"):
        default_model.videonet(np.zeros((1, 1, 30, 148, 140)))


def test_inception_width_is_branch_sum():
    m = MMNet(tiny(), seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 3, 4, 4)))
    w = m.config.inception[0]
    assert m.inception(0, x, False).shape == (2, w.b1 + w.b2 + w.b3 + w.b4, 3, 4, 4)


def test_zero_input_zero_features_before_dropout():
    m = MMNet(tiny(), seed=0)
    maps = m.audio_maps(np.zeros((2, 1, 8, 12)))
    assert not maps.data.any()


def test_zero_heads_give_one_half():
    m = MMNet(tiny(), seed=0)
    for name, t in m.params.items():
        if name.startswith(("shared", "branch")):
            t.data[...] = 0
    outs = m.heads(Tensor(np.random.default_rng(0).normal(size=(4, 8))))
    for p in outs:
        np.testing.assert_array_equal(p.data, 0.5)


def test_eval_mode_is_deterministic():
    cfg = tiny()
    mel, vol = inputs(cfg)
    m = MMNet(cfg, seed=3)
    a = [p.data for p in m(mel, vol)]
    b = [p.data for p in m(mel, vol)]
    c = [p.data for p in MMNet(cfg, seed=3)(mel, vol)]
    for x, y, z in zip(a, b, c):
        assert x.tobytes() == y.tobytes() == z.tobytes()


def test_seed_changes_initialisation():
    a, b = MMNet(tiny(), seed=0), MMNet(tiny(), seed=1)
    assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_train_mode_needs_rng():
    cfg = tiny()
    with pytest.raises(ValueError):
        MMNet(cfg)(*inputs(cfg), train=True)


@pytest.mark.parametrize("modality", ["audio", "video"])
def test_unimodal_variants(modality):
    cfg = tiny(modality=modality)
    m = MMNet(cfg)
    assert not any(k.startswith("attention") for k in m.params)
    mel, vol = inputs(cfg)
    outs = m(mel if modality == "audio" else None, vol if modality == "video" else None)
    assert all(p.shape == (3,) for p in outs)


# -- gradients ---------------------------------------------------------------


def total_loss(model, mel, vol, labels, rng, weights=(1.0, 1.0, 1.0)):
    outs = model(mel, vol, train=True, rng=rng)
    return global_loss([bce_loss(p, labels[:, k]) for k, p in enumerate(outs)], weights)


@pytest.mark.parametrize("mode", ["faithful", "sequence"])
def test_every_parameter_gets_a_gradient(mode):
    cfg = tiny(attention_mode=mode, precision="float64")
    m = MMNet(cfg, seed=2)
    mel, vol = inputs(cfg)
    labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]], dtype=float)
    total_loss(m, mel, vol, labels, Rng(0)).backward()
    for name, t in m.params.items():
        assert t.grad is not None, name
        assert t.grad.shape == t.shape


def test_faithful_mode_query_side_has_zero_gradient():
    # singleton softmax: the output does not depend on the query modality at all
    cfg = tiny(precision="float64")
    m = MMNet(cfg, seed=2)
    mel, vol = inputs(cfg)
    labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]], dtype=float)
    total_loss(m, mel, vol, labels, Rng(0)).backward()
    for name, t in m.params.items():
        if name.startswith(("audio.", "attention.query", "attention.key")):
            assert not t.grad.any(), name
    assert m.params["video.stem.weight"].grad.any()
    assert m.params["shared.weight"].grad.any()


def test_branch_loss_does_not_reach_other_branches():
    cfg = tiny(attention_mode="sequence", precision="float64")
    m = MMNet(cfg, seed=4)
    mel, vol = inputs(cfg)
    labels = np.ones((3, 3))
    total_loss(m, mel, vol, labels, Rng(1), weights=(0.0, 1.0, 0.0)).backward()
    for name, t in m.params.items():
        if name.startswith("branch."):
            assert t.grad.any() == ("effort" in name), name
    for trunk in ("shared.weight", "audio.block0.conv.weight", "video.stem.weight"):
        assert m.params[trunk].grad.any(), trunk


@pytest.mark.parametrize("mode", ["faithful", "sequence"])
def test_finite_differences_on_sampled_parameters(mode):
    cfg = tiny(attention_mode=mode, precision="float64")
    m = MMNet(cfg, seed=5)
    # zero biases put dead-trunk samples exactly on a ReLU kink, where central differences halve the slope
    g = np.random.default_rng(4)
    for name, t in m.params.items():
        if name.endswith(".bias"):
            t.data[...] = g.normal(scale=0.1, size=t.shape)
    mel, vol = inputs(cfg, batch=4, seed=1)
    labels = np.random.default_rng(2).integers(0, 2, size=(4, 3)).astype(float)

    def loss_value():
        with no_grad():
            return total_loss(m, mel, vol, labels, Rng(9)).data.item()

    m.zero_grad()
    total_loss(m, mel, vol, labels, Rng(9)).backward()
    coords = [(name, idx) for name, t in m.params.items() for idx in np.ndindex(t.shape)]
    pick = np.random.default_rng(3).choice(len(coords), size=50, replace=False)
    h = 1e-5
    for i in pick:
        name, idx = coords[i]
        t = m.params[name]
        analytic = t.grad[idx]
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = loss_value()
        t.data[idx] = orig - h
        down = loss_value()
        t.data[idx] = orig
        numeric = (up - down) / (2 * h)
        assert relative_error(analytic, numeric) < 1e-4, (name, idx, analytic, numeric)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny()
    m = MMNet(cfg, seed=6)
    m.norms["video.stem.bn"].running_mean[...] = 0.25
    m.save(tmp_path / "m.mmc")
    assert (tmp_path / "m.mmc").read_bytes()[:4] == b"MMC1"
    back = MMNet.load(tmp_path / "m.mmc", cfg)
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    mel, vol = inputs(cfg)
    for a, b in zip(m(mel, vol), back(mel, vol)):
        assert a.data.tobytes() == b.data.tobytes()
    names = set(read_archive(tmp_path / "m.mmc"))
    assert "branch.effort.out.weight" in names and "video.stem.bn.running_var" in names


def test_checkpoint_mismatch_lists_names(tmp_path):
    MMNet(tiny(), seed=0).save(tmp_path / "m.mmc")
    with pytest.raises(KeyError, match="audio.block2"):
        MMNet.load(tmp_path / "m.mmc", tiny(audio_channels=(2, 3, 4)))


def test_branch_order():
    names = [k for k in MMNet(tiny()).params if k.endswith(".out.weight") and k.startswith("branch")]
    assert names == [f"branch.{t}.out.weight" for t in TASKS]
