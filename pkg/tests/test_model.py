"""Encoder, heads, EMA schedule and checkpoint container."""

import numpy as np
import pytest

import ace.model as model
import ace.tensor as tz
from ace.errors import FormatError, ParameterError, ShapeError
from ace.model import EncoderConfig, encode, encode_batch, init
from ace.tensor import Tape, Tensor, backward


def test_config_validation():
    EncoderConfig(K=8, T=4, H0=16, depth=0)
    with pytest.raises(ParameterError):
        EncoderConfig(K=8, T=5, H0=20)  # odd T
    with pytest.raises(ParameterError):
        EncoderConfig(K=8, T=4, H0=18)  # H0 not divisible by T
    with pytest.raises(ParameterError):
        EncoderConfig(K=0, T=4, H0=16)


def test_init_deterministic_and_teacher_copies(tiny_cfg):
    a = init(tiny_cfg, np.random.default_rng(0))
    b = init(tiny_cfg, np.random.default_rng(0))
    for name in a.student:
        assert np.array_equal(a.student[name].data, b.student[name].data)
        assert np.array_equal(a.student[name].data, a.teacher[name])
        assert a.teacher[name] is not a.student[name].data
    assert np.all(a.center == 0)


def test_encode_token_map_shape(tiny_state):
    cfg = tiny_state.config
    img = np.random.default_rng(1).random((cfg.H0, cfg.H0))
    out = encode(cfg, tiny_state.student, img)
    assert out.data.shape == (cfg.n_tokens, cfg.K)
    with pytest.raises(ShapeError):
        encode(cfg, tiny_state.student, img[:8, :8])


def test_encode_batch_matches_encode(tiny_state):
    cfg = tiny_state.config
    rng = np.random.default_rng(2)
    imgs = rng.random((3, cfg.H0, cfg.H0))
    arrays = {n: t.data for n, t in tiny_state.student.items()}
    batched = encode_batch(cfg, arrays, imgs)
    for i in range(3):
        single = encode(cfg, tiny_state.student, imgs[i]).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_depth_zero_is_linear_embed(tiny_cfg):
    cfg = EncoderConfig(K=8, T=4, H0=16, depth=0)
    state = init(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).random((16, 16))
    out = encode(cfg, state.student, img)
    patches = img.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
    expect = patches @ state.student["embed.w"].data + state.student["embed.b"].data
    assert np.allclose(out.data, expect)


def test_patch_order_is_row_major(tiny_cfg):
    cfg = EncoderConfig(K=1, T=4, H0=8, depth=0)
    state = init(cfg, np.random.default_rng(0))
    # embedding that sums the patch makes token i the sum of patch i
    state.student["embed.w"].data[:] = 1.0
    state.student["embed.b"].data[:] = 0.0
    img = np.arange(64, dtype=float).reshape(8, 8)
    out = encode(cfg, state.student, img).data.reshape(4, 4)
    for r in range(4):
        for c in range(4):
            assert out[r, c] == img[2 * r:2 * r + 2, 2 * c:2 * c + 2].sum()


def test_compose_gather_against_reference(tiny_state):
    cfg = tiny_state.config
    t = cfg.T
    idx = model._compose_gather(t)
    # independent reference: block (br, bc) owns rows in its 2x2 footprint
    for block in range(t * t // 4):
        br, bc = divmod(block, t // 2)
        quad = idx[4 * block:4 * block + 4]
        expect = [2 * br * t + 2 * bc, 2 * br * t + 2 * bc + 1,
                  (2 * br + 1) * t + 2 * bc, (2 * br + 1) * t + 2 * bc + 1]
        assert list(quad) == expect


def test_decompose_scatter_against_reference():
    t = 4
    perm = model._decompose_scatter(t)
    for rr in range(2 * t):
        for cc in range(2 * t):
            src_token = (rr // 2) * t + (cc // 2)
            sub = (rr % 2) * 2 + (cc % 2)
            assert perm[rr * 2 * t + cc] == 4 * src_token + sub


def test_head_shapes_and_grad_flow(tiny_state):
    cfg = tiny_state.config
    n, k = cfg.n_tokens, cfg.K
    img = np.random.default_rng(0).random((cfg.H0, cfg.H0))
    with Tape():
        tokens = encode(cfg, tiny_state.student, img)
        comp = model.compose_head(cfg, tiny_state.student, tokens)
        dec = model.decompose_head(cfg, tiny_state.student, tokens)
        assert comp.data.shape == (n // 4, k)
        assert dec.data.shape == (4 * n, k)
        loss = tz.add(tz.tensor_sum(comp), tz.tensor_sum(dec))
        backward(loss)
    assert tiny_state.student["comp.w1"].grad is not None
    assert tiny_state.student["decomp.w2"].grad is not None
    assert tiny_state.student["embed.w"].grad is not None


def test_teacher_gets_no_gradients(tiny_state):
    cfg = tiny_state.config
    img = np.random.default_rng(0).random((cfg.H0, cfg.H0))
    t_out = encode_batch(cfg, tiny_state.teacher, img)[0]
    with Tape() as tape:
        s_out = encode(cfg, tiny_state.student, img)
        z = tz.matmul(Tensor(t_out), tz.transpose(s_out))
        backward(tz.tensor_sum(z))
    assert len(tape) == 0
    assert tiny_state.student["embed.w"].grad is not None


def test_ema_lambda_endpoints():
    assert model.ema_lambda(0, 1000) == pytest.approx(0.996, abs=0)
    assert model.ema_lambda(1000, 1000) == pytest.approx(1.0, abs=0)
    assert model.ema_lambda(500, 1000) == pytest.approx(0.998, abs=1e-15)
    with pytest.raises(ParameterError):
        model.ema_lambda(-1, 1000)
    with pytest.raises(ParameterError):
        model.ema_lambda(0, 0)


def test_ema_update_convex_combination(tiny_state):
    before = {n: a.copy() for n, a in tiny_state.teacher.items()}
    for t in tiny_state.student.values():
        t.data += 1.0
    model.ema_update(tiny_state, 0.75)
    for name, arr in tiny_state.teacher.items():
        expect = 0.75 * before[name] + 0.25 * tiny_state.student[name].data
        assert np.allclose(arr, expect, atol=1e-15)
    # rate 1 freezes the teacher
    frozen = {n: a.copy() for n, a in tiny_state.teacher.items()}
    model.ema_update(tiny_state, 1.0)
    for name, arr in tiny_state.teacher.items():
        assert np.array_equal(arr, frozen[name])
    with pytest.raises(ParameterError):
        model.ema_update(tiny_state, 1.5)


def test_checkpoint_roundtrip_bit_exact(tiny_state, tmp_path):
    tiny_state.center[:] = np.random.default_rng(4).normal(size=tiny_state.config.K)
    tiny_state.step = 17
    path = tmp_path / "state.ace"
    model.save_state(path, tiny_state, extra={"note": "x"},
                     extra_arrays={"aux": np.arange(3.0)})
    loaded, extra, extra_arrays = model.load_state(path)
    assert loaded.config == tiny_state.config
    assert loaded.step == 17
    assert extra == {"note": "x"}
    assert np.array_equal(extra_arrays["aux"], np.arange(3.0))
    assert np.array_equal(loaded.center, tiny_state.center)
    for name in tiny_state.student:
        assert np.array_equal(loaded.student[name].data, tiny_state.student[name].data)
        assert np.array_equal(loaded.teacher[name], tiny_state.teacher[name])
        assert loaded.student[name].requires_grad


def test_checkpoint_rejects_corruption(tiny_state, tmp_path):
    path = tmp_path / "state.ace"
    model.save_state(path, tiny_state)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ace"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        model.load_state(bad)
    trunc = tmp_path / "trunc.ace"
    trunc.write_bytes(raw[:len(raw) - 100])
    with pytest.raises(FormatError):
        model.load_state(trunc)
