import numpy as np
import pytest

from dineuro.config import ModelConfig, block_names
from dineuro.errors import IncompatibleCheckpointError
from dineuro.transfer import (Checkpoint2D, fixture_checkpoint, flatten_tubular, inflate_average,
                              inflate_center, resize_pos_embed, seed_model)


def patch_conv3d(kernel, vol):
    """Stride-16 valid 3D convolution: kernel [E,C,D,16,16], vol [C,D,H,W] -> [E,H/16,W/16]."""
    e, c, d, p, _ = kernel.shape
    _, _, h, w = vol.shape
    v = vol.reshape(c, d, h // p, p, w // p, p)
    return np.einsum("ecdrs,cdirjs->eij", kernel, v)


def patch_conv2d_loop(kernel, img):
    e, c, p, _ = kernel.shape
    _, h, w = img.shape
    out = np.zeros((e, h // p, w // p))
    for o in range(e):
        for i in range(h // p):
            for j in range(w // p):
                acc = 0.0
                for ch in range(c):
                    for r in range(p):
                        for s in range(p):
                            acc += kernel[o, ch, r, s] * img[ch, i * p + r, j * p + s]
                out[o, i, j] = acc
    return out


def test_inflate_examples(rng):
    k = rng.normal(size=(2, 3, 16, 16))
    np.testing.assert_array_equal(inflate_average(k, 1)[:, :, 0], k)
    np.testing.assert_array_equal(inflate_center(k, 1)[:, :, 0], k)
    ones = inflate_average(np.ones((1, 1, 16, 16)), 5)
    assert np.all(ones == 0.2)
    c = inflate_center(k, 5)
    assert np.all(c[:, :, [0, 1, 3, 4]] == 0)
    np.testing.assert_array_equal(c[:, :, 2], k)


def test_inflate_errors(rng):
    k = rng.normal(size=(2, 3, 16, 16))
    with pytest.raises(ValueError):
        inflate_average(k, 0)
    with pytest.raises(ValueError):
        inflate_center(k, 4)
    with pytest.raises(ValueError):
        inflate_average(rng.normal(size=(2, 3, 8, 8)), 3)


def test_average_sum_preserved(rng):
    k = rng.normal(size=(4, 3, 16, 16))
    for d in (1, 3, 5, 7):
        assert inflate_average(k, d).sum() == pytest.approx(k.sum(), rel=1e-12)


def test_average_matches_2d_on_depth_constant_volume(rng):
    k = rng.normal(size=(3, 2, 16, 16))
    img = rng.normal(size=(2, 32, 48))
    vol = np.repeat(img[:, None], 5, axis=1)
    got = patch_conv3d(inflate_average(k, 5), vol)
    assert np.max(np.abs(got - patch_conv2d_loop(k, img))) <= 1e-6


def test_center_ignores_other_slices(rng):
    k = rng.normal(size=(3, 2, 16, 16))
    vol = rng.normal(size=(2, 5, 32, 32))
    base = patch_conv3d(inflate_center(k, 5), vol)
    vol2 = vol.copy()
    vol2[:, [0, 1, 3, 4]] = rng.normal(scale=100, size=(2, 4, 32, 32))
    assert np.max(np.abs(patch_conv3d(inflate_center(k, 5), vol2) - base)) <= 1e-12
    assert np.max(np.abs(base - patch_conv2d_loop(k, vol[:, 2]))) <= 1e-6


def test_flatten_index_and_sums(rng):
    k = np.zeros((1, 1, 16, 16))
    k[0, 0, 1, 2] = 3.0
    tk = flatten_tubular(k, "x")
    assert np.flatnonzero(tk.weights[0]).tolist() == [18]
    k = rng.normal(size=(4, 3, 16, 16))
    for red, fn in (("mean", np.mean), ("sum", np.sum)):
        tk = flatten_tubular(k, "y", red)
        assert tk.weights.shape == (4, 256) and tk.axis == "y" and tk.channel_reduction == red
        assert tk.weights.sum() == pytest.approx(fn(k, axis=1).sum(), rel=1e-12)


def test_flatten_inverse_map(rng):
    k = rng.normal(size=(5, 3, 16, 16))
    tk = flatten_tubular(k, "z")
    reduced = k.mean(axis=1)
    for t in range(256):
        np.testing.assert_array_equal(tk.weights[:, t], reduced[:, t // 16, t % 16])
    np.testing.assert_array_equal(tk.unflatten(), reduced)


def test_flatten_rejects_bad_kernel(rng):
    with pytest.raises(ValueError):
        flatten_tubular(rng.normal(size=(2, 3, 8, 8)), "x")
    with pytest.raises(ValueError):
        flatten_tubular(rng.normal(size=(2, 3, 16, 16)), "w")


def _cfg(strategy, **kw):
    base = dict(embed_dim=8, layers=2, heads=1, block=(5, 48, 48), strategy=strategy)
    base.update(kw)
    return ModelConfig(**base)


def test_seed_model_copy_path():
    ck = fixture_checkpoint(tokens=9)
    p = seed_model(ck, _cfg("center"))
    for i in range(2):
        for n in block_names(i):
            assert p[n].tobytes() == ck.tensors[n].tobytes()
    assert p["final_ln.g"].tobytes() == ck.tensors["final_ln.g"].tobytes()
    assert p["pos.embed"].tobytes() == ck.pos_embed.tobytes()
    np.testing.assert_array_equal(p["patch.kernel3d"], inflate_center(ck.patch_kernel, 5))


def test_pos_embed_endpoints_preserved(rng):
    pe = rng.normal(size=(6, 4))
    out = resize_pos_embed(pe, (1, 12))
    assert out.shape == (12, 4)
    np.testing.assert_array_equal(out[0], pe[0])
    np.testing.assert_array_equal(out[-1], pe[-1])
    sq = rng.normal(size=(9, 4))
    g = resize_pos_embed(sq, (6, 6)).reshape(6, 6, 4)
    s = sq.reshape(3, 3, 4)
    for (a, b), (c, d) in [((0, 0), (0, 0)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0)),
                           ((-1, -1), (-1, -1))]:
        np.testing.assert_array_equal(g[a, b], s[c, d])


def test_tubular_cross_check():
    ck = fixture_checkpoint()
    p = seed_model(ck, _cfg("tubular"))
    for ax in "zyx":
        np.testing.assert_array_equal(p[f"tube.{ax}.w"], flatten_tubular(ck.patch_kernel, ax).weights)
    assert np.all(p["offset.w"] == 0)


def test_seed_model_deterministic():
    ck = fixture_checkpoint(tokens=4)
    a = seed_model(ck, _cfg("average"), seed=3)
    b = seed_model(ck, _cfg("average"), seed=3)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_embed_dim_mismatch_lists_tensors():
    ck = fixture_checkpoint(embed_dim=8)
    with pytest.raises(IncompatibleCheckpointError) as exc:
        seed_model(ck, _cfg("center", embed_dim=16, heads=1))
    assert "patch.kernel" in exc.value.names
    assert "block0.attn.q" in exc.value.names


def test_too_many_layers():
    ck = fixture_checkpoint(layers=1)
    with pytest.raises(IncompatibleCheckpointError) as exc:
        seed_model(ck, _cfg("center", layers=2))
    assert "block1.attn.q" in exc.value.names


def test_random_strategy_rejects_checkpoint():
    with pytest.raises(ValueError):
        seed_model(fixture_checkpoint(), _cfg("random"))


def test_checkpoint_archive_round_trip(tmp_path):
    ck = fixture_checkpoint()
    ck.save(tmp_path / "ck.dtna")
    back = Checkpoint2D.load(tmp_path / "ck.dtna")
    assert back.header == ck.header
    assert all(back.tensors[k].tobytes() == ck.tensors[k].tobytes() for k in ck.tensors)


def test_checkpoint_missing_tensor():
    t = dict(fixture_checkpoint().tensors)
    del t["block1.mlp.fc2"]
    with pytest.raises(IncompatibleCheckpointError) as exc:
        Checkpoint2D.from_tensors(t)
    assert exc.value.names == ["block1.mlp.fc2"]
