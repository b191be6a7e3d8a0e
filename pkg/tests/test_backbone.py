"""Stem, residual blocks, relative position logits and grid self-attention."""

import math

import numpy as np
import pytest

from btranspose.backbone import MHSA2d, Bottleneck, Stem, relative_logits
from btranspose.tensor import ShapeError, Tensor, no_grad


def brute_rel_logits(q, th, tw, h, w):
    """logit[p, p'] = q[p] . (th[i' - i + h - 1] + tw[j' - j + w - 1]), one pair at a time."""
    length = h * w
    out = np.zeros(q.shape[:-2] + (length, length))
    for p in range(length):
        i, j = divmod(p, w)
        for pp in range(length):
            ii, jj = divmod(pp, w)
            emb = th[ii - i + h - 1] + tw[jj - j + w - 1]
            out[..., p, pp] = q[..., p, :] @ emb
    return out


def test_stem_shape():
    stem = Stem(64, np.random.default_rng(0)).eval()
    with no_grad():
        assert stem(Tensor(np.zeros((1, 3, 256, 192), dtype=np.float32))).shape == (1, 64, 64, 48)


def test_stem_zero_image_gives_zero():
    stem = Stem(8, np.random.default_rng(0)).eval()
    y = stem(Tensor(np.zeros((1, 3, 32, 24))))
    assert np.all(y.data == 0.0)


def test_stem_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        Stem(8, np.random.default_rng(0))(Tensor(np.zeros((1, 1, 32, 24))))


def test_downsampling_block_shape():
    blk = Bottleneck(256, 96, 2, np.random.default_rng(0)).eval()
    with no_grad():
        assert blk(Tensor(np.zeros((1, 256, 64, 48), dtype=np.float32))).shape == (1, 384, 32, 24)


def test_block_with_zero_residual_branch_is_relu(rng):
    blk = Bottleneck(16, 4, 1, rng).eval()
    blk.conv3.weight.data[:] = 0.0
    x = rng.normal(size=(2, 16, 5, 4))
    np.testing.assert_allclose(blk(Tensor(x)).data, np.maximum(x, 0.0), atol=1e-6)


def test_group1_block_parameter_hand_count():
    rng = np.random.default_rng(0)
    first = Bottleneck(64, 64, 1, rng)
    later = Bottleneck(256, 64, 1, rng)
    w, out = 64, 256

    def body(cin):
        return cin * w + 2 * w + w * w * 9 + 2 * w + w * out + 2 * out

    assert sum(p.size for p in later.parameters()) == body(256)
    assert sum(p.size for p in first.parameters()) == body(64) + 64 * out + 2 * out


def test_block_channel_check():
    with pytest.raises(ShapeError):
        Bottleneck(16, 4, 1, np.random.default_rng(0))(Tensor(np.zeros((1, 8, 4, 4))))


# -- relative position logits ------------------------------------------------------

def test_relative_logits_zero_query(rng):
    q = Tensor(np.zeros((2, 12, 5)))
    out = relative_logits(q, Tensor(rng.normal(size=(7, 5))), Tensor(rng.normal(size=(5, 5))), 4, 3)
    assert np.all(out.data == 0.0)


@pytest.mark.parametrize("h,w", [(2, 2), (4, 3), (3, 5)])
def test_relative_logits_brute_force(f64, rng, h, w):
    q = rng.normal(size=(2, h * w, 4))
    th, tw = rng.normal(size=(2 * h - 1, 4)), rng.normal(size=(2 * w - 1, 4))
    got = relative_logits(Tensor(q), Tensor(th), Tensor(tw), h, w).data
    np.testing.assert_allclose(got, brute_rel_logits(q, th, tw, h, w), atol=1e-6)


def test_relative_logits_offset_only_exhaustive(rng):
    h, w = 4, 3
    row = rng.normal(size=4)
    q = np.tile(row, (h * w, 1))
    got = relative_logits(Tensor(q), Tensor(rng.normal(size=(7, 4))), Tensor(rng.normal(size=(5, 4))), h, w).data
    by_offset = {}
    for p in range(h * w):
        for pp in range(h * w):
            off = (pp // w - p // w, pp % w - p % w)
            by_offset.setdefault(off, set()).add(got[p, pp].tobytes())
    assert len(by_offset) == (2 * h - 1) * (2 * w - 1)
    assert all(len(v) == 1 for v in by_offset.values())


def test_relative_logits_grid_mismatch(rng):
    with pytest.raises(ShapeError):
        relative_logits(Tensor(np.zeros((10, 4))), Tensor(np.zeros((7, 4))), Tensor(np.zeros((5, 4))), 4, 3)


# -- MHSA ---------------------------------------------------------------------------

def test_mhsa_shape_and_rows():
    m = MHSA2d(256, 4, (32, 24), np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 256, 32, 24)).astype(np.float32))
    with no_grad():
        y = m(x)
    assert y.shape == (1, 256, 32, 24)
    assert m.attention.shape == (1, 4, 768, 768)
    np.testing.assert_allclose(m.attention.sum(axis=-1), 1.0, atol=1e-5)
    assert m.attention.min() >= 0


def test_mhsa_zero_values(rng):
    m = MHSA2d(8, 2, (3, 2), rng)
    m.v.weight.data[:] = 0.0
    assert np.all(m(Tensor(rng.normal(size=(2, 8, 3, 2)))).data == 0.0)


def test_mhsa_single_head_hand_unrolled(f64, rng):
    c, h, w = 3, 2, 2
    m = MHSA2d(c, 1, (h, w), rng)
    x = rng.normal(size=(1, c, h, w))
    got = m(Tensor(x)).data[0]
    wq, wk, wv = (m.q.weight.data[:, :, 0, 0], m.k.weight.data[:, :, 0, 0], m.v.weight.data[:, :, 0, 0])
    th, tw = m.table_h.data, m.table_w.data
    cells = [(i, j) for i in range(h) for j in range(w)]
    feats = [x[0, :, i, j] for i, j in cells]
    want = np.zeros((c, h, w))
    for p, (i, j) in enumerate(cells):
        qv = wq @ feats[p]
        logits = []
        for pp, (ii, jj) in enumerate(cells):
            kv = wk @ feats[pp]
            logits.append((qv @ kv + qv @ (th[ii - i + h - 1] + tw[jj - j + w - 1])) / math.sqrt(c))
        e = np.exp(np.array(logits) - max(logits))
        a = e / e.sum()
        want[:, i, j] = sum(a[pp] * (wv @ feats[pp]) for pp in range(len(cells)))
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_mhsa_heads_must_divide():
    with pytest.raises(ShapeError):
        MHSA2d(10, 4, (2, 2), np.random.default_rng(0))


def test_mhsa_block_zero_path_is_relu_of_shortcut(rng):
    blk = Bottleneck(8, 4, 1, rng, heads=2, grid=(4, 3)).eval()
    blk.mhsa.v.weight.data[:] = 0.0
    x = rng.normal(size=(1, 8, 4, 3))
    shortcut = blk.proj_bn(blk.proj(Tensor(x))).data
    np.testing.assert_allclose(blk(Tensor(x)).data, np.maximum(shortcut, 0.0), atol=1e-6)


def test_mhsa_block_rows_stochastic(rng):
    blk = Bottleneck(8, 4, 1, rng, heads=2, grid=(4, 3))
    blk(Tensor(rng.normal(size=(3, 8, 4, 3))))
    np.testing.assert_allclose(blk.mhsa.attention.sum(axis=-1), 1.0, atol=1e-5)
