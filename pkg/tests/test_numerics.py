import numpy as np
import pytest
from hypothesis import given, strategies as st

from fastsearch.numerics import (
    Superkernel,
    Tensor,
    bilinear_matrix,
    conv2d,
    finite_diff_check,
    instance_norm,
    kl_distill,
    load_weights,
    mean_iou,
    no_grad,
    ohem_cross_entropy,
    op_forward,
    parameter,
    pixel_cross_entropy,
    resize,
    save_weights,
)
from fastsearch.numerics.losses import confusion
from fastsearch.numerics.ops import SEARCHABLE_KINDS, channels
from fastsearch.numerics.tensor import einsum, log_softmax, softmax, stop_gradient, where_mask


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3),
    h=st.integers(2, 6), w=st.integers(2, 6), k=st.sampled_from([1, 3]),
    stride=st.sampled_from([1, 2]), seed=st.integers(0, 10_000),
)
def test_conv2d_matches_direct_loop(n, c, o, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x, wt = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k))
    got = conv2d(Tensor(x), Tensor(wt), stride=stride).data
    np.testing.assert_allclose(got, naive_conv(x, wt, stride, k // 2), atol=1e-12)


def test_conv2d_impulse_reproduces_flipped_kernel():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(w)).data[0, 0, 1:4, 1:4]
    np.testing.assert_array_equal(out, w[0, 0, ::-1, ::-1])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride):
    rng = np.random.default_rng(0)
    x, w = parameter(rng.normal(size=(2, 2, 4, 4))), parameter(rng.normal(size=(3, 2, 3, 3)))
    err = finite_diff_check(lambda: (conv2d(x, w, stride) * conv2d(x, w, stride)).sum(), [x, w])
    assert err < 1e-5


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))


@given(n_in=st.integers(1, 12), n_out=st.integers(1, 24))
def test_bilinear_rows_are_convex_weights(n_in, n_out):
    a = bilinear_matrix(n_in, n_out)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)
    assert (a >= 0).all()


def test_resize_keeps_constants_and_identity():
    x = Tensor(np.full((1, 2, 3, 5), 2.5))
    np.testing.assert_allclose(resize(x, (12, 20)).data, 2.5)
    assert resize(x, (3, 5)) is x


def test_resize_gradient():
    x = parameter(np.random.default_rng(1).normal(size=(1, 1, 3, 4)))
    weights = np.random.default_rng(2).normal(size=(1, 1, 6, 8))
    assert finite_diff_check(lambda: (resize(x, (6, 8)) * weights).sum(), [x]) < 1e-6


def test_instance_norm_statistics_and_gradient():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(2.0, 3.0, size=(2, 3, 4, 5)))
    y = instance_norm(x).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-5)
    weights = rng.normal(size=y.shape)
    assert finite_diff_check(lambda: (instance_norm(x) * weights).sum(), [x]) < 1e-5


def test_softmax_family_and_einsum_gradients():
    rng = np.random.default_rng(4)
    a, b = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))
    c = rng.normal(size=(3, 4))
    assert finite_diff_check(lambda: (softmax(a) * c).sum(), [a]) < 1e-6
    assert finite_diff_check(lambda: (log_softmax(a) * c).sum(), [a]) < 1e-6
    assert finite_diff_check(lambda: einsum("ij,jk->ik", a, b).sum(), [a, b]) < 1e-6


def test_where_mask_blocks_gradient_and_stop_gradient():
    a = parameter(np.array([1.0, 2.0, 3.0]))
    mask = np.array([True, False, True])
    y = softmax(where_mask(a, mask, -np.inf))
    assert y.data[1] == 0.0
    (y * np.array([1.0, 5.0, -1.0])).sum().backward()
    assert a.grad[1] == 0.0
    b = parameter(np.array([2.0]))
    (stop_gradient(b) * b).sum().backward()
    np.testing.assert_allclose(b.grad, [2.0])


def test_no_grad_builds_no_graph():
    a = parameter(np.ones(3))
    with no_grad():
        y = (a * 2.0).sum()
    assert not y.requires_grad


def _ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]


def test_ohem_full_keep_is_mean_cross_entropy():
    rng = np.random.default_rng(5)
    logits, labels = rng.normal(size=(2, 3, 4, 4)), rng.integers(0, 3, size=(2, 4, 4))
    got = ohem_cross_entropy(Tensor(logits), labels, 1.0).item()
    assert got == pytest.approx(_ce(logits, labels).mean(), rel=1e-12)


def test_ohem_four_pixels_keeps_two_hardest():
    logits = np.array([[[[2.0, 0.0], [0.5, -1.0]], [[0.0, 1.0], [0.0, 2.0]]]])  # (1,2,2,2)
    labels = np.array([[[0, 0], [1, 1]]])
    per = _ce(logits, labels).ravel()
    expected = np.sort(per)[-2:].mean()
    assert ohem_cross_entropy(Tensor(logits), labels, 0.5).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("keep", [0.0, 1.5])
def test_ohem_rejects_bad_fraction(keep):
    with pytest.raises(ValueError):
        ohem_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2), int), keep)


def test_ohem_and_kl_gradients():
    rng = np.random.default_rng(6)
    s = parameter(rng.normal(size=(1, 3, 3, 3)))
    t = Tensor(rng.normal(size=(1, 3, 3, 3)))
    labels = rng.integers(0, 3, size=(1, 3, 3))
    assert finite_diff_check(lambda: ohem_cross_entropy(s, labels, 0.5), [s]) < 1e-5
    assert finite_diff_check(lambda: kl_distill(s, t), [s]) < 1e-5


@given(seed=st.integers(0, 1000))
def test_kl_is_zero_only_for_equal_distributions(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(1, 3, 2, 2))
    assert kl_distill(Tensor(a), Tensor(a)).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_distill(Tensor(a), Tensor(a + rng.normal(size=a.shape))).item() > 0


def test_pixel_cross_entropy_shape_check():
    with pytest.raises(ValueError):
        pixel_cross_entropy(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 2, 2), int))


def test_mean_iou_hand_example():
    pred = np.array([0, 0, 1, 1])
    true = np.array([0, 1, 1, 1])
    conf = confusion(pred, true, 3)
    # class 0: tp 1, union 2; class 1: tp 2, union 3; class 2 absent
    assert mean_iou(conf) == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_weight_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    save_weights(tmp_path / "w", arrays)
    back = load_weights(tmp_path / "w")
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


@pytest.mark.parametrize("kind", SEARCHABLE_KINDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_operator_output_shapes(kind, stride):
    rng = np.random.default_rng(7)
    k = Superkernel.init(kind, 4, 6, stride, rng)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    y = op_forward(kind, x, k, 6, stride)
    assert y.shape == (2, 6, 8 // stride, 8 // stride)


def test_superkernel_slices_are_prefixes():
    k = Superkernel.init("conv3x3_x2", 4, 6, 1, np.random.default_rng(8))
    views = k.slice(2, 3)
    assert views[0].shape == (3, 2, 3, 3) and views[1].shape == (3, 3, 3, 3)
    assert np.shares_memory(views[0], k.units[0].weight.data)
    np.testing.assert_array_equal(views[1], k.units[1].weight.data[:3, :3])


def test_operator_rejects_oversized_width():
    k = Superkernel.init("conv3x3", 2, 2, 1, np.random.default_rng(9))
    with pytest.raises(ValueError):
        op_forward("conv3x3", Tensor(np.zeros((1, 2, 4, 4))), k, 3)


def test_channels_pads_and_truncates():
    x = Tensor(np.ones((1, 2, 2, 2)))
    assert channels(x, 3).data[:, 2].sum() == 0
    assert channels(x, 1).shape == (1, 1, 2, 2)
