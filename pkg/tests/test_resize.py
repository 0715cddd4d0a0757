import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiogan.resize import lanczos_kernel, lanczos_resize, output_size, resize_to
from angiogan.tensor import Tensor


def direct_lanczos_1d(signal, n_out, a=3):
    """Windowed-sinc sum written out per output sample, edges clamped."""
    n_in = len(signal)
    scale = n_out / n_in
    support = max(1.0, 1.0 / scale)
    out = np.zeros(n_out)
    for i in range(n_out):
        centre = (i + 0.5) / scale - 0.5
        total, norm = 0.0, 0.0
        for j in range(int(np.floor(centre - a * support)), int(np.ceil(centre + a * support)) + 1):
            t = (j - centre) / support
            wgt = np.sinc(t) * np.sinc(t / a) if abs(t) < a else 0.0
            total += wgt * signal[min(max(j, 0), n_in - 1)]
            norm += wgt
        out[i] = total / norm
    return out


def direct_lanczos_2d(img, ho, wo):
    rows = np.stack([direct_lanczos_1d(r, wo) for r in img])
    return np.stack([direct_lanczos_1d(c, ho) for c in rows.T]).T


def test_downsample_matches_direct_summation(rng):
    img = rng.normal(size=(16, 16))
    got = lanczos_resize(Tensor(img[None, None]), 0.5).data[0, 0]
    np.testing.assert_allclose(got, direct_lanczos_2d(img, 8, 8), atol=1e-4)


def test_upsample_matches_direct_summation(rng):
    img = rng.normal(size=(6, 5))
    got = resize_to(img[None, None], 12, 10)[0, 0]
    np.testing.assert_allclose(got, direct_lanczos_2d(img, 12, 10), atol=1e-4)


def test_full_scale_geometry():
    assert lanczos_resize(np.zeros((1, 3, 512, 512), np.float32), 0.5).shape == (1, 3, 256, 256)


@given(st.sampled_from([0.25, 0.5, 0.75, 1.5, 2.0]), st.integers(4, 20))
def test_constant_images_stay_constant(factor, n):
    out = lanczos_resize(np.full((1, 1, n, n + 3), 0.7, np.float32), factor).data
    assert out.shape[-2:] == (output_size(n, factor), output_size(n + 3, factor))
    np.testing.assert_allclose(out, 0.7, atol=1e-5)


def test_identity_factor(rng):
    x = rng.normal(size=(1, 2, 7, 9)).astype(np.float32)
    assert np.array_equal(lanczos_resize(x, 1.0).data, x)


def test_kernel_values():
    assert lanczos_kernel(0.0) == 1.0
    np.testing.assert_allclose(lanczos_kernel(np.array([1.0, 2.0, -1.0, 3.0, 4.0])), 0.0, atol=1e-12)


def test_result_is_not_differentiable(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
    assert not lanczos_resize(x, 0.5).requires_grad


def test_errors():
    with pytest.raises(ValueError):
        lanczos_resize(np.zeros((1, 1, 4, 4)), 0.0)
    with pytest.raises(ValueError):
        lanczos_resize(np.zeros((1, 1, 4, 4)), 0.01)
