import numpy as np
import pytest
from scipy.signal import lfilter

from hdcam.tensor import _fallback, backend

needs_compiled = pytest.mark.skipif(backend.compiled is None, reason="compiled extension not built")


def _conv_case(rng, dtype, groups, stride):
    B, L, Cin, Cout, K = 2, 17, 8, 8 if groups > 1 else 6, 3
    xp = rng.standard_normal((B, L, Cin)).astype(dtype)
    w = rng.standard_normal((K, Cin // groups, Cout)).astype(dtype)
    b = rng.standard_normal(Cout).astype(dtype)
    return xp, w, b


@pytest.mark.parametrize("groups,stride", [(1, 1), (1, 2), (2, 1), (8, 1), (8, 2)])
def test_conv_forward_backward_agree_with_numpy_definition(kernel_backend, groups, stride):
    rng = np.random.default_rng(groups * 10 + stride)
    xp, w, b = _conv_case(rng, np.float64, groups, stride)
    k = backend.kernels
    y = k.conv1d_forward(xp, w, b, stride, groups)
    K, cig, Cout = w.shape
    cog = Cout // groups
    Lout = (xp.shape[1] - K) // stride + 1
    ref = np.zeros((xp.shape[0], Lout, Cout)) + b
    for g in range(groups):
        for kk in range(K):
            seg = xp[:, kk:kk + stride * (Lout - 1) + 1:stride, g * cig:(g + 1) * cig]
            ref[..., g * cog:(g + 1) * cog] += seg @ w[kk, :, g * cog:(g + 1) * cog]
    np.testing.assert_allclose(y, ref, atol=1e-12)

    gout = rng.standard_normal(y.shape)
    dxp, dw, db = k.conv1d_backward(xp, w, gout, stride, groups)
    np.testing.assert_allclose(db, gout.sum(axis=(0, 1)), atol=1e-12)
    # adjoint identity: <gout, conv(x)> is linear in x and in w
    np.testing.assert_allclose(np.sum(dxp * xp), np.sum(gout * (y - b)), rtol=1e-10)
    np.testing.assert_allclose(np.sum(dw * w), np.sum(gout * (y - b)), rtol=1e-10)


@needs_compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
@pytest.mark.parametrize("groups,stride", [(1, 1), (1, 10), (4, 2), (8, 1)])
def test_compiled_matches_fallback(dtype, tol, groups, stride):
    rng = np.random.default_rng(7)
    xp, w, b = _conv_case(rng, dtype, groups, stride)
    c, p = backend.compiled, _fallback
    np.testing.assert_allclose(c.conv1d_forward(xp, w, b, stride, groups),
                               p.conv1d_forward(xp, w, b, stride, groups), rtol=tol, atol=tol)
    np.testing.assert_allclose(c.conv1d_forward(xp, w, None, stride, groups),
                               p.conv1d_forward(xp, w, None, stride, groups), rtol=tol, atol=tol)
    gout = rng.standard_normal(p.conv1d_forward(xp, w, b, stride, groups).shape).astype(dtype)
    for a, r in zip(c.conv1d_backward(xp, w, gout, stride, groups), p.conv1d_backward(xp, w, gout, stride, groups)):
        np.testing.assert_allclose(a, r, rtol=tol, atol=tol)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_iir_matches_lfilter(kernel_backend, dtype):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((500, 3)).astype(dtype)
    b0, b1, a1 = 0.2, 0.2, -0.6
    got = backend.kernels.iir1_filter(x, b0, b1, a1)
    ref = lfilter([b0, b1], [1.0, a1], x.astype(np.float64), axis=0)
    np.testing.assert_allclose(got, ref, rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-6 if dtype == np.float32 else 1e-13)


def test_backend_switch_roundtrip():
    start = backend.name()
    backend.use("python")
    assert backend.kernels is _fallback
    backend.use(start)
    assert backend.name() == start
    with pytest.raises(ValueError):
        backend.use("gpu")
