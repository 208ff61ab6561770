import numpy as np
import pytest

from gpsft import kernels
from gpsft import _kernels_np as knp
from gpsft.errors import ConfigError

HAVE_COMPILED = "compiled" in kernels.available_backends()
needs_compiled = pytest.mark.skipif(not HAVE_COMPILED, reason="compiled backend not built")


def _agree(a, b, tol=1e-12):
    return float(np.max(np.abs(a - b))) <= tol * max(1.0, float(np.max(np.abs(b))))


@needs_compiled
def test_backends_agree_matmul(rng):
    kc = kernels.get_backend("compiled")
    for _ in range(20):
        m, k, n = rng.integers(1, 12, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        g = rng.standard_normal((m, n))
        assert _agree(kc.matmul(a, b), knp.matmul(a, b))
        assert _agree(kc.matmul_grad_a(g, b), knp.matmul_grad_a(g, b))
        assert _agree(kc.matmul_grad_b(a, g), knp.matmul_grad_b(a, g))


@needs_compiled
def test_backends_agree_bmm(rng):
    kc = kernels.get_backend("compiled")
    for _ in range(20):
        bsz, m, k, n = rng.integers(1, 7, size=4)
        a = rng.standard_normal((bsz, m, k))
        b = rng.standard_normal((bsz, k, n))
        g = rng.standard_normal((bsz, m, n))
        assert _agree(kc.bmm(a, b), knp.bmm(a, b))
        assert _agree(kc.bmm_grad_a(g, b), knp.bmm_grad_a(g, b))
        assert _agree(kc.bmm_grad_b(a, g), knp.bmm_grad_b(a, g))


@needs_compiled
def test_backends_agree_conv2d(rng):
    kc = kernels.get_backend("compiled")
    for _ in range(12):
        n, ci, co = rng.integers(1, 4, size=3)
        h = int(rng.integers(4, 9))
        w = int(rng.integers(4, 9))
        kh = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.standard_normal((n, ci, h, w))
        k = rng.standard_normal((co, ci, kh, kh))
        out = knp.conv2d_forward(x, k, stride, pad)
        assert _agree(kc.conv2d_forward(x, k, stride, pad), out)
        g = rng.standard_normal(out.shape)
        assert _agree(
            kc.conv2d_grad_input(g, k, x.shape, stride, pad),
            knp.conv2d_grad_input(g, k, x.shape, stride, pad),
        )
        assert _agree(
            kc.conv2d_grad_kernel(g, x, k.shape, stride, pad),
            knp.conv2d_grad_kernel(g, x, k.shape, stride, pad),
        )


def test_conv2d_matches_direct_sum(rng):
    """Tiny conv against an explicit quadruple loop."""
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    stride, pad = 2, 1
    got = knp.conv2d_forward(x, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    want = np.zeros_like(got)
    for n in range(2):
        for co in range(3):
            for oh in range(got.shape[2]):
                for ow in range(got.shape[3]):
                    patch = xp[n, :, oh * stride : oh * stride + 3, ow * stride : ow * stride + 3]
                    want[n, co, oh, ow] = np.sum(patch * k[co])
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_grads_match_definition(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    g = rng.standard_normal((4, 5))
    assert np.allclose(knp.matmul_grad_a(g, b), g @ b.T)
    assert np.allclose(knp.matmul_grad_b(a, g), a.T @ g)


def test_deterministic_repeat(rng):
    # same inputs twice -> bitwise same outputs, both backends
    a = rng.standard_normal((9, 7))
    b = rng.standard_normal((7, 5))
    for name in kernels.available_backends():
        kb = kernels.get_backend(name)
        assert np.array_equal(kb.matmul(a, b), kb.matmul(a.copy(), b.copy()))


def test_readonly_inputs_accepted(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    a.setflags(write=False)
    b.setflags(write=False)
    for name in kernels.available_backends():
        out = kernels.get_backend(name).matmul(a, b)
        assert np.allclose(out, np.asarray(a) @ np.asarray(b))


def test_backend_selection_env(rng):
    assert kernels.BACKEND in kernels.available_backends()
    with pytest.raises(ConfigError):
        kernels.get_backend("fortran")
