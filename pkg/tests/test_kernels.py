import os
import subprocess
import sys

import numpy as np
import pytest

from adlm import _accel, kernels

needs_numba = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")


@pytest.fixture
def tensors():
    rng = np.random.default_rng(5)
    return {
        "x": rng.random((3, 2, 9, 9)),
        "w": rng.normal(size=(4, 2, 3, 3)),
        "h": np.abs(rng.normal(scale=3, size=(3, 7, 4, 4))),
        "g": rng.normal(size=(3, 7, 4, 4)),
    }


@needs_numba
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backends_agree(tensors, stride):
    x, w = tensors["x"], tensors["w"]
    out_np = kernels.conv2d_forward_numpy(x, w, stride)
    out_nb = kernels.conv2d_forward_numba(x, w, stride)
    np.testing.assert_allclose(out_nb, out_np, rtol=1e-12, atol=1e-12)
    gout = np.random.default_rng(1).normal(size=out_np.shape)
    np.testing.assert_allclose(kernels.conv2d_backward_input_numba(gout, w, x.shape, stride),
                               kernels.conv2d_backward_input_numpy(gout, w, x.shape, stride), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(kernels.conv2d_backward_weight_numba(gout, x, 3, stride),
                               kernels.conv2d_backward_weight_numpy(gout, x, 3, stride), rtol=1e-12, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("size", [1, 3, 5, 6])
def test_lrn_backends_agree(tensors, size):
    h, g = tensors["h"], tensors["g"]
    args = (2.0, size, 0.3, 0.75)
    out_np, base_np = kernels.lrn_conv_forward_numpy(h, *args)
    out_nb, base_nb = kernels.lrn_conv_forward_numba(h, *args)
    np.testing.assert_allclose(out_nb, out_np, rtol=1e-13)
    np.testing.assert_allclose(base_nb, base_np, rtol=1e-13)
    np.testing.assert_allclose(kernels.lrn_conv_backward_numba(h, g, base_np, *args),
                               kernels.lrn_conv_backward_numpy(h, g, base_np, *args), rtol=1e-11, atol=1e-14)


def test_each_backend_is_bit_reproducible(tensors):
    x, w = tensors["x"], tensors["w"]
    a = kernels.conv2d_forward(x, w)
    b = kernels.conv2d_forward(x, w)
    assert a.tobytes() == b.tobytes()


def test_conv_against_direct_sum(tensors):
    x, w = tensors["x"], tensors["w"]
    out = kernels.conv2d_forward_numpy(x, w, 1)
    ref = np.einsum("bcij,ocij->bo", x[:, :, 2:5, 3:6], w)
    np.testing.assert_allclose(out[:, :, 2, 3], ref, rtol=1e-12)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba" if _accel.HAS_NUMBA else "numpy")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, ADLM_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from adlm._accel import backend_name; print(backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
