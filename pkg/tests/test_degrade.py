import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivrlab.autodiff import Tensor
from ivrlab.degrade import (Measurement, OperatorSpec, apply_adjoint,
                            apply_forward, bilinear_upsample,
                            data_fidelity_loss, data_fidelity_t,
                            forward_noiseless, gaussian_kernel,
                            latent_footprint_mask, make_mask)
from ivrlab.errors import ConfigError, ShapeError
from ivrlab.synthvideo import SceneSpec, render_clip

RNG = np.random.default_rng(42)


def random_clip(T=6, H=16, W=16, C=1, rng=RNG):
    return rng.uniform(0.0, 1.0, size=(T, H, W, C))


ALL_OPS = [
    OperatorSpec(kind="identity"),
    OperatorSpec(kind="inpaint", mask_ratio=0.5, mask_seed=9),
    OperatorSpec(kind="inpaint", mask_ratio=0.3, per_frame_mask=True, mask_seed=2),
    OperatorSpec(kind="gaussian_blur", kernel_size=9, sigma=1.2),
    OperatorSpec(kind="downsample", factor=2),
    OperatorSpec(kind="downsample", factor=4),
]


def test_kernel_normalized_and_symmetric():
    k = gaussian_kernel(9, 1.2)
    assert abs(k.sum() - 1.0) < 1e-9
    assert np.allclose(k, k[::-1, ::-1])
    assert np.allclose(k, k.T)


def test_identity_noiseless_exact():
    x = random_clip()
    m = apply_forward(x, OperatorSpec(kind="identity"))
    assert np.array_equal(m.data, x)


def test_inpaint_mask_exact_count_and_zeroing():
    # the reference masking ratio removes exactly half the pixels
    op = OperatorSpec(kind="inpaint", mask_ratio=0.5, mask_seed=4)
    mask = make_mask(op, 16, 16)
    assert mask.sum() == 128
    x = random_clip()
    m = apply_forward(x, op)
    assert np.all(m.data[:, mask == 0, :] == 0.0)
    assert np.array_equal(m.data[:, mask == 1, :], x[:, mask == 1, :])


def test_mask_reproducible_from_seed():
    op = OperatorSpec(kind="inpaint", mask_seed=77)
    assert np.array_equal(make_mask(op, 16, 16), make_mask(op, 16, 16))
    other = OperatorSpec(kind="inpaint", mask_seed=78)
    assert not np.array_equal(make_mask(op, 16, 16), make_mask(other, 16, 16))


def test_blur_preserves_constants():
    x = np.full((3, 16, 16, 1), 0.37)
    m = apply_forward(x, OperatorSpec(kind="gaussian_blur", kernel_size=9, sigma=1.2))
    assert np.allclose(m.data, 0.37, atol=1e-12)


def test_blur_impulse_reproduces_tabulated_kernel():
    op = OperatorSpec(kind="gaussian_blur", kernel_size=5, sigma=1.0)
    x = np.zeros((1, 16, 16, 1))
    x[0, 8, 8, 0] = 1.0
    m = apply_forward(x, op)
    k = gaussian_kernel(5, 1.0)
    assert np.abs(m.data[0, 6:11, 6:11, 0] - k).max() < 1e-9
    out = m.data.copy()
    out[0, 6:11, 6:11, 0] = 0.0
    assert np.abs(out).max() < 1e-9


@pytest.mark.parametrize("op", ALL_OPS, ids=lambda o: f"{o.kind}-{o.factor if o.kind=='downsample' else ''}")
def test_adjoint_identity(op):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=(6, 16, 16, 1))
        y = forward_noiseless(x, op)
        u = rng.normal(size=y.shape)
        lhs = float(np.sum(y * u))
        rhs = float(np.sum(x * apply_adjoint(u, op)))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1e-12)


@pytest.mark.parametrize("op", ALL_OPS, ids=lambda o: f"{o.kind}-{o.factor if o.kind=='downsample' else ''}")
def test_linearity(op):
    rng = np.random.default_rng(2)
    x1, x2 = rng.normal(size=(2, 6, 16, 16, 1))
    a, b = 0.7, -1.3
    lhs = forward_noiseless(a * x1 + b * x2, op)
    rhs = a * forward_noiseless(x1, op) + b * forward_noiseless(x2, op)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_inpaint_adjoint_is_projection():
    op = OperatorSpec(kind="inpaint", mask_ratio=0.4, mask_seed=3)
    u = np.random.default_rng(3).normal(size=(4, 16, 16, 1))
    once = apply_adjoint(u, op)
    twice = apply_adjoint(once, op)
    assert np.array_equal(once, twice)


@given(st.integers(min_value=0, max_value=10_000),
       st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=25, deadline=None)
def test_adjoint_identity_property_inpaint(seed, ratio):
    op = OperatorSpec(kind="inpaint", mask_ratio=ratio, mask_seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(3, 8, 8, 1))
    u = rng.normal(size=(3, 8, 8, 1))
    lhs = float(np.sum(forward_noiseless(x, op) * u))
    rhs = float(np.sum(x * apply_adjoint(u, op)))
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs), 1.0)


def test_factor_must_divide_dimensions():
    with pytest.raises(ConfigError):
        apply_forward(random_clip(H=15, W=16), OperatorSpec(kind="downsample", factor=2))


def test_invalid_specs_rejected():
    with pytest.raises(ConfigError):
        OperatorSpec(kind="inpaint", mask_ratio=1.5).validate()
    with pytest.raises(ConfigError):
        OperatorSpec(kind="gaussian_blur", kernel_size=8).validate()
    with pytest.raises(ConfigError):
        OperatorSpec(kind="downsample", factor=1).validate()


def test_fidelity_zero_on_clean_source():
    clip = render_clip(SceneSpec(), 6, 16, 16, block_length=3)
    for op in ALL_OPS:
        m = apply_forward(clip, op)
        loss, grad = data_fidelity_loss(clip, m)
        assert loss < 1e-18
        assert np.abs(grad).max() < 1e-9


def test_fidelity_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x0 = rng.uniform(0.2, 0.8, size=(3, 4, 4, 1))
    for op in [OperatorSpec(kind="inpaint", mask_ratio=0.5, mask_seed=1),
               OperatorSpec(kind="gaussian_blur", kernel_size=3, sigma=0.8),
               OperatorSpec(kind="downsample", factor=2),
               OperatorSpec(kind="identity")]:
        m = apply_forward(rng.uniform(0.2, 0.8, size=(3, 4, 4, 1)), op)
        x = rng.uniform(0.2, 0.8, size=(3, 4, 4, 1))
        _, grad = data_fidelity_loss(x, m)
        eps = 1e-6
        for _ in range(10):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            xp = x.copy(); xp[idx] += eps
            xm = x.copy(); xm[idx] -= eps
            num = (data_fidelity_loss(xp, m)[0] - data_fidelity_loss(xm, m)[0]) / (2 * eps)
            rel = abs(grad[idx] - num) / max(abs(num), 1e-8)
            assert rel < 1e-4, f"{op.kind}: rel err {rel}"


def test_fidelity_tensor_op_matches_plain():
    rng = np.random.default_rng(6)
    op = OperatorSpec(kind="gaussian_blur", kernel_size=3, sigma=0.7)
    m = apply_forward(rng.uniform(size=(2, 4, 4, 1)), op)
    x = rng.uniform(size=(2, 4, 4, 1))
    loss, grad = data_fidelity_loss(x, m)
    t = Tensor(x, requires_grad=True)
    out = data_fidelity_t(t, m)
    out.backward()
    assert abs(out.item() - loss) < 1e-12
    assert np.allclose(t.grad, grad)


def test_fidelity_shape_mismatch_rejected():
    m = apply_forward(random_clip(T=4), OperatorSpec(kind="identity"))
    with pytest.raises(ShapeError):
        data_fidelity_loss(random_clip(T=6), m)


def test_measurement_noise_seeded():
    op = OperatorSpec(kind="identity", noise_sigma=0.05, noise_seed=13)
    x = random_clip(T=2)
    m1 = apply_forward(x, op)
    m2 = apply_forward(x, op)
    assert np.array_equal(m1.data, m2.data)
    assert not np.array_equal(m1.data, x)


def test_bilinear_upsample_constant_and_shape():
    const = np.full((2, 4, 4, 1), 0.6)
    up = bilinear_upsample(const, 4)
    assert up.shape == (2, 16, 16, 1)
    assert np.allclose(up, 0.6)


def test_latent_footprint_mask():
    mask = np.ones((8, 8))
    mask[0, 0] = 0.0          # one hole in the top-left 4x4 tile
    lat = latent_footprint_mask(mask, 4)
    assert lat.shape == (2, 2)
    assert lat[0, 0] == 1.0 and lat.sum() == 1.0
