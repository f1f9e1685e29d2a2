import numpy as np
import pytest

from cvattn.chan_vese import (
    ChanVeseParams,
    _heaviside,
    circle_levelset,
    curvature,
    cv_energy,
    cv_evolve,
    cv_segment,
    cv_step,
    dirac_eps,
    heaviside_eps,
    region_means,
)
from cvattn.gradcheck import grad_check, weighted_sum
from cvattn.gradsuite import suite_cv
from cvattn.metrics import metric_dice
from cvattn.tensor import NonFiniteError, ShapeError, Tensor


def disk_image(n=64, r=12.0, c=(31.5, 31.5)):
    yy, xx = np.mgrid[0:n, 0:n]
    return (np.hypot(yy - c[0], xx - c[1]) <= r).astype(np.float64)


# --- Heaviside / Dirac ------------------------------------------------------


def test_heaviside_values():
    assert heaviside_eps(Tensor(0.0), 0.7).item() == 0.5
    assert heaviside_eps(Tensor(100 * 0.7), 0.7).item() >= 0.99
    z = np.array([-1e6, 1e6])
    h = heaviside_eps(Tensor(z), 1.0).data
    assert h[0] < 1e-6 and h[1] > 1 - 1e-6


def test_heaviside_strictly_increasing(rng):
    z = np.sort(rng.normal(scale=5, size=200))
    assert np.all(np.diff(heaviside_eps(Tensor(z), 0.5).data) > 0)


def test_heaviside_derivative_is_dirac(rng):
    # complex-step derivative: exact to rounding, no cancellation
    z = rng.normal(scale=3, size=100)
    for eps in (0.1, 1.0, 2.5):
        d = _heaviside(z + 1e-30j, eps).imag / 1e-30
        assert np.max(np.abs(d - dirac_eps(Tensor(z), eps).data)) <= 1e-10


def test_dirac_values_and_symmetry(rng):
    assert dirac_eps(Tensor(0.0), 1.0).item() == pytest.approx(1 / np.pi, abs=1e-15)
    z = rng.normal(size=50)
    assert np.array_equal(dirac_eps(Tensor(z), 0.3).data, dirac_eps(Tensor(-z), 0.3).data)
    assert np.all(dirac_eps(Tensor(np.linspace(-1e3, 1e3, 11)), 1.0).data > 0)


def test_dirac_unit_mass():
    z = np.arange(-1000.0, 1000.0 + 1e-9, 0.01)
    mass = np.trapezoid(dirac_eps(Tensor(z), 1.0).data, z)
    assert abs(mass - 1.0) <= 1e-2


# --- region means ------------------------------------------------------------


def test_region_means_constant(rng):
    c1, c2, e1, e2 = region_means(np.full((8, 8), 0.3), rng.normal(size=(8, 8)))
    assert c1 == pytest.approx(0.3, abs=1e-15) and c2 == pytest.approx(0.3, abs=1e-15)
    assert not e1 and not e2


def test_region_means_aligned_disk():
    yy, xx = np.mgrid[0:32, 0:32]
    r = np.hypot(yy - 15.5, xx - 15.5)
    img = (r <= 8.0).astype(np.float64)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        c1, c2, _, _ = region_means(img, 8.0 - r, eps=eps)
        errs.append(max(1.0 - c1, c2))
    assert errs[0] > errs[1] > errs[2] and errs[2] <= 1e-3


def test_region_means_degenerate_region(rng):
    img = rng.random((8, 8))
    c1, c2, e1, e2 = region_means(img, np.full((8, 8), 1e12), eps=1.0)
    assert c1 == pytest.approx(img.mean(), rel=1e-12)
    assert e2 and not e1 and c2 == img.mean()


def test_region_means_shape_mismatch():
    with pytest.raises(ShapeError):
        region_means(np.zeros((4, 4)), np.zeros((4, 5)))


# --- curvature ----------------------------------------------------------------


def test_curvature_of_plane_is_zero():
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    k = curvature(Tensor(0.3 * xx - 0.7 * yy + 2.0), 1e-8).data
    # the one-sided border differences feed the divergence one pixel in
    assert np.abs(k[2:-2, 2:-2]).max() <= 1e-6


def test_curvature_of_circle():
    n, r0 = 128, 20.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    r = np.hypot(yy - 63.5, xx - 63.5)
    k = curvature(Tensor(r0 - r), 1e-8).data
    band = np.abs(r - r0) <= 1.0
    assert np.all(np.abs(k[band] + 1.0 / r0) <= 0.1 / r0)


def test_curvature_odd(rng):
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    phi = np.sin(0.3 * xx + rng.normal()) * np.cos(0.2 * yy) + 0.1 * xx
    assert np.allclose(curvature(Tensor(-phi), 1e-8).data, -curvature(Tensor(phi), 1e-8).data, atol=1e-12)


def test_curvature_validation():
    with pytest.raises(ValueError):
        curvature(Tensor(np.zeros((4, 4))), 0.0)


# --- energy -------------------------------------------------------------------


def test_energy_constant_image(rng):
    phi = rng.normal(size=(16, 16))
    p = ChanVeseParams(mu=0.0, nu=0.7)
    H = 0.5 + np.arctan(phi / p.eps) / np.pi
    assert cv_energy(np.full((16, 16), 0.4), phi, p) == pytest.approx(0.7 * H.sum(), rel=1e-12)


def test_energy_aligned_two_constant_image():
    r0 = 20.0
    yy, xx = np.mgrid[0:64, 0:64]
    r = np.hypot(yy - 31.5, xx - 31.5)
    img = (r <= r0).astype(np.float64)
    phi = r0 - r
    data = []
    for eps in (1.0, 0.1, 1e-3):
        t = cv_energy(img, phi, ChanVeseParams(mu=1.0, nu=0.0, eps=eps), terms=True)
        data.append(t["inside"] + t["outside"])
    # data terms vanish as eps -> 0
    assert data[0] > data[1] > data[2] and data[2] < 0.01 * data[0]
    # length term approximates the perimeter while the smoothing spans a pixel or so
    t = cv_energy(img, phi, ChanVeseParams(mu=1.0, nu=0.0, eps=0.1), terms=True)
    assert t["length"] == pytest.approx(2 * np.pi * r0, rel=0.05)


def test_energy_descends_along_evolution():
    img = disk_image()
    phi0 = circle_levelset((64, 64), (31.5, 31.5), 20.0)
    _, e = cv_evolve(img, phi0, ChanVeseParams(iters=60), trace=True)
    e = np.asarray(e)
    assert np.all(e[1:] <= e[:-1] * (1 + 1e-9) + 1e-12)


# --- cv_step ------------------------------------------------------------------


def test_step_fixed_point_on_constant_image(rng):
    phi = rng.normal(size=(12, 12))
    out = cv_step(np.full((12, 12), 0.6), phi, ChanVeseParams(mu=0.0, nu=0.0)).data
    assert np.array_equal(out, phi)


def test_step_stationary_on_segmented_image():
    # phi is a two-level map (+-5) so no pixel sits near the smoothed step
    img = disk_image()
    phi = np.where(img > 0, 5.0, -5.0)
    out = cv_step(img, phi, ChanVeseParams(mu=0.1, nu=0.0, eps=0.1)).data
    assert np.abs(out - phi).max() <= 1e-3


def test_step_intensity_shift_equivariance(rng):
    img = rng.random((16, 16))
    phi = circle_levelset((16, 16), (7.0, 8.0), 5.0) + 0.1 * rng.normal(size=(16, 16))
    p = ChanVeseParams(mu=0.2, nu=0.1)
    a = cv_step(img, phi, p).data
    b = cv_step(img + 3.7, phi, p).data
    assert np.abs(a - b).max() <= 1e-10


def test_step_gradient_wrt_image(rng):
    img = Tensor(rng.random((8, 8)))
    phi = Tensor(circle_levelset((8, 8), (3.5, 4.0), 2.5))
    p = ChanVeseParams(mu=0.1, nu=0.3, dt=0.2)
    assert grad_check(lambda i: cv_step(i, phi, p).sum(), img) <= 1e-4


def test_step_nonfinite_names_pixel():
    img = np.zeros((4, 4))
    phi = np.zeros((4, 4))
    with pytest.raises(NonFiniteError, match=r"pixel \(\d+, \d+\)"):
        cv_step(img, phi, ChanVeseParams(dt=np.inf))


def test_params_validation():
    for kw in ({"mu": -1}, {"lambda1": 0}, {"eps": 0}, {"eta": 0}, {"iters": 0}, {"dt": -0.1}):
        with pytest.raises(ValueError):
            ChanVeseParams(**kw)


# --- evolution ------------------------------------------------------------------


def test_evolve_dt_zero_is_identity(rng):
    phi = rng.normal(size=(10, 10))
    assert np.array_equal(cv_evolve(rng.random((10, 10)), phi, ChanVeseParams(iters=1, dt=0.0)).data, phi)


def test_evolve_segments_disk():
    img = disk_image()
    phi = cv_evolve(img, circle_levelset((64, 64), (31.5, 31.5), 20.0), ChanVeseParams(mu=0.1, nu=0.0, dt=0.5, iters=200))
    mask = cv_segment(phi)
    assert metric_dice(mask, img > 0) >= 0.99
    assert abs(mask.sum() - np.pi * 144) <= 0.05 * np.pi * 144


def test_evolve_partial_overlap_init_recovers_disk():
    img = disk_image()
    phi = cv_evolve(img, circle_levelset((64, 64), (20.0, 22.0), 10.0), ChanVeseParams(iters=400))
    assert metric_dice(cv_segment(phi), img > 0) >= 0.95


@pytest.mark.xfail(strict=True, reason="contour collapses before the data term can reach the disk")
def test_evolve_disjoint_init_recovers_disk():
    img = disk_image()
    phi = cv_evolve(img, circle_levelset((64, 64), (8.0, 8.0), 6.0), ChanVeseParams(iters=200))
    assert metric_dice(cv_segment(phi), img > 0) >= 0.95


def test_evolve_gradients_k5(rng):
    img = Tensor(np.clip(disk_image(8, 2.5, (3.5, 4.0)) * 0.6 + 0.2 + 0.05 * rng.normal(size=(8, 8)), 0, 1))
    phi = Tensor(circle_levelset((8, 8), (3.0, 4.5), 3.0))
    p = ChanVeseParams(mu=0.1, nu=0.3, dt=0.2, iters=5, eta=1.0)
    assert grad_check(lambda i, f: weighted_sum(cv_evolve(i, f, p)), [img, phi]) <= 1e-4


def test_evolve_batched_matches_single(rng):
    imgs = rng.random((3, 12, 12))
    phis = rng.normal(size=(3, 12, 12))
    p = ChanVeseParams(iters=4, nu=0.2)
    batch = cv_evolve(imgs, phis, p).data
    for i in range(3):
        assert np.allclose(batch[i], cv_evolve(imgs[i], phis[i], p).data, atol=1e-14)


def test_segment_convention():
    assert cv_segment(np.ones((3, 3))).all()
    assert not cv_segment(np.zeros((3, 3))).any()


def test_cv_suite_passes():
    for name, err, tol in suite_cv(0):
        assert err <= tol, name
