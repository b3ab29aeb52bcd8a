"""Noise synthesis: calibration of every distribution against its target
standard deviation, reference-length definitions, and reproducibility."""
import numpy as np
import pytest

from noisetrans.corruption import NoiseSpec, perturb, reference_length
from noisetrans.errors import ArgumentError, DegenerateError
from noisetrans.geometry import PointCloud, Sphere, sample_surface


def big_cloud(n=34000, seed=0):
    return sample_surface(Sphere(1.0), n, seed=seed)


def test_spec_validation():
    with pytest.raises(ArgumentError):
        NoiseSpec(distribution="poisson")
    with pytest.raises(ArgumentError):
        NoiseSpec(scale_reference="diameter")
    with pytest.raises(ArgumentError):
        NoiseSpec(level=0.0)
    with pytest.raises(ArgumentError):
        NoiseSpec(level=-0.01)


def test_reference_lengths():
    pts = np.array([[0.0, 0, 0], [2.0, 0, 0], [1.0, 0, 0]])
    cloud = PointCloud(pts)
    # centroid (1,0,0); farthest point 1 away
    assert reference_length(cloud, "bounding_sphere_radius") == 1.0
    assert abs(reference_length(cloud, "bounding_box_diagonal") - 2.0) < 1e-12


@pytest.mark.parametrize("dist", ["gaussian", "laplace", "uniform"])
def test_empirical_std_matches_level(dist):
    cloud = big_cloud()
    level = 0.02
    spec = NoiseSpec(distribution=dist, level=level, seed=1)
    ref = reference_length(cloud, spec.scale_reference)
    delta = perturb(cloud, spec).coords - cloud.coords
    target = level * ref
    emp = delta.std()
    assert abs(emp - target) / target < 0.02, f"{dist}: {emp} vs {target}"


def test_uniform_support_bound_exact():
    cloud = big_cloud()
    spec = NoiseSpec(distribution="uniform", level=0.03, seed=2)
    ref = reference_length(cloud, spec.scale_reference)
    half = 0.03 * ref * np.sqrt(3.0)
    delta = perturb(cloud, spec).coords - cloud.coords
    assert np.abs(delta).max() <= half


def test_laplace_heavier_tails_than_gaussian():
    cloud = big_cloud()
    ref = reference_length(cloud, "bounding_sphere_radius")
    sigma = 0.02 * ref
    dg = perturb(cloud, NoiseSpec("gaussian", 0.02, seed=3)).coords - cloud.coords
    dl = perturb(cloud, NoiseSpec("laplace", 0.02, seed=3)).coords - cloud.coords
    assert (np.abs(dl) > 3 * sigma).mean() > (np.abs(dg) > 3 * sigma).mean()


def test_bounding_box_reference_changes_magnitude():
    cloud = big_cloud(5000)
    d_sphere = perturb(cloud, NoiseSpec("gaussian", 0.02, "bounding_sphere_radius", 4))
    d_box = perturb(cloud, NoiseSpec("gaussian", 0.02, "bounding_box_diagonal", 4))
    s1 = (d_sphere.coords - cloud.coords).std()
    s2 = (d_box.coords - cloud.coords).std()
    # the box diagonal of a unit sphere is ~2*sqrt(3) times its radius
    assert s2 / s1 > 2.0


def test_same_seed_reproducible_different_seed_not():
    cloud = big_cloud(1000)
    a = perturb(cloud, NoiseSpec("gaussian", 0.02, seed=5)).coords
    b = perturb(cloud, NoiseSpec("gaussian", 0.02, seed=5)).coords
    c = perturb(cloud, NoiseSpec("gaussian", 0.02, seed=6)).coords
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_degenerate_cloud_rejected():
    with pytest.raises(DegenerateError):
        perturb(PointCloud(np.ones((4, 3))), NoiseSpec())
