import numpy as np
import pytest

from starscat.graph import GraphProblem, GraphSpec
from starscat.potentials import Potential
from starscat.unperturbed import RayParameters


def make_ray(nu, sigma=1.0, sigma1=0.0):
    """Vertex data with sigma2 = sigma^2 (the convention every closed-form
    cross-check in the suite relies on)."""
    return RayParameters(nu, sigma=sigma, sigma1=sigma1, sigma2=sigma * sigma)


# three-ray test graph passing all admissibility conditions with no
# upper-half-plane poles (verified by the condition census test)
STD_NUS = (0.75, 0.60, 0.90)
STD_SIGMAS = (1.0, 1 + 0.3j, 0.8 - 0.2j)
STD_SIGMA1 = (-0.39 + 0.62j, -0.17 - 0.62j, -0.59 - 0.19j)

# same vertex data but with a pole of the characteristic function in the
# upper half-plane (found numerically; the census test pins it down)
POLEFUL_SIGMA1 = (0.4 + 0.1j, -0.3 + 0.2j, 0.35j)

SEARCH_REGION = (-12.0, 12.0, 0.01, 12.0)


def std_rays(sigma1=STD_SIGMA1):
    return [make_ray(nu, s, s1) for nu, s, s1 in zip(STD_NUS, STD_SIGMAS, sigma1)]


@pytest.fixture(scope="session")
def bump_potential():
    return Potential.gaussian_bump(0.35 + 0.1j, 1.0, 0.13)


@pytest.fixture(scope="session")
def zero_graph():
    spec = GraphSpec([(r, Potential.zero()) for r in std_rays()])
    return GraphProblem(spec)


@pytest.fixture(scope="session")
def bump_graph(bump_potential):
    rays = std_rays()
    spec = GraphSpec([(rays[0], bump_potential),
                      (rays[1], Potential.zero()),
                      (rays[2], Potential.zero())])
    return GraphProblem(spec)


@pytest.fixture(scope="session")
def poleful_graph():
    spec = GraphSpec([(r, Potential.zero()) for r in std_rays(POLEFUL_SIGMA1)])
    return GraphProblem(spec)


@pytest.fixture(scope="session")
def coarse_symmetric_grid():
    from starscat.numerics import RealGrid
    return RealGrid.symmetric_hybrid(rho_min=1e-2, rho_max=25.0, n_per_side=128)
