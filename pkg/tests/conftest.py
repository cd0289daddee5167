import numpy as np
import pytest
from scipy.special import expit

from src.dataset import Dataset
from src.simstudy import DgpConfig, generate_population


def make_dataset(n: int = 1000, seed: int = 0, effect_noise: float = 1.0) -> Dataset:
    """A dataset in which M = 1 helps units with X1 > 0 and hurts the others, with known propensities."""

    rng = np.random.default_rng(seed)
    r = (rng.random(n) < 0.5).astype(float)
    c = rng.standard_normal(n)
    x1 = rng.standard_normal(n)
    x2 = 0.5 * r + rng.standard_normal(n)
    m = (rng.random(n) < expit(-0.2 + 0.3 * r + 0.4 * x2)).astype(float)
    y = 1.0 - 0.5 * r + 0.5 * x1 + 0.3 * x2 + 0.2 * c + 2.0 * m * np.sign(x1) + effect_noise * rng.standard_normal(n)

    return Dataset(
        y=y, m=m, r=r, c=c,
        x=np.column_stack([x1, x2]),
        x_names=("X1", "X2"),
        c_names=("C",),
        h1_cols=(0,),
        oracle={"M_opt": (x1 > 0).astype(float)},
    )


@pytest.fixture
def dataset() -> Dataset:
    return make_dataset()


@pytest.fixture(scope="session")
def population() -> Dataset:
    return generate_population(DgpConfig(mode="constant", beta_u_y=1.0, beta_u_m=1.0, population_size=20_000, seed=11))
