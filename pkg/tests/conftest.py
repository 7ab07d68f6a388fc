import os

import hypothesis
import numpy as np
import pytest

from app.schemas import ModelParams, Regime

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def transport_params():
    return ModelParams(n_particles=50, alpha=2.0, beta=1.0, mu=1.0, regime=Regime.TRANSPORT)


@pytest.fixture
def diffusive_params():
    return ModelParams(n_particles=50, alpha=1.0, beta=1.0, mu=1.0, regime=Regime.DIFFUSIVE)


@pytest.fixture
def fixed_params():
    return ModelParams(n_particles=10, alpha=2.0, beta=1.0, mu_n=0.5)
