import os
import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=300, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def rd():
    from rsfdi.reaction_diffusion import build_system
    return build_system()


@pytest.fixture(scope="session")
def rd_filters(rd):
    from rsfdi.sim_engine import build_filters
    return build_filters(rd, 50)


@pytest.fixture(scope="session")
def rd_analysis(rd):
    """S* for each fault at the default analysis window."""
    from rsfdi.geometric_invariants import min_unobservability_subspace
    out = []
    for i in range(2):
        others = [l for j, l in enumerate(rd.faults) if j != i]
        out.append(min_unobservability_subspace(rd, others, 200))
    return out
