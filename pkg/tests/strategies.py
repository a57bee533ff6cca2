"""Hypothesis strategies for points on the camera hemisphere."""

import math

import numpy as np
from hypothesis import strategies as st


@st.composite
def upper_units(draw, min_z=0.05):
    """Unit vectors with z >= min_z."""
    el = draw(st.floats(math.asin(min_z), math.pi / 2, allow_nan=False))
    az = draw(st.floats(-math.pi, math.pi, allow_nan=False))
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


@st.composite
def charts(draw):
    c = draw(st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3))
    r = draw(st.floats(0.1, 5.0, allow_nan=False))
    return np.array(c), r


@st.composite
def cap_sets(draw, min_size=3, max_size=12, spread=0.8):
    """Seeds for point sets inside a cap around a random upper direction."""
    n = draw(st.integers(min_size, max_size))
    seed = draw(st.integers(0, 2**31 - 1))
    center = draw(upper_units(min_z=0.9))
    return np.random.default_rng(seed), n, center, spread
