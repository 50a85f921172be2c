import os

import numpy as np
import pytest

from drcsd.data import InteractionSet
from drcsd.graph import build_bipartite


@pytest.fixture
def g1_train():
    """Fixture G1: users u1, u2 and items i1, i2 with pairs
    {(u1,i1), (u2,i1), (u2,i2)}; node ids u1=0, u2=1, i1=2, i2=3."""
    pairs = np.array([[0, 0], [1, 0], [1, 1]], dtype=np.int64)
    return InteractionSet(2, 2, pairs, ("u1", "u2"), ("i1", "i2"))


@pytest.fixture
def g1(g1_train):
    return build_bipartite(g1_train)


def lastfm_path():
    return os.environ.get("DRCSD_LASTFM", "data/lastfm.tsv")


def has_lastfm():
    return os.path.exists(lastfm_path())


needs_lastfm = pytest.mark.skipif(
    not has_lastfm(),
    reason="Lastfm dataset not present; set DRCSD_LASTFM or place data/lastfm.tsv "
           "(see README, 'Running the Lastfm acceptance checks')")
