import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from abgp.crypto import KeyPair
from abgp.records import ClusterSpec
from abgp.state import StateStore


class FakeClock:
    def __init__(self, now=1000):
        self.now = now

    def __call__(self):
        return self.now

    def advance(self, ms=1):
        self.now += ms


def make_keys(n, seed=0):
    rng = random.Random(seed)
    return [KeyPair.generate(rng) for _ in range(n)]


def make_cluster(keys):
    return ClusterSpec.from_public_keys(k.public for k in keys)


@pytest.fixture
def keys3():
    return make_keys(3)


@pytest.fixture
def cluster3(keys3):
    return make_cluster(keys3)


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def stores3(keys3, cluster3, clock):
    return [StateStore(cluster3, k, clock) for k in keys3]
