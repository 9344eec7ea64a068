from __future__ import annotations

import json
from pathlib import Path

import pytest

from tracellm.chain_access import ChainAccess, FixtureStore
from tracellm.devchain import build_demo_incident

FIXTURES = Path(__file__).parent / "fixtures"
DEMO_STORE = FIXTURES / "demo"
DEMO_SCOPE = FIXTURES / "demo_scope.json"


@pytest.fixture(scope="session")
def demo():
    return build_demo_incident()


@pytest.fixture
def demo_chain() -> ChainAccess:
    return ChainAccess(store=FixtureStore(DEMO_STORE))


@pytest.fixture(scope="session")
def demo_scope_doc() -> dict:
    return json.loads(DEMO_SCOPE.read_text())


@pytest.fixture(scope="session")
def benchmark():
    from tracellm.benchmark import generate_benchmark

    return generate_benchmark()
