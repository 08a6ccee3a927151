import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

from corpus import McqItem, QaItem  # noqa: E402
from mockmodel import MockConfig, MockManifest, serve  # noqa: E402
from modelclient import EndpointConfig, ModelClient  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


def make_mcq_items(n, language="en", k=4, seed=0, prefix="s"):
    """Synthetic MCQ items; gold indices are uniform and shared across languages for a given seed."""
    golds = np.random.default_rng(seed).integers(k, size=n)
    return [
        McqItem(
            id=f"{prefix}{i:05d}",
            question=f"[{language}] Synthetic question {prefix}{i}: which option belongs to record {i}?",
            choices=tuple(f"[{language}] option {j} of record {i}" for j in range(k)),
            gold_index=int(golds[i]),
            language=language,
        )
        for i in range(n)
    ]


def make_parallel(n, languages=("en", "ar", "fr"), k=4, seed=0):
    return {lang: make_mcq_items(n, lang, k, seed) for lang in languages}


def make_qa_items(n, language="en"):
    return [
        QaItem(
            id=f"r{i:05d}",
            context=f"The ledger of station {i} lists granite as its main export.",
            question=f"Which export does station {i} list in its ledger?",
            answer_text="granite",
            language=language,
        )
        for i in range(n)
    ]


@pytest.fixture
def mock_server():
    """Factory: start an in-process mock on an ephemeral port; stopped after the test."""
    servers = []

    def start(config, items):
        server = serve(config, MockManifest(items))
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()


@pytest.fixture
def client_for():
    """Factory: a ModelClient pointed at a running mock server."""
    clients = []

    def connect(server, **overrides):
        values = {
            "base_url": server.url,
            "endpoint_id": server.model.endpoint_id,
            "backoff_factor": 0.01,
            "backoff_max": 0.05,
            "timeout": 10,
        }
        values.update(overrides)
        client = ModelClient(EndpointConfig(**values))
        clients.append(client)
        return client

    yield connect
    for client in clients:
        client.close()


@pytest.fixture
def memorizing_mock(mock_server):
    """Factory: mock that memorized D(p) of `population` with the given behaviour."""

    def start(population, items, p, **settings):
        config = MockConfig(**settings).for_condition(population, p)
        return mock_server(config, items)

    return start
