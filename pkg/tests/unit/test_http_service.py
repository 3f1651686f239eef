"""Unit tests for the HTTP service mode."""

import json
import threading
import urllib.error
import urllib.request
from typing import Iterator, List

import pytest

from CoDA_Sim.cloud import http_service, match_index
from CoDA_Sim.core import samples
from CoDA_Sim.tunnel import codec
from tests.conftest import SampleFactory


@pytest.fixture
def matched(make_sample: SampleFactory) -> List[samples.Sample]:
    """Creates 30 matched samples.

    Returns:
        The samples.
    """
    return [make_sample(i, user_id=2, label=i % 2) for i in range(30)]


@pytest.fixture
def base_url(matched: List[samples.Sample]) -> Iterator[str]:
    """Starts a server on a free port over an index holding user 0's batches.

    Yields:
        The server base URL.
    """
    index = match_index.MatchIndex()
    index.build_batches(0, matched, day=0)
    index.build_batches(0, matched[:3], day=1)
    server = http_service.BatchServer(("127.0.0.1", 0), index, now_day=8)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield f"http://{host}:{port}"
    server.shutdown()
    server.server_close()
    thread.join()


def _status(url: str) -> int:
    try:
        with urllib.request.urlopen(url) as response:
            return response.status
    except urllib.error.HTTPError as err:
        return err.code


def test_batches_lists_live_ids(base_url: str) -> None:
    """Tests the batch list endpoint.

    Args:
        base_url: Fixture providing the server URL.
    """
    with urllib.request.urlopen(f"{base_url}/batches?user=0") as response:
        assert json.loads(response.read()) == [
            "u0-d1-b0",
            "u0-d0-b0",
            "u0-d0-b1",
        ]
    with urllib.request.urlopen(f"{base_url}/batches?user=5") as response:
        assert json.loads(response.read()) == []


def test_batch_returns_payload_and_headers(
    base_url: str, matched: List[samples.Sample]
) -> None:
    """Tests that the served text decodes with the advertised metadata.

    Args:
        base_url: Fixture providing the server URL.
        matched: Fixture providing matched samples.
    """
    with urllib.request.urlopen(f"{base_url}/batch?user=0&batch=u0-d1-b0") as resp:
        text = resp.read().decode("ascii")
        payload = codec.EncodedPayload(
            text,
            int(resp.headers["X-Raw-Length"]),
            int(resp.headers["X-Checksum"]),
        )

    assert codec.decode_payload(payload) == matched[:3]


@pytest.mark.parametrize(
    "query, status",
    [
        ("/batch?user=1&batch=u0-d1-b0", 403),
        ("/batch?user=0&batch=nope", 403),
        ("/batch?user=0&batch=u0-d0-b0", 410),
        ("/batch?batch=u0-d1-b0", 400),
        ("/batch?user=x", 400),
        ("/other?user=0", 404),
    ],
)
def test_error_statuses(base_url: str, query: str, status: int) -> None:
    """Tests the status code of each failure.

    Args:
        base_url: Fixture providing the server URL.
        query: Path and query string.
        status: Expected HTTP status.
    """
    assert _status(base_url + query) == status
