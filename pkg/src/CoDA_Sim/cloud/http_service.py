"""Module providing the HTTP service mode over a persisted MatchIndex.

Endpoints:

- ``GET /batch?user=<id>&batch=<id>``: the encoded payload as text/plain, with
  ``X-Raw-Length`` and ``X-Checksum`` headers (403 foreign or unknown batch,
  410 expired batch).
- ``GET /batches?user=<id>``: JSON list of the user's live batch ids.
"""

import http.server
import json
import logging
import urllib.parse
from typing import Dict, List

from CoDA_Sim.cloud import match_index
from CoDA_Sim.core import exceptions

logger = logging.getLogger(__name__)


class BatchRequestHandler(http.server.BaseHTTPRequestHandler):
    """Answers batch queries from the server's MatchIndex."""

    server: "BatchServer"

    def _send(
        self, status: int, body: str, content_type: str, headers: Dict[str, str]
    ) -> None:
        data = body.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        for name, value in headers.items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str) -> None:
        self._send(status, json.dumps({"error": message}), "application/json", {})

    def do_GET(self) -> None:  # noqa: N802
        """Routes a GET request."""
        url = urllib.parse.urlparse(self.path)
        query = urllib.parse.parse_qs(url.query)
        try:
            user_id = int(query["user"][0])
        except (KeyError, ValueError):
            self._error(400, "missing or invalid 'user' parameter")
            return
        index = self.server.index
        if url.path == "/batches":
            batch_ids: List[str] = index.list_batches(user_id)
            self._send(200, json.dumps(batch_ids), "application/json", {})
        elif url.path == "/batch":
            batch_id = query.get("batch", [""])[0]
            try:
                payload = index.query_batch(user_id, batch_id, self.server.now_day)
            except exceptions.BatchAuthorizationError as err:
                self._error(403, str(err))
                return
            except exceptions.BatchGoneError as err:
                self._error(410, str(err))
                return
            self._send(
                200,
                payload.text,
                "text/plain; charset=ascii",
                {
                    "X-Raw-Length": str(payload.declared_raw_len),
                    "X-Checksum": str(payload.checksum),
                },
            )
        else:
            self._error(404, f"unknown path '{url.path}'")

    def log_message(self, format: str, *args: object) -> None:  # noqa: A002
        """Routes access logs to the module logger."""
        logger.debug("%s - %s", self.address_string(), format % args)


class BatchServer(http.server.ThreadingHTTPServer):
    """Threaded HTTP server over a MatchIndex.

    Attributes:
        index: Index answering the queries.
        now_day: Day used for retention checks, or None to skip them.
    """

    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        index: match_index.MatchIndex,
        now_day: int | None = None,
    ) -> None:
        """Binds the server.

        Args:
            address: (host, port); port 0 picks a free port.
            index: Index answering the queries.
            now_day: Day used for retention checks.
        """
        super().__init__(address, BatchRequestHandler)
        self.index = index
        self.now_day = now_day


def serve(
    index: match_index.MatchIndex,
    host: str = "127.0.0.1",
    port: int = 8765,
    now_day: int | None = None,
) -> None:
    """Serves batch queries until interrupted."""
    with BatchServer((host, port), index, now_day) as server:
        logger.info("Serving batches on http://%s:%d", *server.server_address[:2])
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            logger.info("Shutting down.")
