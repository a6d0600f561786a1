"""A small in-process HTTP catalog that accepts bulk uploads, for tests and demos.

Entities and relationships are stored by guid, so re-sending a batch leaves
the stored state unchanged. Failures can be scripted as a queue of status
codes returned before normal service resumes.
"""
from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

logger = logging.getLogger(__name__)


class MockCatalog:
    def __init__(self, host="127.0.0.1", port=0):
        self.entities = {}
        self.relationships = {}
        self.requests = []  # (path, status)
        self.fail_statuses = []
        self._lock = threading.Lock()
        catalog = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                logger.debug(fmt, *args)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                status = catalog._handle(self.path, body)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(b"{}")

            def do_GET(self):
                with catalog._lock:
                    doc = {"entities": len(catalog.entities), "relationships": len(catalog.relationships)}
                data = json.dumps(doc).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = None

    @property
    def endpoint(self):
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _handle(self, path, body):
        with self._lock:
            if self.fail_statuses:
                status = self.fail_statuses.pop(0)
                self.requests.append((path, status))
                return status
            if path.rstrip("/") != "/entities/bulk":
                self.requests.append((path, 404))
                return 404
            try:
                doc = json.loads(body)
            except ValueError:
                self.requests.append((path, 400))
                return 400
            for e in doc.get("entities", ()):
                self.entities[e["guid"]] = e
            for r in doc.get("relationships", ()):
                self.relationships[r["guid"]] = r
            self.requests.append((path, 200))
            return 200

    def snapshot(self):
        with self._lock:
            return dict(self.entities), dict(self.relationships)

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
