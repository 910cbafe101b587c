"""Local HTTP shim implementing the embeddings protocol.

POST /embeddings with ``{"model": ..., "input": [...]}`` answers
``{"data": [{"index": i, "embedding": [...]}, ...]}``, so the main
toolkit's HTTP provider can target localhost instead of a remote service.
Requests are handled one batch at a time.
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, HTTPServer

from .encoders import load_encoder

DEFAULT_MAX_BATCH = 256


def make_server(
    model: str,
    port: int,
    host: str = "127.0.0.1",
    max_batch: int = DEFAULT_MAX_BATCH,
    encoder=None,
) -> HTTPServer:
    """Build (but do not start) the server; raises OSError if the port is taken."""
    encoder = encoder or load_encoder(model)

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path.rstrip("/") != "/embeddings":
                self._reply(404, {"error": "unknown path"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length))
                inputs = body["input"]
                if not isinstance(inputs, list) or not all(
                    isinstance(t, str) for t in inputs
                ):
                    raise ValueError("'input' must be a list of strings")
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                self._reply(400, {"error": f"malformed request: {exc}"})
                return
            if len(inputs) > max_batch:
                self._reply(413, {"error": f"batch of {len(inputs)} exceeds max {max_batch}"})
                return
            vectors = encoder.encode(inputs)
            data = [
                {"index": i, "embedding": vec.tolist()} for i, vec in enumerate(vectors)
            ]
            self._reply(200, {"data": data, "model": encoder.model_id})

    server = HTTPServer((host, port), Handler)
    server.encoder = encoder  # exposed for tests
    return server


def serve_embeddings(model: str, port: int, host: str = "127.0.0.1",
                     max_batch: int = DEFAULT_MAX_BATCH) -> None:
    """Blocking entry point used by the CLI."""
    server = make_server(model, port, host=host, max_batch=max_batch)
    print(f"serving {model} embeddings on http://{host}:{server.server_port}/embeddings")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
