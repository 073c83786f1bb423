import functools
import http.server
import os
import sys
import threading

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from templet.backbone import DenoiserModel  # noqa: E402


def make_base(seed: int = 0) -> DenoiserModel:
    """Untrained base whose zero-initialized output layer is replaced, so caches visibly matter."""
    model = DenoiserModel.create(seed)
    params = model.state_dict()
    rng = np.random.default_rng(seed)
    params["out.weight"] = (rng.standard_normal(params["out.weight"].shape) * 0.05).astype(np.float32)
    return DenoiserModel(params, model.cfg)


@pytest.fixture(scope="session")
def base():
    return make_base(0)


class _CountingHandler(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_GET(self):
        self.server.hits.append(self.path)
        return super().do_GET()


class StaticServer:
    def __init__(self, root):
        self.root = str(root)
        handler = functools.partial(_CountingHandler, directory=self.root)
        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.httpd.hits = []
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def hits(self) -> list[str]:
        return self.httpd.hits

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def static_server(tmp_path):
    root = tmp_path / "served"
    root.mkdir()
    server = StaticServer(root)
    yield server
    server.close()


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("TEMPLET_CACHE_DIR", str(tmp_path / "hub-cache"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(module.RESULTS.get(n, f"criterion {n:>2} ----  not run, or raised before reporting"))
