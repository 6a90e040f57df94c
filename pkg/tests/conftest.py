import functools
import http.server
import threading
from pathlib import Path

import pytest

from heartsig import synth

FIXTURES = Path(__file__).parent / "fixtures"
MITDB_HEAD = FIXTURES / "mitdb_head"

# Small synthetic database shared by the pipeline and CLI tests.
SMALL_DB = ("syn100", "syn106", "syn109", "syn209")


@pytest.fixture(scope="session")
def synthetic_db(tmp_path_factory):
    directory = tmp_path_factory.mktemp("syndb")
    profiles = dict(synth.DEFAULT_DATABASE)
    for k, name in enumerate(SMALL_DB):
        rec = synth.generate_record(name, duration_s=120.0, profile=profiles[name], seed=100 + k)
        synth.write_record(rec, directory)
    return directory


class _QuietHandler(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


@pytest.fixture
def file_server():
    """Serve a directory over HTTP on localhost; yields (start(directory) -> base_url, hits)."""
    servers = []
    hits = []

    class Counting(_QuietHandler):
        def do_GET(self):
            hits.append(self.path)
            super().do_GET()

    def start(directory):
        handler = functools.partial(Counting, directory=str(directory))
        srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_address[1]}"

    yield start, hits
    for srv in servers:
        srv.shutdown()
        srv.server_close()


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[k])
