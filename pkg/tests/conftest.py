import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from enclaveml import pki  # noqa: E402
from enclaveml.cas import CasServer, CasService, SessionPolicy  # noqa: E402
from enclaveml.enclave import Platform, TrustRoot, measure  # noqa: E402


@pytest.fixture(scope="session")
def ca():
    return pki.make_root_ca()


@pytest.fixture(scope="session")
def make_identity(ca):
    root, root_key = ca

    def make(cn, **kw):
        cert, key = pki.issue_leaf(root, root_key, cn, **kw)
        return pki.TLSIdentity(cert, key, root)

    return make


@pytest.fixture(scope="session")
def worker_platform():
    return Platform.generate()


@pytest.fixture
def cas_service(tmp_path, worker_platform):
    return CasService(Platform.generate(), TrustRoot.of([worker_platform]),
                      store_path=tmp_path / "cas.store")


@pytest.fixture
def cas_server(cas_service):
    with CasServer(cas_service) as srv:
        yield srv


@pytest.fixture
def code_measurement():
    return measure(b"worker-code", b"worker-config")


def simple_policy(name, measurements, **extra):
    doc = {
        "name": name,
        "allowed_measurements": [m.hex for m in measurements],
        "secrets": [
            {"name": "tls", "kind": "tls-identity"},
            {"name": "file-key", "kind": "symmetric-key-256"},
        ],
    }
    doc.update(extra)
    return SessionPolicy.from_json(doc)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
