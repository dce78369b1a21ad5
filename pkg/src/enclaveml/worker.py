"""Attested worker runtime.

A worker proves its measurement to the CAS before it touches any protected
artifact. Its measurement covers the worker code and its configuration
document (path policy, TLS secret name, peers), so changing either changes
the identity the session policy must allow.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cas.server import CasClient, Provisioned, provision
from .cas.store import canonical_json
from .enclave import Measurement, Platform, measure
from .fsshield import FileShield, PathPolicy
from .ml.data import DatasetShard
from .ml.model import ModelArtifact, TrainConfig, infer_batch
from .ml.ps import ParameterServer, TrainStats, handshake_workers, worker_train_loop
from .netshield import PeerPolicy, SecureListener, wrap_connect, wrap_listen
from .pki import TLSIdentity

log = logging.getLogger(__name__)

_PKG = Path(__file__).parent


def worker_code() -> bytes:
    """Bytes standing in for the worker enclave binary: every non-CAS source file."""
    files = sorted(p for p in _PKG.rglob("*.py") if "cas" not in p.relative_to(_PKG).parts)
    return b"".join(p.read_bytes() for p in files)


def config_bytes(config: dict) -> bytes:
    return canonical_json(config)


def worker_measurement(config: dict) -> Measurement:
    return measure(worker_code(), config_bytes(config))


@dataclass
class WorkerRuntime:
    session: str
    provisioned: Provisioned
    cas: CasClient
    shield: FileShield
    identity: TLSIdentity | None
    peers: PeerPolicy

    @classmethod
    def start(cls, cas_addr, session: str, platform: Platform, config: dict,
              cas_root=None) -> "WorkerRuntime":
        prov, client = provision(cas_addr, session, platform, worker_measurement(config), root=cas_root)
        try:
            policy = PathPolicy.from_json(config.get("fs_policy", []))
            keys = {name: prov.secret(name) for name in policy.key_names()}
            shield = FileShield(policy, keys, freshness=client)
            tls_name = config.get("tls_secret", "tls")
            identity = prov.tls_identity(tls_name) if tls_name in prov.bundle.secrets else None
            peers = PeerPolicy.of(config.get("peers") or [prov.session])
        except BaseException:
            client.close()
            raise
        log.info("worker attested to session %s", prov.session)
        return cls(prov.session, prov, client, shield, identity, peers)

    def close(self) -> None:
        self.cas.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- roles ----------------------------------------------------------------

    def listen(self, addr) -> SecureListener:
        return wrap_listen(addr, self.identity, self.peers)

    def run_parameter_server(self, listener: SecureListener, model_path: str, n_workers: int,
                             cfg: TrainConfig, until_version: int | None = None,
                             rounds: int | None = None,
                             checkpoint_path: str | None = None) -> tuple[ModelArtifact, TrainStats]:
        """Serve training; resumes from ``checkpoint_path`` when one exists.

        Give either an absolute ``until_version`` or a number of ``rounds``
        past the starting version. A completed run leaves its final model in
        the checkpoint.
        """
        if checkpoint_path and os.path.exists(checkpoint_path + ".manifest"):
            model = ModelArtifact.decode(self.shield.read(checkpoint_path))
            log.info("resuming from checkpoint version %d", model.version)
        else:
            model = ModelArtifact.decode(self.shield.read(model_path))
        if until_version is None:
            if rounds is None:
                raise ValueError("need until_version or rounds")
            until_version = model.version + rounds
        save = (lambda m: self.shield.write(checkpoint_path, m.encode())) if checkpoint_path else None
        channels = [listener.accept() for _ in range(n_workers)]
        try:
            ps = ParameterServer(model, cfg, checkpoint=save)
            stats = ps.serve(handshake_workers(channels), until_version)
        finally:
            for ch in channels:
                ch.close()
        if save and not stats.aborted and ps.model.version not in stats.checkpoints:
            save(ps.model)
            stats.checkpoints.append(ps.model.version)
        return ps.model, stats

    def run_worker(self, ps_addr, shard_path: str, cfg: TrainConfig, worker_id: int) -> int:
        shard = DatasetShard.decode(self.shield.read(shard_path))
        with wrap_connect(ps_addr, self.identity, self.peers) as chan:
            return worker_train_loop(shard, cfg, chan, worker_id)

    def run_inference(self, model_path: str, inputs: np.ndarray):
        model = ModelArtifact.decode(self.shield.read(model_path))
        return infer_batch(model, inputs)


def load_config(path: str | os.PathLike) -> dict:
    return json.loads(Path(path).read_text())
