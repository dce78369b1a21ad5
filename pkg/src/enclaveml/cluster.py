"""Multi-process training on attested workers.

The operator side (:func:`prepare_training`) shields the initial model and
the per-worker data shards under an operator key, then registers a session
that allows exactly the worker measurement and carries that key. Every
parameter-server or worker process attests itself and gets its keys and TLS
identity from the CAS; nothing secret is passed on the command line.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import queue as queue_mod
import time
from dataclasses import asdict, dataclass, field

from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding

from .cas.policy import SessionPolicy
from .enclave import Platform
from .errors import EnclaveMLError
from .fsshield import Mode, shield_write
from .ml.data import DatasetShard
from .ml.model import ModelArtifact, TrainConfig
from .worker import WorkerRuntime, worker_measurement

log = logging.getLogger(__name__)

_CTX = mp.get_context("spawn")


@dataclass
class ClusterSpec:
    """Everything a spawned role process needs; no secret material."""

    cas_addr: tuple[str, int]
    session: str
    platform: dict
    config: dict
    cas_root_pem: bytes
    workdir: str
    n_workers: int
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))

    @property
    def secure_dir(self) -> str:
        return os.path.join(self.workdir, "secure")

    @property
    def model_path(self) -> str:
        return os.path.join(self.secure_dir, "model.bin")

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.secure_dir, "checkpoint.bin")

    def shard_path(self, i: int) -> str:
        return os.path.join(self.secure_dir, f"shard-{i}.bin")

    @property
    def checkpoint_scope(self) -> str:
        return f"{self.session}:{self.checkpoint_path}"


def worker_config(workdir: str) -> dict:
    secure = os.path.join(os.path.abspath(workdir), "secure") + os.sep
    return {"fs_policy": [{"prefix": secure, "mode": "encrypt-auth", "key": "model-key", "freshness": True}]}


def prepare_training(cas_service, cas_addr, workdir: str, model: ModelArtifact,
                     shards: list[DatasetShard], platform: Platform, session: str = "train",
                     cfg: TrainConfig | None = None, key: bytes | None = None) -> ClusterSpec:
    """Operator setup: shield inputs, create the session, return the launch spec.

    ``key`` is the operator's model key (random if omitted); it reaches
    role processes only through the CAS.
    """
    workdir = os.path.abspath(workdir)
    config = worker_config(workdir)
    key = key or os.urandom(32)
    spec = ClusterSpec(tuple(cas_addr), session, platform.to_json(), config,
                       cas_service.ca_cert.public_bytes(Encoding.PEM), workdir, len(shards),
                       asdict(cfg or TrainConfig()))
    os.makedirs(spec.secure_dir, exist_ok=True)
    shield_write(spec.model_path, model.encode(), key, mode=Mode.ENCRYPT_AUTH)
    for i, shard in enumerate(shards):
        shield_write(spec.shard_path(i), shard.encode(), key, mode=Mode.ENCRYPT_AUTH)
    policy = SessionPolicy.from_json({
        "name": session,
        "allowed_measurements": [worker_measurement(config).hex],
        "secrets": [
            {"name": "tls", "kind": "tls-identity"},
            {"name": "model-key", "kind": "symmetric-key-256", "source": "provided-by-operator",
             "value": key.hex()},
        ],
    })
    cas_service.create_session(policy)
    return spec


def _start_runtime(spec: ClusterSpec) -> WorkerRuntime:
    root = x509.load_pem_x509_certificate(spec.cas_root_pem)
    return WorkerRuntime.start(spec.cas_addr, spec.session, Platform.from_json(spec.platform),
                               spec.config, root)


def ps_main(spec: ClusterSpec, rounds: int, out) -> None:
    """Parameter-server role. Reports ("listening", addr) then ("done", stats)."""
    try:
        with _start_runtime(spec) as rt:
            with rt.listen(("127.0.0.1", 0)) as listener:
                out.put(("listening", listener.address))
                _, stats = rt.run_parameter_server(
                    listener, spec.model_path, spec.n_workers, TrainConfig(**spec.train),
                    rounds=rounds, checkpoint_path=spec.checkpoint_path)
        out.put(("done", stats.to_json()))
    except EnclaveMLError as exc:
        out.put(("error", exc.code, str(exc)))


def worker_main(spec: ClusterSpec, ps_addr, worker_id: int) -> None:
    try:
        with _start_runtime(spec) as rt:
            rt.run_worker(ps_addr, spec.shard_path(worker_id), TrainConfig(**spec.train), worker_id)
    except EnclaveMLError as exc:
        log.warning("worker %d stopped: %s", worker_id, exc)
        raise SystemExit(1)


@dataclass
class Run:
    ps: mp.Process
    workers: list[mp.Process]
    out: object
    ps_addr: tuple[str, int]

    def result(self, timeout: float = 600.0) -> dict:
        kind, *rest = self.out.get(timeout=timeout)
        if kind != "done":
            raise RuntimeError(f"parameter server failed: {rest}")
        return rest[0]

    def join(self, timeout: float = 30.0) -> None:
        for p in [self.ps, *self.workers]:
            p.join(timeout)
            if p.is_alive():
                p.kill()
                p.join()


def launch(spec: ClusterSpec, rounds: int, start_timeout: float = 120.0) -> Run:
    out = _CTX.Queue()
    ps = _CTX.Process(target=ps_main, args=(spec, rounds, out), name="ps")
    ps.start()
    try:
        kind, *rest = out.get(timeout=start_timeout)
    except queue_mod.Empty:
        ps.kill()
        raise RuntimeError("parameter server did not come up") from None
    if kind != "listening":
        ps.join()
        raise RuntimeError(f"parameter server failed: {rest}")
    addr = tuple(rest[0])
    workers = [spawn_worker(spec, addr, i) for i in range(spec.n_workers)]
    return Run(ps, workers, out, addr)


def spawn_worker(spec: ClusterSpec, ps_addr, worker_id: int) -> mp.Process:
    p = _CTX.Process(target=worker_main, args=(spec, ps_addr, worker_id), name=f"worker-{worker_id}")
    p.start()
    return p


def wait_for_checkpoint(cas_service, spec: ClusterSpec, timeout: float = 120.0) -> int:
    """Block until the CAS has seen at least one checkpoint write; return its counter."""
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        try:
            value = cas_service.read_counter(spec.checkpoint_scope)
        except EnclaveMLError:
            value = 0
        if value:
            return value
        time.sleep(0.01)
    raise TimeoutError("no checkpoint written")
