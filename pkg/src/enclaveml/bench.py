"""Benchmarks. Each returns one JSON-serialisable record with ``schema: 1``."""

from __future__ import annotations

import functools
import os
import statistics
import tempfile
import time

import numpy as np

from .cas import CasClient, CasServer, CasService, SessionPolicy
from .enclave import Platform, ReportData, TrustRoot, generate_quote, measure, verify_quote_local, verify_quote_remote_sim
from .fsshield import shield_read, shield_write
from .ml.model import ModelArtifact, TrainConfig, infer_batch
from .syscall_bridge import DEFAULT_TRANSITION_COST, random_workload, run_async, run_baseline_sync, sleep_workload

SCHEMA = 1
# ~42.8 MB of float32 parameters
FSSHIELD_DIMS = (1024, 2400, 2400, 1024, 10)
SCALING_DIMS = (128, 384, 384, 10)


def _record(bench: str, **fields) -> dict:
    return {"schema": SCHEMA, "bench": bench, **fields}


def _bench_session(m) -> SessionPolicy:
    return SessionPolicy.from_json({
        "name": "bench",
        "allowed_measurements": [m.hex],
        "secrets": [{"name": "k", "kind": "symmetric-key-256"}],
    })


def _attest_times(service: CasService, platform: Platform, m, trials: int) -> list[float]:
    out = []
    with CasServer(service) as srv:
        for _ in range(trials):
            t0 = time.perf_counter()
            with CasClient(srv.address, root=service.ca_cert) as client:
                client.attest("bench", platform, m)
            out.append(time.perf_counter() - t0)
    return out


def bench_attest(wan_ms: float = 70.0, trials: int = 5, verify_trials: int = 200) -> dict:
    """End-to-end attest+provision against a local-verifying CAS and a simulated remote verifier."""
    worker = Platform.generate()
    root = TrustRoot.of([worker])
    m = measure(b"bench-worker", b"{}")
    q = generate_quote(m, ReportData.pad(os.urandom(32)), worker.device_key).encode()

    verify_quote_local(q, [m], root)
    local = []
    for _ in range(verify_trials):
        t0 = time.perf_counter()
        verify_quote_local(q, [m], root)
        local.append(time.perf_counter() - t0)

    remote_verifier = functools.partial(verify_quote_remote_sim, wan_latency=wan_ms / 1000.0)
    t0 = time.perf_counter()
    remote_verifier(q, [m], root)
    ias_verify = time.perf_counter() - t0

    totals = {}
    for name, verifier in (("cas", verify_quote_local), ("ias", remote_verifier)):
        svc = CasService(Platform.generate(), root, verifier=verifier)
        svc.create_session(_bench_session(m))
        totals[name] = statistics.median(_attest_times(svc, worker, m, trials))

    return _record(
        "attest",
        wan_ms=wan_ms,
        cas_verify_ms=statistics.median(local) * 1e3,
        ias_verify_ms=ias_verify * 1e3,
        cas_total_ms=totals["cas"] * 1e3,
        ias_total_ms=totals["ias"] * 1e3,
        speedup=totals["ias"] / totals["cas"],
    )


def bench_fsshield(dims=FSSHIELD_DIMS, inputs: int = 100, trials: int = 9, seed: int = 0,
                   workdir: str | None = None) -> dict:
    """Model load (+ classification of ``inputs`` vectors) through the shield vs plaintext.

    ``overhead`` is the relative increase of the whole load-and-classify job;
    ``load_overhead`` isolates the load step.
    """
    model = ModelArtifact.init(dims, seed)
    blob = model.encode()
    key = os.urandom(32)
    x = np.random.default_rng(seed).standard_normal((inputs, dims[0])).astype(np.float32)
    with tempfile.TemporaryDirectory(dir=workdir) as d:
        plain_path, shielded_path = os.path.join(d, "model.plain"), os.path.join(d, "model.shielded")
        with open(plain_path, "wb") as f:
            f.write(blob)
        shield_write(shielded_path, blob, key)
        del blob

        def load_plain():
            with open(plain_path, "rb") as f:
                return ModelArtifact.decode(f.read())

        def load_shielded():
            return ModelArtifact.decode(shield_read(shielded_path, key))

        load = {"plain": [], "shielded": []}
        total = {"plain": [], "shielded": []}
        outputs = {}
        # interleave the two modes so drift on the host hits both equally
        for _ in range(trials):
            for name, loader in (("plain", load_plain), ("shielded", load_shielded)):
                t0 = time.perf_counter()
                m = loader()
                t1 = time.perf_counter()
                probs, _ = infer_batch(m, x)
                t2 = time.perf_counter()
                load[name].append(t1 - t0)
                total[name].append(t2 - t0)
                outputs[name] = probs.tobytes()

    med = {k: {n: statistics.median(v) for n, v in d.items()} for k, d in (("load", load), ("total", total))}
    return _record(
        "fsshield",
        model_bytes=model.num_params * 4,
        inputs=inputs,
        plain_load_ms=med["load"]["plain"] * 1e3,
        shielded_load_ms=med["load"]["shielded"] * 1e3,
        plain_total_ms=med["total"]["plain"] * 1e3,
        shielded_total_ms=med["total"]["shielded"] * 1e3,
        load_overhead=med["load"]["shielded"] / med["load"]["plain"] - 1,
        overhead=med["total"]["shielded"] / med["total"]["plain"] - 1,
        outputs_identical=outputs["plain"] == outputs["shielded"],
    )


def bench_syscalls(threads: int = 4, requests: int = 1000,
                   transition_cost_us: float = DEFAULT_TRANSITION_COST * 1e6,
                   mode: str = "async", workload: str = "sleep", seed: int = 0) -> dict:
    cost = transition_cost_us / 1e6
    runner = {"async": run_async, "sync": run_baseline_sync}[mode]
    with tempfile.TemporaryDirectory() as d:
        if workload == "sleep":
            wl = sleep_workload(threads, requests)
        else:
            wl = random_workload(np.random.default_rng(seed), threads, requests, d)
        stats, _ = runner(wl, transition_cost=cost)
    return _record("syscalls", mode=mode, threads=threads, requests=requests,
                   transition_cost_us=transition_cost_us, workload=workload, **stats.to_json())


def bench_training_scaling(workers: int, total_steps: int = 60, dims=SCALING_DIMS,
                           samples: int = 1200, seed: int = 0) -> dict:
    """Attested multi-process PS training with a fixed amount of total work.

    ``total_steps`` worker-batches of 100 samples are split evenly, so ``k``
    workers run ``total_steps / k`` synchronous rounds. The reported time
    is the parameter server's serve loop, excluding process start-up and
    attestation.
    """
    from . import cluster
    from .ml.data import blobs

    if total_steps % workers:
        raise ValueError("total_steps must divide evenly among workers")
    worker_platform = Platform.generate()
    data = blobs(samples, dims[0], dims[-1], seed=seed)
    model = ModelArtifact.init(dims, seed)
    with tempfile.TemporaryDirectory() as d:
        svc = CasService(Platform.generate(), TrustRoot.of([worker_platform]))
        with CasServer(svc) as srv:
            spec = cluster.prepare_training(svc, srv.address, d, model, data.split(workers),
                                            worker_platform, cfg=TrainConfig())
            run = cluster.launch(spec, rounds=total_steps // workers)
            try:
                stats = run.result()
            finally:
                run.join()
    return _record("training", workers=workers, total_steps=total_steps, rounds=stats["rounds"],
                   wall_time_s=stats["wall_time"], cpus=os.cpu_count(),
                   first_loss=stats["first_loss"], last_loss=stats["last_loss"])
