"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``criterion N PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary. Run alone with
``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import os
import pickle
import random
import threading

import numpy as np
import pytest
from cryptography.hazmat.primitives import serialization

from enclaveml import bench, cluster, fsshield
from enclaveml.cas import CasClient, CasServer, CasService, SessionPolicy, load_store, verify_audit_chain
from enclaveml.cas.store import AuditEvent
from enclaveml.enclave import Platform, TrustRoot, measure
from enclaveml.errors import FreshnessError, IntegrityError
from enclaveml.fsshield import shield_read, shield_write
from enclaveml.ml import (
    ModelArtifact,
    TrainConfig,
    blobs,
    infer_batch,
    load_model_shielded,
    loss_and_grads,
    save_model_shielded,
    single_process_sgd,
)
from enclaveml.netshield import PeerPolicy, wrap_connect, wrap_listen
from enclaveml.syscall_bridge import random_workload, run_async, run_baseline_sync, sleep_workload
from enclaveml.worker import WorkerRuntime
from tap import TapProxy

RESULTS: list[str] = []
CFG = TrainConfig(batch_size=100, learning_rate=0.0005)


def verdict(n, title, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture
def cas(tmp_path):
    worker = Platform.generate()
    svc = CasService(Platform.generate(), TrustRoot.of([worker]), store_path=tmp_path / "cas.store")
    with CasServer(svc) as srv:
        yield svc, srv, worker


def test_criterion_01_attestation_speedup():
    rec = bench.bench_attest(wan_ms=70.0)
    ratio = rec["ias_total_ms"] / rec["cas_total_ms"]
    ok = ratio >= 10 and rec["cas_verify_ms"] < 5
    verdict(1, "attestation speedup", ok,
            f"ias {rec['ias_total_ms']:.1f} ms (verify {rec['ias_verify_ms']:.1f} ms) vs "
            f"cas {rec['cas_total_ms']:.2f} ms -> {ratio:.1f}x (need >=10x); "
            f"local verify {rec['cas_verify_ms']:.3f} ms (need <5 ms)")


def test_criterion_02_fsshield_overhead():
    rec = bench.bench_fsshield()
    ok = rec["overhead"] <= 0.05 and rec["outputs_identical"]
    verdict(2, "file-shield overhead", ok,
            f"{rec['model_bytes'] / 1e6:.1f} MB model, load+classify {rec['inputs']} inputs: "
            f"plain {rec['plain_total_ms']:.0f} ms, shielded {rec['shielded_total_ms']:.0f} ms, "
            f"overhead {100 * rec['overhead']:.2f}% (need <=5%); "
            f"load step alone {rec['plain_load_ms']:.0f} -> {rec['shielded_load_ms']:.0f} ms")


def test_criterion_03_tamper_completeness(tmp_path):
    path = str(tmp_path / "model.bin")
    key = os.urandom(32)
    shield_write(path, os.urandom(5 * 4096 - 100), key, chunk_size=4096)
    files = [fsshield.manifest_path(path)] + [
        os.path.join(fsshield.chunks_dir(path), n) for n in sorted(os.listdir(fsshield.chunks_dir(path)))]
    rng = random.Random(2024)
    silent, detected = 0, 0
    for _ in range(100):
        f = rng.choice(files)
        original = open(f, "rb").read()
        mutated = bytearray(original)
        mutated[rng.randrange(len(original))] ^= rng.randrange(1, 256)
        open(f, "wb").write(mutated)
        try:
            shield_read(path, key)
            silent += 1
        except IntegrityError:
            detected += 1
        open(f, "wb").write(original)
    verdict(3, "tamper completeness", silent == 0 and detected == 100,
            f"{detected}/100 flips raised IntegrityError over {len(files)} artifacts, {silent} silent")


def test_criterion_04_rollback_detection(tmp_path, cas):
    svc, srv, worker = cas
    m = measure(b"rollback-probe", b"")
    svc.create_session(SessionPolicy.from_json({
        "name": "files", "allowed_measurements": [m.hex],
        "secrets": [{"name": "k", "kind": "symmetric-key-256"}]}))
    detected = 0
    with CasClient(srv.address, root=svc.ca_cert) as client:
        key = client.attest("files", worker, m).secret("k")
        for trial in range(20):
            p = str(tmp_path / f"state-{trial}")
            shield_write(p, b"v1", key, freshness=client)
            snap = (open(fsshield.manifest_path(p), "rb").read(),
                    {n: open(os.path.join(fsshield.chunks_dir(p), n), "rb").read()
                     for n in os.listdir(fsshield.chunks_dir(p))})
            shield_write(p, b"v2", key, freshness=client)
            open(fsshield.manifest_path(p), "wb").write(snap[0])
            for n, data in snap[1].items():
                open(os.path.join(fsshield.chunks_dir(p), n), "wb").write(data)
            try:
                shield_read(p, key, freshness=client)
            except FreshnessError as exc:
                detected += (exc.expected, exc.stored) == (1, 2)
    verdict(4, "rollback detection", detected == 20, f"{detected}/20 restored snapshots raised FreshnessError(1, 2)")


def test_criterion_05_accuracy_identity(tmp_path, make_identity):
    rng = np.random.default_rng(5)
    sizes = [(16, 32, 4), (64, 128, 10), (256, 256, 128, 10)]
    key = os.urandom(32)
    mismatches, total = 0, 0
    ident = make_identity("infer")
    peers = PeerPolicy.of(["infer"])
    for i, dims in enumerate(sizes):
        model = ModelArtifact.init(dims, seed=i)
        x = rng.standard_normal((1000, dims[0])).astype(np.float32)
        plain_probs, plain_labels = infer_batch(model, x)

        path = tmp_path / f"model-{i}"
        save_model_shielded(path, model, key)
        with wrap_listen(("127.0.0.1", 0), ident, peers) as listener:
            box = {}
            t = threading.Thread(target=lambda: box.setdefault("chan", listener.accept()))
            t.start()
            with wrap_connect(listener.address, ident, peers) as client:
                t.join()
                client.send_frame(x.tobytes())
                received = np.frombuffer(box["chan"].recv_frame(), np.float32).reshape(x.shape)
                box["chan"].close()
        probs, labels = infer_batch(load_model_shielded(path, key), received)
        total += len(x)
        mismatches += sum(probs[j].tobytes() != plain_probs[j].tobytes() for j in range(len(x)))
        mismatches += int((labels != plain_labels).sum())
    verdict(5, "accuracy identity", mismatches == 0 and total == 3000,
            f"{total} inferences over {len(sizes)} model sizes, {mismatches} differing outputs")


def _spec_is_secret_free(spec, key):
    blob = pickle.dumps(spec)
    return key not in blob and key.hex().encode() not in blob


def test_criterion_06a_one_worker_matches_oracle(tmp_path, cas):
    svc, srv, worker = cas
    data = blobs(500, 16, 4, seed=6)
    model = ModelArtifact.init((16, 32, 4), seed=6)
    key = os.urandom(32)
    spec = cluster.prepare_training(svc, srv.address, tmp_path, model, [data], worker, cfg=CFG, key=key)
    run = cluster.launch(spec, rounds=30)
    try:
        stats = run.result()
    finally:
        run.join()
    final = load_model_shielded(spec.checkpoint_path, key)
    oracle = single_process_sgd(model, [data], CFG, 30)
    ok = final.same_as(oracle) and final.version == 30 and _spec_is_secret_free(spec, key)
    verdict("6a", "1-worker PS == single-process SGD", ok,
            f"{stats['rounds']} rounds over attested processes, batch {CFG.batch_size}, lr {CFG.learning_rate}; "
            f"bit-identical={final.same_as(oracle)}")


def test_criterion_06b_scaling_shape():
    times = {}
    for k in (1, 2, 3):
        # best of two absorbs one-off scheduling noise
        times[k] = min(bench.bench_training_scaling(k)["wall_time_s"] for _ in range(2))
    ok = times[1] > times[2] > times[3]
    verdict("6b", "training wall time 1 -> 2 -> 3 workers", ok,
            f"{times[1]:.2f} s -> {times[2]:.2f} s -> {times[3]:.2f} s on {os.cpu_count()} CPU(s) "
            f"(speedups {times[1] / times[2]:.2f}x, {times[1] / times[3]:.2f}x)")


def test_criterion_07_elasticity(tmp_path, cas):
    svc, srv, worker = cas
    data = blobs(600, 8, 3, seed=7)
    model = ModelArtifact.init((8, 32, 3), seed=7)
    key = os.urandom(32)
    spec = cluster.prepare_training(svc, srv.address, tmp_path, model, data.split(2), worker, cfg=CFG, key=key)
    initial_loss, _ = loss_and_grads(model, data.inputs, data.labels)

    first = cluster.launch(spec, rounds=1_000_000)
    cluster.wait_for_checkpoint(svc, spec)
    first.workers[1].kill()
    aborted = first.result(120)
    first.join()
    accepted_before = sum(e.event is AuditEvent.ATTEST_ACCEPTED for e in svc.audit_entries())

    # replacements get everything from the CAS; the spec carries no keys
    second = cluster.launch(spec, rounds=100)
    done = second.result(300)
    second.join()
    accepted_after = sum(e.event is AuditEvent.ATTEST_ACCEPTED for e in svc.audit_entries())

    final = load_model_shielded(spec.checkpoint_path, key)
    final_loss, _ = loss_and_grads(final, data.inputs, data.labels)
    resumed_from = final.version - done["rounds"]
    ok = (aborted["aborted"] and aborted["failed_worker"] == 1 and not done["aborted"]
          and resumed_from >= 50 and accepted_after - accepted_before == 3
          and _spec_is_secret_free(spec, key) and final_loss < initial_loss)
    verdict(7, "elasticity", ok,
            f"run 1 aborted at v{aborted['version']} (worker {aborted['failed_worker']} killed); "
            f"3 replacement processes attested; resumed from checkpoint v{resumed_from} to v{final.version}; "
            f"loss {initial_loss:.3f} -> {final_loss:.3f}")


def test_criterion_08_syscall_dominance(tmp_path):
    cost = 10e-6
    asy, ra = run_async(sleep_workload(4, 1000), transition_cost=cost)
    syn, rs = run_baseline_sync(sleep_workload(4, 1000), transition_cost=cost)
    ok = asy.transitions < syn.transitions and ra == rs
    worst = 0.0
    for seed in range(10):
        outs = []
        for runner in (run_async, run_baseline_sync):
            work = tmp_path / f"{seed}-{runner.__name__}"
            work.mkdir()
            wl = random_workload(np.random.default_rng(seed), 4, 1000, work)
            stats, res = runner(wl, transition_cost=cost)
            files = {f: (work / f).read_bytes() for f in sorted(os.listdir(work))}
            outs.append((stats.transitions, res, files))
        (ta, r1, f1), (ts, r2, f2) = outs
        ok &= ta < ts and r1 == r2 and f1 == f2
        worst = max(worst, ta / ts)
    verdict(8, "syscall-bridge dominance", ok,
            f"4x1000 Sleep(0): async {asy.transitions} vs sync {syn.transitions} transitions, results equal; "
            f"10 random workloads all dominated (worst async/sync ratio {worst:.3f})")


def test_criterion_09_gradient_correctness():
    from test_ml import model_422, reference_loss

    m = model_422()
    rng = np.random.default_rng(21)
    x = rng.standard_normal((16, 4)).astype(np.float32) + 1.0
    labels = rng.integers(0, 2, 16)
    _, grads = loss_and_grads(m, x, labels)
    params = [p.astype(np.float64) for p in m.params()]
    eps, worst, checked, failing = 1e-3, 0.0, 0, 0
    for j, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = reference_loss(params, x, labels)
            p[idx] = orig - eps
            down = reference_loss(params, x, labels)
            p[idx] = orig
            fd = (up - down) / (2 * eps)
            g = float(grads[j][idx])
            rel = abs(g - fd) / max(abs(fd), abs(g)) if (fd or g) else 0.0
            worst = max(worst, rel)
            failing += rel > 1e-2
            checked += 1
    verdict(9, "gradient correctness", failing == 0 and checked == m.num_params,
            f"{checked}/{m.num_params} parameters of a 4-2-2 model, worst relative error {worst:.2e} (need <=1e-2)")


def test_criterion_10_security_hygiene(tmp_path, cas):
    svc, srv, worker = cas
    data = blobs(400, 8, 3, seed=10)
    model = ModelArtifact.init((8, 16, 3), seed=10)
    key = os.urandom(32)
    cas_tap = TapProxy(srv.address)
    spec = cluster.prepare_training(svc, cas_tap.address, tmp_path, model, data.split(2), worker, cfg=CFG, key=key)
    platform = Platform.from_json(spec.platform)
    runtimes, ps_ready, errors = [], threading.Event(), []
    box = {}

    def ps():
        try:
            with WorkerRuntime.start(cas_tap.address, spec.session, platform, spec.config) as rt:
                runtimes.append(rt)
                with rt.listen(("127.0.0.1", 0)) as listener:
                    box["tap"] = TapProxy(listener.address)
                    ps_ready.set()
                    box["stats"] = rt.run_parameter_server(listener, spec.model_path, 2, CFG, rounds=10,
                                                           checkpoint_path=spec.checkpoint_path)[1]
        except Exception as exc:
            errors.append(exc)
            ps_ready.set()

    def work(i):
        try:
            with WorkerRuntime.start(cas_tap.address, spec.session, platform, spec.config) as rt:
                runtimes.append(rt)
                rt.run_worker(box["tap"].address, spec.shard_path(i), CFG, i)
        except Exception as exc:
            errors.append(exc)

    t_ps = threading.Thread(target=ps)
    t_ps.start()
    ps_ready.wait(60)
    workers = [threading.Thread(target=work, args=(i,)) for i in range(2)]
    for t in workers:
        t.start()
    for t in [t_ps, *workers]:
        t.join(120)

    needles = []
    for rt in runtimes:
        for name, value in rt.provisioned.bundle.secrets.items():
            needles += [value, value.hex().encode()]
        priv = rt.identity.key
        needles += [priv.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                                       serialization.NoEncryption()),
                    priv.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8,
                                       serialization.NoEncryption())]
    captured = bytes(cas_tap.captured) + bytes(box["tap"].captured)
    leaks = sum(n in captured for n in needles)
    entries = svc.audit_entries()
    chain_ok = verify_audit_chain(entries, svc.store.audit_head) == svc.store.audit_head
    reloaded = load_store(svc.store_path, svc.platform.device_secret, svc.measurement)
    chain_ok &= verify_audit_chain(reloaded.audit, reloaded.audit_head) == svc.store.audit_head
    ok = (not errors and len(runtimes) == 3 and box["stats"].rounds == 10 and leaks == 0
          and chain_ok and len(captured) > 10_000)
    verdict(10, "security hygiene", ok,
            f"{len(captured)} captured bytes over attest+provision+train, {len(needles)} key encodings searched, "
            f"{leaks} found; audit chain of {len(entries)} entries verifies={chain_ok}")
    cas_tap.close()
    box["tap"].close()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
