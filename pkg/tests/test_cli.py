import json
import os
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from enclaveml.fsshield import shield_read, shield_write
from enclaveml.ml import DatasetShard, ModelArtifact, infer_batch

CLI = [sys.executable, "-m", "enclaveml.cli"]
OUTPUTS = []  # every stdout/stderr captured here is checked for key material


def run(*args, check=True, timeout=120):
    p = subprocess.run([*CLI, *map(str, args)], capture_output=True, text=True, timeout=timeout)
    OUTPUTS.append(p.stdout + p.stderr)
    if check and p.returncode != 0:
        raise AssertionError(f"{args} exited {p.returncode}: {p.stderr}")
    return p


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def deployment(tmp_path_factory):
    d = tmp_path_factory.mktemp("deploy")
    run("device", "init", "--out", d / "cas-host.json")
    run("device", "init", "--out", d / "worker-host.json")
    run("device", "trust-root", "--platform", d / "worker-host.json", "--out", d / "trust-root.json")
    admin_port = free_port()
    proc = subprocess.Popen([*CLI, "cas", "serve", "--listen", "127.0.0.1:0", "--store", d / "cas.store",
                             "--admin-listen", f"127.0.0.1:{admin_port}", "--platform", d / "cas-host.json",
                             "--trust-root", d / "trust-root.json"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    ready = json.loads(proc.stdout.readline())
    OUTPUTS.append(json.dumps(ready))
    import httpx
    for _ in range(200):
        try:
            httpx.get(ready["admin"] + "/health", timeout=1)
            break
        except httpx.HTTPError:
            time.sleep(0.05)
    secure = d / "secure"
    secure.mkdir()
    config = {"fs_policy": [{"prefix": str(secure) + "/", "mode": "encrypt-auth", "key": "model-key"}],
              "train": {"batch_size": 100, "learning_rate": 0.0005}}
    (d / "worker.json").write_text(json.dumps(config))
    (d / "fs-policy.json").write_text(json.dumps(config["fs_policy"]))
    key = os.urandom(32)
    yield {"dir": d, "cas": ready["cas"], "admin": ready["admin"], "key": key, "secure": secure,
           "config": d / "worker.json"}
    proc.terminate()
    proc.wait(10)


def test_full_workflow(deployment):
    d, secure, key = deployment["dir"], deployment["secure"], deployment["key"]
    m = last_json(run("worker", "measure", "--config", deployment["config"]).stdout)["measurement"]
    policy = {
        "name": "infer",
        "allowed_measurements": [m],
        "secrets": [{"name": "tls", "kind": "tls-identity"},
                    {"name": "model-key", "kind": "symmetric-key-256",
                     "source": "provided-by-operator", "value": key.hex()}],
    }
    (d / "policy.json").write_text(json.dumps(policy))
    created = last_json(run("session", "create", "--policy", d / "policy.json",
                            "--cas-admin", deployment["admin"]).stdout)
    assert len(created["session_id"]) == 64
    dup = run("session", "create", "--policy", d / "policy.json", "--cas-admin", deployment["admin"], check=False)
    assert dup.returncode == 1 and json.loads(dup.stderr)["error"] == "DuplicateSession"

    run("model", "init", "--dims", "6,10,3", "--seed", "3", "--out", secure / "model.bin")
    run("data", "blobs", "--n", "50", "--dim", "6", "--classes", "3", "--out", secure / "inputs")
    plain_model = ModelArtifact.decode((secure / "model.bin").read_bytes())
    plain_labels = last_json(run("infer", "--model", secure / "model.bin",
                                 "--input", secure / "inputs-0.bin").stdout)["labels"]

    enc = last_json(run("shield", "encrypt", secure, "--policy", d / "fs-policy.json", "--key", key.hex()).stdout)
    assert enc["encrypted"] == 2 and not (secure / "model.bin").exists()
    ok = last_json(run("shield", "verify", secure, "--policy", d / "fs-policy.json", "--key", key.hex()).stdout)
    assert ok == {"verified": 2, "failed": []}

    out = run("worker", "run", "--role", "infer", "--session", "infer", "--cas", deployment["cas"],
              "--platform", d / "worker-host.json", "--config", deployment["config"],
              "--model", secure / "model.bin", "--input", secure / "inputs-0.bin")
    assert last_json(out.stdout)["labels"] == plain_labels
    x = DatasetShard.decode(bytes(shield_read(secure / "inputs-0.bin", key))).inputs
    assert plain_labels == infer_batch(plain_model, x)[1].tolist()

    # shielded model read directly with the operator key, plaintext inputs
    np.save(d / "inputs.npy", x)
    direct = last_json(run("infer", "--model", secure / "model.bin", "--input", d / "inputs.npy",
                           "--key", key.hex()).stdout)
    assert direct["labels"] == plain_labels

    chunk = secure / "model.bin.chunks" / "0"
    raw = bytearray(chunk.read_bytes())
    raw[5] ^= 1
    chunk.write_bytes(raw)
    bad = run("shield", "verify", secure, "--policy", d / "fs-policy.json", "--key", key.hex(), check=False)
    assert bad.returncode == 1
    assert last_json(bad.stdout)["failed"][0]["error"] == "IntegrityError"
    raw[5] ^= 1
    chunk.write_bytes(raw)


def test_worker_with_disallowed_measurement(deployment):
    d = deployment["dir"]
    evil = json.loads(deployment["config"].read_text())
    evil["peers"] = ["anyone"]
    (d / "evil.json").write_text(json.dumps(evil))
    p = run("worker", "run", "--role", "infer", "--session", "infer", "--cas", deployment["cas"],
            "--platform", d / "worker-host.json", "--config", d / "evil.json",
            "--model", deployment["secure"] / "model.bin", "--input", deployment["secure"] / "inputs-0.bin",
            check=False)
    assert p.returncode == 1
    assert p.stdout == ""
    err = json.loads(p.stderr.strip())
    assert err["error"] == "AttestationRejected" and "MeasurementNotAllowed" in err["detail"]


def test_training_via_cli(deployment, tmp_path):
    d = deployment["dir"]
    secure = deployment["secure"]
    m = last_json(run("worker", "measure", "--config", deployment["config"]).stdout)["measurement"]
    policy = {"name": "train", "allowed_measurements": [m],
              "secrets": [{"name": "tls", "kind": "tls-identity"},
                          {"name": "model-key", "kind": "symmetric-key-256",
                           "source": "provided-by-operator", "value": deployment["key"].hex()}]}
    (d / "train.json").write_text(json.dumps(policy))
    run("session", "create", "--policy", d / "train.json", "--cas-admin", deployment["admin"])
    stage = tmp_path / "stage"
    stage.mkdir()
    run("model", "init", "--dims", "4,8,2", "--out", stage / "start.bin")
    run("data", "blobs", "--n", "200", "--dim", "4", "--classes", "2", "--out", stage / "shard")
    shield_write(secure / "start.bin", (stage / "start.bin").read_bytes(), deployment["key"])
    shield_write(secure / "shard-0.bin", (stage / "shard-0.bin").read_bytes(), deployment["key"])
    common = ["--session", "train", "--cas", deployment["cas"], "--platform", d / "worker-host.json",
              "--config", deployment["config"]]
    ps = subprocess.Popen([*CLI, "worker", "run", "--role", "ps", *map(str, common), "--model",
                           str(secure / "start.bin"), "--rounds", "5", "--checkpoint", str(secure / "ckpt.bin")],
                          stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    addr = json.loads(ps.stdout.readline())["listening"]
    w = run("worker", "run", "--role", "worker", *common, "--ps", addr, "--shard", secure / "shard-0.bin")
    assert last_json(w.stdout) == {"worker_id": 0, "rounds": 5}
    out, err = ps.communicate(timeout=60)
    OUTPUTS.append(out + err)
    stats = last_json(out)
    assert stats["rounds"] == 5 and not stats["aborted"] and stats["checkpoints"] == [5]


def test_fedavg_identity(tmp_path):
    run("model", "init", "--dims", "3,4,2", "--seed", "1", "--out", tmp_path / "a.bin")
    run("fedavg", "--inputs", tmp_path / "a.bin", "--out", tmp_path / "avg.bin")
    a = ModelArtifact.decode((tmp_path / "a.bin").read_bytes())
    avg = ModelArtifact.decode((tmp_path / "avg.bin").read_bytes())
    assert avg.same_as(a) and avg.version == a.version + 1
    head = 4 + 4 + 8
    assert (tmp_path / "avg.bin").read_bytes()[head:] == (tmp_path / "a.bin").read_bytes()[head:]


def test_bench_records_are_single_line_json():
    p = run("bench", "syscalls", "--threads", "2", "--requests", "50", "--mode", "sync")
    lines = p.stdout.strip().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["schema"] == 1 and rec["transitions"] == 200
    rec = last_json(run("bench", "attest", "--wan-ms", "5", "--trials", "2").stdout)
    assert rec["schema"] == 1 and rec["ias_total_ms"] > rec["cas_total_ms"]


def test_usage_errors_exit_2(tmp_path):
    p = run("cas", "serve", "--store", tmp_path / "s", "--verbose-policy", "x", check=False)
    assert p.returncode == 2
    p = run("cas", "serve", "--store", tmp_path / "s", "--allow-all", check=False)
    assert p.returncode == 2
    p = run("worker", "run", "--role", "ps", "--session", "s", "--cas", "127.0.0.1:1",
            "--platform", __file__, "--config", __file__, check=False)
    assert p.returncode == 2
    p = run("infer", "--model", tmp_path, "--input", tmp_path, check=False)
    assert p.returncode == 2


def test_runtime_errors_are_single_json_line(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nope")
    p = run("infer", "--model", tmp_path / "bad.bin", "--input", tmp_path / "bad.bin", check=False)
    assert p.returncode == 1
    lines = p.stderr.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "ModelFormatError"


def test_zz_no_secret_bytes_in_any_output(deployment):
    key = deployment["key"]
    blob = "\n".join(OUTPUTS)
    assert OUTPUTS
    assert key.hex() not in blob and key.hex().upper() not in blob
    assert key.decode("latin-1") not in blob
    import base64
    assert base64.b64encode(key).decode() not in blob
    assert "PRIVATE KEY" not in blob
