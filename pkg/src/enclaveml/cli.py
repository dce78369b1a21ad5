"""Command-line entry point (``enclaveml``).

Runtime failures print one JSON line ``{"error": <code>, "detail": ...}`` on
stderr and exit 1; usage errors exit 2. Nothing here prints secret bytes.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

import click
import numpy as np

from .errors import EnclaveMLError

log = logging.getLogger("enclaveml")


def _emit(record: dict) -> None:
    click.echo(json.dumps(record, separators=(",", ":")))


def _fail(code: str, detail: str) -> None:
    click.echo(json.dumps({"error": code, "detail": detail}, separators=(",", ":")), err=True)
    sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EnclaveMLError as exc:
            _fail(exc.code, str(exc))
        except FileNotFoundError as exc:
            _fail("IoError", f"{exc.filename}: not found")
        except OSError as exc:
            _fail("IoError", str(exc))
        except ValueError as exc:
            _fail("InvalidInput", str(exc))
    return wrapper


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(d) for d in text.split(","))
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None
    if len(dims) < 2 or min(dims) < 1:
        raise click.BadParameter("need at least two positive widths")
    return dims


def _key(text: str) -> bytes:
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise click.BadParameter("key must be hex") from None
    if len(key) != 32:
        raise click.BadParameter("key must be 32 bytes (64 hex digits)")
    return key


def _load_root(path):
    if path is None:
        return None
    from cryptography import x509
    return x509.load_pem_x509_certificate(Path(path).read_bytes())


@click.group()
@click.option("-v", "--verbose", count=True, help="Log to stderr (-v info, -vv debug).")
def main(verbose):
    """Attested, shielded ML jobs: CAS, file/network shields, workers and benchmarks."""
    if verbose:
        logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


# --- devices ------------------------------------------------------------------

@main.group()
def device():
    """Simulated platform (device key) management."""


@device.command("init")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def device_init(out):
    """Create a platform file holding a fresh device key and device secret."""
    from .enclave import Platform
    p = Platform.generate()
    p.save(out)
    _emit({"device_id": p.device_id.hex(), "path": out})


@device.command("trust-root")
@click.option("--platform", "platforms", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def device_trust_root(platforms, out):
    """Write the public trust root for the given platforms."""
    from .enclave import Platform, TrustRoot
    root = TrustRoot.of([Platform.load(p) for p in platforms])
    root.save(out)
    _emit({"devices": [d.hex() for d in sorted(root.keys)], "path": out})


# --- CAS ------------------------------------------------------------------------

@main.group()
def cas():
    """Configuration and attestation service."""


@cas.command("serve")
@click.option("--listen", default="127.0.0.1:7400", show_default=True, help="Attestation (TLS) address.")
@click.option("--store", required=True, type=click.Path(dir_okay=False), help="Sealed store file.")
@click.option("--admin-listen", default=None, help="Operator HTTP address, e.g. 127.0.0.1:7401.")
@click.option("--platform", "platform_path", default=None, type=click.Path(dir_okay=False),
              help="Platform file of this host (default: <store>.platform.json, created if absent).")
@click.option("--trust-root", "trust_root_path", default=None, type=click.Path(dir_okay=False),
              help="Trust root file (default: <store>.trust-root.json).")
@handle_errors
def cas_serve(listen, store, admin_listen, platform_path, trust_root_path):
    """Run the CAS. All flags are addresses or paths; behaviour has no knobs."""
    from .cas import CasServer, CasService
    from .enclave import Platform, TrustRoot
    from .netshield import parse_addr

    platform_path = platform_path or store + ".platform.json"
    trust_root_path = trust_root_path or store + ".trust-root.json"
    if os.path.exists(platform_path):
        platform = Platform.load(platform_path)
    else:
        platform = Platform.generate()
        platform.save(platform_path)
    root = TrustRoot.load(trust_root_path)
    service = CasService(platform, root, store_path=store)
    server = CasServer(service, listen).start()
    ready = {"cas": "%s:%d" % server.address, "measurement": service.measurement.hex}
    admin = None
    if admin_listen:
        import uvicorn
        from .cas.api import create_app
        host, port = parse_addr(admin_listen)
        admin = uvicorn.Server(uvicorn.Config(create_app(service), host=host, port=port,
                                              log_level="warning", lifespan="off"))
        threading.Thread(target=admin.run, daemon=True).start()
        ready["admin"] = f"http://{host}:{port}"
    _emit(ready)
    sys.stdout.flush()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    if admin is not None:
        admin.should_exit = True
    server.stop()


@main.group()
def session():
    """Session policies (via the CAS operator API)."""


@session.command("create")
@click.option("--policy", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cas-admin", default="http://127.0.0.1:7401", show_default=True)
@handle_errors
def session_create(policy, cas_admin):
    """Upload a session policy; prints its session id."""
    import httpx
    doc = json.loads(Path(policy).read_text())
    try:
        r = httpx.post(cas_admin.rstrip("/") + "/sessions", json=doc, timeout=30)
    except httpx.HTTPError as exc:
        _fail("IoError", f"CAS admin unreachable: {exc}")
    if r.status_code != 201:
        body = r.json() if r.headers.get("content-type", "").startswith("application/json") else {}
        _fail(body.get("error", f"HTTP{r.status_code}"), body.get("detail", r.text))
    _emit(r.json())


# --- shield ---------------------------------------------------------------------

def _shield_keys(policy, key_hex, cas_addr, session_name, platform_path, cas_root):
    if key_hex and key_hex != "from-cas":
        key = _key(key_hex)
        return {name: key for name in policy.key_names()}, None
    if not (cas_addr and session_name and platform_path):
        raise click.UsageError("--key from-cas needs --cas, --session and --platform")
    from .cas import provision
    from .enclave import Platform
    from .worker import worker_measurement
    config = {"fs_policy": policy.to_json()}
    prov, client = provision(cas_addr, session_name, Platform.load(platform_path),
                             worker_measurement(config), root=_load_root(cas_root))
    return {name: prov.secret(name) for name in policy.key_names()}, client


def _walk(directory):
    for base, dirs, files in os.walk(directory):
        dirs[:] = [d for d in dirs if not d.endswith(".chunks")]
        for f in sorted(files):
            yield os.path.abspath(os.path.join(base, f))


_cas_opts = [
    click.option("--cas", "cas_addr", default=None, help="CAS address for --key from-cas."),
    click.option("--session", "session_name", default=None),
    click.option("--platform", "platform_path", default=None, type=click.Path(exists=True)),
    click.option("--cas-root", default=None, type=click.Path(exists=True), help="Pin the CAS root certificate."),
]


def _with_cas_opts(fn):
    for opt in reversed(_cas_opts):
        fn = opt(fn)
    return fn


@main.group()
def shield():
    """Encrypt or verify files according to a path policy."""


@shield.command("encrypt")
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--policy", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_hex", required=True, help="64 hex digits, or 'from-cas'.")
@_with_cas_opts
@handle_errors
def shield_encrypt(directory, policy, key_hex, cas_addr, session_name, platform_path, cas_root):
    """Shield every file under DIRECTORY in place; passthrough files are left alone."""
    from .fsshield import MANIFEST_SUFFIX, FileShield, Mode, PathPolicy
    pol = PathPolicy.load(policy)
    keys, client = _shield_keys(pol, key_hex, cas_addr, session_name, platform_path, cas_root)
    fs = FileShield(pol, keys, freshness=client)
    done = []
    try:
        for path in _walk(directory):
            if path.endswith(MANIFEST_SUFFIX) or pol.resolve(path).mode is Mode.PASSTHROUGH:
                continue
            data = Path(path).read_bytes()
            fs.write(path, data)
            os.remove(path)
            done.append(path)
    finally:
        if client is not None:
            client.close()
    _emit({"encrypted": len(done), "files": done})


@shield.command("verify")
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--policy", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_hex", required=True, help="64 hex digits, or 'from-cas'.")
@_with_cas_opts
@handle_errors
def shield_verify(directory, policy, key_hex, cas_addr, session_name, platform_path, cas_root):
    """Check every shielded file under DIRECTORY; exit 1 if any fails."""
    from .fsshield import MANIFEST_SUFFIX, FileShield, PathPolicy
    pol = PathPolicy.load(policy)
    keys, client = _shield_keys(pol, key_hex, cas_addr, session_name, platform_path, cas_root)
    fs = FileShield(pol, keys, freshness=client)
    ok, failed = [], []
    try:
        for path in _walk(directory):
            if not path.endswith(MANIFEST_SUFFIX):
                continue
            target = path[:-len(MANIFEST_SUFFIX)]
            try:
                fs.read(target)
                ok.append(target)
            except EnclaveMLError as exc:
                failed.append({"path": target, "error": exc.code, "detail": str(exc)})
    finally:
        if client is not None:
            client.close()
    _emit({"verified": len(ok), "failed": failed})
    if failed:
        sys.exit(1)


# --- workers --------------------------------------------------------------------

@main.group()
def worker():
    """Attested worker processes."""


@worker.command("measure")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@handle_errors
def worker_measure(config_path):
    """Print the measurement a worker with this config will present."""
    from .worker import load_config, worker_measurement
    _emit({"measurement": worker_measurement(load_config(config_path)).hex})


def _read_inputs(path, shield=None) -> np.ndarray:
    from .ml.data import DatasetShard
    raw = shield.read(path) if shield is not None else Path(path).read_bytes()
    if raw[:4] == b"SMLD":
        return DatasetShard.decode(bytes(raw)).inputs
    if raw[:6] == b"\x93NUMPY":
        import io
        return np.load(io.BytesIO(bytes(raw)), allow_pickle=False).astype(np.float32)
    raise ValueError("inputs must be a dataset shard or a .npy array")


@worker.command("run")
@click.option("--role", type=click.Choice(["ps", "worker", "infer"]), required=True)
@click.option("--session", "session_name", required=True)
@click.option("--cas", "cas_addr", required=True)
@click.option("--platform", "platform_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cas-root", default=None, type=click.Path(exists=True), help="Pin the CAS root certificate.")
@click.option("--listen", default="127.0.0.1:0", show_default=True, help="[ps] listen address.")
@click.option("--model", default=None, help="[ps, infer] shielded model path.")
@click.option("--workers", "n_workers", type=int, default=1, show_default=True, help="[ps] workers per round.")
@click.option("--rounds", type=int, default=100, show_default=True, help="[ps] rounds past the start version.")
@click.option("--checkpoint", default=None, help="[ps] shielded checkpoint path (resumes if present).")
@click.option("--ps", "ps_addr", default=None, help="[worker] parameter server address.")
@click.option("--shard", default=None, help="[worker] shielded dataset shard.")
@click.option("--worker-id", type=int, default=0, show_default=True)
@click.option("--input", "input_path", default=None, help="[infer] inputs (.npy or shard; shielded if under policy).")
@handle_errors
def worker_run(role, session_name, cas_addr, platform_path, config_path, cas_root, listen, model,
               n_workers, rounds, checkpoint, ps_addr, shard, worker_id, input_path):
    """Attest to the CAS, then run one role. Nothing protected is touched before attestation."""
    from .enclave import Platform
    from .ml.model import TrainConfig
    from .netshield import parse_addr
    from .worker import WorkerRuntime, load_config

    given = {"--model": model, "--ps": ps_addr, "--shard": shard, "--input": input_path}
    need = {"ps": ["--model"], "worker": ["--ps", "--shard"], "infer": ["--model", "--input"]}[role]
    missing = [flag for flag in need if given[flag] is None]
    if missing:
        raise click.UsageError(f"--role {role} needs {', '.join(missing)}")
    config = load_config(config_path)
    with WorkerRuntime.start(parse_addr(cas_addr), session_name, Platform.load(platform_path),
                             config, _load_root(cas_root)) as rt:
        cfg = TrainConfig(**config.get("train", {}))
        if role == "ps":
            with rt.listen(parse_addr(listen)) as listener:
                _emit({"listening": "%s:%d" % listener.address})
                sys.stdout.flush()
                _, stats = rt.run_parameter_server(listener, model, n_workers, cfg, rounds=rounds,
                                                   checkpoint_path=checkpoint)
            _emit(stats.to_json())
            if stats.aborted:
                sys.exit(1)
        elif role == "worker":
            n = rt.run_worker(parse_addr(ps_addr), shard, cfg, worker_id)
            _emit({"worker_id": worker_id, "rounds": n})
        else:
            x = _read_inputs(input_path, rt.shield)
            probs, labels = rt.run_inference(model, x)
            _emit({"labels": labels.tolist()})


# --- ML utilities -----------------------------------------------------------------

@main.command()
@click.option("--model", required=True, type=click.Path(dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_hex", default=None, help="Read a shielded model with this key (hex).")
@click.option("--probs/--no-probs", default=False, help="Also print class probabilities.")
@handle_errors
def infer(model, input_path, key_hex, probs):
    """Classify inputs with a model file."""
    from .ml.io import load_model, load_model_shielded
    from .ml.model import infer_batch
    m = load_model_shielded(model, _key(key_hex)) if key_hex else load_model(model)
    p, labels = infer_batch(m, _read_inputs(input_path))
    out = {"labels": labels.tolist()}
    if probs:
        out["probs"] = p.tolist()
    _emit(out)


@main.command()
@click.option("--inputs", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Model files; repeat the flag per model.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--weights", default=None, help="Comma-separated sample counts, one per input.")
@handle_errors
def fedavg(inputs, out, weights):
    """Federated average of plaintext model files."""
    from .ml.io import load_model
    from .ml.model import federated_average
    w = [float(v) for v in weights.split(",")] if weights else None
    avg = federated_average([load_model(p) for p in inputs], w)
    Path(out).write_bytes(avg.encode())
    _emit({"out": out, "version": avg.version, "models": len(inputs)})


@main.group()
def model():
    """Model file helpers."""


@model.command("init")
@click.option("--dims", required=True, type=_dims, help="Layer widths, e.g. 784,64,10.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def model_init(dims, seed, out):
    from .ml.model import ModelArtifact
    m = ModelArtifact.init(dims, seed)
    Path(out).write_bytes(m.encode())
    _emit({"out": out, "dims": list(dims), "params": m.num_params})


@main.group()
def data():
    """Synthetic dataset shards."""


@data.command("blobs")
@click.option("--n", type=int, default=600, show_default=True)
@click.option("--dim", type=int, required=True)
@click.option("--classes", type=int, required=True)
@click.option("--shards", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, help="Output prefix; writes <out>-<i>.bin.")
@handle_errors
def data_blobs(n, dim, classes, shards, seed, out):
    from .ml.data import blobs
    paths = []
    for i, s in enumerate(blobs(n, dim, classes, seed).split(shards)):
        p = f"{out}-{i}.bin"
        Path(p).write_bytes(s.encode())
        paths.append(p)
    _emit({"shards": paths})


# --- benchmarks -----------------------------------------------------------------------

@main.group()
def bench():
    """Benchmarks; each prints one JSON line with schema 1."""


@bench.command("attest")
@click.option("--wan-ms", type=float, default=70.0, show_default=True, help="One-way WAN leg latency.")
@click.option("--trials", type=int, default=5, show_default=True)
@handle_errors
def bench_attest(wan_ms, trials):
    from . import bench as b
    _emit(b.bench_attest(wan_ms, trials))


@bench.command("fsshield")
@click.option("--dims", type=_dims, default=",".join(map(str, (1024, 2400, 2400, 1024, 10))), show_default=True)
@click.option("--inputs", type=int, default=100, show_default=True)
@click.option("--trials", type=int, default=9, show_default=True)
@handle_errors
def bench_fsshield(dims, inputs, trials):
    from . import bench as b
    _emit(b.bench_fsshield(dims, inputs, trials))


@bench.command("syscalls")
@click.option("--threads", type=int, default=4, show_default=True)
@click.option("--requests", type=int, default=1000, show_default=True)
@click.option("--transition-cost-us", type=float, default=10.0, show_default=True)
@click.option("--mode", type=click.Choice(["sync", "async"]), default="async", show_default=True)
@click.option("--workload", type=click.Choice(["sleep", "random"]), default="sleep", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def bench_syscalls(threads, requests, transition_cost_us, mode, workload, seed):
    from . import bench as b
    _emit(b.bench_syscalls(threads, requests, transition_cost_us, mode, workload, seed))


@bench.command("training")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--total-steps", type=int, default=60, show_default=True)
@handle_errors
def bench_training(workers, total_steps):
    from . import bench as b
    _emit(b.bench_training_scaling(workers, total_steps))


if __name__ == "__main__":
    main()
