import threading

import numpy as np
import pytest

from enclaveml.ml import (
    ModelArtifact,
    TrainConfig,
    blobs,
    parameter_server_serve,
    single_process_sgd,
    worker_train_loop,
)
from enclaveml.netshield import PeerPolicy, wrap_connect, wrap_listen

CFG = TrainConfig(batch_size=100, learning_rate=0.0005)


class Dies(Exception):
    pass


class DyingChannel:
    """Delegates to a channel, then drops the connection after ``frames`` sends."""

    def __init__(self, chan, frames):
        self.chan, self.left = chan, frames

    def send_frame(self, payload):
        if self.left == 0:
            self.chan.close()
            raise Dies
        self.left -= 1
        self.chan.send_frame(payload)

    def recv_frame(self):
        return self.chan.recv_frame()


def run_cluster(make_identity, model, shards, until, die_after=None, **ps_kw):
    """PS in this thread, one thread per worker, all over mutual TLS."""
    ident = make_identity("train")
    peers = PeerPolicy.of(["train"])
    listener = wrap_listen(("127.0.0.1", 0), ident, peers)
    errors = []

    def work(i, shard):
        try:
            with wrap_connect(listener.address, ident, peers) as chan:
                ch = DyingChannel(chan, die_after) if (die_after is not None and i == 1) else chan
                worker_train_loop(shard, CFG, ch, worker_id=i)
        except Dies:
            pass
        except Exception as exc:  # surfaced by the assertion below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i, s)) for i, s in enumerate(shards)]
    for t in threads:
        t.start()
    channels = [listener.accept() for _ in shards]
    try:
        final, stats = parameter_server_serve(model, channels, CFG, until, **ps_kw)
    finally:
        for ch in channels:
            ch.close()
        listener.close()
    for t in threads:
        t.join(10)
    return final, stats, errors


def test_one_worker_matches_single_process_bit_exact(make_identity):
    data = blobs(300, 8, 3, seed=2)
    model = ModelArtifact.init((8, 16, 3), seed=5)
    final, stats, errors = run_cluster(make_identity, model, [data], until=12)
    oracle = single_process_sgd(model, [data], CFG, 12)
    assert not errors
    assert stats.rounds == 12 and final.version == 12 and not stats.aborted
    assert final.same_as(oracle)


def test_two_workers_match_union_batch(make_identity):
    """Approximate: per-worker partial sums round differently from one union reduction."""
    data = blobs(400, 8, 3, seed=3)
    shards = data.split(2)
    model = ModelArtifact.init((8, 16, 3), seed=6)
    final, stats, errors = run_cluster(make_identity, model, shards, until=8)
    oracle = single_process_sgd(model, shards, CFG, 8)
    assert not errors and stats.rounds == 8
    for a, b in zip(final.params(), oracle.params()):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)


def test_training_run_is_reproducible(make_identity):
    data = blobs(200, 4, 2, seed=1)
    model = ModelArtifact.init((4, 6, 2), seed=1)
    a, *_ = run_cluster(make_identity, model, data.split(2), until=5)
    b, *_ = run_cluster(make_identity, model, data.split(2), until=5)
    assert a.same_as(b)


def test_worker_loss_aborts_with_partial_stats(make_identity):
    data = blobs(400, 4, 2, seed=4)
    model = ModelArtifact.init((4, 6, 2), seed=2)
    # HELLO + 3 rounds of (PULL, PUSH), then the connection drops
    final, stats, _ = run_cluster(make_identity, model, data.split(2), until=50, die_after=7)
    assert stats.aborted and stats.failed_worker == 1
    assert stats.rounds == 3 and final.version == 3


def test_checkpoints_every_n(make_identity):
    saved = []
    data = blobs(100, 4, 2, seed=0)
    model = ModelArtifact.init((4, 4, 2), seed=0)
    _, stats, _ = run_cluster(make_identity, model, [data], until=9,
                              checkpoint=lambda m: saved.append(m.version), checkpoint_every=3)
    assert saved == stats.checkpoints == [3, 6, 9]


def test_losses_reported_per_round(make_identity):
    data = blobs(300, 6, 3, seed=9)
    model = ModelArtifact.init((6, 12, 3), seed=9)
    _, stats, _ = run_cluster(make_identity, model, data.split(3), until=4)
    assert len(stats.losses) == 4 and all(np.isfinite(stats.losses))
    js = stats.to_json()
    assert js["first_loss"] == stats.losses[0] and js["rounds"] == 4
