"""Synchronous parameter-server training over secure channels.

Messages (one per frame, ``tag:u8`` + length-prefixed fields):

====  ============  =========================
0x10  Hello         worker_id:u64
0x11  PullWeights   (none)
0x12  Weights       version:u64, model blob
0x13  PushGradient  update blob
0x14  Ack           version:u64
0x15  Stop          (none)
====  ============  =========================

Each round the server hands the current weights to every worker, waits for
all of their gradients, applies the sample-weighted mean and acknowledges.
Worker ``i`` trains on batch ``version`` of its own shard, so a run is a
pure function of (initial model, shards, config).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DecodeError, PeerClosed
from ..wire import decode_message, encode_message, parse_u64, u64
from .data import DatasetShard
from .model import (
    GradientUpdate,
    ModelArtifact,
    TrainConfig,
    apply_gradients,
    average_gradients,
    train_step,
)

log = logging.getLogger(__name__)

HELLO, PULL, WEIGHTS, PUSH, ACK, STOP = 0x10, 0x11, 0x12, 0x13, 0x14, 0x15
CHECKPOINT_EVERY = 50


def _expect(chan, tag: int) -> list[bytes]:
    got, fields = decode_message(chan.recv_frame())
    if got != tag:
        raise DecodeError(f"expected message {tag:#x}, got {got:#x}")
    return fields


@dataclass
class TrainStats:
    rounds: int = 0
    version: int = 0
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    aborted: bool = False
    failed_worker: int | None = None
    checkpoints: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "rounds": self.rounds, "version": self.version,
            "first_loss": self.losses[0] if self.losses else None,
            "last_loss": self.losses[-1] if self.losses else None,
            "wall_time": self.wall_time, "aborted": self.aborted,
            "failed_worker": self.failed_worker, "checkpoints": self.checkpoints,
        }


def handshake_workers(channels: Sequence) -> list:
    """Read each worker's Hello and return channels ordered by worker id."""
    ids = []
    for ch in channels:
        (wid,) = _expect(ch, HELLO)
        ids.append(parse_u64(wid))
    return [ch for _, ch in sorted(zip(ids, channels), key=lambda p: p[0])]


class ParameterServer:
    def __init__(self, model: ModelArtifact, cfg: TrainConfig,
                 checkpoint: Callable[[ModelArtifact], None] | None = None,
                 checkpoint_every: int = CHECKPOINT_EVERY):
        self.model = model
        self.cfg = cfg
        self.checkpoint = checkpoint
        self.checkpoint_every = checkpoint_every

    def serve(self, channels: Sequence, until_version: int) -> TrainStats:
        """Run rounds until the model reaches ``until_version``, then stop the workers."""
        stats = TrainStats(version=self.model.version)
        start = time.perf_counter()
        current = None
        try:
            while self.model.version < until_version:
                blob = encode_message(WEIGHTS, u64(self.model.version), self.model.encode())
                for current, ch in enumerate(channels):
                    _expect(ch, PULL)
                    ch.send_frame(blob)
                updates = []
                for current, ch in enumerate(channels):
                    (raw,) = _expect(ch, PUSH)
                    updates.append(GradientUpdate.decode(raw, self.model.layer_dims))
                self.model = apply_gradients(self.model, average_gradients(updates), self.cfg.learning_rate)
                total = sum(u.sample_count for u in updates)
                stats.losses.append(sum(u.loss * u.sample_count for u in updates) / total)
                ack = encode_message(ACK, u64(self.model.version))
                for current, ch in enumerate(channels):
                    ch.send_frame(ack)
                stats.rounds += 1
                stats.version = self.model.version
                if self.checkpoint and self.model.version % self.checkpoint_every == 0:
                    self.checkpoint(self.model)
                    stats.checkpoints.append(self.model.version)
            for current, ch in enumerate(channels):
                _expect(ch, PULL)
                ch.send_frame(encode_message(STOP))
        except PeerClosed:
            log.warning("worker %s lost at version %d; aborting run", current, self.model.version)
            stats.aborted = True
            stats.failed_worker = current
        stats.wall_time = time.perf_counter() - start
        return stats


def parameter_server_serve(model: ModelArtifact, channels: Sequence, cfg: TrainConfig,
                           until_version: int, **kw) -> tuple[ModelArtifact, TrainStats]:
    ps = ParameterServer(model, cfg, **kw)
    stats = ps.serve(handshake_workers(channels), until_version)
    return ps.model, stats


def worker_train_loop(shard: DatasetShard, cfg: TrainConfig, channel, worker_id: int = 0) -> int:
    """Pull, compute, push until the server says stop. Returns rounds done."""
    channel.send_frame(encode_message(HELLO, u64(worker_id)))
    rounds = 0
    while True:
        channel.send_frame(encode_message(PULL))
        tag, fields = decode_message(channel.recv_frame())
        if tag == STOP:
            return rounds
        if tag != WEIGHTS:
            raise DecodeError(f"unexpected message {tag:#x}")
        version = parse_u64(fields[0])
        model = ModelArtifact.decode(fields[1])
        x, y = shard.batch(version, cfg.batch_size)
        upd = train_step(model, x, y, cfg, worker_id=worker_id, step=version)
        channel.send_frame(encode_message(PUSH, upd.encode()))
        _expect(channel, ACK)
        rounds += 1


def single_process_sgd(model: ModelArtifact, shards: Sequence[DatasetShard], cfg: TrainConfig,
                       until_version: int) -> ModelArtifact:
    """Reference run: one process, every round's batches concatenated in worker order."""
    while model.version < until_version:
        xs, ys = zip(*(s.batch(model.version, cfg.batch_size) for s in shards))
        if len(shards) == 1:
            upd = train_step(model, xs[0], ys[0], cfg)
        else:
            upd = train_step(model, np.concatenate(xs), np.concatenate(ys))
        model = apply_gradients(model, average_gradients([upd]), cfg.learning_rate)
    return model
