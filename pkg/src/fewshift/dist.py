"""Data-parallel training: batch sharding, ring all-reduce over pluggable
transports (in-process queues or TCP sockets), replica-synchronous SGD, and
scale-efficiency accounting.

The collective is the canonical bandwidth-optimal ring: a reduce-scatter
phase followed by an all-gather phase, each in k-1 chunk exchange steps.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, ParamVector
from .optim import OptimizerConfig, SgdOptimizer


class TransportError(RuntimeError):
    """Transport failure or timeout; message names the failing rank."""


class ReplicaDivergenceError(RuntimeError):
    """Model replicas drifted apart beyond tolerance."""


PHASE_REDUCE_SCATTER = 0
PHASE_ALL_GATHER = 1


@dataclass
class CollectiveMessage:
    chunk_index: int
    payload: np.ndarray
    phase: int


@dataclass
class WorkerGroup:
    num_workers: int
    rank: int
    transport: str = "in_process"   # "in_process" | "socket"
    per_worker_batch: int = 128
    timeout: float = 30.0

    def __post_init__(self):
        if not 0 <= self.rank < self.num_workers:
            raise NumericsError("rank outside [0, num_workers)")
        if self.transport not in ("in_process", "socket"):
            raise NumericsError(f"unknown transport {self.transport!r}")


@dataclass
class TimingRecord:
    epoch_seconds_single: float
    epoch_seconds_k: float
    num_workers: int


def scale_efficiency(record: TimingRecord) -> float:
    """100 * (T1 / k) / Tk: percentage of ideal linear speedup achieved."""
    if record.epoch_seconds_single <= 0.0 or record.epoch_seconds_k <= 0.0:
        raise NumericsError("epoch times must be positive")
    if record.num_workers < 1:
        raise NumericsError("num_workers must be >= 1")
    ideal = record.epoch_seconds_single / record.num_workers
    return 100.0 * ideal / record.epoch_seconds_k


def shard_batch(global_batch, num_workers: int, policy: str = "error"):
    """Split an ordered batch into per-worker shards whose concatenation
    reproduces the input. policy handles non-divisible sizes:
    "error" rejects, "truncate" drops the tail deterministically."""
    n = len(global_batch)
    if num_workers < 1:
        raise NumericsError("num_workers must be >= 1")
    if n % num_workers != 0:
        if policy == "truncate":
            n = (n // num_workers) * num_workers
        else:
            raise NumericsError(f"batch of {n} not divisible by {num_workers} workers")
    per = n // num_workers
    if per == 0:
        raise NumericsError("empty shard")
    return [global_batch[r * per : (r + 1) * per] for r in range(num_workers)]


class InProcessRing:
    """Queue-based message fabric for k worker threads arranged in a ring."""

    def __init__(self, num_workers: int):
        self.num_workers = num_workers
        self._queues = {
            (src, (src + 1) % num_workers): queue.Queue() for src in range(num_workers)
        }

    def transport(self, rank: int, timeout: float = 30.0) -> "InProcessTransport":
        return InProcessTransport(self, rank, timeout)


class InProcessTransport:
    def __init__(self, ring: InProcessRing, rank: int, timeout: float):
        self.ring = ring
        self.rank = rank
        self.timeout = timeout

    def send_next(self, msg: CollectiveMessage) -> None:
        dst = (self.rank + 1) % self.ring.num_workers
        self.ring._queues[(self.rank, dst)].put(msg)

    def recv_prev(self) -> CollectiveMessage:
        src = (self.rank - 1) % self.ring.num_workers
        try:
            return self.ring._queues[(src, self.rank)].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"rank {self.rank}: timeout waiting for rank {src}")

    def close(self) -> None:
        pass


# Wire frame: 4-byte big-endian chunk index, 4-byte big-endian phase,
# 8-byte big-endian payload length, then raw little-endian float64 payload.
_FRAME_HEADER = struct.Struct(">iiq")


def write_group_file(path: str, addresses: list[tuple[str, int]]) -> None:
    with open(path, "w") as f:
        json.dump({"ranks": [{"host": h, "port": p} for h, p in addresses]}, f)


def read_group_file(path: str) -> list[tuple[str, int]]:
    with open(path) as f:
        doc = json.load(f)
    return [(r["host"], int(r["port"])) for r in doc["ranks"]]


class SocketTransport:
    """Static TCP ring: each rank listens on its published address, connects
    to the next rank, and accepts one connection from the previous rank."""

    def __init__(self, rank: int, addresses: list[tuple[str, int]], timeout: float = 30.0):
        self.rank = rank
        self.num_workers = len(addresses)
        self.timeout = timeout
        self._send_sock: socket.socket | None = None
        self._recv_sock: socket.socket | None = None
        self._server: socket.socket | None = None
        if self.num_workers == 1:
            return
        host, port = addresses[rank]
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(1)
        self._server.settimeout(timeout)

        next_host, next_port = addresses[(rank + 1) % self.num_workers]
        self._send_sock = self._connect_with_retry(next_host, next_port)
        try:
            conn, _ = self._server.accept()
        except socket.timeout:
            raise TransportError(f"rank {rank}: timeout accepting from rank {(rank - 1) % self.num_workers}")
        conn.settimeout(timeout)
        self._recv_sock = conn

    def _connect_with_retry(self, host: str, port: int) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                s = socket.create_connection((host, port), timeout=self.timeout)
                s.settimeout(self.timeout)
                return s
            except OSError:
                if time.monotonic() >= deadline:
                    raise TransportError(f"rank {self.rank}: cannot reach {host}:{port}")
                time.sleep(0.02)

    def send_next(self, msg: CollectiveMessage) -> None:
        payload = np.ascontiguousarray(msg.payload, dtype="<f8").tobytes()
        frame = _FRAME_HEADER.pack(msg.chunk_index, msg.phase, len(payload)) + payload
        try:
            self._send_sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send failed: {exc}")

    def _recv_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            try:
                chunk = self._recv_sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportError(f"rank {self.rank}: receive timeout")
            except OSError as exc:
                raise TransportError(f"rank {self.rank}: receive failed: {exc}")
            if not chunk:
                raise TransportError(f"rank {self.rank}: peer closed connection")
            buf += chunk
        return buf

    def recv_prev(self) -> CollectiveMessage:
        header = self._recv_exact(_FRAME_HEADER.size)
        chunk_index, phase, length = _FRAME_HEADER.unpack(header)
        payload = np.frombuffer(self._recv_exact(length), dtype="<f8").astype(np.float64)
        return CollectiveMessage(chunk_index, payload, phase)

    def close(self) -> None:
        for s in (self._send_sock, self._recv_sock, self._server):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


def ring_all_reduce(local: np.ndarray, rank: int, num_workers: int, transport) -> np.ndarray:
    """Element-wise SUM across workers; every caller returns the full result.

    Reduce-scatter then all-gather, 2(k-1) chunk exchanges total. Chunk
    boundaries follow np.array_split so lengths not divisible by k work.
    """
    local = np.asarray(local, dtype=np.float64).ravel()
    if num_workers == 1:
        return local.copy()
    k = num_workers
    bounds = np.array_split(np.arange(local.size), k)
    chunks = [local[b].copy() for b in bounds]

    for step in range(k - 1):
        send_idx = (rank - step) % k
        recv_idx = (rank - step - 1) % k
        transport.send_next(CollectiveMessage(send_idx, chunks[send_idx], PHASE_REDUCE_SCATTER))
        msg = transport.recv_prev()
        if msg.chunk_index != recv_idx or msg.phase != PHASE_REDUCE_SCATTER:
            raise TransportError(f"rank {rank}: unexpected chunk {msg.chunk_index} phase {msg.phase}")
        if msg.payload.size != chunks[recv_idx].size:
            raise TransportError(f"rank {rank}: chunk shape disagreement")
        chunks[recv_idx] = chunks[recv_idx] + msg.payload

    for step in range(k - 1):
        send_idx = (rank - step + 1) % k
        recv_idx = (rank - step) % k
        transport.send_next(CollectiveMessage(send_idx, chunks[send_idx], PHASE_ALL_GATHER))
        msg = transport.recv_prev()
        if msg.chunk_index != recv_idx or msg.phase != PHASE_ALL_GATHER:
            raise TransportError(f"rank {rank}: unexpected chunk {msg.chunk_index} phase {msg.phase}")
        chunks[recv_idx] = msg.payload.copy()

    out = np.empty_like(local)
    for b, c in zip(bounds, chunks):
        out[b] = c
    return out


@dataclass
class DataParallelResult:
    params: ParamVector
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    max_replica_divergence: float = 0.0


def data_parallel_train(
    make_model,                 # () -> model; must initialize identically on every call
    loss_and_grads,             # (model, inputs, targets) -> (loss: float, grads: ParamVector)
    images: np.ndarray,
    targets: np.ndarray,
    num_workers: int,
    epochs: int,
    opt_config: OptimizerConfig,
    lr_fn,                      # (epoch, step_in_epoch, steps_per_epoch) -> float
    per_worker_batch: int = 128,
    seed: int = 0,
    transport: str = "in_process",
    timeout: float = 30.0,
    sync_tolerance: float = 1e-12,
    check_synchrony: bool = True,
) -> DataParallelResult:
    """Replica-synchronous data-parallel SGD on worker threads.

    Every worker holds a full model replica; each global step shards a
    128k-sample global batch, all-reduces the local gradients, and applies the
    identical averaged update, so replicas stay bit-identical. Local losses
    are averaged through the same collective (one extra reduced element).
    """
    n = images.shape[0]
    global_batch = num_workers * per_worker_batch
    steps_per_epoch = n // global_batch
    if steps_per_epoch == 0:
        raise NumericsError("dataset smaller than one global batch")

    if transport == "in_process":
        ring = InProcessRing(num_workers)
        transports = [ring.transport(r, timeout) for r in range(num_workers)]
    elif transport == "socket":
        addresses = []
        probes = []
        for _ in range(num_workers):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            addresses.append(("127.0.0.1", s.getsockname()[1]))
            probes.append(s)
        for s in probes:
            s.close()
        transports = [None] * num_workers

        def build_transport(r):
            transports[r] = SocketTransport(r, addresses, timeout)

        builders = [threading.Thread(target=build_transport, args=(r,)) for r in range(num_workers)]
        for t in builders:
            t.start()
        for t in builders:
            t.join()
        if any(t is None for t in transports):
            raise TransportError("socket ring setup failed")
    else:
        raise NumericsError(f"unknown transport {transport!r}")

    # shared per-step order, derived identically on every worker
    orders = [np.random.default_rng([seed, 911, e]).permutation(n) for e in range(epochs)]

    snapshots = [None] * num_workers
    barrier = threading.Barrier(num_workers)
    errors: list[BaseException] = []
    results = [None] * num_workers
    divergence = [0.0]
    div_lock = threading.Lock()

    def worker(rank: int):
        try:
            model = make_model()
            opt = SgdOptimizer(opt_config)
            tr = transports[rank]
            losses, times = [], []
            for epoch in range(epochs):
                t0 = time.monotonic()
                epoch_loss = 0.0
                for step in range(steps_per_epoch):
                    idx = orders[epoch][step * global_batch : (step + 1) * global_batch]
                    shard = shard_batch(idx, num_workers)[rank]
                    loss, grads = loss_and_grads(model, images[shard], targets[shard])
                    flat = np.concatenate([grads.to_flat(), [loss]])
                    reduced = ring_all_reduce(flat, rank, num_workers, tr) / num_workers
                    mean_grads = grads.from_flat(reduced[:-1])
                    epoch_loss += reduced[-1]
                    step_lr = lr_fn(epoch, step, steps_per_epoch)
                    model.set_params(opt.step(model.get_params(), mean_grads, step_lr))
                    if check_synchrony:
                        snapshots[rank] = model.get_params().to_flat()
                        barrier.wait()
                        if rank == 0:
                            base = snapshots[0]
                            worst = max(
                                float(np.max(np.abs(snapshots[r] - base))) if snapshots[r].size else 0.0
                                for r in range(num_workers)
                            )
                            with div_lock:
                                divergence[0] = max(divergence[0], worst)
                            if worst > sync_tolerance:
                                raise ReplicaDivergenceError(
                                    f"replicas diverged by {worst:.3e} at epoch {epoch} step {step}"
                                )
                        barrier.wait()
                losses.append(epoch_loss / steps_per_epoch)
                times.append(time.monotonic() - t0)
            results[rank] = (model.get_params(), losses, times)
        except BaseException as exc:  # propagate to the caller
            errors.append(exc)
            barrier.abort()
        finally:
            transports[rank].close()

    threads = [threading.Thread(target=worker, args=(r,)) for r in range(num_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = next((e for e in errors if not isinstance(e, threading.BrokenBarrierError)), errors[0])
        raise primary
    params, losses, times = results[0]
    return DataParallelResult(params, losses, times, divergence[0])
