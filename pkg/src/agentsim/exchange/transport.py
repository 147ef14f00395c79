"""In-process point-to-point channels between ranks."""

from __future__ import annotations

from collections import defaultdict, deque

DEFAULT_BATCH_BYTES = 4 << 20


class TransportError(RuntimeError):
    pass


class Transport:
    """FIFO channel per (source, destination, tag); every message delivered once.

    Messages larger than ``batch_bytes`` travel as several chunks and are
    reassembled on receipt.
    """

    def __init__(self, ranks: int, batch_bytes: int = DEFAULT_BATCH_BYTES):
        if ranks < 1:
            raise ValueError("ranks must be >= 1")
        if batch_bytes < 1:
            raise ValueError("batch_bytes must be positive")
        self.ranks = ranks
        self.batch_bytes = batch_bytes
        self._queues: dict[tuple[int, int, str], deque] = defaultdict(deque)
        self.bytes_sent: dict[str, int] = defaultdict(int)
        self.messages_sent: dict[str, int] = defaultdict(int)
        self.chunks_sent = 0

    def _check(self, rank: int) -> None:
        if not 0 <= rank < self.ranks:
            raise TransportError(f"no such rank {rank}")

    def send(self, src: int, dst: int, tag: str, payload: bytes) -> None:
        self._check(src)
        self._check(dst)
        q = self._queues[(src, dst, tag)]
        chunks = [payload[i:i + self.batch_bytes] for i in range(0, len(payload), self.batch_bytes)] or [b""]
        q.append(len(chunks))
        q.extend(chunks)
        self.chunks_sent += len(chunks)
        self.bytes_sent[tag] += len(payload)
        self.messages_sent[tag] += 1

    def _pop(self, q: deque) -> bytes:
        n = q.popleft()
        return b"".join(q.popleft() for _ in range(n))

    def recv(self, src: int, dst: int, tag: str) -> bytes:
        q = self._queues.get((src, dst, tag))
        if not q:
            raise TransportError(f"no pending {tag!r} message from {src} to {dst}")
        return self._pop(q)

    def recv_all(self, dst: int, tag: str) -> list[tuple[int, bytes]]:
        """Drain every pending ``tag`` message for ``dst``, ordered by source then FIFO."""
        self._check(dst)
        out = []
        for src in range(self.ranks):
            q = self._queues.get((src, dst, tag))
            while q:
                out.append((src, self._pop(q)))
        return out

    def pending(self) -> int:
        return sum(1 for q in self._queues.values() if q)
