"""Rank coordination: initial distribution, aura exchange and migration."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .. import rng
from .delta import CODECS, ChannelDecoder, ChannelEncoder, EpochMismatchError, decode_message, full_encode
from .partition import partition_space
from .serialization import DecodeError, encode_blocks
from .transport import Transport

AURA = "aura"
MIGRATION = "migration"
LOOKUP = "lookup"
LOOKUP_REPLY = "lookup-reply"

WIRE_COLUMNS = ("position", "diameter", "kind", "behavior_mask", "rng_key", "gid_rank", "gid_counter", "state",
                "age", "static", "disturbed", "nonzero_forces")


def apportion(total: int, weights) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``; ties go to lower index."""
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or (w < 0).any() or w.sum() <= 0:
        raise ValueError("need a nonnegative total and positive weights")
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - int(base.sum())
    order = np.lexsort((np.arange(w.size), -(quota - base)))
    base[order[:rest]] += 1
    return base


class Exchanger:
    """Drives the cross-rank phases of a :class:`~agentsim.engine.simulation.Driver`."""

    def __init__(self, model, config, engines):
        self.model = model
        self.config = config
        self.engines = engines
        self.ranks = len(engines)
        lo, hi = model.space
        self.interaction_length = float(model.interaction_length)
        self.partition = partition_space(lo, hi, self.ranks, self.interaction_length, config.partition_factor,
                                         config.rank_grid)
        for e in engines:
            e.partition = self.partition
        self.transport = Transport(self.ranks)
        self.codec = CODECS["zlib" if config.compress else "identity"]
        opts = dict(delta=config.delta, compress=config.compress, ref_update=config.ref_update)
        self.encoders = {}
        self.decoders = {}
        self.known = {}
        for r in range(self.ranks):
            # the neighborhood is what a rank knows of the partition map; the rest needs a lookup
            self.known[r] = set(self.partition.neighbors(r)) | {r}
            for s in range(self.ranks):
                if s != r:
                    self.encoders[(r, s)] = ChannelEncoder(**opts)
                    self.decoders[(r, s)] = ChannelDecoder(**opts)
        self.counters = defaultdict(int)
        self.aura_bytes: list[int] = []
        self.migration_bytes: list[int] = []

    # -- initialization ------------------------------------------------------
    def distribute(self, pop) -> None:
        mode = self.config.init_mode
        if mode == "proportional":
            parts = self._proportional(pop)
            if parts is not None:
                for e, part in zip(self.engines, parts):
                    e.load(part)
                return
            self.counters["proportional_fallback"] += 1
        elif mode != "filtered":
            raise ValueError(f"unknown init mode {mode!r}")
        owner = self.partition.owner_of(pop.columns["position"]) if len(pop) else np.zeros(0, dtype=np.int64)
        for r, e in enumerate(self.engines):
            e.load(pop.subset(owner == r))

    def _proportional(self, pop):
        """Each rank places its share of a uniform population inside its own brick.

        Shares follow the owned volume. Agents are dealt to ranks by a seeded
        shuffle of their keys, so non-spatial attributes stay well mixed.
        """
        if not self.model.uniform_init or len(pop) == 0:
            return None
        counts = apportion(len(pop), [self.partition.volume_fraction(r) for r in range(self.ranks)])
        keys = pop.columns["rng_key"]
        deal = np.argsort(rng.uniform_np(self.config.seed, keys, rng.INIT_ITERATION, rng.STREAM_INIT_RANK, 0),
                          kind="stable")
        parts = []
        start = 0
        for r in range(self.ranks):
            mask = np.zeros(len(pop), dtype=bool)
            mask[deal[start:start + counts[r]]] = True
            part = pop.subset(mask)
            lo, hi = self.partition.clipped_bounds(r)
            part.columns["position"] = self.model.uniform_positions(self.config.seed, part.columns["rng_key"], lo, hi)
            parts.append(part)
            start += counts[r]
        return parts

    # -- aura ----------------------------------------------------------------
    def aura(self, iteration: int) -> None:
        # agents may move themselves before querying, so the strip is widened by that reach
        L = self.interaction_length + float(getattr(self.model, "aura_margin", 0.0))
        sent = 0
        outgoing = {}
        for r, e in enumerate(self.engines):
            s = e.store
            n = s.count
            pos = s.position[:n]
            targets = {}
            for q in range(self.ranks):
                if q != r:
                    targets[q] = np.flatnonzero(self.partition.distance_to(pos, q) <= L)
            union = np.unique(np.concatenate(list(targets.values()))) if targets else np.zeros(0, dtype=np.int64)
            s.ensure_global_ids(union)
            cols = {k: s.column(k)[union] for k in WIRE_COLUMNS}
            blocks = encode_blocks(cols, [s.behaviors[i] for i in union])
            slot = {int(i): k for k, i in enumerate(union)}
            for q, idx in targets.items():
                outgoing[(r, q)] = [blocks[slot[int(i)]] for i in idx]
                msg = self.encoders[(r, q)].encode(outgoing[(r, q)])
                self.transport.send(r, q, AURA, msg)
                sent += len(msg)
        for q, e in enumerate(self.engines):
            for r, msg in self.transport.recv_all(q, AURA):
                dec = self.decoders[(r, q)]
                try:
                    batch = dec.decode(msg)
                    stale = dec.digest() != self.encoders[(r, q)].digest()
                except (EpochMismatchError, DecodeError):
                    stale = True
                if stale:
                    # receiver lost the shared reference: resend this frame in full
                    full = self.encoders[(r, q)].encode(outgoing[(r, q)], fallback=True)
                    self.transport.send(r, q, AURA, full)
                    sent += len(full)
                    batch = dec.decode(self.transport.recv(r, q, AURA))
                    self.counters["resyncs"] += 1
                e.store.append_ghost_columns(batch.columns, batch.behaviors)
                self.counters["ghosts"] += len(batch)
        self.aura_bytes.append(sent)
        self.counters["aura_messages"] += self.ranks * (self.ranks - 1)

    def resync(self, src: int, dst: int) -> None:
        """Drop the reference of one channel on both ends; the next frame is full."""
        self.encoders[(src, dst)].reset()
        self.decoders[(src, dst)].reset()
        self.counters["resyncs"] += 1

    # -- migration -------------------------------------------------------------
    def _lookup(self, r: int, positions: np.ndarray) -> np.ndarray:
        """Collective lookup: every rank answers which of the positions it owns."""
        query = positions.astype("<f8").tobytes()
        for q in range(self.ranks):
            if q != r:
                self.transport.send(r, q, LOOKUP, query)
        answer = np.full(len(positions), -1, dtype=np.int64)
        for q in range(self.ranks):
            if q == r:
                continue
            _, raw = self.transport.recv_all(q, LOOKUP)[0]
            pts = np.frombuffer(raw, dtype="<f8").reshape(-1, 3)
            mine = (self.partition.owner_of(pts) == q).astype(np.uint8) if len(pts) else np.zeros(0, np.uint8)
            self.transport.send(q, r, LOOKUP_REPLY, mine.tobytes())
        for q, raw in self.transport.recv_all(r, LOOKUP_REPLY):
            hit = np.frombuffer(raw, dtype=np.uint8).astype(bool)
            answer[hit] = q
        if (answer < 0).any():
            raise RuntimeError("collective lookup found no owner")
        self.counters["lookups"] += 1
        return answer

    def migrate(self, iteration: int) -> None:
        sent = 0
        leaving = []
        for r, e in enumerate(self.engines):
            s = e.store
            n = s.count
            owner = self.partition.owner_of(s.position[:n]) if n else np.zeros(0, dtype=np.int64)
            out = np.flatnonzero(owner != r)
            leaving.append(out)
            if out.size == 0:
                continue
            dest = owner[out]
            known = np.isin(dest, list(self.known[r]))
            if not known.all():
                # the local view only covers neighboring bricks
                dest = dest.copy()
                dest[~known] = self._lookup(r, s.position[out[~known]])
            s.ensure_global_ids(out)
            cols = {k: s.column(k)[out] for k in WIRE_COLUMNS}
            blocks = encode_blocks(cols, [s.behaviors[i] for i in out])
            for q in np.unique(dest):
                sel = np.flatnonzero(dest == q)
                msg = full_encode([blocks[k] for k in sel], codec=self.codec)
                self.transport.send(r, int(q), MIGRATION, msg)
                sent += len(msg)
                self.counters["migrated"] += sel.size
        for r, e in enumerate(self.engines):
            if leaving[r].size:
                e.store.commit_removals([leaving[r]], 1)
        for q, e in enumerate(self.engines):
            for r, msg in self.transport.recv_all(q, MIGRATION):
                batch, _, _ = decode_message(msg, None, self.codec)
                e.store.append_columns(batch.columns, batch.behaviors)
        self.migration_bytes.append(sent)

    def stats(self) -> dict:
        t = self.transport
        return {
            "bytes": dict(t.bytes_sent),
            "messages": dict(t.messages_sent),
            "aura_bytes": list(self.aura_bytes),
            "migration_bytes": list(self.migration_bytes),
            **{k: int(v) for k, v in self.counters.items()},
        }

    def digests(self) -> dict[tuple[int, int], tuple[str | None, str | None]]:
        return {k: (self.encoders[k].digest(), self.decoders[k].digest()) for k in self.encoders}
