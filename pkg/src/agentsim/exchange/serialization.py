"""Depth-first binary encoding of agents.

A frame is a header followed by a pre-order node stream. Every node is a
``(tag: u32, payload_length: u64)`` pair and its payload. An agent node's tag
is its kind tag; its payload holds the common columns, the kind's own integer
fields, and one sentinel slot per behavior. The behavior nodes follow
immediately, in order, and fill those slots during decoding.

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..engine import registry
from ..engine.store import NO_GID, AgentRecord, BehaviorInstance, GlobalAgentId, behavior_mask

MAGIC = b"TAIO"
VERSION = 1
LITTLE_ENDIAN = 1

HEADER = struct.Struct("<4sHBB")  # magic, version, endianness, flags
NODE = struct.Struct("<IQ")  # tag, payload length
BEHAVIOR_HEAD = struct.Struct("<BI")  # division flags, parameter count
CHILD_SLOT = b"\xff" * 8
PLACEHOLDER_TAG = 0

COMMON = [
    ("gid_rank", "<i8"),
    ("gid_counter", "<i8"),
    ("rng_key", "<u8"),
    ("position", "<f8", (3,)),
    ("diameter", "<f8"),
    ("behavior_mask", "<u4"),
    ("nonzero_forces", "<i4"),
    ("static", "u1"),
    ("disturbed", "u1"),
    ("n_children", "<u2"),
]
COMMON_COLUMNS = ("gid_rank", "gid_counter", "rng_key", "position", "diameter", "behavior_mask",
                  "nonzero_forces", "static", "disturbed")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


_layouts: dict[int, np.dtype] = {}


def payload_dtype(kind_tag: int) -> np.dtype:
    """Fixed part of an agent payload for one kind (before the child slots)."""
    dt = _layouts.get(kind_tag)
    if dt is None:
        k = registry.kind(kind_tag)
        dt = _layouts[kind_tag] = np.dtype(COMMON + [(f, "<i4") for f in k.fields])
    return dt


# -- behaviors ---------------------------------------------------------------

_beh_bytes: dict[tuple, bytes] = {}
_beh_parse: dict[bytes, tuple] = {}


def encode_behavior(b: BehaviorInstance) -> bytes:
    registry.behavior(b.behavior_tag)
    params = np.asarray(b.parameters, dtype="<f8")
    payload = BEHAVIOR_HEAD.pack(int(b.copy_on_division) | int(b.remove_on_division) << 1, params.size)
    payload += params.tobytes()
    return NODE.pack(b.behavior_tag, len(payload)) + payload


def _children(behaviors: tuple) -> bytes:
    hit = _beh_bytes.get(behaviors)
    if hit is None:
        hit = _beh_bytes[behaviors] = b"".join(encode_behavior(b) for b in behaviors)
    return hit


# -- encoding ----------------------------------------------------------------


def encode_blocks(columns: dict[str, np.ndarray], behaviors: Sequence[tuple]) -> list[bytes]:
    """One byte block per agent: the agent node followed by its behavior nodes."""
    n = len(behaviors)
    if n == 0:
        return []
    kinds = np.asarray(columns["kind"], dtype=np.int64)
    blocks: list[bytes] = [b""] * n
    for tag in np.unique(kinds):
        tag = int(tag)
        dt = payload_dtype(tag)
        sel = np.flatnonzero(kinds == tag)
        rows = np.zeros(sel.size, dtype=dt)
        for name in COMMON_COLUMNS:
            rows[name] = columns[name][sel]
        for f in registry.kind(tag).fields:
            rows[f] = columns[f][sel]
        beh = [tuple(behaviors[i]) for i in sel]
        rows["n_children"] = [len(b) for b in beh]
        raw = rows.tobytes()
        size = dt.itemsize
        for k, i in enumerate(sel):
            b = beh[k]
            plen = size + 8 * len(b)
            blocks[i] = b"".join((NODE.pack(tag, plen), raw[k * size:(k + 1) * size], CHILD_SLOT * len(b), _children(b)))
    return blocks


def frame(stream: bytes, flags: int = 0) -> bytes:
    return HEADER.pack(MAGIC, VERSION, LITTLE_ENDIAN, flags) + stream


def check_header(buf, offset: int = 0) -> int:
    """Validate a header at ``offset``; returns its flags."""
    if len(buf) - offset < HEADER.size:
        raise DecodeError("truncated header", offset)
    magic, version, endian, flags = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", offset + 4)
    if endian != LITTLE_ENDIAN:
        raise DecodeError("big-endian frames are not supported", offset + 6)
    return flags


# -- decoding ----------------------------------------------------------------


@dataclass
class DecodedBatch:
    """Agents decoded from one stream, plus each agent block's byte span.

    The batch owns its arrays; dropping it releases everything at once.
    """

    columns: dict[str, np.ndarray]
    behaviors: list[tuple]
    spans: list[tuple[int, int]]

    def __len__(self):
        return len(self.behaviors)


def _parse_children(buf, off: int, end: int, count: int) -> tuple[tuple, int]:
    start = off
    for _ in range(count):
        if off + NODE.size > end:
            raise DecodeError("truncated behavior node", off)
        tag, plen = NODE.unpack_from(buf, off)
        if not registry.is_behavior(tag):
            raise DecodeError(f"unknown behavior tag {tag}", off)
        off += NODE.size + plen
        if off > end:
            raise DecodeError("truncated behavior payload", off)
    raw = bytes(buf[start:off])
    hit = _beh_parse.get(raw)
    if hit is None:
        out = []
        p = 0
        for _ in range(count):
            tag, plen = NODE.unpack_from(raw, p)
            if plen < BEHAVIOR_HEAD.size:
                raise DecodeError("behavior payload too short", start + p)
            flags, npar = BEHAVIOR_HEAD.unpack_from(raw, p + NODE.size)
            if plen != BEHAVIOR_HEAD.size + 8 * npar:
                raise DecodeError("behavior payload length mismatch", start + p)
            q = p + NODE.size + BEHAVIOR_HEAD.size
            params = tuple(float(v) for v in np.frombuffer(raw, dtype="<f8", count=npar, offset=q))
            out.append(BehaviorInstance(tag, params, bool(flags & 1), bool(flags & 2)))
            p += NODE.size + plen
        hit = _beh_parse[raw] = tuple(out)
    return hit, off


def decode_stream(buf, offset: int = 0, end: int | None = None, allow_placeholders: bool = False) -> DecodedBatch:
    """Decode a node stream; all-or-nothing, errors carry the byte offset."""
    mv = memoryview(buf)
    end = len(mv) if end is None else end
    off = offset
    rows: dict[int, list[bytes]] = {}
    order: list[tuple[int, int]] = []  # (kind, index within kind)
    behaviors: list[tuple] = []
    spans: list[tuple[int, int]] = []
    while off < end:
        if off + NODE.size > end:
            raise DecodeError("truncated node header", off)
        tag, plen = NODE.unpack_from(mv, off)
        body = off + NODE.size
        if tag == PLACEHOLDER_TAG:
            if not allow_placeholders:
                raise DecodeError("placeholder outside a delta frame", off)
            if body + plen > end:
                raise DecodeError("truncated placeholder", off)
            off = body + plen
            continue
        if not registry.is_kind(tag):
            raise DecodeError(f"unknown agent kind tag {tag}", off)
        dt = payload_dtype(tag)
        if body + dt.itemsize > end:
            raise DecodeError("truncated agent payload", body)
        nchild = int(np.frombuffer(mv, dtype="<u2", count=1, offset=body + dt.fields["n_children"][1])[0])
        if plen != dt.itemsize + 8 * nchild:
            raise DecodeError("agent payload length mismatch", off)
        slots = body + dt.itemsize
        if body + plen > end:
            raise DecodeError("truncated child slots", slots)
        if bytes(mv[slots:slots + 8 * nchild]) != CHILD_SLOT * nchild:
            raise DecodeError("child slot without sentinel", slots)
        beh, nxt = _parse_children(mv, body + plen, end, nchild)
        lst = rows.setdefault(tag, [])
        order.append((tag, len(lst)))
        lst.append(bytes(mv[body:body + dt.itemsize]))
        behaviors.append(beh)
        spans.append((off, nxt))
        off = nxt
    n = len(order)
    cols = {
        "position": np.zeros((n, 3)),
        "diameter": np.zeros(n),
        "kind": np.zeros(n, dtype=np.int32),
        "behavior_mask": np.zeros(n, dtype=np.uint32),
        "rng_key": np.zeros(n, dtype=np.uint64),
        "gid_rank": np.zeros(n, dtype=np.int64),
        "gid_counter": np.zeros(n, dtype=np.int64),
        "state": np.zeros(n, dtype=np.int32),
        "age": np.zeros(n, dtype=np.int32),
        "static": np.zeros(n, dtype=np.uint8),
        "disturbed": np.zeros(n, dtype=np.uint8),
        "nonzero_forces": np.zeros(n, dtype=np.int32),
    }
    if n:
        kinds = np.array([k for k, _ in order])
        cols["kind"][:] = kinds
        for tag, lst in rows.items():
            arr = np.frombuffer(b"".join(lst), dtype=payload_dtype(tag))
            sel = np.flatnonzero(kinds == tag)
            for name in COMMON_COLUMNS:
                cols[name][sel] = arr[name]
            for f in registry.kind(tag).fields:
                cols[f][sel] = arr[f]
        masks = np.array([behavior_mask(b) for b in behaviors], dtype=np.uint32)
        if not np.array_equal(masks, cols["behavior_mask"]):
            bad = int(np.flatnonzero(masks != cols["behavior_mask"])[0])
            raise DecodeError("behavior mask disagrees with children", spans[bad][0])
    return DecodedBatch(cols, behaviors, spans)


# -- record-level API ----------------------------------------------------------


def records_to_columns(records: Sequence[AgentRecord]) -> tuple[dict[str, np.ndarray], list[tuple]]:
    n = len(records)
    for r in records:
        registry.kind(r.kind_tag)
    cols = {
        "position": np.array([r.position for r in records], dtype=np.float64).reshape(n, 3),
        "diameter": np.array([r.diameter for r in records], dtype=np.float64),
        "kind": np.array([r.kind_tag for r in records], dtype=np.int32),
        "behavior_mask": np.array([behavior_mask(r.behaviors) for r in records], dtype=np.uint32),
        "rng_key": np.array([r.rng_key for r in records], dtype=np.uint64),
        "gid_rank": np.array([r.global_id.rank if r.global_id else NO_GID for r in records], dtype=np.int64),
        "gid_counter": np.array([r.global_id.counter if r.global_id else NO_GID for r in records], dtype=np.int64),
        "state": np.array([r.state for r in records], dtype=np.int32),
        "age": np.array([r.age for r in records], dtype=np.int32),
        "static": np.array([r.static_flag for r in records], dtype=np.uint8),
        "disturbed": np.array([r.disturbed for r in records], dtype=np.uint8),
        "nonzero_forces": np.array([r.nonzero_forces for r in records], dtype=np.int32),
    }
    return cols, [tuple(r.behaviors) for r in records]


def columns_to_records(batch: DecodedBatch) -> list[AgentRecord]:
    c = batch.columns
    out = []
    for i in range(len(batch)):
        gid = None if c["gid_rank"][i] == NO_GID else GlobalAgentId(int(c["gid_rank"][i]), int(c["gid_counter"][i]))
        out.append(AgentRecord(
            position=c["position"][i].copy(),
            diameter=float(c["diameter"][i]),
            kind_tag=int(c["kind"][i]),
            behaviors=list(batch.behaviors[i]),
            static_flag=bool(c["static"][i]),
            state=int(c["state"][i]),
            age=int(c["age"][i]),
            rng_key=int(c["rng_key"][i]),
            global_id=gid,
            disturbed=int(c["disturbed"][i]),
            nonzero_forces=int(c["nonzero_forces"][i]),
        ))
    return out


def serialize(records: Sequence[AgentRecord]) -> bytes:
    """Header plus node stream for ``records``; raises on unregistered tags."""
    cols, beh = records_to_columns(records)
    return frame(b"".join(encode_blocks(cols, beh)))


def deserialize(data: bytes) -> list[AgentRecord]:
    check_header(data)
    return columns_to_records(decode_stream(data, HEADER.size))
