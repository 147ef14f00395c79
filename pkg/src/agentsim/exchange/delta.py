"""Reference-based delta encoding of agent streams, plus block compression.

Sender and receiver of a channel keep a byte-identical reference stream.
A message is reordered to line up with the reference: agents present in both
take the reference agent's place, reference agents missing from the message
become placeholders, and new agents are appended. The body sent is the
byte-wise difference (mod 256) between that stream and the reference.

A placeholder is a node with tag 0 whose payload repeats the bytes of the
reference block it stands in for, so the difference there is zero except in
the tag field and the streams stay aligned.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .serialization import HEADER, NODE, PLACEHOLDER_TAG, DecodeError, DecodedBatch, check_header, decode_stream, frame

FLAG_DELTA = 1
FLAG_COMPRESSED = 2
FLAG_FALLBACK = 4

ENVELOPE = struct.Struct("<IQ")  # reference epoch, uncompressed body length
_GID = struct.Struct("<qq")


class EpochMismatchError(RuntimeError):
    """The receiver holds a different reference; a full resend is needed."""


# -- codecs ------------------------------------------------------------------


class IdentityCodec:
    name = "identity"

    def compress(self, data: bytes) -> bytes:
        return data

    def decompress(self, data: bytes, size: int) -> bytes:
        return data


class ZlibCodec:
    name = "zlib"

    def __init__(self, level: int = 1):
        self.level = level

    def compress(self, data: bytes) -> bytes:
        return zlib.compress(data, self.level)

    def decompress(self, data: bytes, size: int) -> bytes:
        try:
            out = zlib.decompress(data)
        except zlib.error as exc:
            raise DecodeError(f"decompression failed: {exc}", HEADER.size + ENVELOPE.size) from None
        if len(out) != size:
            raise DecodeError("decompressed size mismatch", HEADER.size + ENVELOPE.size)
        return out


CODECS = {"identity": IdentityCodec(), "zlib": ZlibCodec()}


# -- references ----------------------------------------------------------------


def block_id(block: bytes) -> tuple[int, int]:
    """Global id stored at the start of an agent payload."""
    return _GID.unpack_from(block, NODE.size)


@dataclass
class Reference:
    epoch: int
    blocks: list[bytes]
    ids: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [block_id(b) for b in self.blocks]
        self.stream = b"".join(self.blocks)
        self._digest = None

    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha256(struct.pack("<I", self.epoch) + self.stream).hexdigest()
        return self._digest


def placeholder(block: bytes) -> bytes:
    return NODE.pack(PLACEHOLDER_TAG, len(block) - NODE.size) + block[NODE.size:]


def reorder(blocks: Sequence[bytes], reference: Reference) -> tuple[list[bytes], list[bytes]]:
    """Align ``blocks`` with the reference.

    Returns the aligned stream pieces (with placeholders) and the agent blocks
    in aligned order without placeholders.
    """
    ids = [block_id(b) for b in blocks]
    if len(set(ids)) != len(ids) or any(r < 0 for r, _ in ids):
        raise ValueError("delta encoding needs distinct, assigned global ids")
    where = {gid: i for i, gid in enumerate(ids)}
    pieces: list[bytes] = []
    kept: list[bytes] = []
    for ref_block, gid in zip(reference.blocks, reference.ids):
        i = where.pop(gid, None)
        if i is None:
            pieces.append(placeholder(ref_block))
        else:
            pieces.append(blocks[i])
            kept.append(blocks[i])
    for i in sorted(where.values()):
        pieces.append(blocks[i])
        kept.append(blocks[i])
    return pieces, kept


def difference(stream: bytes, reference: bytes) -> bytes:
    out = np.frombuffer(stream, dtype=np.uint8).copy()
    m = min(len(stream), len(reference))
    out[:m] -= np.frombuffer(reference, dtype=np.uint8, count=m)
    return out.tobytes()


def restore(body: bytes, reference: bytes) -> bytes:
    out = np.frombuffer(body, dtype=np.uint8).copy()
    m = min(len(body), len(reference))
    out[:m] += np.frombuffer(reference, dtype=np.uint8, count=m)
    return out.tobytes()


# -- messages ----------------------------------------------------------------


def pack_message(body: bytes, flags: int, epoch: int, codec=None) -> bytes:
    raw_len = len(body)
    if codec is not None and codec.name != "identity":
        body = codec.compress(body)
        flags |= FLAG_COMPRESSED
    return frame(ENVELOPE.pack(epoch, raw_len) + body, flags)


def unpack_message(message: bytes, codec=None) -> tuple[int, int, bytes]:
    """Returns ``(flags, epoch, body)`` with the body decompressed."""
    flags = check_header(message)
    if len(message) < HEADER.size + ENVELOPE.size:
        raise DecodeError("truncated envelope", HEADER.size)
    epoch, raw_len = ENVELOPE.unpack_from(message, HEADER.size)
    body = message[HEADER.size + ENVELOPE.size:]
    if flags & FLAG_COMPRESSED:
        body = (codec or CODECS["zlib"]).decompress(body, raw_len)
    elif len(body) != raw_len:
        raise DecodeError("body length mismatch", HEADER.size + ENVELOPE.size)
    return flags, epoch, body


def delta_encode(blocks: Sequence[bytes], reference: Reference, codec=None) -> tuple[bytes, list[bytes]]:
    """Delta message for ``blocks`` against ``reference`` and the aligned blocks."""
    pieces, kept = reorder(blocks, reference)
    body = difference(b"".join(pieces), reference.stream)
    return pack_message(body, FLAG_DELTA, reference.epoch, codec), kept


def full_encode(blocks: Sequence[bytes], epoch: int = 0, codec=None, fallback: bool = False) -> bytes:
    return pack_message(b"".join(blocks), FLAG_FALLBACK if fallback else 0, epoch, codec)


def decode_message(message: bytes, reference: Reference | None, codec=None) -> tuple[DecodedBatch, list[bytes], int]:
    """Decode a full or delta message; returns the batch, its blocks and the flags."""
    flags, epoch, body = unpack_message(message, codec)
    if flags & FLAG_DELTA:
        if reference is None or reference.epoch != epoch:
            have = None if reference is None else reference.epoch
            raise EpochMismatchError(f"delta against epoch {epoch}, receiver holds {have}")
        body = restore(body, reference.stream)
        batch = decode_stream(body, allow_placeholders=True)
    else:
        batch = decode_stream(body)
    blocks = [body[s:e] for s, e in batch.spans]
    return batch, blocks, flags


# -- channel endpoints -----------------------------------------------------------


class _Endpoint:
    def __init__(self, delta: bool = True, compress: bool = True, ref_update: int = 10):
        if ref_update < 1:
            raise ValueError("ref_update must be >= 1")
        self.delta = delta
        self.codec = CODECS["zlib" if compress else "identity"]
        self.ref_update = ref_update
        self.reference: Reference | None = None
        self.epoch = 0
        self.exchanges = 0

    def _advance(self, blocks: list[bytes]) -> None:
        if self.delta and self.exchanges % self.ref_update == 0:
            self.epoch += 1
            self.reference = Reference(self.epoch, list(blocks))
        self.exchanges += 1

    def reset(self) -> None:
        self.reference = None
        self.exchanges = 0

    def digest(self) -> str | None:
        return None if self.reference is None else self.reference.digest()


class ChannelEncoder(_Endpoint):
    """Sending side of one channel."""

    def encode(self, blocks: Sequence[bytes], fallback: bool = False) -> bytes:
        blocks = list(blocks)
        if fallback:
            self.reset()
        if self.delta and self.reference is not None:
            msg, kept = delta_encode(blocks, self.reference, self.codec)
        else:
            msg, kept = full_encode(blocks, self.epoch, self.codec, fallback), blocks
        self._advance(kept)
        return msg


class ChannelDecoder(_Endpoint):
    """Receiving side of one channel."""

    def decode(self, message: bytes) -> DecodedBatch:
        flags = check_header(message)
        if flags & FLAG_FALLBACK:
            self.reset()
            self.epoch = ENVELOPE.unpack_from(message, HEADER.size)[0]
        batch, blocks, _ = decode_message(message, self.reference, self.codec)
        self._advance(blocks)
        return batch
