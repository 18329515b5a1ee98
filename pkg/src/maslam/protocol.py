"""Framed binary agent<->server protocol.

Frame layout (little-endian):
    magic "MGSC" | version u16 | kind u8 | agent u32 | payload len u32
    | payload | CRC32 over all preceding bytes

Payload length is capped at 256 MiB. Every decode error is classified into
exactly one exception; only VersionMismatch is session-fatal.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .descriptors import FrameDescriptor
from .geometry import SE3Pose
from .mapping import SubMap, submap_from_bytes, submap_to_bytes
from .renderer import GaussianSet

MAGIC = b"MGSC"
VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024
HEADER = struct.Struct("<4sHBII")

KIND_HELLO = 0
KIND_DESCRIPTOR = 1
KIND_SUBMAP = 2
KIND_CORRECTIONS = 3
KIND_ACK = 4
KIND_SHUTDOWN = 5


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class LengthOverflow(ProtocolError):
    pass


class CrcMismatch(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


@dataclass
class Hello:
    agent_id: int
    kind = KIND_HELLO


@dataclass
class DescriptorUpload:
    agent_id: int
    descriptor: FrameDescriptor
    kind = KIND_DESCRIPTOR


@dataclass
class SubMapUpload:
    agent_id: int
    submap: SubMap
    # late dispatches of Gaussians still owned by earlier sub-maps
    supplements: list = field(default_factory=list)   # (owner_seq, GaussianSet)
    odometry_rel: SE3Pose | None = None               # previous anchor -> this anchor
    kind = KIND_SUBMAP


@dataclass
class PoseCorrections:
    agent_id: int
    corrections: list = field(default_factory=list)   # (seq, SE3Pose)
    kind = KIND_CORRECTIONS


@dataclass
class Ack:
    agent_id: int
    acked_kind: int = 0
    seq: int = 0
    kind = KIND_ACK


@dataclass
class Shutdown:
    agent_id: int
    kind = KIND_SHUTDOWN


def _pose_bytes(p: SE3Pose) -> bytes:
    return np.concatenate([p.q, p.t]).astype("<f8").tobytes()


def _pose_from(buf: bytes, off: int) -> tuple[SE3Pose, int]:
    vals = np.frombuffer(buf, dtype="<f8", count=7, offset=off)
    return SE3Pose(vals[:4].copy(), vals[4:].copy()), off + 56


def _gaussians_bytes(g: GaussianSet) -> bytes:
    parts = [struct.pack("<Q", len(g))]
    for arr in (g.means, g.quats, g.scales, g.opacities, g.colors):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _gaussians_from(buf: bytes, off: int) -> tuple[GaussianSet, int]:
    if off + 8 > len(buf):
        raise MalformedPayload("truncated gaussian block")
    (n,) = struct.unpack_from("<Q", buf, off)
    off += 8
    counts = (3 * n, 4 * n, 3 * n, n, 3 * n)
    total = sum(counts) * 8
    if off + total > len(buf):
        raise MalformedPayload("truncated gaussian arrays")
    arrs = []
    for c in counts:
        arrs.append(np.frombuffer(buf, dtype="<f8", count=c, offset=off).copy())
        off += c * 8
    return GaussianSet(arrs[0].reshape(n, 3), arrs[1].reshape(n, 4),
                       arrs[2].reshape(n, 3), arrs[3], arrs[4].reshape(n, 3),
                       validate=False), off


def _encode_payload(msg) -> bytes:
    if isinstance(msg, (Hello, Shutdown)):
        return b""
    if isinstance(msg, DescriptorUpload):
        d = msg.descriptor
        return (struct.pack("<IQI", d.submap_seq, d.frame_index, len(d.vector))
                + np.ascontiguousarray(d.vector, dtype="<f8").tobytes())
    if isinstance(msg, SubMapUpload):
        blob = submap_to_bytes(msg.submap)
        parts = [struct.pack("<Q", len(blob)), blob,
                 struct.pack("<B", 1 if msg.odometry_rel is not None else 0)]
        if msg.odometry_rel is not None:
            parts.append(_pose_bytes(msg.odometry_rel))
        parts.append(struct.pack("<I", len(msg.supplements)))
        for owner_seq, gset in msg.supplements:
            parts.append(struct.pack("<I", owner_seq))
            parts.append(_gaussians_bytes(gset))
        return b"".join(parts)
    if isinstance(msg, PoseCorrections):
        parts = [struct.pack("<I", len(msg.corrections))]
        for seq, pose in msg.corrections:
            parts.append(struct.pack("<I", seq))
            parts.append(_pose_bytes(pose))
        return b"".join(parts)
    if isinstance(msg, Ack):
        return struct.pack("<BI", msg.acked_kind, msg.seq)
    raise TypeError(f"unknown message {type(msg)!r}")


def _decode_payload(kind: int, agent_id: int, payload: bytes):
    try:
        if kind == KIND_HELLO:
            return Hello(agent_id)
        if kind == KIND_SHUTDOWN:
            return Shutdown(agent_id)
        if kind == KIND_ACK:
            acked, seq = struct.unpack("<BI", payload)
            return Ack(agent_id, acked, seq)
        if kind == KIND_DESCRIPTOR:
            seq, frame_idx, dim = struct.unpack_from("<IQI", payload, 0)
            off = struct.calcsize("<IQI")
            if off + dim * 8 != len(payload):
                raise MalformedPayload("descriptor size mismatch")
            vec = np.frombuffer(payload, dtype="<f8", count=dim, offset=off).copy()
            return DescriptorUpload(agent_id, FrameDescriptor(vec, agent_id, seq,
                                                              int(frame_idx)))
        if kind == KIND_SUBMAP:
            (blob_len,) = struct.unpack_from("<Q", payload, 0)
            off = 8
            if off + blob_len > len(payload):
                raise MalformedPayload("truncated sub-map blob")
            submap = submap_from_bytes(payload[off:off + blob_len])
            off += blob_len
            (has_odom,) = struct.unpack_from("<B", payload, off)
            off += 1
            odom = None
            if has_odom:
                odom, off = _pose_from(payload, off)
            (n_supp,) = struct.unpack_from("<I", payload, off)
            off += 4
            supplements = []
            for _ in range(n_supp):
                (owner,) = struct.unpack_from("<I", payload, off)
                off += 4
                gset, off = _gaussians_from(payload, off)
                supplements.append((owner, gset))
            return SubMapUpload(agent_id, submap, supplements, odom)
        if kind == KIND_CORRECTIONS:
            (n,) = struct.unpack_from("<I", payload, 0)
            off = 4
            out = []
            for _ in range(n):
                (seq,) = struct.unpack_from("<I", payload, off)
                off += 4
                pose, off = _pose_from(payload, off)
                out.append((seq, pose))
            return PoseCorrections(agent_id, out)
    except (struct.error, ValueError, IndexError) as exc:
        raise MalformedPayload(str(exc)) from exc
    raise MalformedPayload(f"unknown message kind {kind}")


def encode(msg) -> bytes:
    payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise LengthOverflow(f"payload {len(payload)} exceeds {MAX_PAYLOAD}")
    head = HEADER.pack(MAGIC, VERSION, msg.kind, msg.agent_id, len(payload))
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return head + payload + struct.pack("<I", crc)


def decode(buf: bytes):
    """Decode the first frame in buf (trailing bytes are ignored)."""
    if len(buf) < 4:
        raise TruncatedFrame("shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    if len(buf) < HEADER.size:
        raise TruncatedFrame("incomplete header")
    _, version, kind, agent_id, plen = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    if plen > MAX_PAYLOAD:
        raise LengthOverflow(f"payload length {plen} exceeds {MAX_PAYLOAD}")
    total = HEADER.size + plen + 4
    if len(buf) < total:
        raise TruncatedFrame(f"frame needs {total} bytes, have {len(buf)}")
    payload = buf[HEADER.size:HEADER.size + plen]
    (crc,) = struct.unpack_from("<I", buf, HEADER.size + plen)
    expect = zlib.crc32(buf[:HEADER.size + plen]) & 0xFFFFFFFF
    if crc != expect:
        raise CrcMismatch(f"crc {crc:#010x} != {expect:#010x}")
    return _decode_payload(kind, agent_id, payload)


def frame_size(buf: bytes) -> int | None:
    """Total frame length once the header is available, else None."""
    if len(buf) < HEADER.size:
        return None
    _, _, _, _, plen = HEADER.unpack_from(buf, 0)
    return HEADER.size + plen + 4


def read_frame(stream) -> bytes:
    """Read exactly one frame from a blocking byte stream (socket file)."""
    head = stream.read(HEADER.size)
    if len(head) < HEADER.size:
        raise TruncatedFrame("stream closed mid-header")
    if head[:4] != MAGIC:
        raise BadMagic(f"bad magic {head[:4]!r}")
    _, version, _, _, plen = HEADER.unpack_from(head, 0)
    if plen > MAX_PAYLOAD:
        raise LengthOverflow(f"payload length {plen}")
    rest = stream.read(plen + 4)
    if len(rest) < plen + 4:
        raise TruncatedFrame("stream closed mid-payload")
    return head + rest
