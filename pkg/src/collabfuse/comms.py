"""Metered two-round protocol: meta-packet handshake, then feature requests.

Wire formats (little-endian, IEEE-754 binary32 floats):

    MetaPacket     sender:u16 | modality:u8 | rho:f32                  7 bytes
    FeaturePacket  sender:u16 | modality:u8 | f:f32[D] | u:f32[D]      3 + 8*D bytes

``modality`` is the index into the scenario's ordered global modality list.
Transport is in-process; every packet crosses the boundary as bytes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor

_META = struct.Struct("<HBf")
_HEADER = struct.Struct("<HB")
META_BYTES = _META.size  # 7
REQUEST_BITS_PER_PAIR = 1


class ProtocolError(RuntimeError):
    pass


def feature_packet_bytes(dim: int) -> int:
    return _HEADER.size + 8 * dim


@dataclass(frozen=True)
class MetaPacket:
    sender: int
    modality: int
    rho: float

    def __post_init__(self):
        # hold exactly what the wire can carry
        object.__setattr__(self, "rho", float(np.float32(self.rho)))

    def to_bytes(self) -> bytes:
        return _META.pack(self.sender, self.modality, self.rho)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MetaPacket":
        if len(buf) != META_BYTES:
            raise ProtocolError(f"meta packet must be {META_BYTES} bytes, got {len(buf)}")
        return cls(*_META.unpack(buf))


@dataclass(frozen=True, eq=False)
class FeaturePacket:
    sender: int
    modality: int
    f: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype="<f4").reshape(-1)
        u = np.asarray(self.u, dtype="<f4").reshape(-1)
        if f.shape != u.shape:
            raise ProtocolError(f"feature/uncertainty length mismatch {f.shape} vs {u.shape}")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "u", u)

    @property
    def dim(self) -> int:
        return self.f.size

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.sender, self.modality) + self.f.tobytes() + self.u.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, dim: int) -> "FeaturePacket":
        if len(buf) != feature_packet_bytes(dim):
            raise ProtocolError(f"feature packet must be {feature_packet_bytes(dim)} bytes, got {len(buf)}")
        sender, modality = _HEADER.unpack_from(buf)
        payload = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
        return cls(sender, modality, payload[:dim].copy(), payload[dim:].copy())

    def __eq__(self, other):
        if not isinstance(other, FeaturePacket):
            return NotImplemented
        return (self.sender == other.sender and self.modality == other.modality
                and self.f.tobytes() == other.f.tobytes() and self.u.tobytes() == other.u.tobytes())


@dataclass
class FrameCommLog:
    meta_bytes: int = 0
    feature_bytes: int = 0
    accepted_pairs: int = 0
    offered_pairs: int = 0
    request_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return self.meta_bytes + self.feature_bytes + self.request_bytes


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _rho(enc) -> float:
    if hasattr(enc, "rho"):
        return float(np.asarray(_value(enc.rho)).reshape(-1)[0])
    return float(np.mean(_value(enc[1])))


def _fu(enc):
    if hasattr(enc, "f"):
        return np.asarray(_value(enc.f)), np.asarray(_value(enc.u))
    return np.asarray(_value(enc[0])), np.asarray(_value(enc[1]))


def handshake(neighbors: Iterable[int], encoded: Mapping[tuple[int, str], object],
              modalities: Sequence[str]) -> tuple[list[bytes], int]:
    """Every in-range neighbor broadcasts one meta-packet per modality it carries.

    ``encoded`` maps ``(agent, modality)`` to a GaussianFeature or an ``(f, u)``
    pair; only agents in ``neighbors`` speak.
    """
    wire = []
    nbrs = set(neighbors)
    for (i, m), enc in encoded.items():
        if i == 0 or i not in nbrs:
            continue
        wire.append(MetaPacket(i, modalities.index(m), _rho(enc)).to_bytes())
    return wire, META_BYTES * len(wire)


def receive_meta(wire: Iterable[bytes], modalities: Sequence[str]) -> dict[tuple[int, str], float]:
    out = {}
    for buf in wire:
        pkt = MetaPacket.from_bytes(buf)
        out[(pkt.sender, modalities[pkt.modality])] = pkt.rho
    return out


def request_features(decisions, encoded: Mapping[tuple[int, str], object],
                     modalities: Sequence[str], dim: int) -> tuple[list[bytes], int]:
    """Accepted pairs transmit one feature packet each; rejected pairs send nothing.

    ``decisions`` is a DecisionMatrix or a mapping ``(agent, modality) -> z``.
    """
    pairs = decisions.accepted() if hasattr(decisions, "accepted") else [
        k for k, z in decisions.items() if int(z) == 1
    ]
    wire = []
    for i, m in pairs:
        if (i, m) not in encoded:
            raise ProtocolError(f"accepted pair (agent {i}, modality {m!r}) has no encoding to send")
        f, u = _fu(encoded[(i, m)])
        if f.size != dim:
            raise ProtocolError(f"pair (agent {i}, modality {m!r}) has dim {f.size}, expected {dim}")
        wire.append(FeaturePacket(i, modalities.index(m), f, u).to_bytes())
    return wire, feature_packet_bytes(dim) * len(wire)


def receive_features(wire: Iterable[bytes], modalities: Sequence[str], dim: int
                     ) -> dict[tuple[int, str], FeaturePacket]:
    out = {}
    for buf in wire:
        pkt = FeaturePacket.from_bytes(buf, dim)
        out[(pkt.sender, modalities[pkt.modality])] = pkt
    return out


def package_size(logs: Sequence[FrameCommLog]) -> float:
    """Mean bytes per frame, in kilobytes (1 KB = 1024 bytes)."""
    if not logs:
        raise ValueError("package_size needs at least one frame log")
    return float(np.mean([log.total_bytes for log in logs])) / 1024.0


COMM_LOG_FIELDS = ("frame", "meta_bytes", "feature_bytes", "request_bytes", "total_bytes",
                   "accepted_pairs", "offered_pairs")


def write_comm_logs(path, logs: Sequence[FrameCommLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMM_LOG_FIELDS)
        for k, log in enumerate(logs):
            w.writerow([k, log.meta_bytes, log.feature_bytes, log.request_bytes, log.total_bytes,
                        log.accepted_pairs, log.offered_pairs])


def request_bytes(n_pairs: int) -> int:
    return (n_pairs * REQUEST_BITS_PER_PAIR + 7) // 8
