"""Chain data model: updates, blocks, epochs, hashing, signatures, fork choice.

Every structure has one canonical byte encoding (fixed-width little-endian
integers, IEEE-754 doubles, length-prefixed collections) so that content
digests are bit-identical across platforms and runs.  The layout is documented
field by field in docs/serialization.md; golden digests in the test suite
depend on it.

Signatures are a keyed-MAC stand-in registered at a simulated PKI: the
protocol only needs unforgeability semantics, and MACs keep runs fast and
deterministic.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .contribution import GaussianFit

__all__ = [
    "EncodingError",
    "DIGEST_LEN",
    "content_hash",
    "derive_seed",
    "ModelWeights",
    "DataSummary",
    "Update",
    "Block",
    "Epoch",
    "LockCertificate",
    "RewardAllocation",
    "KeyRegistry",
    "sign",
    "canonical_serialize",
    "canonical_decode",
    "update_signing_bytes",
    "make_block",
    "block_digest",
    "validate_block",
    "fork_choice",
]

DIGEST_LEN = 32

_TAG_UPDATE = 0x01
_TAG_BLOCK = 0x02
_TAG_EPOCH = 0x03
_TAG_GAUSSIAN = 0x04
_TAG_SUMMARY = 0x05
_TAG_CERT = 0x06
_TAG_REWARDS = 0x07


class EncodingError(ValueError):
    """Raised when a value cannot be canonically encoded or decoded."""


def content_hash(data: bytes) -> bytes:
    """32-byte SHA-256 digest of ``data``."""
    return hashlib.sha256(data).digest()


def derive_seed(root: int, *tags: int | str) -> int:
    """Stable 64-bit seed derived from a root seed and a tag path.

    All randomness in a run flows from one root through tags like
    ("net",) or ("node", 7), so independent streams never alias.
    """
    h = hashlib.sha256()
    h.update(b"seed:%d" % root)
    for t in tags:
        h.update(b"/" + (t.encode() if isinstance(t, str) else b"%d" % t))
    return int.from_bytes(h.digest()[:8], "little")


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class ModelWeights:
    """Fixed-dimension vector of finite model parameters."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in self.values):
            raise EncodingError("model weights must be finite")

    @classmethod
    def from_array(cls, arr: np.ndarray | Sequence[float]) -> "ModelWeights":
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 1:
            raise ValueError("weights must be one-dimensional")
        return cls(tuple(float(v) for v in a))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DataSummary:
    """Per-feature Gaussian mixtures plus the row count they were fitted on."""

    per_feature: tuple[GaussianFit, ...]
    count: int

    def __post_init__(self) -> None:
        if len(self.per_feature) < 1:
            raise ValueError("summary needs at least one feature")
        if self.count < 0:
            raise ValueError("count must be nonnegative")

    @property
    def n_features(self) -> int:
        return len(self.per_feature)


@dataclass(frozen=True)
class Update:
    """One node's signed training result for a given block height."""

    weights: ModelWeights
    sender: int
    summary: DataSummary
    signature: bytes
    height: int

    def __post_init__(self) -> None:
        if self.height < 0:
            raise ValueError("height must be nonnegative")


@dataclass(frozen=True)
class Block:
    """Merge-list-bearing chain unit aggregating updates at one height."""

    height: int
    parent_digest: bytes
    merge_list: tuple[int, ...]
    updates: tuple[Update, ...]
    proposer: int
    digest: bytes

    def __post_init__(self) -> None:
        if self.height < 0:
            raise ValueError("height must be nonnegative")
        if len(self.parent_digest) != DIGEST_LEN:
            raise ValueError("parent digest must be 32 bytes")
        if len(self.digest) != DIGEST_LEN:
            raise ValueError("digest must be 32 bytes")


@dataclass(frozen=True)
class LockCertificate:
    """Quorum of voter signatures over a settlement proposal digest."""

    epoch_height: int
    proposal_digest: bytes
    votes: tuple[tuple[int, bytes], ...]

    def __post_init__(self) -> None:
        if len(self.proposal_digest) != DIGEST_LEN:
            raise ValueError("proposal digest must be 32 bytes")
        voters = [v for v, _ in self.votes]
        if len(voters) != len(set(voters)):
            raise ValueError("duplicate voter in certificate")


@dataclass(frozen=True)
class RewardAllocation:
    """Exact rational reward and forfeit amounts for one epoch settlement."""

    epoch_height: int
    pool: Fraction
    rewards: tuple[tuple[int, Fraction], ...]
    forfeits: tuple[tuple[int, Fraction], ...]

    def total_paid(self) -> Fraction:
        return sum((amt for _, amt in self.rewards), Fraction(0))

    def total_forfeited(self) -> Fraction:
        return sum((amt for _, amt in self.forfeits), Fraction(0))


@dataclass(frozen=True)
class Epoch:
    """A finality-locking span of block heights."""

    epoch_height: int
    block_range: tuple[int, int]
    locked: bool = False
    certificate: LockCertificate | None = None
    final_weights: ModelWeights | None = None
    settlement: RewardAllocation | None = None

    def __post_init__(self) -> None:
        if self.block_range[1] < self.block_range[0]:
            raise ValueError("empty block range")
        if self.locked and self.certificate is None:
            raise ValueError("locked epoch requires a certificate")


# ---------------------------------------------------------------------------
# Canonical serialization

_I64 = struct.Struct("<q")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(bytes([v]))

    def i64(self, v: int) -> None:
        self.parts.append(_I64.pack(v))

    def u32(self, v: int) -> None:
        self.parts.append(_U32.pack(v))

    def f64(self, v: float) -> None:
        if not np.isfinite(v):
            raise EncodingError(f"non-finite value {v!r} cannot be encoded")
        self.parts.append(_F64.pack(v))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.raw(b)

    def bigint(self, v: int) -> None:
        b = v.to_bytes((v.bit_length() + 8) // 8 or 1, "little", signed=True)
        self.blob(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EncodingError("truncated input")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u32())

    def bigint(self) -> int:
        return int.from_bytes(self.blob(), "little", signed=True)

    def done(self) -> bool:
        return self.pos == len(self.data)


def _write_weights(w: _Writer, mw: ModelWeights) -> None:
    w.u32(mw.dim)
    for v in mw.values:
        w.f64(v)


def _read_weights(r: _Reader) -> ModelWeights:
    dim = r.u32()
    return ModelWeights(tuple(r.f64() for _ in range(dim)))


def _write_gaussian(w: _Writer, g: GaussianFit) -> None:
    w.u8(_TAG_GAUSSIAN)
    w.i64(g.count)
    w.u32(len(g.components))
    for weight, mean, var in g.components:
        w.f64(weight)
        w.f64(mean)
        w.f64(var)


def _read_gaussian(r: _Reader) -> GaussianFit:
    if r.u8() != _TAG_GAUSSIAN:
        raise EncodingError("expected gaussian tag")
    count = r.i64()
    k = r.u32()
    comps = tuple((r.f64(), r.f64(), r.f64()) for _ in range(k))
    return GaussianFit(comps, count=count)


def _write_summary(w: _Writer, s: DataSummary) -> None:
    w.u8(_TAG_SUMMARY)
    w.i64(s.count)
    w.u32(len(s.per_feature))
    for g in s.per_feature:
        _write_gaussian(w, g)


def _read_summary(r: _Reader) -> DataSummary:
    if r.u8() != _TAG_SUMMARY:
        raise EncodingError("expected summary tag")
    count = r.i64()
    q = r.u32()
    return DataSummary(tuple(_read_gaussian(r) for _ in range(q)), count=count)


def update_signing_bytes(weights: ModelWeights, summary: DataSummary, height: int) -> bytes:
    """Canonical byte string an update's signature covers."""
    w = _Writer()
    _write_weights(w, weights)
    _write_summary(w, summary)
    w.i64(height)
    return w.getvalue()


def _write_update(w: _Writer, u: Update) -> None:
    w.u8(_TAG_UPDATE)
    w.i64(u.height)
    w.i64(u.sender)
    _write_weights(w, u.weights)
    _write_summary(w, u.summary)
    w.blob(u.signature)


def _read_update(r: _Reader) -> Update:
    if r.u8() != _TAG_UPDATE:
        raise EncodingError("expected update tag")
    height = r.i64()
    sender = r.i64()
    weights = _read_weights(r)
    summary = _read_summary(r)
    sig = r.blob()
    return Update(weights, sender, summary, sig, height)


def _write_block_content(w: _Writer, b: Block) -> None:
    """Everything the block digest covers (all fields except the digest)."""
    w.u8(_TAG_BLOCK)
    w.i64(b.height)
    w.raw(b.parent_digest)
    w.i64(b.proposer)
    w.u32(len(b.merge_list))
    for m in b.merge_list:
        w.i64(m)
    w.u32(len(b.updates))
    for u in b.updates:
        _write_update(w, u)


def _write_block(w: _Writer, b: Block) -> None:
    _write_block_content(w, b)
    w.raw(b.digest)


def _read_block(r: _Reader) -> Block:
    if r.u8() != _TAG_BLOCK:
        raise EncodingError("expected block tag")
    height = r.i64()
    parent = r._take(DIGEST_LEN)
    proposer = r.i64()
    n = r.u32()
    merge = tuple(r.i64() for _ in range(n))
    k = r.u32()
    updates = tuple(_read_update(r) for _ in range(k))
    digest = r._take(DIGEST_LEN)
    return Block(height, parent, merge, updates, proposer, digest)


def _write_cert(w: _Writer, c: LockCertificate) -> None:
    w.u8(_TAG_CERT)
    w.i64(c.epoch_height)
    w.raw(c.proposal_digest)
    w.u32(len(c.votes))
    for voter, sig in sorted(c.votes):
        w.i64(voter)
        w.blob(sig)


def _read_cert(r: _Reader) -> LockCertificate:
    if r.u8() != _TAG_CERT:
        raise EncodingError("expected certificate tag")
    epoch = r.i64()
    digest = r._take(DIGEST_LEN)
    n = r.u32()
    votes = tuple((r.i64(), r.blob()) for _ in range(n))
    return LockCertificate(epoch, digest, votes)


def _write_fraction(w: _Writer, f: Fraction) -> None:
    w.bigint(f.numerator)
    w.bigint(f.denominator)


def _read_fraction(r: _Reader) -> Fraction:
    num = r.bigint()
    den = r.bigint()
    return Fraction(num, den)


def _write_rewards(w: _Writer, ra: RewardAllocation) -> None:
    w.u8(_TAG_REWARDS)
    w.i64(ra.epoch_height)
    _write_fraction(w, ra.pool)
    w.u32(len(ra.rewards))
    for node, amt in sorted(ra.rewards):
        w.i64(node)
        _write_fraction(w, amt)
    w.u32(len(ra.forfeits))
    for node, amt in sorted(ra.forfeits):
        w.i64(node)
        _write_fraction(w, amt)


def _read_rewards(r: _Reader) -> RewardAllocation:
    if r.u8() != _TAG_REWARDS:
        raise EncodingError("expected rewards tag")
    epoch = r.i64()
    pool = _read_fraction(r)
    n = r.u32()
    rewards = tuple((r.i64(), _read_fraction(r)) for _ in range(n))
    k = r.u32()
    forfeits = tuple((r.i64(), _read_fraction(r)) for _ in range(k))
    return RewardAllocation(epoch, pool, rewards, forfeits)


def _write_epoch(w: _Writer, e: Epoch) -> None:
    w.u8(_TAG_EPOCH)
    w.i64(e.epoch_height)
    w.i64(e.block_range[0])
    w.i64(e.block_range[1])
    w.u8(1 if e.locked else 0)
    w.u8(1 if e.certificate is not None else 0)
    if e.certificate is not None:
        _write_cert(w, e.certificate)
    w.u8(1 if e.final_weights is not None else 0)
    if e.final_weights is not None:
        _write_weights(w, e.final_weights)
    w.u8(1 if e.settlement is not None else 0)
    if e.settlement is not None:
        _write_rewards(w, e.settlement)


def _read_epoch(r: _Reader) -> Epoch:
    if r.u8() != _TAG_EPOCH:
        raise EncodingError("expected epoch tag")
    height = r.i64()
    first = r.i64()
    last = r.i64()
    locked = bool(r.u8())
    cert = _read_cert(r) if r.u8() else None
    weights = _read_weights(r) if r.u8() else None
    settlement = _read_rewards(r) if r.u8() else None
    return Epoch(height, (first, last), locked, cert, weights, settlement)


def canonical_serialize(item: Update | Block | Epoch) -> bytes:
    """Deterministic, injective byte encoding of a chain structure."""
    w = _Writer()
    if isinstance(item, Update):
        _write_update(w, item)
    elif isinstance(item, Block):
        _write_block(w, item)
    elif isinstance(item, Epoch):
        _write_epoch(w, item)
    else:
        raise EncodingError(f"cannot serialize {type(item).__name__}")
    return w.getvalue()


def canonical_decode(data: bytes) -> Update | Block | Epoch:
    """Inverse of :func:`canonical_serialize`, dispatching on the leading tag."""
    if not data:
        raise EncodingError("empty input")
    r = _Reader(data)
    tag = data[0]
    if tag == _TAG_UPDATE:
        out: Update | Block | Epoch = _read_update(r)
    elif tag == _TAG_BLOCK:
        out = _read_block(r)
    elif tag == _TAG_EPOCH:
        out = _read_epoch(r)
    else:
        raise EncodingError(f"unknown tag {tag:#x}")
    if not r.done():
        raise EncodingError("trailing bytes after structure")
    return out


# ---------------------------------------------------------------------------
# Signatures: keyed-MAC stand-in with a simulated PKI


def sign(secret: bytes, message: bytes) -> bytes:
    """MAC the message under a node's secret key."""
    return hmac.new(secret, message, hashlib.sha256).digest()


class KeyRegistry:
    """Simulated PKI mapping node ids to registered MAC secrets.

    The node id doubles as the public key; verification recomputes the MAC
    under the registered secret.  Malformed inputs verify as False, never
    raise.
    """

    def __init__(self, seed: int = 0) -> None:
        self._master = hashlib.sha256(b"podsim-pki:%d" % seed).digest()
        self._secrets: dict[int, bytes] = {}

    def keygen(self, node_id: int) -> bytes:
        secret = hmac.new(self._master, b"node:%d" % node_id, hashlib.sha256).digest()
        self._secrets[node_id] = secret
        return secret

    def verify(self, node_id: int, message: bytes, signature: bytes) -> bool:
        secret = self._secrets.get(node_id)
        if secret is None or not isinstance(signature, (bytes, bytearray)):
            return False
        try:
            expected = sign(secret, message)
        except TypeError:
            return False
        return hmac.compare_digest(expected, bytes(signature))


# ---------------------------------------------------------------------------
# Block construction, validation, fork choice


def block_digest(
    height: int,
    parent_digest: bytes,
    merge_list: Sequence[int],
    updates: Sequence[Update],
    proposer: int,
) -> bytes:
    tmp = Block(
        height, parent_digest, tuple(merge_list), tuple(updates), proposer, b"\0" * DIGEST_LEN
    )
    w = _Writer()
    _write_block_content(w, tmp)
    return content_hash(w.getvalue())


def make_block(
    height: int,
    parent_digest: bytes,
    updates: Iterable[Update],
    proposer: int,
) -> Block:
    """Assemble a block from updates; merge list and digest are derived.

    Updates are ordered by sender so a given update set has exactly one block
    encoding regardless of merge order.
    """
    ups = tuple(sorted(updates, key=lambda u: u.sender))
    senders = tuple(u.sender for u in ups)
    if len(set(senders)) != len(senders):
        raise ValueError("duplicate sender in updates")
    digest = block_digest(height, parent_digest, senders, ups, proposer)
    return Block(height, parent_digest, senders, ups, proposer, digest)


def validate_block(block: Block, registry: KeyRegistry) -> tuple[bool, str]:
    """Structural and signature validation; returns (ok, reason)."""
    senders = tuple(u.sender for u in block.updates)
    if len(set(senders)) != len(senders):
        return False, "duplicate sender"
    if tuple(sorted(senders)) != tuple(sorted(block.merge_list)):
        return False, "merge list does not match update senders"
    if any(u.height != block.height for u in block.updates):
        return False, "update height mismatch"
    expected = block_digest(
        block.height, block.parent_digest, block.merge_list, block.updates, block.proposer
    )
    if expected != block.digest:
        return False, "digest mismatch"
    for u in block.updates:
        payload = update_signing_bytes(u.weights, u.summary, u.height)
        if not registry.verify(u.sender, payload, u.signature):
            return False, f"bad signature from {u.sender}"
    return True, "ok"


def fork_choice(candidates: Sequence[Block]) -> Block:
    """Pick the block with the largest merge list; ties go to the smallest digest.

    The comparison key is a total order, so the choice is deterministic and
    permutation-invariant.
    """
    if not candidates:
        raise ValueError("no candidate blocks")
    heights = {b.height for b in candidates}
    if len(heights) != 1:
        raise ValueError("candidates at different heights")
    return min(candidates, key=lambda b: (-len(b.merge_list), b.digest))
