"""Protocol messages and the action vocabulary node state machines emit.

Nodes are pure: ``handle(msg, now)`` returns a list of actions and the world
interprets them (sampling delays, honoring timers).  Broadcast targets are
named groups so the network layer owns all routing decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .core import Block, Epoch

__all__ = [
    "SHARING",
    "VOTING",
    "EVERYONE",
    "Send",
    "Broadcast",
    "SetTimer",
    "Deposit",
    "BlockGossip",
    "SettlementRequest",
    "LockBroadcast",
    "TimerFire",
    "VerifyChallenge",
    "VerifyServerBundle",
    "VerifyPeerBundle",
    "VerifyPeerReport",
    "PrePrepare",
    "PrepareVote",
    "CommitVote",
    "ViewChange",
]

SHARING = "sharing"
VOTING = "voting"
EVERYONE = "everyone"


# --- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    to: int
    msg: Any


@dataclass(frozen=True)
class Broadcast:
    group: str
    msg: Any


@dataclass(frozen=True)
class SetTimer:
    delay: int
    tag: str
    data: Any = None


# --- sharing-layer messages ------------------------------------------------


@dataclass(frozen=True)
class Deposit:
    node: int
    epoch_height: int


@dataclass(frozen=True)
class BlockGossip:
    block: Block


@dataclass(frozen=True)
class SettlementRequest:
    """Application for epoch settlement, referencing a block by digest."""

    proposer: int
    block_digest: bytes
    merge_list: tuple[int, ...]
    epoch_height: int

    def __post_init__(self) -> None:
        if not self.merge_list:
            raise ValueError("settlement request needs a nonempty merge list")


@dataclass(frozen=True)
class LockBroadcast:
    """Certified epoch plus the block it finalizes.

    ``proposed_at`` is the proposal tick, carried so committee members adopt
    the same lock-latency reading for dynamic-threshold adjustments.
    """

    epoch: Epoch
    block: Block
    proposed_at: int = 0


@dataclass(frozen=True)
class TimerFire:
    node: int
    tag: str
    data: Any = None


# --- verification protocol -------------------------------------------------


@dataclass(frozen=True)
class VerifyChallenge:
    member: int
    epoch_height: int
    challenge_seed: int
    server: int
    peer: int


@dataclass(frozen=True)
class VerifyServerBundle:
    """Holder -> server: u-shares, filed matrix hashes, consistency pieces,
    and the per-interval opening plan (indices only, never values)."""

    member: int
    epoch_height: int
    features: tuple  # per-feature ServerFeature payloads


@dataclass(frozen=True)
class VerifyPeerBundle:
    """Holder -> privacy peer: v-shares, consistency pieces, and openings."""

    member: int
    epoch_height: int
    features: tuple  # per-feature PeerFeature payloads


@dataclass(frozen=True)
class VerifyPeerReport:
    """Peer -> server: recomputed hashes, projection checks, v aggregates."""

    member: int
    epoch_height: int
    features: tuple


# --- voting layer ----------------------------------------------------------


@dataclass(frozen=True)
class PrePrepare:
    view: int
    epoch_height: int
    payload: Any  # voting.ProposalPayload
    digest: bytes
    primary: int


@dataclass(frozen=True)
class PrepareVote:
    view: int
    epoch_height: int
    digest: bytes
    voter: int
    signature: bytes


@dataclass(frozen=True)
class CommitVote:
    view: int
    epoch_height: int
    digest: bytes
    voter: int
    signature: bytes


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    epoch_height: int
    voter: int
    prepared: Any = None  # (digest, payload) carried from an earlier view
