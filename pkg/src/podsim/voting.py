"""Voting-layer committee: request validation, PBFT vote, locking, settlement.

A small fixed committee receives settlement requests from training nodes.
The primary for the current view validates the best request against the
voting threshold, verifies every merge-list member's data claims, and
proposes a settlement (final weights, contribution shares, rewards).  A
pre-prepare / prepare / commit exchange with quorum 2*f_v+1 produces a lock
certificate; round-robin view change with prepared-certificate carryover
keeps the slot live under a silent or equivocating primary without giving up
agreement.

Requests are processed in priority order, ascending by the requester's
request count this epoch, so a flooder cannot starve honest settlement.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .contribution import ContributionVector, compute_contribution
from .core import (
    Block,
    Epoch,
    KeyRegistry,
    LockCertificate,
    ModelWeights,
    RewardAllocation,
    canonical_serialize,
    content_hash,
    derive_seed,
    fork_choice,
    sign,
    validate_block,
)
from .messages import (
    EVERYONE,
    VOTING,
    BlockGossip,
    Broadcast,
    CommitVote,
    Deposit,
    LockBroadcast,
    PrepareVote,
    PrePrepare,
    Send,
    SetTimer,
    SettlementRequest,
    TimerFire,
    VerifyChallenge,
    VerifyPeerBundle,
    VerifyPeerReport,
    VerifyServerBundle,
    ViewChange,
)
from .sharing import merge_weights
from .verification import VerifyParams, peer_process, server_evaluate

__all__ = [
    "VotingConfig",
    "DynamicTau",
    "ProposalPayload",
    "PreparedCert",
    "VoterNode",
    "validate_request",
    "prioritize",
    "settle_rewards",
    "assemble_certificate",
    "merge_threshold",
    "DEPOSIT_UNIT",
]

DEPOSIT_UNIT = Fraction(1)


@dataclass(frozen=True)
class DynamicTau:
    """Stepwise threshold relaxation when epochs lock too slowly."""

    start: float = 0.9
    floor: float = 0.5
    step: float = 0.1
    latency_threshold: int = 100

    def __post_init__(self) -> None:
        if not 0 < self.floor <= self.start <= 1:
            raise ValueError("dynamic tau range invalid")
        if self.step <= 0:
            raise ValueError("tau step must be positive")


@dataclass(frozen=True)
class VotingConfig:
    committee_size: int = 4
    f_v: int = 1
    tau: float = 2 / 3
    fault_ratio: float = 1 / 3
    dynamic_tau: DynamicTau | None = None
    settle_grace: int = 6
    request_budget: int = 8
    request_queue_cap: int = 64
    verify_timeout: int = 30
    view_timeout: int = 60
    pool: Fraction = Fraction(100)

    def __post_init__(self) -> None:
        if self.committee_size < 3 * self.f_v + 1:
            raise ValueError(
                f"committee size {self.committee_size} below 3*f_v+1 = {3 * self.f_v + 1}"
            )
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if not 0 <= self.fault_ratio <= 1 / 3:
            raise ValueError("sharing fault ratio must be in [0, 1/3]")
        if self.tau > 1 - self.fault_ratio + 1e-12:
            raise ValueError(
                f"tau {self.tau} exceeds 1 - f = {1 - self.fault_ratio}"
            )
        if self.dynamic_tau and self.dynamic_tau.start > 1 - self.fault_ratio + 1e-12:
            raise ValueError("dynamic tau start exceeds 1 - f")

    @property
    def quorum(self) -> int:
        return 2 * self.f_v + 1


def merge_threshold(tau: float, n_active: int) -> int:
    """Minimum merge-list size: ceil(tau * active), robust to float fuzz."""
    return max(1, math.ceil(tau * n_active - 1e-9))


def validate_request(
    req: SettlementRequest, active: set[int], tau: float
) -> tuple[bool, str]:
    """Accept iff every member deposited and the list clears the threshold."""
    outsiders = set(req.merge_list) - active
    if outsiders:
        return False, f"members not in active list: {sorted(outsiders)}"
    need = merge_threshold(tau, len(active))
    if len(req.merge_list) < need:
        return False, f"merge list {len(req.merge_list)} below threshold {need}"
    return True, "ok"


def prioritize(
    queue: Sequence[tuple[int, SettlementRequest]], history: dict[int, int]
) -> list[tuple[int, SettlementRequest]]:
    """Order requests by the requester's historical count, FIFO on ties."""
    return sorted(queue, key=lambda item: (history.get(item[1].proposer, 0), item[0]))


def settle_rewards(
    epoch_height: int,
    shares: ContributionVector,
    failed: Sequence[int],
    pool: Fraction,
    deposit: Fraction = DEPOSIT_UNIT,
) -> RewardAllocation:
    """Split the pool plus forfeited deposits pro rata to contribution shares.

    Every amount is an exact rational, so the allocation conserves tokens
    identically: sum(rewards) == pool + deposit * len(failed).
    """
    if not shares.node_ids:
        raise ValueError("cannot settle an empty member set")
    forfeit_total = deposit * len(failed)
    payout = pool + forfeit_total
    rewards = tuple(
        (node, payout * share) for node, share in zip(shares.node_ids, shares.exact)
    )
    forfeits = tuple((node, deposit) for node in sorted(failed))
    return RewardAllocation(epoch_height, pool, rewards, forfeits)


def assemble_certificate(
    epoch_height: int,
    proposal_digest: bytes,
    votes: dict[int, bytes],
    quorum: int,
) -> LockCertificate | None:
    """Certificate from matching commit votes, or None below quorum."""
    if len(votes) < quorum:
        return None
    return LockCertificate(epoch_height, proposal_digest, tuple(sorted(votes.items())))


@dataclass(frozen=True)
class ProposalPayload:
    """Everything a voter needs to validate and a lock needs to carry."""

    epoch_height: int
    first_height: int
    last_height: int
    block: Block
    verified: tuple[int, ...]
    failed: tuple[int, ...]
    shares: tuple[tuple[int, Fraction], ...]
    final_weights: ModelWeights
    rewards: RewardAllocation
    proposed_at: int

    def epoch_draft(self) -> Epoch:
        return Epoch(
            self.epoch_height,
            (self.first_height, self.last_height),
            locked=False,
            certificate=None,
            final_weights=self.final_weights,
            settlement=self.rewards,
        )

    def digest(self) -> bytes:
        return content_hash(canonical_serialize(self.epoch_draft()) + self.block.digest)


@dataclass(frozen=True)
class PreparedCert:
    """Proof a digest reached prepare quorum in some view; carried through
    view changes so a possibly-committed value is never abandoned."""

    view: int
    digest: bytes
    payload: ProposalPayload
    prepare_sigs: tuple[tuple[int, bytes], ...]


def _prepare_sign_bytes(view: int, epoch_height: int, digest: bytes) -> bytes:
    return b"prepare:" + struct.pack("<qq", view, epoch_height) + digest


class VoterNode:
    """One committee member's protocol state and transition function."""

    def __init__(
        self,
        voter_id: int,
        secret: bytes,
        registry: KeyRegistry,
        committee: tuple[int, ...],
        cfg: VotingConfig,
        *,
        epoch_len: int = 1,
        verify_params: VerifyParams | None = None,
        contrib_params: dict | None = None,
        root_seed: int = 0,
    ) -> None:
        self.voter_id = voter_id
        self.secret = secret
        self.registry = registry
        self.committee = committee
        self.cfg = cfg
        self.epoch_len = epoch_len
        self.verify_params = verify_params or VerifyParams()
        self.contrib_params = contrib_params or {}
        self.root_seed = root_seed

        self.epoch_height = 0
        self.view = 0
        self.tau = cfg.dynamic_tau.start if cfg.dynamic_tau else cfg.tau
        self.prev_proposed_at = 0
        self.locked_epochs: dict[int, tuple[Epoch, Block]] = {}
        self.alarms: list[str] = []
        self.declines: list[tuple[int, str]] = []
        self._reset_epoch_state()

    # -- per-epoch state ----------------------------------------------------

    def _reset_epoch_state(self) -> None:
        self.active_by_epoch: dict[int, set[int]] = getattr(self, "active_by_epoch", {})
        self.active_by_epoch = {
            h: s for h, s in self.active_by_epoch.items() if h >= self.epoch_height
        }
        self.request_counts: dict[int, int] = {}
        self.request_queue: list[tuple[int, SettlementRequest]] = []
        self.waiting_blocks: dict[bytes, SettlementRequest] = {}
        self.block_store: dict[bytes, Block] = {}
        self.best_block: Block | None = None
        self.verdicts: dict[int, bool] = {}
        self.pending_verify: set[int] = set()
        self.server_bundles: dict[int, Any] = {}
        self.peer_reports: dict[int, Any] = {}
        self.member_claims: dict[int, tuple] = {}
        self.payloads: dict[bytes, ProposalPayload] = {}
        self.prepared: tuple[bytes, ProposalPayload] | None = None
        self.prepared_cert: PreparedCert | None = None
        self.prepare_votes: dict[tuple[int, bytes], dict[int, bytes]] = {}
        self.commit_votes: dict[tuple[int, bytes], dict[int, bytes]] = {}
        self.commit_sent: set[tuple[int, bytes]] = set()
        self.view_changes: dict[int, dict[int, ViewChange]] = {}
        self.proposed_views: set[int] = set()
        self.queue_timer_armed = False
        self.grace_deadline_passed = False
        self.grace_armed = False
        self.view_timer_view = -1
        self.epoch_locked = False
        self._seq = 0

    @property
    def first_height(self) -> int:
        return self.epoch_height * self.epoch_len + 1

    @property
    def last_height(self) -> int:
        return (self.epoch_height + 1) * self.epoch_len

    def primary_for(self, view: int) -> int:
        return self.committee[(self.epoch_height + view) % len(self.committee)]

    @property
    def is_primary(self) -> bool:
        return self.primary_for(self.view) == self.voter_id

    @property
    def active(self) -> set[int]:
        return self.active_by_epoch.setdefault(self.epoch_height, set())

    @property
    def peer_voter(self) -> int:
        """Privacy peer for verification: the voter after the primary."""
        idx = self.committee.index(self.primary_for(self.view))
        return self.committee[(idx + 1) % len(self.committee)]

    # -- event interface ----------------------------------------------------

    def handle(self, msg: Any, now: int) -> list:
        if isinstance(msg, TimerFire):
            return self._on_timer(msg, now)
        if isinstance(msg, Deposit):
            self.active_by_epoch.setdefault(msg.epoch_height, set()).add(msg.node)
            return []
        if isinstance(msg, BlockGossip):
            return self._on_block(msg.block)
        if isinstance(msg, SettlementRequest):
            return self._on_request(msg, now)
        if isinstance(msg, VerifyServerBundle):
            return self._on_server_bundle(msg, now)
        if isinstance(msg, VerifyPeerBundle):
            return self._on_peer_bundle(msg)
        if isinstance(msg, VerifyPeerReport):
            return self._on_peer_report(msg, now)
        if isinstance(msg, PrePrepare):
            return self._on_preprepare(msg, now)
        if isinstance(msg, PrepareVote):
            return self._on_prepare(msg, now)
        if isinstance(msg, CommitVote):
            return self._on_commit(msg, now)
        if isinstance(msg, ViewChange):
            return self._on_view_change(msg, now)
        if isinstance(msg, LockBroadcast):
            return self._on_lock_broadcast(msg, now)
        return []

    def _local(self, msg: Any, now: int, actions: list) -> None:
        """Apply one of our own broadcasts to ourselves immediately."""
        actions.extend(self.handle(msg, now))

    # -- sharing-layer inputs -----------------------------------------------

    def _on_block(self, block: Block) -> list:
        if not (self.first_height <= block.height <= self.last_height):
            return []
        self.block_store[block.digest] = block
        req = self.waiting_blocks.pop(block.digest, None)
        if req is not None:
            self._seq += 1
            self.request_queue.append((self._seq, req))
        return []

    def _on_request(self, req: SettlementRequest, now: int) -> list:
        if req.epoch_height != self.epoch_height or self.epoch_locked:
            return []
        self.request_counts[req.proposer] = self.request_counts.get(req.proposer, 0) + 1
        actions: list = []
        if not self.is_primary:
            self._arm_view_timer(actions)
            return actions
        self._seq += 1
        self.request_queue.append((self._seq, req))
        if len(self.request_queue) > self.cfg.request_queue_cap:
            # Shed the lowest-priority entries; flooders evict themselves.
            self.request_queue = prioritize(self.request_queue, self.request_counts)[
                : self.cfg.request_queue_cap
            ]
        if not self.queue_timer_armed:
            self.queue_timer_armed = True
            actions.append(SetTimer(1, "queue", (self.epoch_height, self.view)))
        return actions

    def _on_timer(self, t: TimerFire, now: int) -> list:
        tag, data = t.tag, t.data
        if tag == "queue":
            return self._process_queue(data, now)
        if tag == "grace":
            return self._on_grace(data, now)
        if tag == "verify-timeout":
            return self._on_verify_timeout(data, now)
        if tag == "view":
            return self._on_view_timeout(data, now)
        return []

    def _process_queue(self, data: tuple[int, int], now: int) -> list:
        self.queue_timer_armed = False
        if data != (self.epoch_height, self.view) or self.epoch_locked or not self.is_primary:
            return []
        actions: list = []
        ordered = prioritize(self.request_queue, self.request_counts)
        batch, rest = ordered[: self.cfg.request_budget], ordered[self.cfg.request_budget :]
        self.request_queue = rest
        for _, req in batch:
            block = self.block_store.get(req.block_digest)
            if block is None:
                self.waiting_blocks[req.block_digest] = req
                continue
            ok, reason = validate_request(req, self.active, self.tau)
            if not ok:
                self.declines.append((self.epoch_height, reason))
                continue
            self._consider_candidate(block, actions, now)
        if self.request_queue and not self.queue_timer_armed:
            self.queue_timer_armed = True
            actions.append(SetTimer(1, "queue", (self.epoch_height, self.view)))
        return actions

    def _consider_candidate(self, block: Block, actions: list, now: int) -> None:
        if self.best_block is None:
            self.best_block = block
        else:
            self.best_block = fork_choice([self.best_block, block])
        if not self.grace_armed:
            self.grace_armed = True
            actions.append(
                SetTimer(self.cfg.settle_grace, "grace", (self.epoch_height, self.view))
            )
        self._launch_verification(actions, now)

    def _launch_verification(self, actions: list, now: int) -> None:
        assert self.best_block is not None
        seed = derive_seed(self.root_seed, "verify", self.epoch_height)
        for u in self.best_block.updates:
            member = u.sender
            if member in self.verdicts or member in self.pending_verify:
                continue
            self.member_claims[member] = u.summary.per_feature
            if u.summary.count == 0:
                # Nothing claimed, nothing to check; share will be zero anyway.
                self.verdicts[member] = True
                continue
            self.pending_verify.add(member)
            actions.append(
                Send(
                    member,
                    VerifyChallenge(
                        member, self.epoch_height, seed, self.voter_id, self.peer_voter
                    ),
                )
            )
            actions.append(
                SetTimer(
                    self.cfg.verify_timeout, "verify-timeout", (self.epoch_height, member)
                )
            )

    def _on_verify_timeout(self, data: tuple[int, int], now: int) -> list:
        epoch, member = data
        if epoch != self.epoch_height or member not in self.pending_verify:
            return []
        self.pending_verify.discard(member)
        self.verdicts[member] = False
        return self._try_propose(now)

    def _on_server_bundle(self, msg: VerifyServerBundle, now: int) -> list:
        if msg.epoch_height != self.epoch_height:
            return []
        self.server_bundles[msg.member] = msg.features
        return self._finish_verification(msg.member, now)

    def _on_peer_bundle(self, msg: VerifyPeerBundle) -> list:
        if msg.epoch_height != self.epoch_height:
            return []
        reports = peer_process(msg.features, self._challenge_seed(), msg.member, self.verify_params)
        return [
            Send(msg.server, VerifyPeerReport(msg.member, msg.epoch_height, reports))
        ]

    def _on_peer_report(self, msg: VerifyPeerReport, now: int) -> list:
        if msg.epoch_height != self.epoch_height:
            return []
        self.peer_reports[msg.member] = msg.features
        return self._finish_verification(msg.member, now)

    def _challenge_seed(self) -> int:
        return derive_seed(self.root_seed, "verify", self.epoch_height)

    def _finish_verification(self, member: int, now: int) -> list:
        if member not in self.pending_verify:
            return []
        sb = self.server_bundles.get(member)
        pr = self.peer_reports.get(member)
        if sb is None or pr is None:
            return []
        claims = self.member_claims.get(member, ())
        ok, _reason, _details = server_evaluate(
            claims, sb, pr, self._challenge_seed(), member, self.verify_params
        )
        self.pending_verify.discard(member)
        self.verdicts[member] = ok
        return self._try_propose(now)

    # -- proposal -----------------------------------------------------------

    def _on_grace(self, data: tuple[int, int], now: int) -> list:
        if data != (self.epoch_height, self.view):
            return []
        self.grace_deadline_passed = True
        return self._try_propose(now)

    def _try_propose(self, now: int) -> list:
        if (
            not self.is_primary
            or self.epoch_locked
            or self.view in self.proposed_views
            or not self.grace_deadline_passed
            or self.best_block is None
        ):
            return []
        actions: list = []
        # A carried prepared certificate overrides any local candidate.
        if self.prepared_cert is not None:
            return self._send_preprepare(self.prepared_cert.payload, now)
        members = self.best_block.merge_list
        if any(m not in self.verdicts for m in members):
            self._launch_verification(actions, now)
            return actions
        payload = self._build_payload(now)
        if payload is None:
            return actions
        return actions + self._send_preprepare(payload, now)

    def _build_payload(self, now: int) -> ProposalPayload | None:
        assert self.best_block is not None
        block = self.best_block
        verified = tuple(m for m in block.merge_list if self.verdicts.get(m))
        failed = tuple(m for m in block.merge_list if not self.verdicts.get(m))
        kept = [u for u in block.updates if u.sender in verified]
        if not kept or all(u.summary.count == 0 for u in kept):
            return None
        final = merge_weights([(u.weights, u.summary.count) for u in kept])
        shares = self._contribution_shares(kept)
        rewards = settle_rewards(self.epoch_height, shares, failed, self.cfg.pool)
        return ProposalPayload(
            self.epoch_height,
            self.first_height,
            self.last_height,
            block,
            verified,
            failed,
            tuple(zip(shares.node_ids, shares.exact)),
            final,
            rewards,
            proposed_at=now,
        )

    def _contribution_shares(self, kept: Sequence) -> ContributionVector:
        fits = [u.summary.per_feature for u in kept]
        counts = [u.summary.count for u in kept]
        ids = [u.sender for u in kept]
        return compute_contribution(
            fits,
            counts,
            sample_rate=self.contrib_params.get("sample_rate", 0.1),
            n_slices=self.contrib_params.get("n_slices", 16),
            g_r=self.contrib_params.get("g_r", 3.0),
            seed=derive_seed(self.root_seed, "contrib", self.epoch_height),
            node_ids=ids,
        )

    def _send_preprepare(self, payload: ProposalPayload, now: int) -> list:
        self.proposed_views.add(self.view)
        digest = payload.digest()
        self.payloads[digest] = payload
        msg = PrePrepare(self.view, self.epoch_height, payload, digest, self.voter_id)
        actions: list = [Broadcast(VOTING, msg)]
        self._local(msg, now, actions)
        return actions

    # -- PBFT phases ----------------------------------------------------------

    def _validate_payload(self, payload: ProposalPayload) -> tuple[bool, str]:
        if payload.epoch_height != self.epoch_height:
            return False, "wrong epoch"
        if payload.first_height != self.first_height or payload.last_height != self.last_height:
            return False, "wrong height range"
        block = payload.block
        if block.height != self.last_height:
            return False, "block not at epoch end"
        ok, reason = validate_block(block, self.registry)
        if not ok:
            return False, f"invalid block: {reason}"
        need = merge_threshold(self.tau, len(self.active))
        if len(block.merge_list) < need:
            return False, f"merge list below threshold {need}"
        if set(payload.verified) | set(payload.failed) != set(block.merge_list):
            return False, "verified/failed sets do not partition the merge list"
        kept = [u for u in block.updates if u.sender in payload.verified]
        if not kept:
            return False, "no verified members"
        expected_final = merge_weights([(u.weights, u.summary.count) for u in kept])
        if expected_final != payload.final_weights:
            return False, "final weights mismatch"
        expected_shares = self._contribution_shares(kept)
        if tuple(zip(expected_shares.node_ids, expected_shares.exact)) != payload.shares:
            return False, "contribution shares mismatch"
        expected_rewards = settle_rewards(
            self.epoch_height, expected_shares, payload.failed, self.cfg.pool
        )
        if expected_rewards != payload.rewards:
            return False, "rewards mismatch"
        return True, "ok"

    def _on_preprepare(self, msg: PrePrepare, now: int) -> list:
        if msg.epoch_height != self.epoch_height or self.epoch_locked:
            return []
        if msg.view != self.view or msg.primary != self.primary_for(self.view):
            return []
        if msg.digest != msg.payload.digest():
            return []
        ok, _reason = self._validate_payload(msg.payload)
        if not ok:
            return []
        if self.prepared is not None and self.prepared[0] != msg.digest:
            # Re-preparing a different digest is only justified by a carried
            # prepared certificate from a view change.
            if self.prepared_cert is None or self.prepared_cert.digest != msg.digest:
                return []
        self.payloads[msg.digest] = msg.payload
        self.prepared = (msg.digest, msg.payload)
        sig = sign(self.secret, _prepare_sign_bytes(self.view, self.epoch_height, msg.digest))
        vote = PrepareVote(self.view, self.epoch_height, msg.digest, self.voter_id)
        actions: list = [Broadcast(VOTING, vote)]
        self._record_prepare(vote, sig)
        actions.extend(self._maybe_commit(now))
        self._arm_view_timer(actions)
        return actions

    def _record_prepare(self, vote: PrepareVote, sig: bytes | None = None) -> None:
        key = (vote.view, vote.digest)
        if sig is None:
            sig = b""
        self.prepare_votes.setdefault(key, {})[vote.voter] = sig
        self._own_prepare_sigs = getattr(self, "_own_prepare_sigs", {})
        if vote.voter == self.voter_id:
            self._own_prepare_sigs[key] = sig

    def _on_prepare(self, msg: PrepareVote, now: int) -> list:
        if msg.epoch_height != self.epoch_height or msg.view != self.view or self.epoch_locked:
            return []
        self._record_prepare(msg)
        return self._maybe_commit(now)

    def _maybe_commit(self, now: int) -> list:
        if self.prepared is None:
            return []
        digest, payload = self.prepared
        key = (self.view, digest)
        votes = self.prepare_votes.get(key, {})
        if len(votes) < self.cfg.quorum or key in self.commit_sent:
            return []
        self.commit_sent.add(key)
        # Prepared certificate: carried through view changes from now on.
        self.prepared_cert = PreparedCert(
            self.view, digest, payload, tuple(sorted(votes.items()))
        )
        sig = sign(self.secret, digest)
        msg = CommitVote(self.view, self.epoch_height, digest, self.voter_id, sig)
        actions: list = [Broadcast(VOTING, msg)]
        self._local(msg, now, actions)
        return actions

    def _on_commit(self, msg: CommitVote, now: int) -> list:
        if msg.epoch_height != self.epoch_height or self.epoch_locked:
            return []
        if not self.registry.verify(msg.voter, msg.digest, msg.signature):
            return []
        key = (msg.view, msg.digest)
        self.commit_votes.setdefault(key, {})[msg.voter] = msg.signature
        votes = self.commit_votes[key]
        payload = self.payloads.get(msg.digest)
        if payload is None or len(votes) < self.cfg.quorum:
            return []
        cert = assemble_certificate(self.epoch_height, msg.digest, votes, self.cfg.quorum)
        assert cert is not None
        return self._lock(payload, cert, now)

    # -- locking ---------------------------------------------------------------

    def _lock(self, payload: ProposalPayload, cert: LockCertificate, now: int) -> list:
        epoch = replace(
            payload.epoch_draft(), locked=True, certificate=cert
        )
        return self._adopt_lock(epoch, payload.block, payload.proposed_at, now, broadcast=True)

    def _adopt_lock(
        self, epoch: Epoch, block: Block, proposed_at: int, now: int, *, broadcast: bool
    ) -> list:
        h = epoch.epoch_height
        held = self.locked_epochs.get(h)
        if held is not None:
            if held[0].certificate.proposal_digest != epoch.certificate.proposal_digest:
                self.alarms.append(
                    f"conflicting lock certificates at epoch {h}"
                )
            return []
        self.locked_epochs[h] = (epoch, block)
        actions: list = []
        if broadcast:
            actions.append(Broadcast(EVERYONE, LockBroadcast(epoch, block)))
        if h >= self.epoch_height:
            self._advance_epoch(h + 1, proposed_at)
        return actions

    def _advance_epoch(self, new_height: int, proposed_at: int) -> None:
        if self.cfg.dynamic_tau is not None:
            dyn = self.cfg.dynamic_tau
            latency = max(0, proposed_at - self.prev_proposed_at)
            if latency > dyn.latency_threshold:
                self.tau = max(dyn.floor, self.tau - dyn.step)
            self.prev_proposed_at = proposed_at
        self.epoch_height = new_height
        self.view = 0
        self._reset_epoch_state()

    def _on_lock_broadcast(self, msg: LockBroadcast, now: int) -> list:
        epoch, block = msg.epoch, msg.block
        if epoch.epoch_height < self.epoch_height - 1:
            return []
        if epoch.certificate is None or len(epoch.certificate.votes) < self.cfg.quorum:
            return []
        draft = replace(epoch, locked=False, certificate=None)
        expected = content_hash(canonical_serialize(draft) + block.digest)
        if expected != epoch.certificate.proposal_digest:
            return []
        for voter, sig in epoch.certificate.votes:
            if voter not in self.committee or not self.registry.verify(
                voter, epoch.certificate.proposal_digest, sig
            ):
                return []
        return self._adopt_lock(epoch, block, now, now, broadcast=False)

    # -- view change -------------------------------------------------------------

    def _arm_view_timer(self, actions: list) -> None:
        if self.view_timer_view == self.view or self.epoch_locked:
            return
        self.view_timer_view = self.view
        timeout = self.cfg.view_timeout * (2 ** min(self.view, 6))
        actions.append(SetTimer(timeout, "view", (self.epoch_height, self.view)))

    def _on_view_timeout(self, data: tuple[int, int], now: int) -> list:
        if data != (self.epoch_height, self.view) or self.epoch_locked:
            return []
        msg = ViewChange(self.view + 1, self.epoch_height, self.voter_id, self.prepared_cert)
        actions: list = [Broadcast(VOTING, msg)]
        self._local(msg, now, actions)
        return actions

    def _on_view_change(self, msg: ViewChange, now: int) -> list:
        if msg.epoch_height != self.epoch_height or self.epoch_locked:
            return []
        if msg.new_view <= self.view:
            return []
        if msg.prepared is not None and not self._valid_prepared_cert(msg.prepared):
            return []
        self.view_changes.setdefault(msg.new_view, {})[msg.voter] = msg
        if len(self.view_changes[msg.new_view]) < self.cfg.quorum:
            return []
        carried = self._best_carried(msg.new_view)
        self.view = msg.new_view
        self.view_timer_view = -1
        self.grace_deadline_passed = True  # prior view already waited out the grace
        if carried is not None:
            self.prepared_cert = carried
            self.prepared = (carried.digest, carried.payload)
            self.payloads[carried.digest] = carried.payload
        actions: list = []
        self._arm_view_timer(actions)
        if self.is_primary:
            actions.extend(self._try_propose(now))
            if not self.queue_timer_armed and self.request_queue:
                self.queue_timer_armed = True
                actions.append(SetTimer(1, "queue", (self.epoch_height, self.view)))
        return actions

    def _valid_prepared_cert(self, cert: PreparedCert) -> bool:
        if not isinstance(cert, PreparedCert):
            return False
        if len(cert.prepare_sigs) < self.cfg.quorum:
            return False
        if cert.payload.digest() != cert.digest:
            return False
        payload_bytes = _prepare_sign_bytes(cert.view, self.epoch_height, cert.digest)
        for voter, sig in cert.prepare_sigs:
            if voter not in self.committee:
                return False
            if not self.registry.verify(voter, payload_bytes, sig):
                return False
        return True

    def _best_carried(self, new_view: int) -> PreparedCert | None:
        carried = [
            vc.prepared
            for vc in self.view_changes.get(new_view, {}).values()
            if vc.prepared is not None
        ]
        if self.prepared_cert is not None:
            carried.append(self.prepared_cert)
        if not carried:
            return None
        return max(carried, key=lambda c: (c.view, c.digest))
