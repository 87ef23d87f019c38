"""Training-node state machine: deposit, train, merge, broadcast, lock.

Within an epoch a node repeatedly trains from its current merged tip, wraps
the result in a block whose merge list only ever grows, and gossips it.
Incoming blocks are folded in by the block-merging rules: subsets are
ignored, same-height news is merged and rebroadcast, longer chains are
adopted, and late history with unseen senders forces a rollback and
deterministic retrain from that height.

Nodes are pure event machines: ``handle(msg, now)`` returns actions; all
timing, randomness, and delivery live in the network layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .contribution import GaussianFit, fit_gaussian
from .core import (
    Block,
    DataSummary,
    Epoch,
    KeyRegistry,
    ModelWeights,
    canonical_serialize,
    content_hash,
    make_block,
    sign,
    update_signing_bytes,
    validate_block,
    Update,
)
from .messages import (
    EVERYONE,
    VOTING,
    BlockGossip,
    Broadcast,
    Deposit,
    LockBroadcast,
    Send,
    SetTimer,
    SettlementRequest,
    TimerFire,
    VerifyChallenge,
    VerifyPeerBundle,
    VerifyServerBundle,
)
from .trainer import Dataset, TrainerConfig, local_train
from .verification import VerifyParams, holder_build_bundles

__all__ = [
    "AuthorizationError",
    "MergeOutcome",
    "SharingNode",
    "merge_weights",
    "merged_block_weights",
    "placeholder_fits",
    "genesis_block",
    "genesis_epoch",
]

IGNORE = "ignore"
MERGE_AND_BROADCAST = "merge_and_broadcast"
ROLLBACK = "rollback_to"


class AuthorizationError(RuntimeError):
    """Raised when a node acts without having deposited for the epoch."""


@dataclass(frozen=True)
class MergeOutcome:
    """What an incoming block did to local state."""

    action: str
    rollback_height: int | None = None
    new_block: Block | None = None


def merge_weights(pairs: Sequence[tuple[ModelWeights, int]]) -> ModelWeights:
    """Count-weighted mean of update weights; unweighted if all counts are zero.

    Deterministic and permutation-invariant: inputs are ordered by the caller
    (blocks keep updates sorted by sender).
    """
    if not pairs:
        raise ValueError("nothing to merge")
    dims = {w.dim for w, _ in pairs}
    if len(dims) != 1:
        raise ValueError("weight dimension mismatch")
    stack = np.stack([w.array for w, _ in pairs])
    counts = np.array([c for _, c in pairs], dtype=np.float64)
    if counts.sum() == 0:
        return ModelWeights.from_array(stack.mean(axis=0))
    return ModelWeights.from_array(np.average(stack, axis=0, weights=counts))


def merged_block_weights(block: Block) -> ModelWeights:
    """Aggregate weights a block's update set represents."""
    return merge_weights([(u.weights, u.summary.count) for u in block.updates])


def placeholder_fits(q: int) -> tuple[GaussianFit, ...]:
    """Standard-normal stand-in fits for a node with no data yet."""
    return tuple(GaussianFit(((1.0, 0.0, 1.0),), count=0) for _ in range(q))


def genesis_block() -> Block:
    """Height-0 block every chain starts from."""
    return make_block(0, b"\0" * 32, (), proposer=-1)


def genesis_epoch(initial: ModelWeights) -> Epoch:
    """Pre-locked bootstrap epoch carrying the shared initial weights."""
    from .core import LockCertificate

    cert = LockCertificate(-1, b"\0" * 32, ())
    return Epoch(-1, (0, 0), locked=True, certificate=cert, final_weights=initial)


class SharingNode:
    """One training node's protocol state and transition function."""

    def __init__(
        self,
        node_id: int,
        secret: bytes,
        registry: KeyRegistry,
        dataset: Dataset,
        trainer_cfg: TrainerConfig,
        *,
        epoch_len: int = 1,
        train_ticks: int = 1,
        flush_delay: int = 1,
        gmm_components: int = 1,
        committee: tuple[int, ...] = (),
        voter_quorum: int = 1,
        claim_fits: tuple[GaussianFit, ...] | None = None,
        node_seed: int = 0,
        verify_params: VerifyParams | None = None,
    ) -> None:
        self.node_id = node_id
        self.secret = secret
        self.registry = registry
        self.trainer_cfg = trainer_cfg
        self.epoch_len = epoch_len
        self.flush_delay = flush_delay
        self.gmm_components = gmm_components
        self.committee = committee
        self.voter_quorum = voter_quorum
        self.node_seed = node_seed
        self.verify_params = verify_params or VerifyParams()

        self.epoch_height = 0
        self.first_height = 1
        self.last_height = epoch_len
        self.base_weights: ModelWeights | None = None
        self.tip: Block | None = None
        self.chain: dict[int, Block] = {}
        self.update_cache: dict[int, Update] = {}
        self.deposited = False
        self.training = False
        self.train_gen = 0
        self.flush_pending = False
        self._train_base: ModelWeights | None = None
        self.locked: dict[int, tuple[Epoch, Block]] = {}
        self.misbehavior: list[tuple[str, str]] = []
        self.holder_sessions: dict[tuple[int, int], Any] = {}

        self.set_dataset(dataset, train_ticks=train_ticks, claim_fits=claim_fits)

    # -- dataset / claims -------------------------------------------------

    def set_dataset(
        self,
        dataset: Dataset,
        *,
        train_ticks: int,
        claim_fits: tuple[GaussianFit, ...] | None = None,
    ) -> None:
        """Install the epoch's dataset and (re)fit the claimed summary.

        A forged ``claim_fits`` makes the node a data falsifier: it trains on
        real data but advertises the forged distribution.
        """
        self.dataset = dataset
        self.train_ticks = max(1, int(train_ticks))
        if claim_fits is not None:
            self.claim_fits = claim_fits
        elif dataset.count >= 2:
            self.claim_fits = tuple(
                fit_gaussian(dataset.features[:, k], self.gmm_components)
                for k in range(dataset.n_features)
            )
        else:
            self.claim_fits = placeholder_fits(max(dataset.n_features, 1))
        self.summary = DataSummary(self.claim_fits, count=dataset.count)

    # -- helpers -----------------------------------------------------------

    def current_base_weights(self) -> ModelWeights:
        """Weights the next recurrence trains from: the merged tip, or the
        epoch base when nothing has been merged yet."""
        assert self.tip is not None and self.base_weights is not None
        if self.tip.height < self.first_height:
            return self.base_weights
        return merged_block_weights(self.tip)

    def state_digest(self) -> bytes:
        """Hash of protocol-relevant state, for idempotence checks."""
        h = hashlib.sha256()
        h.update(self.tip.digest if self.tip else b"")
        h.update(b"%d/%d/%d" % (self.epoch_height, self.train_gen, int(self.training)))
        for sender in sorted(self.update_cache):
            h.update(canonical_serialize(self.update_cache[sender]))
        return h.digest()

    def _schedule_flush(self, actions: list) -> None:
        if not self.flush_pending:
            self.flush_pending = True
            actions.append(SetTimer(self.flush_delay, "flush"))

    def _start_recurrence(self, actions: list) -> None:
        self.training = True
        self.train_gen += 1
        self._train_base = self.current_base_weights()
        actions.append(SetTimer(self.train_ticks, "train", self.train_gen))

    def _cancel_recurrence(self) -> None:
        self.training = False
        self.train_gen += 1

    def _cache_updates(self, block: Block) -> None:
        for u in block.updates:
            if u.height > self.last_height:
                continue
            held = self.update_cache.get(u.sender)
            if held is None or u.height > held.height:
                self.update_cache[u.sender] = u

    def _cached_peers(self, height: int) -> list[Update]:
        return [
            u
            for s, u in sorted(self.update_cache.items())
            if s != self.node_id and u.height <= height
        ]

    # -- spec operations ---------------------------------------------------

    def begin_epoch(self, locked_epoch: Epoch, locked_block: Block) -> list:
        """Reset onto the locked epoch's final weights and deposit for the
        next one."""
        if not locked_epoch.locked:
            raise ValueError("cannot begin an epoch from an unlocked one")
        if locked_epoch.final_weights is None:
            raise ValueError("locked epoch carries no final weights")
        self.epoch_height = locked_epoch.epoch_height + 1
        self.first_height = locked_block.height + 1
        self.last_height = locked_block.height + self.epoch_len
        self.base_weights = locked_epoch.final_weights
        self.tip = locked_block
        self.chain = {locked_block.height: locked_block}
        self.update_cache = {}
        self.flush_pending = False
        self._cancel_recurrence()
        actions: list = [Broadcast(VOTING, Deposit(self.node_id, self.epoch_height))]
        self.deposited = True
        self._start_recurrence(actions)
        return actions

    def produce_update(self) -> Update:
        """Train one recurrence from the merged tip and sign the result."""
        if not self.deposited:
            raise AuthorizationError(f"node {self.node_id} has not deposited")
        assert self._train_base is not None and self.tip is not None
        new_weights = local_train(self._train_base, self.dataset, self.trainer_cfg)
        height = self.tip.height + 1
        payload = update_signing_bytes(new_weights, self.summary, height)
        return Update(
            new_weights, self.node_id, self.summary, sign(self.secret, payload), height
        )

    def generate_block(self, update: Update) -> Block:
        """Package the fresh update with every cached peer update that fits
        below its height."""
        assert self.tip is not None
        height = update.height
        peers = self._cached_peers(height)
        block = make_block(height, self.tip.digest, [update] + peers, self.node_id)
        self.update_cache[self.node_id] = update
        self.chain[height] = block
        self.tip = block
        return block

    def on_block(self, incoming: Block) -> tuple[MergeOutcome, list]:
        """Apply the block-merging protocol to a received block."""
        actions: list = []
        ok, reason = validate_block(incoming, self.registry)
        if not ok:
            self.misbehavior.append(("bad-block", reason))
            return MergeOutcome(IGNORE), actions
        assert self.tip is not None
        if incoming.height < self.first_height or incoming.height > self.last_height:
            return MergeOutcome(IGNORE), actions
        self._cache_updates(incoming)

        tip = self.tip
        new_senders = set(incoming.merge_list) - set(tip.merge_list)

        if incoming.height == tip.height:
            if not new_senders:
                return MergeOutcome(IGNORE), actions
            merged = self._merge_at(tip.height, tip, incoming)
            self._schedule_flush(actions)
            return MergeOutcome(MERGE_AND_BROADCAST, new_block=merged), actions

        if incoming.height > tip.height:
            # Chain replacement: a longer chain embodies more recurrences.
            self.tip = incoming
            self.chain[incoming.height] = incoming
            self._cancel_recurrence()
            if incoming.height < self.last_height:
                self._start_recurrence(actions)
            else:
                self._schedule_flush(actions)
            return MergeOutcome(MERGE_AND_BROADCAST, new_block=incoming), actions

        # Historical height: roll back only if it carries unseen senders.
        reference = self.chain.get(incoming.height, tip)
        if set(incoming.merge_list) <= set(reference.merge_list):
            return MergeOutcome(IGNORE), actions
        height = incoming.height
        merged = self._merge_at(height, self.chain.get(height), incoming)
        for h in list(self.chain):
            if h > height:
                del self.chain[h]
        self._cancel_recurrence()
        self._schedule_flush(actions)
        if height < self.last_height:
            self._start_recurrence(actions)
        return MergeOutcome(ROLLBACK, rollback_height=height, new_block=merged), actions

    def _merge_at(self, height: int, mine: Block | None, theirs: Block) -> Block:
        """Union of two blocks' updates plus anything cached at this height."""
        by_sender: dict[int, Update] = {}
        sources = ([] if mine is None else list(mine.updates)) + list(theirs.updates)
        sources += self._cached_peers(height)
        for u in sources:
            if u.height > height:
                continue
            held = by_sender.get(u.sender)
            if held is None or u.height > held.height:
                by_sender[u.sender] = u
        parent = mine.parent_digest if mine is not None else theirs.parent_digest
        block = make_block(height, parent, by_sender.values(), self.node_id)
        self.chain[height] = block
        self.tip = block
        return block

    def on_lock(self, lock: LockBroadcast) -> list:
        """Adopt a certified epoch: stop mid-recurrence work and move on."""
        epoch, block = lock.epoch, lock.block
        if epoch.epoch_height < self.epoch_height or epoch.epoch_height in self.locked:
            return []
        reason = self._check_lock(epoch, block)
        if reason is not None:
            self.misbehavior.append(("bad-lock", reason))
            return []
        self.locked[epoch.epoch_height] = (epoch, block)
        return self.begin_epoch(epoch, block)

    def _check_lock(self, epoch: Epoch, block: Block) -> str | None:
        if not epoch.locked or epoch.certificate is None or epoch.final_weights is None:
            return "incomplete lock"
        cert = epoch.certificate
        if cert.epoch_height != epoch.epoch_height:
            return "certificate epoch mismatch"
        if len(cert.votes) < self.voter_quorum:
            return "certificate below quorum"
        from dataclasses import replace

        draft = replace(epoch, locked=False, certificate=None)
        expected = content_hash(canonical_serialize(draft) + block.digest)
        if expected != cert.proposal_digest:
            return "certificate does not bind this epoch"
        for voter, sig in cert.votes:
            if voter not in self.committee:
                return f"vote from non-committee {voter}"
            if not self.registry.verify(voter, cert.proposal_digest, sig):
                return f"bad vote signature from {voter}"
        if block.height != epoch.block_range[1]:
            return "block height outside epoch range"
        ok, why = validate_block(block, self.registry)
        if not ok:
            return f"certified block invalid: {why}"
        return None

    # -- event interface -----------------------------------------------------

    def handle(self, msg: Any, now: int) -> list:
        """Single transition: consume one event, return outbound actions."""
        if isinstance(msg, TimerFire):
            if msg.tag == "train":
                return self._on_train_done(msg.data)
            if msg.tag == "flush":
                return self._on_flush()
            return []
        if isinstance(msg, BlockGossip):
            _, actions = self.on_block(msg.block)
            return actions
        if isinstance(msg, LockBroadcast):
            return self.on_lock(msg)
        if isinstance(msg, VerifyChallenge):
            return self.on_verify_challenge(msg)
        return []

    def on_verify_challenge(self, ch: VerifyChallenge) -> list:
        """Holder role: answer with the server and peer verification bundles.

        The response opens the node's real data; a falsified claim therefore
        cannot survive the distribution check downstream.
        """
        if ch.member != self.node_id or ch.epoch_height != self.epoch_height:
            return []
        rng = np.random.default_rng(
            (self.node_seed * 1_000_003 + ch.epoch_height) & 0x7FFFFFFFFFFFFFFF
        )
        server_feats, peer_feats = holder_build_bundles(
            self.dataset.features,
            self.claim_fits,
            self.verify_params,
            ch.challenge_seed,
            rng,
            member=self.node_id,
        )
        return [
            Send(ch.server, VerifyServerBundle(self.node_id, ch.epoch_height, server_feats)),
            Send(ch.peer, VerifyPeerBundle(self.node_id, ch.epoch_height, peer_feats)),
        ]

    def _on_train_done(self, gen: int) -> list:
        if not self.training or gen != self.train_gen:
            return []
        self.training = False
        actions: list = []
        update = self.produce_update()
        self.generate_block(update)
        self._schedule_flush(actions)
        assert self.tip is not None
        if self.tip.height < self.last_height:
            self._start_recurrence(actions)
        return actions

    def _on_flush(self) -> list:
        if not self.flush_pending:
            return []
        self.flush_pending = False
        assert self.tip is not None
        if self.tip.height < self.first_height:
            return []
        actions: list = [Broadcast(EVERYONE, BlockGossip(self.tip))]
        if self.tip.height == self.last_height:
            actions.append(
                Broadcast(
                    VOTING,
                    SettlementRequest(
                        self.node_id, self.tip.digest, self.tip.merge_list, self.epoch_height
                    ),
                )
            )
        return actions
