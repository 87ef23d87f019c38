"""Privacy-preserving data verification over a prime field.

Three roles cooperate per training node and feature: the *holder* (the
training node itself), the *server* (the committee's verifier), and a
*privacy peer*.  Each datum is split additively as d = (u + v) mod phi with u
going to the server and v to the peer, so neither side alone learns anything.
The holder's v-values are bound by row/column hashes of a recording matrix
filed with the server before any openings are judged.

The checks are algebraic and statistical, not cryptographically sound
zero-knowledge: the commitment relations are linear challenge projections of
the shares, which is enough for the deterministic tamper and forgery
detection the tests assert.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .contribution import GaussianFit, truncated_interval_moments
from .core import content_hash

__all__ = [
    "FieldParams",
    "SecretShares",
    "Commitment",
    "RoleView",
    "RecordingMatrix",
    "DistributionClaim",
    "ChallengeRound",
    "split_secret",
    "encode_value",
    "decode_sum",
    "generate_challenges",
    "commit",
    "pair_consist_check",
    "consistency_check",
    "holder_consistency_rounds",
    "check_consistency_rounds",
    "data_summation",
    "build_recording_matrix",
    "claim_from_fit",
    "plan_openings",
    "peer_check_openings",
    "verify_distribution",
]

#: Largest prime below 2**61 (a Mersenne prime), the default field modulus.
DEFAULT_MODULUS = (1 << 61) - 1

#: Fixed-point scale used to embed real feature values into the field.
FIXED_POINT_SCALE = 10**6

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for 64-bit integers."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _SMALL_PRIMES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Prime modulus and challenge count for the consistency protocol."""

    modulus: int = DEFAULT_MODULUS
    challenge_count: int = 50

    def __post_init__(self) -> None:
        if not _is_prime(self.modulus):
            raise ValueError("modulus must be prime")
        if self.challenge_count < 1:
            raise ValueError("need at least one challenge")


@dataclass(frozen=True)
class SecretShares:
    """Additive split of one datum: (u + v) mod phi reconstructs it."""

    u: int
    v: int
    index: int


@dataclass(frozen=True)
class Commitment:
    """Challenge projection of a share vector: the five checkable components.

    x/y are the server/peer halves of the projection, s their claimed sum,
    b the challenge checksum, z the cross link between s and b.
    """

    x: int
    y: int
    s: int
    b: int
    z: int


@dataclass(frozen=True)
class RoleView:
    """What one protocol party can recompute: its role, challenge, and shares.

    The user role carries no shares; its claim is the commitment itself.
    """

    role: str  # "user" | "server" | "peer"
    challenge: tuple[int, ...]
    shares: tuple[int, ...]
    modulus: int

    def projection(self) -> int:
        return sum(c * s for c, s in zip(self.challenge, self.shares)) % self.modulus


def encode_value(x: float, params: FieldParams, scale: int = FIXED_POINT_SCALE) -> int:
    """Fixed-point embedding of a real value into the field."""
    return round(x * scale) % params.modulus


def decode_sum(s: int, params: FieldParams, scale: int = FIXED_POINT_SCALE) -> float:
    """Centered lift of a field sum back to a real value.

    Valid while the true magnitude of the sum stays below modulus/2, which the
    modulus precondition guarantees for desk-scale data.
    """
    if s > params.modulus // 2:
        s -= params.modulus
    return s / scale


def split_secret(datum: int, params: FieldParams, rng: np.random.Generator, index: int = 0) -> SecretShares:
    """Uniform additive split of a field element."""
    if not 0 <= datum < params.modulus:
        raise ValueError("datum outside field range")
    u = int(rng.integers(0, params.modulus))
    v = (datum - u) % params.modulus
    return SecretShares(u, v, index)


def generate_challenges(
    n: int, count: int, params: FieldParams, rng: np.random.Generator
) -> list[tuple[int, ...]]:
    """Challenge vectors with entries uniform in [1, phi).

    Nonzero entries make a single inconsistent share fail its projection
    check deterministically rather than with overwhelming probability.
    """
    return [
        tuple(int(c) for c in rng.integers(1, params.modulus, size=n)) for _ in range(count)
    ]


def commit(
    u: Sequence[int], v: Sequence[int], challenge: Sequence[int], params: FieldParams
) -> Commitment:
    """Commitment components for one challenge over a share vector pair."""
    if len(u) != len(v) or len(u) != len(challenge):
        raise ValueError("share and challenge lengths differ")
    phi = params.modulus
    x = sum(c * ui for c, ui in zip(challenge, u)) % phi
    y = sum(c * vi for c, vi in zip(challenge, v)) % phi
    s = (x + y) % phi
    b = sum(challenge) % phi
    z = (s + b) % phi
    return Commitment(x, y, s, b, z)


def pair_consist_check(a: RoleView, b: RoleView, component: Commitment | None) -> bool:
    """Check that two parties' views satisfy the component's relation mod phi.

    server+peer: projections add to s, and the s/b/z linkage holds.
    user+server: the server's recomputed projection equals the claimed x.
    user+peer:   the peer's recomputed projection equals the claimed y.
    A missing component fails closed.
    """
    if component is None:
        return False
    roles = {a.role, b.role}
    phi = a.modulus
    if roles == {"server", "peer"}:
        server = a if a.role == "server" else b
        peer = b if a.role == "server" else a
        if (server.projection() + peer.projection()) % phi != component.s:
            return False
        if (component.x + component.y) % phi != component.s:
            return False
        if sum(server.challenge) % phi != component.b:
            return False
        return (component.s + component.b) % phi == component.z
    if roles == {"user", "server"}:
        server = a if a.role == "server" else b
        return server.projection() == component.x
    if roles == {"user", "peer"}:
        peer = a if a.role == "peer" else b
        return peer.projection() == component.y
    raise ValueError(f"unsupported role pairing {roles}")


@dataclass(frozen=True)
class ChallengeRound:
    """One fresh split plus its commitment; u goes to the server, v to the peer."""

    challenge: tuple[int, ...]
    u: tuple[int, ...]
    v: tuple[int, ...]
    commitment: Commitment


def holder_consistency_rounds(
    data: Sequence[int],
    params: FieldParams,
    challenges: Sequence[Sequence[int]],
    rng: np.random.Generator,
) -> list[ChallengeRound]:
    """Honest holder messages: a fresh split and commitment per challenge."""
    phi = params.modulus
    rounds = []
    for c in challenges:
        us = rng.integers(0, phi, size=len(data))
        u = tuple(int(x) for x in us)
        v = tuple((int(d) - ui) % phi for d, ui in zip(data, u))
        rounds.append(ChallengeRound(tuple(int(x) for x in c), u, v, commit(u, v, c, params)))
    return rounds


def check_consistency_rounds(
    rounds: Sequence[ChallengeRound], params: FieldParams
) -> tuple[bool, int]:
    """Run all three pair checks per round; early exit on the first failure.

    Returns (pass flag, index of the failing round or -1).
    """
    for i, rnd in enumerate(rounds):
        server = RoleView("server", rnd.challenge, rnd.u, params.modulus)
        peer = RoleView("peer", rnd.challenge, rnd.v, params.modulus)
        user = RoleView("user", rnd.challenge, (), params.modulus)
        ok = pair_consist_check(server, peer, rnd.commitment)
        ok = ok and pair_consist_check(user, server, rnd.commitment)
        ok = ok and pair_consist_check(user, peer, rnd.commitment)
        if not ok:
            return False, i
    return True, -1


def consistency_check(
    data: Sequence[int],
    params: FieldParams,
    challenges: Sequence[Sequence[int]],
    rng: np.random.Generator,
) -> bool:
    """End-to-end honest consistency check over one data vector.

    Vacuously true with no challenges; scenario configs forbid that case.
    """
    rounds = holder_consistency_rounds(data, params, challenges, rng)
    ok, _ = check_consistency_rounds(rounds, params)
    return ok


def data_summation(
    u_set: Sequence[int],
    v_set: Sequence[int],
    params: FieldParams,
    a: int = 0,
    f: Callable[[int, int], int] | None = None,
) -> int:
    """Aggregate shares into an updated summation A' = F(s, A).

    The default F is additive mod phi.  Because (u + v) sums telescope to the
    data sum, the result is independent of how the data was split.
    """
    if len(u_set) != len(v_set):
        raise ValueError("u and v sets differ in length")
    phi = params.modulus
    mu = sum(u_set) % phi
    nu = sum(v_set) % phi
    s = (mu + nu) % phi
    if f is None:
        return (a + s) % phi
    return f(s, a)


# ---------------------------------------------------------------------------
# Recording matrix


@dataclass(frozen=True)
class RecordingMatrix:
    """ceil(sqrt(n)) square grid of v-shares with row and column hashes.

    The grid is filled row-major and zero-padded; 2*side hashes bind the
    holder to its shares before any interval openings.
    """

    side: int
    entries: tuple[int, ...]  # row-major, padded to side*side
    row_hashes: tuple[bytes, ...]
    col_hashes: tuple[bytes, ...]

    def position(self, flat_index: int) -> tuple[int, int]:
        return flat_index // self.side, flat_index % self.side

    def row(self, r: int) -> tuple[int, ...]:
        return self.entries[r * self.side : (r + 1) * self.side]

    def col(self, c: int) -> tuple[int, ...]:
        return self.entries[c :: self.side]


def _hash_line(values: Sequence[int]) -> bytes:
    return content_hash(b"".join(struct.pack("<Q", v) for v in values))


def build_recording_matrix(v_values: Sequence[int]) -> RecordingMatrix:
    """Arrange v-shares into the square grid and hash every row and column."""
    n = len(v_values)
    if n < 1:
        raise ValueError("need at least one value")
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    padded = tuple(v_values) + (0,) * (side * side - n)
    rows = tuple(_hash_line(padded[r * side : (r + 1) * side]) for r in range(side))
    cols = tuple(_hash_line(padded[c::side]) for c in range(side))
    return RecordingMatrix(side, padded, rows, cols)


# ---------------------------------------------------------------------------
# Distribution matching


@dataclass(frozen=True)
class DistributionClaim:
    """One feature's claimed mixture, value range, and interval count."""

    fit: GaussianFit
    lo: float
    hi: float
    n_intervals: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise ValueError("claim range must be finite and nonempty")
        if self.n_intervals < 2:
            raise ValueError("need at least two intervals")

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_intervals + 1)


def claim_from_fit(fit: GaussianFit, g_r: float = 3.0, n_intervals: int = 16) -> DistributionClaim:
    lo, hi = fit.support(g_r)
    return DistributionClaim(fit, lo, hi, n_intervals)


@dataclass(frozen=True)
class IntervalOpening:
    """Holder's answer for one interval: matrix positions plus full row/column
    value lists for each opened position."""

    interval: int
    flat_indices: tuple[int, ...]
    opened_values: tuple[int, ...]
    rows: tuple[tuple[int, tuple[int, ...]], ...]  # (row index, values)
    cols: tuple[tuple[int, tuple[int, ...]], ...]


def plan_openings(
    values: np.ndarray,
    matrix: RecordingMatrix,
    claim: DistributionClaim,
    rng: np.random.Generator,
    sample_cap: int = 32,
) -> list[IntervalOpening]:
    """Honest holder: sample data points per claimed interval and open the
    matrix rows/columns containing their v-shares."""
    edges = claim.edges()
    openings = []
    for j in range(claim.n_intervals):
        lo, hi = edges[j], edges[j + 1]
        if j == claim.n_intervals - 1:
            members = np.nonzero((values >= lo) & (values <= hi))[0]
        else:
            members = np.nonzero((values >= lo) & (values < hi))[0]
        if len(members) > sample_cap:
            members = np.sort(rng.choice(members, size=sample_cap, replace=False))
        flat = tuple(int(i) for i in members)
        opened = tuple(matrix.entries[i] for i in flat)
        row_ids = sorted({matrix.position(i)[0] for i in flat})
        col_ids = sorted({matrix.position(i)[1] for i in flat})
        rows = tuple((r, matrix.row(r)) for r in row_ids)
        cols = tuple((c, matrix.col(c)) for c in col_ids)
        openings.append(IntervalOpening(j, flat, opened, rows, cols))
    return openings


@dataclass(frozen=True)
class PeerReport:
    """Peer's confirmation: recomputed hashes plus per-interval v aggregates."""

    row_hashes: tuple[tuple[int, bytes], ...]
    col_hashes: tuple[tuple[int, bytes], ...]
    interval_counts: tuple[int, ...]
    interval_v_sums: tuple[int, ...]


def peer_check_openings(
    openings: Sequence[IntervalOpening], params: FieldParams, n_intervals: int
) -> PeerReport:
    """Recompute hashes of every opened row/column and sum opened v-shares.

    The peer never sees u-shares, so nothing here can reconstruct data.
    """
    phi = params.modulus
    row_h: dict[int, bytes] = {}
    col_h: dict[int, bytes] = {}
    counts = [0] * n_intervals
    sums = [0] * n_intervals
    for op in openings:
        for r, vals in op.rows:
            row_h[r] = _hash_line(vals)
        for c, vals in op.cols:
            col_h[c] = _hash_line(vals)
        counts[op.interval] = len(op.flat_indices)
        sums[op.interval] = sum(op.opened_values) % phi
    return PeerReport(
        tuple(sorted(row_h.items())),
        tuple(sorted(col_h.items())),
        tuple(counts),
        tuple(sums),
    )


@dataclass(frozen=True)
class DistributionVerdict:
    passed: bool
    reason: str
    interval_means: tuple[float, ...]
    expected_means: tuple[float, ...]


@dataclass(frozen=True)
class VerifyParams:
    """Knobs for the whole verification pipeline, shared by all three roles."""

    field: FieldParams = field(default_factory=FieldParams)
    n_intervals: int = 8
    g_r: float = 3.0
    sample_cap: int = 32
    eps_mult: float = 3.0
    min_claim_mass: float = 0.05


def verify_distribution(
    claim: DistributionClaim,
    filed_matrix_hashes: tuple[tuple[bytes, ...], tuple[bytes, ...]],
    u_record: Sequence[int],
    openings_meta: Sequence[tuple[int, tuple[int, ...]]],
    peer: PeerReport,
    params: FieldParams,
    *,
    g_r: float = 3.0,
    eps_mult: float = 3.0,
    min_claim_mass: float = 0.05,
) -> DistributionVerdict:
    """Server-side verdict for one feature.

    ``openings_meta`` is the holder's (interval, flat index list) plan as the
    server sees it; u-shares at those indices come from the server's own
    record, v aggregates and hash confirmations from the peer.  Pass requires
    every confirmed hash to match the filed one, every interval with claimed
    mass above ``min_claim_mass`` to be populated, and every populated
    interval's reconstructed sample mean to sit within eps of the claimed
    truncated-mixture mean, with eps = eps_mult * claimed_sigma / sqrt(k).
    """
    filed_rows, filed_cols = filed_matrix_hashes
    for r, h in peer.row_hashes:
        if r >= len(filed_rows) or filed_rows[r] != h:
            return DistributionVerdict(False, f"row hash mismatch at {r}", (), ())
    for c, h in peer.col_hashes:
        if c >= len(filed_cols) or filed_cols[c] != h:
            return DistributionVerdict(False, f"column hash mismatch at {c}", (), ())

    edges = claim.edges()
    sigma_claim = math.sqrt(claim.fit.variance)
    means: list[float] = []
    expected: list[float] = []
    plan = dict(openings_meta)
    for j in range(claim.n_intervals):
        mass, exp_mean, _ = truncated_interval_moments(
            claim.fit, float(edges[j]), float(edges[j + 1]), g_r
        )
        k = peer.interval_counts[j] if j < len(peer.interval_counts) else 0
        if k == 0:
            if mass >= min_claim_mass:
                return DistributionVerdict(
                    False, f"empty interval {j} with claimed mass {mass:.3f}", (), ()
                )
            means.append(float("nan"))
            expected.append(exp_mean)
            continue
        indices = plan.get(j, ())
        if len(indices) != k:
            return DistributionVerdict(False, f"opening count mismatch at {j}", (), ())
        mu = sum(u_record[i] for i in indices) % params.modulus
        total = data_summation([mu], [peer.interval_v_sums[j]], params)
        sample_mean = decode_sum(total, params) / k
        eps = eps_mult * sigma_claim / math.sqrt(k)
        means.append(sample_mean)
        expected.append(exp_mean)
        if not math.isfinite(exp_mean) or abs(sample_mean - exp_mean) > eps:
            return DistributionVerdict(
                False,
                f"interval {j}: mean {sample_mean:.4f} vs claim {exp_mean:.4f} (eps {eps:.4f})",
                tuple(means),
                tuple(expected),
            )
    return DistributionVerdict(True, "ok", tuple(means), tuple(expected))


# ---------------------------------------------------------------------------
# Protocol role drivers: holder, peer, server


@dataclass(frozen=True)
class ServerFeature:
    """Holder's filing with the server for one feature: u-record, matrix
    hashes, per-challenge server pieces, and the opening plan (indices only)."""

    u_record: tuple[int, ...]
    row_hashes: tuple[bytes, ...]
    col_hashes: tuple[bytes, ...]
    round_u: tuple[tuple[int, ...], ...]
    round_commitments: tuple[Commitment, ...]
    openings_meta: tuple[tuple[int, tuple[int, ...]], ...]


@dataclass(frozen=True)
class PeerFeature:
    """Holder's filing with the privacy peer: v-shares and the openings."""

    n_intervals: int
    round_v: tuple[tuple[int, ...], ...]
    round_commitments: tuple[Commitment, ...]
    openings: tuple[IntervalOpening, ...]


@dataclass(frozen=True)
class PeerFeatureReport:
    """Peer's answer to the server: recomputed projections and the
    hash-confirmed interval aggregates."""

    round_y: tuple[int, ...]
    report: PeerReport


def derive_challenges(
    challenge_seed: int, member: int, feature: int, n: int, params: FieldParams
) -> list[tuple[int, ...]]:
    """Challenge vectors both server and holder derive from the shared seed."""
    mix = (challenge_seed * 1_000_003 + member * 131 + feature) & 0x7FFFFFFFFFFFFFFF
    rng = np.random.default_rng(mix)
    return generate_challenges(n, params.challenge_count, params, rng)


def holder_build_bundles(
    features: np.ndarray,
    claim_fits: Sequence[GaussianFit],
    params: VerifyParams,
    challenge_seed: int,
    holder_rng: np.random.Generator,
    member: int = 0,
) -> tuple[tuple[ServerFeature, ...], tuple[PeerFeature, ...]]:
    """Honest holder: build both parties' filings for every feature."""
    fp = params.field
    server_out = []
    peer_out = []
    for k in range(features.shape[1]):
        column = features[:, k]
        encoded = [encode_value(float(x), fp) for x in column]
        u_can = [int(x) for x in holder_rng.integers(0, fp.modulus, size=len(encoded))]
        v_can = [(d - u) % fp.modulus for d, u in zip(encoded, u_can)]
        matrix = build_recording_matrix(v_can)
        challenges = derive_challenges(challenge_seed, member, k, len(encoded), fp)
        rounds = holder_consistency_rounds(encoded, fp, challenges, holder_rng)
        claim = claim_from_fit(claim_fits[k], params.g_r, params.n_intervals)
        openings = plan_openings(column, matrix, claim, holder_rng, params.sample_cap)
        server_out.append(
            ServerFeature(
                u_record=tuple(u_can),
                row_hashes=matrix.row_hashes,
                col_hashes=matrix.col_hashes,
                round_u=tuple(r.u for r in rounds),
                round_commitments=tuple(r.commitment for r in rounds),
                openings_meta=tuple((op.interval, op.flat_indices) for op in openings),
            )
        )
        peer_out.append(
            PeerFeature(
                n_intervals=params.n_intervals,
                round_v=tuple(r.v for r in rounds),
                round_commitments=tuple(r.commitment for r in rounds),
                openings=tuple(openings),
            )
        )
    return tuple(server_out), tuple(peer_out)


def peer_process(
    peer_features: Sequence[PeerFeature],
    challenge_seed: int,
    member: int,
    params: VerifyParams,
) -> tuple[PeerFeatureReport, ...]:
    """Privacy peer: recompute v projections and confirm opened hashes."""
    fp = params.field
    out = []
    for k, pf in enumerate(peer_features):
        n = len(pf.round_v[0]) if pf.round_v else 0
        challenges = derive_challenges(challenge_seed, member, k, n, fp)
        ys = tuple(
            RoleView("peer", tuple(c), v, fp.modulus).projection()
            for c, v in zip(challenges, pf.round_v)
        )
        report = peer_check_openings(pf.openings, fp, pf.n_intervals)
        out.append(PeerFeatureReport(round_y=ys, report=report))
    return tuple(out)


def server_evaluate(
    claims: Sequence[GaussianFit],
    server_features: Sequence[ServerFeature],
    peer_reports: Sequence[PeerFeatureReport],
    challenge_seed: int,
    member: int,
    params: VerifyParams,
) -> tuple[bool, str, tuple[DistributionVerdict, ...]]:
    """Server verdict across features: consistency algebra first, then the
    hash-bound distribution-matching check."""
    fp = params.field
    if len(server_features) != len(claims) or len(peer_reports) != len(claims):
        return False, "feature count mismatch", ()
    verdicts = []
    for k, (sf, pr) in enumerate(zip(server_features, peer_reports)):
        n = len(sf.u_record)
        challenges = derive_challenges(challenge_seed, member, k, n, fp)
        if len(sf.round_u) != len(challenges) or len(pr.round_y) != len(challenges):
            return False, f"feature {k}: challenge round count mismatch", ()
        for i, c in enumerate(challenges):
            cm = sf.round_commitments[i]
            x_rec = RoleView("server", tuple(c), sf.round_u[i], fp.modulus).projection()
            if x_rec != cm.x:
                return False, f"feature {k}: server projection mismatch round {i}", ()
            if pr.round_y[i] != cm.y:
                return False, f"feature {k}: peer projection mismatch round {i}", ()
            if (cm.x + cm.y) % fp.modulus != cm.s:
                return False, f"feature {k}: share sum mismatch round {i}", ()
            if sum(c) % fp.modulus != cm.b:
                return False, f"feature {k}: challenge checksum mismatch round {i}", ()
            if (cm.s + cm.b) % fp.modulus != cm.z:
                return False, f"feature {k}: cross link mismatch round {i}", ()
        claim = claim_from_fit(claims[k], params.g_r, params.n_intervals)
        verdict = verify_distribution(
            claim,
            (sf.row_hashes, sf.col_hashes),
            sf.u_record,
            sf.openings_meta,
            pr.report,
            fp,
            g_r=params.g_r,
            eps_mult=params.eps_mult,
            min_claim_mass=params.min_claim_mass,
        )
        verdicts.append(verdict)
        if not verdict.passed:
            return False, f"feature {k}: {verdict.reason}", tuple(verdicts)
    return True, "ok", tuple(verdicts)
