"""Cooperative-game machinery: Shapley values, coalition interactions,
the cross-modal alignment game, and the Monte-Carlo pair-interaction
estimator plus its exact enumeration oracles.

Players of an alignment game are the rows of a moment matrix followed by
the rows of a query matrix; the game score of a coalition is a symmetric
moment/query retrieval similarity computed from softmax-normalized
alignment scores restricted to the active players. Removing a player
shrinks the softmax denominators; coalitions lacking either modality
score 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb, factorial
from typing import Callable, Iterable, Mapping

import numpy as np

from .numcore import EmbeddingMatrix, RngStream, row_softmax

ENUMERATION_BOUND = 20


@dataclass(frozen=True)
class Game:
    """A player count plus a deterministic score over coalitions.

    `score` maps a frozenset of player indices to a scalar and must return
    identical values on repeated evaluation of the same coalition.
    """

    players: int
    score: Callable[[frozenset], float]


def table_game(players: int, values: Mapping[int, float]) -> Game:
    """Game backed by a complete bitmask -> score table."""
    if len(values) != (1 << players):
        raise ValueError(
            f"expected {1 << players} coalition values for {players} players, got {len(values)}"
        )
    table = {int(k): float(v) for k, v in values.items()}

    def score(u: frozenset) -> float:
        mask = 0
        for p in u:
            mask |= 1 << p
        return table[mask]

    return Game(players=players, score=score)


def _memoized(score: Callable[[frozenset], float]) -> Callable[[frozenset], float]:
    cache: dict[frozenset, float] = {}

    def wrapped(u: frozenset) -> float:
        v = cache.get(u)
        if v is None:
            v = float(score(u))
            cache[u] = v
        return v

    return wrapped


def coalition_weight(u_size: int, n_players: int) -> float:
    """|U|! (|N|-|U|-1)! / |N|!, the sampling likelihood of a coalition.

    Summed over all coalitions not containing a given player this is
    exactly 1.
    """
    if not (0 <= u_size <= n_players - 1):
        raise ValueError(f"coalition size {u_size} out of range for {n_players} players")
    return factorial(u_size) * factorial(n_players - u_size - 1) / factorial(n_players)


def _check_enumeration_bound(players: int):
    if players > ENUMERATION_BOUND:
        raise ValueError(
            f"{players} players exceed the exact-enumeration bound "
            f"({ENUMERATION_BOUND}); use the sampled estimator instead"
        )


def shapley_value_exact(game: Game, player: int) -> float:
    """Average marginal contribution of `player` over all coalitions."""
    _check_enumeration_bound(game.players)
    if not (0 <= player < game.players):
        raise ValueError(f"player {player} out of range")
    score = _memoized(game.score)
    others = [p for p in range(game.players) if p != player]
    total = 0.0
    for size in range(len(others) + 1):
        w = coalition_weight(size, game.players)
        for combo in itertools.combinations(others, size):
            u = frozenset(combo)
            total += w * (score(u | {player}) - score(u))
    return total


def _grouped_phi(score, groups: list[frozenset], target: int) -> float:
    """Shapley value of group `target` in the game whose players are groups.

    A group participates as a unit: the score of a set of groups is the
    base score of the union of their members. This realizes the reduced
    game where a coalition is replaced by a single hypothetical player.
    """
    n = len(groups)
    others = [g for g in range(n) if g != target]
    total = 0.0
    for size in range(len(others) + 1):
        w = coalition_weight(size, n)
        for combo in itertools.combinations(others, size):
            base = frozenset().union(*(groups[g] for g in combo)) if combo else frozenset()
            total += w * (score(base | groups[target]) - score(base))
    return total


def shapley_interaction_exact(game: Game, coalition: Iterable[int]) -> float:
    """Extra contribution a coalition earns beyond its members acting alone.

    Computed as the value of the coalition-as-one-player in the reduced
    game, minus each member's value in its own reduced game.
    """
    u = frozenset(int(p) for p in coalition)
    if not u:
        raise ValueError("coalition must be nonempty")
    if not u <= frozenset(range(game.players)):
        raise ValueError("coalition contains out-of-range players")
    rest = sorted(frozenset(range(game.players)) - u)
    _check_enumeration_bound(len(rest) + 1)
    score = _memoized(game.score)
    singleton_rest = [frozenset({j}) for j in rest]
    phi_joint = _grouped_phi(score, singleton_rest + [u], len(rest))
    phi_solo = sum(
        _grouped_phi(score, singleton_rest + [frozenset({i})], len(rest)) for i in u
    )
    return phi_joint - phi_solo


# ---------------------------------------------------------------------------
# alignment game


@dataclass(frozen=True)
class AlignmentGame:
    """Moments and queries of one video as players of a cooperative game.

    Moment rows come in blocks of `k` per query: rows k*y ... k*y+k-1 are
    the moments sampled for query y. Player indices 0..N_v-1 are moments,
    N_v..N_v+N_q-1 are queries. `moment_rows` / `query_rows` optionally
    record where each row lives in an enclosing batch so loss gradients
    can be scattered back.
    """

    moments: EmbeddingMatrix
    queries: EmbeddingMatrix
    k: int
    moment_rows: np.ndarray | None = None
    query_rows: np.ndarray | None = None

    def __post_init__(self):
        if self.moments.dim != self.queries.dim:
            raise ValueError("moment and query embeddings must share a dimension")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.moments.rows != self.k * self.queries.rows:
            raise ValueError(
                f"expected {self.k} moments per query: "
                f"{self.moments.rows} != {self.k} * {self.queries.rows}"
            )
        object.__setattr__(self, "_alignment", self.moments.array @ self.queries.array.T)

    @property
    def n_moments(self) -> int:
        return self.moments.rows

    @property
    def n_queries(self) -> int:
        return self.queries.rows

    @property
    def players(self) -> int:
        return self.moments.rows + self.queries.rows

    @property
    def alignment(self) -> np.ndarray:
        """Raw alignment scores, moments x queries."""
        return self._alignment

    def as_game(self) -> Game:
        return Game(players=self.players, score=lambda u: psi_game_score(self, u))


def psi_game_score(ag: AlignmentGame, active: Iterable[int]) -> float:
    """Symmetric fine-grained similarity of the active moments and queries.

    Average of (a) the mean over active moments of their best
    row-softmaxed alignment to an active query and (b) the column-wise
    mirror image. Coalitions missing a modality score 0.
    """
    nv = ag.n_moments
    active = set(int(p) for p in active)
    if not active <= set(range(ag.players)):
        raise ValueError("active set contains out-of-range players")
    m_idx = sorted(p for p in active if p < nv)
    q_idx = sorted(p - nv for p in active if p >= nv)
    if not m_idx or not q_idx:
        return 0.0
    sub = ag.alignment[np.ix_(m_idx, q_idx)]
    psi1 = float(row_softmax(sub).max(axis=1).mean())
    psi2 = float(row_softmax(sub.T).max(axis=1).mean())
    return 0.5 * (psi1 + psi2)


def _psi_batch(alignment: np.ndarray, m_mask: np.ndarray, q_mask: np.ndarray) -> np.ndarray:
    """Game score for a batch of active sets given as boolean masks.

    Same value as psi_game_score per row; vectorized so samplers can
    evaluate thousands of coalitions in a few array operations.
    """
    e = np.exp(alignment - alignment.max()) if alignment.size else alignment
    mf = m_mask.astype(np.float64)
    qf = q_mask.astype(np.float64)
    cm = mf.sum(axis=1)
    cq = qf.sum(axis=1)

    den1 = qf @ e.T                                            # (S, N_v)
    top1 = np.where(q_mask[:, None, :], e[None, :, :], 0.0).max(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        psi1 = np.where(den1 > 0, top1 / den1, 0.0)
        psi1 = (psi1 * mf).sum(axis=1) / np.where(cm > 0, cm, 1.0)

        den2 = mf @ e                                          # (S, N_q)
        top2 = np.where(m_mask[:, :, None], e[None, :, :], 0.0).max(axis=1)
        psi2 = np.where(den2 > 0, top2 / den2, 0.0)
        psi2 = (psi2 * qf).sum(axis=1) / np.where(cq > 0, cq, 1.0)

    return np.where((cm > 0) & (cq > 0), 0.5 * (psi1 + psi2), 0.0)


def _draw_coalition_masks(ag: AlignmentGame, x: int, y: int, samples: int, rng: RngStream):
    """Masks for the four score evaluations of each sampled coalition.

    Per sample: a coalition size uniform over 0..players-2, then a uniform
    coalition of that size (the first entries of a uniform permutation of
    the remaining players). Rows come in groups of four: U + pair,
    U + moment, U + query, U.
    """
    nv, nq = ag.n_moments, ag.n_queries
    px, py = x, nv + y
    others = np.array([p for p in range(ag.players) if p not in (px, py)], dtype=np.int64)
    gen = rng.generator()
    no = others.size
    sizes = gen.integers(0, no + 1, size=samples)
    member = np.zeros((samples, ag.players), dtype=bool)
    if no:
        perms = gen.permuted(np.tile(others, (samples, 1)), axis=1)
        take = np.arange(no)[None, :] < sizes[:, None]
        member[np.repeat(np.arange(samples), sizes), perms[take]] = True

    member4 = np.repeat(member, 4, axis=0)
    m_mask = member4[:, :nv]
    q_mask = member4[:, nv:]
    m_mask[0::4, x] = True         # U + pair
    q_mask[0::4, y] = True
    m_mask[1::4, x] = True         # U + moment alone
    q_mask[2::4, y] = True         # U + query alone
    return m_mask, q_mask


def sampled_pair_interaction_terms(
    ag: AlignmentGame, x: int, y: int, samples: int, rng: RngStream
) -> np.ndarray:
    """Per-sample mixed-difference terms whose mean estimates the pair interaction."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not (0 <= x < ag.n_moments and 0 <= y < ag.n_queries):
        raise ValueError(f"pair ({x}, {y}) out of range")
    m_mask, q_mask = _draw_coalition_masks(ag, x, y, samples, rng)
    f = _psi_batch(ag.alignment, m_mask, q_mask)
    return f[0::4] - f[1::4] - f[2::4] + f[3::4]


def semantic_interaction_sampled(
    ag: AlignmentGame, x: int, y: int, samples: int, rng: RngStream
) -> float:
    """Monte-Carlo estimate of the interaction between moment x and query y.

    Unbiased for the exact pair interaction: coalition sizes are uniform,
    coalitions uniform given size, and the summand is the mixed difference
    of the game score over adding the pair jointly vs individually.
    """
    return float(sampled_pair_interaction_terms(ag, x, y, samples, rng).mean())


def sampled_pair_interaction(game: Game, i: int, j: int, samples: int, rng: RngStream) -> float:
    """Monte-Carlo pair interaction for an arbitrary game (score-call path)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if i == j or not (0 <= i < game.players and 0 <= j < game.players):
        raise ValueError(f"invalid player pair ({i}, {j})")
    others = np.array([p for p in range(game.players) if p not in (i, j)], dtype=np.int64)
    gen = rng.generator()
    score = _memoized(game.score)
    total = 0.0
    for _ in range(samples):
        c = int(gen.integers(0, others.size + 1))
        u = gen.choice(others, size=c, replace=False) if c else others[:0]
        base = frozenset(int(p) for p in u)
        total += (
            score(base | {i, j})
            - score(base | {i})
            - score(base | {j})
            + score(base)
        )
    return total / samples


def exhaustive_pair_interaction(game: Game, i: int, j: int) -> float:
    """Exact expectation-form pair interaction by full coalition enumeration.

    Independent oracle for both the sampled estimator and the reduced-game
    decomposition: averages the mixed difference uniformly over coalition
    sizes and uniformly over coalitions of each size.
    """
    if i == j or not (0 <= i < game.players and 0 <= j < game.players):
        raise ValueError(f"invalid player pair ({i}, {j})")
    others = [p for p in range(game.players) if p not in (i, j)]
    _check_enumeration_bound(len(others) + 2)
    score = _memoized(game.score)
    total = 0.0
    n_sizes = len(others) + 1
    for size in range(n_sizes):
        inner = 0.0
        for combo in itertools.combinations(others, size):
            base = frozenset(combo)
            inner += (
                score(base | {i, j})
                - score(base | {i})
                - score(base | {j})
                + score(base)
            )
        total += inner / comb(len(others), size) / n_sizes
    return total


# ---------------------------------------------------------------------------
# interaction matrices (soft labels)


@dataclass(frozen=True)
class InteractionMatrix:
    """Pair interactions of one video and their softmax normalization.

    Pairs outside the sampled-moment blocks carry -inf in `raw` and 0 in
    `normalized`; the normalized entries of the included pairs form a
    probability distribution.
    """

    raw: np.ndarray
    normalized: np.ndarray


def included_pairs_mask(n_moments: int, n_queries: int, k: int) -> np.ndarray:
    x = np.arange(n_moments)
    return (x[:, None] // k) == np.arange(n_queries)[None, :]


def interaction_matrix(ag: AlignmentGame, samples: int, rng: RngStream) -> InteractionMatrix:
    """Sampled pair interactions for every (moment, query) pair of the game.

    Each included pair draws from its own derived stream (id x*N_q + y) so
    the result does not depend on evaluation order. Normalization is a
    softmax over all included pairs of the video.
    """
    nv, nq = ag.n_moments, ag.n_queries
    inc = included_pairs_mask(nv, nq, ag.k)
    pairs = [(x, y) for x in range(nv) for y in range(nq) if inc[x, y]]

    blocks_m = []
    blocks_q = []
    for x, y in pairs:
        mm, qm = _draw_coalition_masks(ag, x, y, samples, rng.derive(x * nq + y))
        blocks_m.append(mm)
        blocks_q.append(qm)
    f = _psi_batch(ag.alignment, np.concatenate(blocks_m), np.concatenate(blocks_q))

    raw = np.full((nv, nq), -np.inf)
    for p, (x, y) in enumerate(pairs):
        fp = f[4 * samples * p : 4 * samples * (p + 1)]
        raw[x, y] = float((fp[0::4] - fp[1::4] - fp[2::4] + fp[3::4]).mean())

    vals = raw[inc]
    e = np.exp(vals - vals.max())
    normalized = np.zeros((nv, nq))
    normalized[inc] = e / e.sum()
    return InteractionMatrix(raw=raw, normalized=normalized)


# ---------------------------------------------------------------------------
# axiom checks


@dataclass(frozen=True)
class AxiomReport:
    """Largest observed violation of each Shapley axiom."""

    efficiency: float
    dummy: float
    symmetry: float
    linearity: float

    @property
    def worst(self) -> float:
        return max(self.efficiency, self.dummy, self.symmetry, self.linearity)


def _random_table_game(players: int, gen: np.random.Generator) -> Game:
    values = {mask: float(v) for mask, v in enumerate(gen.uniform(-1.0, 1.0, size=1 << players))}
    return table_game(players, values)


def check_axioms(game: Game, trials: int, rng: RngStream) -> AxiomReport:
    """Measure Efficiency, Dummy, Symmetry, and Linearity residuals.

    Efficiency is checked on the game itself; the other axioms on
    constructions derived from it (an injected additive dummy, a
    symmetrized pair, random game sums), `trials` rounds each.
    """
    n = game.players
    if n > 10:
        raise ValueError("axiom checks are limited to 10 players")
    if n < 2:
        raise ValueError("axiom checks need at least 2 players")
    gen = rng.generator()
    score = _memoized(game.score)
    base = Game(players=n, score=score)

    phi = [shapley_value_exact(base, p) for p in range(n)]
    grand = score(frozenset(range(n)))
    empty = score(frozenset())
    efficiency = abs(sum(phi) - (grand - empty))

    dummy = 0.0
    for _ in range(trials):
        c = float(gen.uniform(-2.0, 2.0))
        ext = Game(
            players=n + 1,
            score=lambda u, c=c: score(frozenset(p for p in u if p < n)) + (c if n in u else 0.0),
        )
        dummy = max(dummy, abs(shapley_value_exact(ext, n) - c))

    symmetry = 0.0
    for _ in range(trials):
        i, j = [int(v) for v in gen.choice(n, size=2, replace=False)]

        def swap(u: frozenset, i=i, j=j) -> frozenset:
            out = set(u)
            if (i in out) != (j in out):
                out.symmetric_difference_update({i, j})
            return frozenset(out)

        sym = Game(players=n, score=lambda u, swap=swap: 0.5 * (score(u) + score(swap(u))))
        symmetry = max(
            symmetry, abs(shapley_value_exact(sym, i) - shapley_value_exact(sym, j))
        )

    linearity = 0.0
    for _ in range(trials):
        u_game = _random_table_game(n, gen)
        v_game = _random_table_game(n, gen)
        w_game = Game(players=n, score=lambda s: u_game.score(s) + v_game.score(s))
        for p in range(n):
            resid = abs(
                shapley_value_exact(w_game, p)
                - shapley_value_exact(u_game, p)
                - shapley_value_exact(v_game, p)
            )
            linearity = max(linearity, resid)

    return AxiomReport(efficiency=efficiency, dummy=dummy, symmetry=symmetry, linearity=linearity)
