"""Training objectives and their analytic gradients.

Five parts: a grounding loss (per-video moment classification), the
vanilla batch-wide contrastive loss, the geodesic-guided contrastive
loss, the soft-label interaction alignment loss, and their combinations.
Geodesic distances, positive selections, and interaction soft labels are
treated as constants of the current step; gradients flow only through
the similarity terms. Every gradient here is verified against the
central-difference oracle in numcore.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .game import AlignmentGame, InteractionMatrix, interaction_matrix
from .geodesic import GeodesicTable, build_knn_graph, tables_from_targets
from .numcore import EmbeddingMatrix, RngStream

DENOMINATOR_MODES = ("literal", "tempered")
WEIGHTING_MODES = ("geodesic", "plain")


@dataclass(frozen=True)
class GclConfig:
    """Knobs of the geodesic/interaction objectives.

    `weighting="plain"` replaces the geodesic-weighted denominator terms
    by exp(q.m / temperature); with topk=1 that reduces the geodesic loss
    exactly to the vanilla contrastive loss (the uniformity ablation and
    the regression bridge). `denominator_mode` and `negate_weight` are
    sensitivity switches around the printed form of the weighting.
    """

    temperature: float = 0.1
    topk: int = 3
    neighbors: int = 10
    g_cap: float = 10.0
    ssi_k: int = 3
    ssi_mc_samples: int = 32
    tau_vg: float = 0.1
    denominator_mode: str = "literal"
    weighting: str = "geodesic"
    negate_weight: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.tau_vg <= 0:
            raise ValueError(f"tau_vg must be > 0, got {self.tau_vg}")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.g_cap <= 0:
            raise ValueError("g_cap must be > 0")
        if self.ssi_k < 1:
            raise ValueError("ssi_k must be >= 1")
        if self.ssi_mc_samples < 1:
            raise ValueError("ssi_mc_samples must be >= 1")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting must be one of {WEIGHTING_MODES}")


@dataclass(frozen=True)
class Batch:
    """One training batch: B (video, query) pairs with N_m moments each.

    Moment rows are laid out in per-pair blocks of n_moments_per_video;
    query i's block is rows [i*N_m, (i+1)*N_m) and its target index must
    fall inside that block. The same video may occupy several blocks when
    multiple of its queries are drawn.
    """

    queries: EmbeddingMatrix
    moments: EmbeddingMatrix
    n_moments_per_video: int
    targets: np.ndarray
    query_videos: np.ndarray
    moment_videos: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "query_videos", np.asarray(self.query_videos).reshape(-1))
        object.__setattr__(self, "moment_videos", np.asarray(self.moment_videos).reshape(-1))
        b = self.queries.rows
        nm = self.n_moments_per_video
        if b < 1:
            raise ValueError("batch must contain at least one query")
        if nm < 2:
            raise ValueError("each video needs at least 2 moments")
        if self.moments.rows != b * nm:
            raise ValueError(
                f"expected {b} blocks of {nm} moments, got {self.moments.rows} rows"
            )
        if self.targets.shape != (b,):
            raise ValueError("one target index per query required")
        if self.query_videos.shape != (b,) or self.moment_videos.shape != (b * nm,):
            raise ValueError("video id arrays do not match batch shape")
        for i in range(b):
            lo, hi = i * nm, (i + 1) * nm
            if not (lo <= self.targets[i] < hi):
                raise ValueError(
                    f"target {self.targets[i]} of query {i} outside its block [{lo}, {hi})"
                )
            if not np.all(self.moment_videos[lo:hi] == self.query_videos[i]):
                raise ValueError(f"block {i} contains moments of a different video")

    @property
    def size(self) -> int:
        return self.queries.rows


@dataclass(frozen=True)
class LossPart:
    value: float
    grad_queries: np.ndarray
    grad_moments: np.ndarray


@dataclass(frozen=True)
class LossBundle:
    """All loss values of one step plus gradients w.r.t. the input embeddings."""

    l_vg: float
    l_vcl: float
    l_gcl: float
    l_ssi: float
    l_total: float
    grad_queries: np.ndarray
    grad_moments: np.ndarray


def _logsumexp_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(logsumexp per row, softmax matrix)."""
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    return (zmax + np.log(s)).ravel(), e / s


def vanilla_contrastive_loss(batch: Batch, tau: float) -> LossPart:
    """NCE over the whole batch: each query against every batch moment."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    q = batch.queries.array
    m = batch.moments.array
    t = batch.targets
    z = q @ m.T / tau
    lse, p = _logsumexp_rows(z)
    rows = np.arange(batch.size)
    value = float(np.sum(lse - z[rows, t]))
    g = p.copy()
    g[rows, t] -= 1.0
    return LossPart(
        value=value,
        grad_queries=g @ m / tau,
        grad_moments=g.T @ q / tau,
    )


def grounding_loss(batch: Batch, tau_vg: float = 0.1) -> LossPart:
    """Cross-entropy of each query against its own video's moments."""
    if tau_vg <= 0:
        raise ValueError(f"tau_vg must be > 0, got {tau_vg}")
    b, nm = batch.size, batch.n_moments_per_video
    q = batch.queries.array
    m3 = batch.moments.array.reshape(b, nm, -1)
    local_t = batch.targets - np.arange(b) * nm
    z = np.einsum("bd,bnd->bn", q, m3) / tau_vg
    lse, p = _logsumexp_rows(z)
    rows = np.arange(b)
    value = float(np.sum(lse - z[rows, local_t]))
    g = p.copy()
    g[rows, local_t] -= 1.0
    grad_q = np.einsum("bn,bnd->bd", g, m3) / tau_vg
    grad_m = (g[:, :, None] * q[:, None, :] / tau_vg).reshape(b * nm, -1)
    return LossPart(value=value, grad_queries=grad_q, grad_moments=grad_m)


def _rank_by_distance(distances: np.ndarray, reachable: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """First k of `candidates` ordered by (reachable first, distance, index)."""
    if k > candidates.size:
        raise ValueError(f"k={k} exceeds {candidates.size} candidates")
    d = distances[candidates]
    r = reachable[candidates]
    order = np.lexsort((candidates, d, ~r))
    return candidates[order[:k]]


def select_semantic_positives(table: GeodesicTable, k: int) -> np.ndarray:
    """Indices of the k geodesically closest moments to the table's source.

    The source itself (distance 0) is always included; ties break to the
    lower index, and unreachable nodes are chosen only once reachable
    ones run out.
    """
    n = table.distances.shape[0]
    return _rank_by_distance(table.distances, table.reachable, np.arange(n), k)


def geodesic_weighting(q_vec, target_vec, m_vec, g: float) -> float:
    """Similarity weight exp((q.m) * (t.m) * -(g+1)) for one moment.

    The log-reciprocal-exponential factor of the printed form is evaluated
    symbolically as -(g+1), which changes no value and cannot overflow.
    """
    if g < 0:
        raise ValueError(f"geodesic distance must be >= 0, got {g}")
    q_vec = np.asarray(q_vec, dtype=np.float64)
    target_vec = np.asarray(target_vec, dtype=np.float64)
    m_vec = np.asarray(m_vec, dtype=np.float64)
    return float(np.exp(float(q_vec @ m_vec) * float(target_vec @ m_vec) * -(g + 1.0)))


def geodesic_contrastive_loss(batch: Batch, tables: Sequence[GeodesicTable], cfg: GclConfig) -> LossPart:
    """Contrastive loss with geodesic positives and geodesic-weighted negatives.

    Numerator: sum over the topk geodesically closest moments of
    exp(q.p / tau). Denominator: sum over all batch moments of the
    geodesic similarity weight divided by tau (literal mode), of the
    tempered weight exp(q.m * w / tau) (tempered mode), or of
    exp(q.m / tau) (plain mode). Distances and the positive selection are
    constants; gradients flow through every similarity factor, including
    the target-moment products inside the weights.
    """
    b, nm = batch.size, batch.n_moments_per_video
    if len(tables) != b:
        raise ValueError(f"expected {b} geodesic tables, got {len(tables)}")
    for i, tab in enumerate(tables):
        if tab.source != batch.targets[i]:
            raise ValueError(
                f"table {i} sourced at {tab.source}, expected target {batch.targets[i]}"
            )
    if cfg.topk > nm:
        raise ValueError(f"topk={cfg.topk} exceeds moments per video {nm}")
    tau = cfg.temperature
    q = batch.queries.array
    m = batch.moments.array
    t = batch.targets
    n_all = m.shape[0]

    e = q @ m.T                      # (B, N) query-moment products
    grad_q = np.zeros_like(q)
    grad_m = np.zeros_like(m)

    # log denominator and its gradients
    if cfg.weighting == "plain":
        x = e / tau
        xmax = x.max(axis=1, keepdims=True)
        ex = np.exp(x - xmax)
        dsum = ex.sum(axis=1, keepdims=True)
        log_den = (xmax + np.log(dsum)).ravel() - np.log(tau)
        r = ex / dsum
        grad_q += r @ m / tau
        grad_m += r.T @ q / tau
    else:
        a = m[t] @ m.T               # (B, N) target-moment products
        gd = np.stack([tab.distances for tab in tables])
        sign = 1.0 if cfg.negate_weight else -1.0
        c = sign * (gd + 1.0)
        if cfg.denominator_mode == "tempered":
            c = c / tau
        w = a * c
        x = e * w
        xmax = x.max(axis=1, keepdims=True)
        ex = np.exp(x - xmax)
        dsum = ex.sum(axis=1, keepdims=True)
        log_den = (xmax + np.log(dsum)).ravel() - np.log(tau)
        r = ex / dsum                # T_ij / D_i
        grad_q += (r * w) @ m
        rc = r * c
        grad_m += (rc * a).T @ q + (rc * e).T @ m[t]
        np.add.at(grad_m, t, (rc * e) @ m)

    # log numerator over the geodesic positives, and its gradients
    pos = np.stack([select_semantic_positives(tab, cfg.topk) for tab in tables])
    rows = np.arange(b)[:, None]
    zp = e[rows, pos] / tau          # (B, k)
    zpmax = zp.max(axis=1, keepdims=True)
    ezp = np.exp(zp - zpmax)
    nsum = ezp.sum(axis=1, keepdims=True)
    log_num = (zpmax + np.log(nsum)).ravel()
    npos = ezp / nsum                # softmax over positives
    grad_q -= np.einsum("bk,bkd->bd", npos, m[pos]) / tau
    np.add.at(grad_m, pos.ravel(), -(npos / tau).reshape(-1, 1) * np.repeat(q, cfg.topk, axis=0))

    value = float(np.sum(log_den - log_num))
    if n_all and not np.all(np.isfinite(log_den)):
        raise FloatingPointError("geodesic denominator overflowed")
    return LossPart(value=value, grad_queries=grad_q, grad_moments=grad_m)


def build_alignment_games(batch: Batch, tables: Sequence[GeodesicTable], k: int) -> list[AlignmentGame]:
    """One alignment game per unique batch video.

    A video's queries each contribute their k geodesically closest
    own-block moments as moment players (the target always among them);
    row indices into the batch are kept so gradients can be scattered
    back.
    """
    nm = batch.n_moments_per_video
    if k > nm:
        raise ValueError(f"k={k} exceeds moments per video {nm}")
    q = batch.queries.array
    m = batch.moments.array
    games = []
    seen = {}
    for i, vid in enumerate(batch.query_videos):
        seen.setdefault(vid, []).append(i)
    for vid, q_idx in seen.items():
        moment_rows = []
        for i in q_idx:
            block = np.arange(i * nm, (i + 1) * nm)
            ranked = _rank_by_distance(tables[i].distances, tables[i].reachable, block, k)
            moment_rows.extend(int(r) for r in ranked)
        moment_rows = np.asarray(moment_rows, dtype=np.int64)
        q_rows = np.asarray(q_idx, dtype=np.int64)
        games.append(
            AlignmentGame(
                moments=EmbeddingMatrix.from_array(m[moment_rows]),
                queries=EmbeddingMatrix.from_array(q[q_rows]),
                k=k,
                moment_rows=moment_rows,
                query_rows=q_rows,
            )
        )
    return games


def ssi_loss(
    batch: Batch,
    interactions: Sequence[InteractionMatrix],
    alignments: Sequence[AlignmentGame],
) -> LossPart:
    """Soft-label cross-entropy between normalized pair interactions and
    row-softmaxed alignment scores, averaged per video.

    The labels are constants; gradients flow through the log-softmax into
    both embedding sides of every alignment score.
    """
    if len(interactions) != len(alignments):
        raise ValueError("need one interaction matrix per alignment game")
    grad_q = np.zeros_like(batch.queries.array)
    grad_m = np.zeros_like(batch.moments.array)
    value = 0.0
    for im, ag in zip(interactions, alignments):
        if ag.moment_rows is None or ag.query_rows is None:
            raise ValueError("alignment game lacks batch row metadata")
        nv, nq = ag.n_moments, ag.n_queries
        w = im.normalized
        if w.shape != (nv, nq):
            raise ValueError(f"label shape {w.shape} does not match game ({nv}, {nq})")
        a = ag.alignment
        amax = a.max(axis=1, keepdims=True)
        ea = np.exp(a - amax)
        ssum = ea.sum(axis=1, keepdims=True)
        log_soft = (a - amax) - np.log(ssum)
        soft = ea / ssum
        scale = 1.0 / (nv * nq)
        value -= scale * float(np.sum(w * log_soft))
        ga = scale * (w.sum(axis=1, keepdims=True) * soft - w)
        np.add.at(grad_m, ag.moment_rows, ga @ ag.queries.array)
        np.add.at(grad_q, ag.query_rows, ga.T @ ag.moments.array)
    return LossPart(value=value, grad_queries=grad_q, grad_moments=grad_m)


@dataclass(frozen=True)
class StepContext:
    """Gradient-stopped constants of one step: geodesic tables, alignment
    games, and interaction soft labels."""

    tables: tuple
    games: tuple
    labels: tuple


def prepare_step_context(batch: Batch, cfg: GclConfig, rng: RngStream) -> StepContext:
    """Build the per-step constants for the geodesic/interaction losses.

    The neighbor count is capped at node_count - 1 so small batches stay
    valid. Each game's labels draw from a stream derived from the game's
    position, independent of evaluation order.
    """
    n_nodes = batch.moments.rows
    n_eff = min(cfg.neighbors, n_nodes - 1)
    graph = build_knn_graph(batch.moments, n_eff)
    tables = tables_from_targets(graph, batch.targets, cfg.g_cap)
    games = build_alignment_games(batch, tables, cfg.ssi_k)
    labels = [
        interaction_matrix(g, cfg.ssi_mc_samples, rng.derive(gi))
        for gi, g in enumerate(games)
    ]
    return StepContext(tables=tuple(tables), games=tuple(games), labels=tuple(labels))


def total_loss(
    batch: Batch,
    cfg: GclConfig,
    mode: str,
    rng: RngStream | None = None,
    *,
    enable_gcl: bool = True,
    enable_ssi: bool = True,
    context: StepContext | None = None,
) -> LossBundle:
    """Combined objective: grounding + geodesic + interaction terms in g2l
    mode, grounding + vanilla contrastive in baseline mode.

    Gradients are the entrywise sums of the enabled parts' gradients. Pass
    a precomputed `context` to reuse (or freeze, for gradient checking)
    the per-step constants; otherwise one is built from `rng`.
    """
    if mode not in ("baseline", "g2l"):
        raise ValueError(f"mode must be 'baseline' or 'g2l', got {mode!r}")
    vg = grounding_loss(batch, cfg.tau_vg)
    parts = [vg]
    l_vcl = l_gcl = l_ssi = 0.0
    if mode == "baseline":
        vcl = vanilla_contrastive_loss(batch, cfg.temperature)
        parts.append(vcl)
        l_vcl = vcl.value
    else:
        if enable_gcl or enable_ssi:
            if context is None:
                if rng is None:
                    raise ValueError("g2l mode needs an RngStream or a prepared context")
                context = prepare_step_context(batch, cfg, rng)
            if enable_gcl:
                gcl = geodesic_contrastive_loss(batch, context.tables, cfg)
                parts.append(gcl)
                l_gcl = gcl.value
            if enable_ssi:
                ssi = ssi_loss(batch, context.labels, context.games)
                parts.append(ssi)
                l_ssi = ssi.value
    return LossBundle(
        l_vg=vg.value,
        l_vcl=l_vcl,
        l_gcl=l_gcl,
        l_ssi=l_ssi,
        l_total=float(sum(p.value for p in parts)),
        grad_queries=sum(p.grad_queries for p in parts),
        grad_moments=sum(p.grad_moments for p in parts),
    )


def with_embeddings(batch: Batch, queries: np.ndarray, moments: np.ndarray) -> Batch:
    """Copy of `batch` with replaced embedding matrices (normalization not
    asserted; used by gradient checks that perturb off the unit sphere)."""
    return replace(
        batch,
        queries=EmbeddingMatrix.from_array(queries),
        moments=EmbeddingMatrix.from_array(moments),
    )
