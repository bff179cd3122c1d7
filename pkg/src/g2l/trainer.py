"""Toy dual-encoder training loop plus the diagnostic metrics.

Two independent projection heads (optionally one tanh hidden layer each)
map input embeddings to a shared unit sphere. Per batch the moment graph,
geodesic tables, and interaction labels are rebuilt from the current
encodings; gradients from the loss bundle are chained through the output
normalization back to the weights. Everything is deterministic in the
seed: weight init, query shuffling, and label sampling all draw from
derived counter-based streams.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError
from .losses import Batch, GclConfig, total_loss
from .numcore import EmbeddingMatrix, RngStream, l2_normalize_rows
from .synthdata import SynthDataset, atomic_write_bytes

ENCODER_MAGIC = b"G2LE1"

_INIT_STREAM = 11
_SHUFFLE_STREAM = 12
_STEP_STREAM = 13


@dataclass
class Encoder:
    """Two per-modality projections onto the unit sphere."""

    in_dim: int
    out_dim: int
    hidden_dim: int
    weights_q: list
    weights_m: list

    @classmethod
    def init(cls, in_dim: int, out_dim: int, hidden_dim: int, rng: RngStream) -> "Encoder":
        gen = rng.generator()

        def make(side_dims):
            return [
                gen.standard_normal((a, b)) / np.sqrt(a)
                for a, b in zip(side_dims[:-1], side_dims[1:])
            ]

        dims = [in_dim, out_dim] if hidden_dim == 0 else [in_dim, hidden_dim, out_dim]
        return cls(
            in_dim=in_dim,
            out_dim=out_dim,
            hidden_dim=hidden_dim,
            weights_q=make(dims),
            weights_m=make(dims),
        )

    def parameters(self) -> list:
        return self.weights_q + self.weights_m

    def _forward(self, x: np.ndarray, weights: list):
        cache = {"x": x}
        if self.hidden_dim:
            u = x @ weights[0]
            h = np.tanh(u)
            y = h @ weights[1]
            cache["h"] = h
        else:
            y = x @ weights[0]
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        if np.any(norms <= 1e-12) or not np.all(np.isfinite(y)):
            raise FloatingPointError("encoder produced a degenerate output row")
        z = y / norms
        cache["z"] = z
        cache["norms"] = norms
        return z, cache

    def _backward(self, grad_z: np.ndarray, weights: list, cache: dict) -> list:
        z, norms = cache["z"], cache["norms"]
        grad_y = (grad_z - (grad_z * z).sum(axis=1, keepdims=True) * z) / norms
        if self.hidden_dim:
            h = cache["h"]
            gw2 = h.T @ grad_y
            grad_h = grad_y @ weights[1].T
            grad_u = (1.0 - h * h) * grad_h
            gw1 = cache["x"].T @ grad_u
            return [gw1, gw2]
        return [cache["x"].T @ grad_y]

    def encode_queries(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(x, dtype=np.float64), self.weights_q)[0]

    def encode_moments(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(x, dtype=np.float64), self.weights_m)[0]


class Sgd:
    def __init__(self, params: list, lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: list):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params: list, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


DEFAULT_LR = {"sgd": 1e-2, "adam": 1e-3}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float | None = None
    optimizer: str = "adam"
    mode: str = "baseline"
    gcl: GclConfig = field(default_factory=GclConfig)
    seed: int = 0
    warmup_epochs: int = 0
    out_dim: int = 16
    hidden_dim: int = 0
    group_size: int = 2
    ablate_gcl: bool = False
    ablate_ssi: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"optimizer must be one of {sorted(DEFAULT_LR)}")
        if self.mode not in ("baseline", "g2l"):
            raise ValueError("mode must be 'baseline' or 'g2l'")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.out_dim < 1 or self.hidden_dim < 0:
            raise ValueError("invalid encoder dimensions")

    @property
    def effective_lr(self) -> float:
        return DEFAULT_LR[self.optimizer] if self.lr is None else self.lr


@dataclass
class MetricsReport:
    """Per-epoch loss and representation metrics.

    `seconds` holds measured wall-clock per epoch; serialized data outputs
    write a 0.0 placeholder there so files are byte-reproducible (real
    timing belongs to the run manifest).
    """

    epochs: list[int] = field(default_factory=list)
    l_total: list[float] = field(default_factory=list)
    l_vg: list[float] = field(default_factory=list)
    l_cl: list[float] = field(default_factory=list)
    l_ssi: list[float] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    uniformity: list[float] = field(default_factory=list)
    r1: list[float] = field(default_factory=list)
    r5: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    CSV_HEADER = "epoch,l_total,l_vg,l_cl,l_ssi,alignment,uniformity,r1,r5,seconds"

    def final(self) -> dict:
        return {
            "l_total": self.l_total[-1],
            "l_vg": self.l_vg[-1],
            "l_cl": self.l_cl[-1],
            "l_ssi": self.l_ssi[-1],
            "alignment": self.alignment[-1],
            "uniformity": self.uniformity[-1],
            "r1": self.r1[-1],
            "r5": self.r5[-1],
        }

    def to_csv_text(self) -> str:
        lines = [self.CSV_HEADER]
        for i, ep in enumerate(self.epochs):
            lines.append(
                f"{ep},{self.l_total[i]!r},{self.l_vg[i]!r},{self.l_cl[i]!r},"
                f"{self.l_ssi[i]!r},{self.alignment[i]!r},{self.uniformity[i]!r},"
                f"{self.r1[i]!r},{self.r5[i]!r},0.0"
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "per_epoch": [
                {
                    "epoch": self.epochs[i],
                    "l_total": self.l_total[i],
                    "l_vg": self.l_vg[i],
                    "l_cl": self.l_cl[i],
                    "l_ssi": self.l_ssi[i],
                    "alignment": self.alignment[i],
                    "uniformity": self.uniformity[i],
                    "r1": self.r1[i],
                    "r5": self.r5[i],
                    "seconds": 0.0,
                }
                for i in range(len(self.epochs))
            ],
            "final": self.final(),
        }


def alignment_metric(queries: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared distance between paired unit vectors (lower is better)."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if queries.shape != targets.shape or queries.shape[0] == 0:
        raise ValueError("need equal-shaped, nonempty paired arrays")
    d = queries - targets
    return float(np.mean(np.sum(d * d, axis=1)))


def uniformity_metric(points: np.ndarray) -> float:
    """log mean over distinct pairs of exp(-2 ||z_i - z_j||^2) (lower is better)."""
    z = points.array if isinstance(points, EmbeddingMatrix) else np.asarray(points, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least 2 points")
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.clip(d2, 0.0, None, out=d2)
    # the matrix is symmetric with unit diagonal terms exp(0); averaging
    # the full grid minus the diagonal equals the mean over distinct pairs
    total = float(np.exp(-2.0 * d2).sum())
    return float(np.log((total - n) / (n * (n - 1))))


def _recall_from_embeddings(zq: np.ndarray, zm: np.ndarray, ds: SynthDataset, n: int) -> float:
    nm = ds.config.moments_per_video
    vids = ds.query_videos()
    blocks = zm.reshape(ds.n_videos, nm, -1)[vids]              # (Q, N_m, D)
    cos = np.einsum("qd,qnd->qn", zq, blocks)
    local_t = ds.targets - vids * nm
    rows = np.arange(zq.shape[0])
    ct = cos[rows, local_t][:, None]
    better = cos > ct
    tie_lower = (cos == ct) & (np.arange(nm)[None, :] < local_t[:, None])
    rank = (better | tie_lower).sum(axis=1)
    return float(np.mean(rank < n))


def recall_at_n(encoder: Encoder, ds: SynthDataset, n: int) -> float:
    """Fraction of queries whose target ranks in its video's top n by cosine."""
    if n < 1:
        raise ValueError("n must be >= 1")
    zq = encoder.encode_queries(ds.queries)
    zm = encoder.encode_moments(ds.moments)
    return _recall_from_embeddings(zq, zm, ds, n)


def evaluate(encoder: Encoder, ds: SynthDataset, ns=(1, 5)) -> dict:
    """Retrieval and representation metrics of an encoder on a dataset."""
    if encoder.in_dim != ds.config.dim:
        raise DataError(
            f"encoder expects dim {encoder.in_dim}, dataset has dim {ds.config.dim}"
        )
    zq = encoder.encode_queries(ds.queries)
    zm = encoder.encode_moments(ds.moments)
    out = {f"r{n}": _recall_from_embeddings(zq, zm, ds, n) for n in ns}
    out["alignment"] = alignment_metric(zq, zm[ds.targets])
    out["uniformity"] = uniformity_metric(zm)
    return out


def _epoch_order(ds: SynthDataset, gen: np.random.Generator, group_size: int) -> np.ndarray:
    """Seeded query order for one epoch, in same-video groups.

    Queries of a video are shuffled and cut into chunks of up to
    `group_size`; the chunk order is then shuffled. Groups put several
    queries of one video into the same batch, which is what gives the
    interaction games more than one query column (a single-column game
    has a degenerate row softmax and a vanishing interaction loss).
    group_size=1 recovers a plain uniform shuffle.
    """
    qv = ds.config.queries_per_video
    chunks = []
    for v in range(ds.n_videos):
        qidx = v * qv + gen.permutation(qv)
        chunks.extend(qidx[i : i + group_size] for i in range(0, qv, group_size))
    order = [chunks[i] for i in gen.permutation(len(chunks))]
    return np.concatenate(order) if order else np.zeros(0, dtype=np.int64)


def _assemble_batch(ds: SynthDataset, sel: np.ndarray, zq: np.ndarray, zm: np.ndarray) -> Batch:
    nm = ds.config.moments_per_video
    vids = sel // ds.config.queries_per_video
    local_t = ds.targets[sel] - vids * nm
    return Batch(
        queries=EmbeddingMatrix.from_array(zq, normalized=True),
        moments=EmbeddingMatrix.from_array(zm, normalized=True),
        n_moments_per_video=nm,
        targets=np.arange(sel.size) * nm + local_t,
        query_videos=vids,
        moment_videos=np.repeat(vids, nm),
    )


def train(ds: SynthDataset, cfg: TrainConfig) -> tuple[Encoder, MetricsReport]:
    """Train the dual encoder; fully deterministic in (dataset, config, seed)."""
    n_queries = ds.n_queries
    if n_queries < 1:
        raise DataError("dataset contains no queries")
    if cfg.batch_size > n_queries:
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds dataset queries {n_queries}"
        )
    nm, qv = ds.config.moments_per_video, ds.config.queries_per_video
    root = RngStream(cfg.seed)
    enc = Encoder.init(ds.config.dim, cfg.out_dim, cfg.hidden_dim, root.derive(_INIT_STREAM))
    opt_cls = {"sgd": Sgd, "adam": Adam}[cfg.optimizer]
    opt = opt_cls(enc.parameters(), cfg.effective_lr)
    report = MetricsReport()
    moment_idx = np.arange(nm)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(ds, root.derive(_SHUFFLE_STREAM, epoch).generator(), cfg.group_size)
        sums = {"l_total": 0.0, "l_vg": 0.0, "l_cl": 0.0, "l_ssi": 0.0}
        for step in range(0, n_queries, cfg.batch_size):
            sel = order[step : step + cfg.batch_size]
            vids = sel // qv
            m_rows = (vids[:, None] * nm + moment_idx).ravel()
            x_q = ds.queries[sel]
            x_m = ds.moments[m_rows]
            try:
                zq, cache_q = enc._forward(x_q, enc.weights_q)
                zm, cache_m = enc._forward(x_m, enc.weights_m)
            except FloatingPointError as exc:
                raise DivergenceError(epoch, step // cfg.batch_size, str(exc)) from exc
            batch = _assemble_batch(ds, sel, zq, zm)
            in_warmup = cfg.mode == "g2l" and epoch < cfg.warmup_epochs
            bundle = total_loss(
                batch,
                cfg.gcl,
                cfg.mode,
                root.derive(_STEP_STREAM, epoch, step),
                enable_gcl=not (cfg.ablate_gcl or in_warmup),
                enable_ssi=not (cfg.ablate_ssi or in_warmup),
            )
            if not np.isfinite(bundle.l_total):
                raise DivergenceError(epoch, step // cfg.batch_size)
            grads = enc._backward(bundle.grad_queries, enc.weights_q, cache_q) + enc._backward(
                bundle.grad_moments, enc.weights_m, cache_m
            )
            opt.step(grads)
            sums["l_total"] += bundle.l_total
            sums["l_vg"] += bundle.l_vg
            sums["l_cl"] += bundle.l_vcl if cfg.mode == "baseline" else bundle.l_gcl
            sums["l_ssi"] += bundle.l_ssi

        metrics = evaluate(enc, ds)
        report.epochs.append(epoch)
        report.l_total.append(sums["l_total"] / n_queries)
        report.l_vg.append(sums["l_vg"] / n_queries)
        report.l_cl.append(sums["l_cl"] / n_queries)
        report.l_ssi.append(sums["l_ssi"] / n_queries)
        report.alignment.append(metrics["alignment"])
        report.uniformity.append(metrics["uniformity"])
        report.r1.append(metrics["r1"])
        report.r5.append(metrics["r5"])
        report.seconds.append(time.perf_counter() - t0)

    return enc, report


def save_encoder(enc: Encoder, path: str):
    header = {
        "version": 1,
        "in_dim": enc.in_dim,
        "out_dim": enc.out_dim,
        "hidden_dim": enc.hidden_dim,
    }
    chunks = [ENCODER_MAGIC, b"\n", json.dumps(header, sort_keys=True).encode(), b"\n"]
    for w in enc.weights_q + enc.weights_m:
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_encoder(path: str) -> Encoder:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read encoder {path}: {exc}") from exc
    nl1 = blob.find(b"\n")
    if nl1 < 0 or blob[:nl1] != ENCODER_MAGIC:
        raise DataError(f"{path}: missing magic {ENCODER_MAGIC.decode()} on line 1")
    nl2 = blob.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise DataError(f"{path}: missing header line 2")
    try:
        header = json.loads(blob[nl1 + 1 : nl2].decode("utf-8"))
        in_dim, out_dim, hidden = (
            int(header["in_dim"]),
            int(header["out_dim"]),
            int(header["hidden_dim"]),
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: invalid header: {exc}") from exc
    dims = [in_dim, out_dim] if hidden == 0 else [in_dim, hidden, out_dim]
    shapes = list(zip(dims[:-1], dims[1:])) * 2
    expect = sum(a * b for a, b in shapes) * 8
    body = blob[nl2 + 1 :]
    if len(body) != expect:
        raise DataError(f"{path}: payload has {len(body)} bytes, expected {expect}")
    flat = np.frombuffer(body, dtype="<f8")
    weights = []
    off = 0
    for a, b in shapes:
        weights.append(flat[off : off + a * b].reshape(a, b).astype(np.float64))
        off += a * b
    half = len(shapes) // 2
    return Encoder(
        in_dim=in_dim,
        out_dim=out_dim,
        hidden_dim=hidden,
        weights_q=weights[:half],
        weights_m=weights[half:],
    )
