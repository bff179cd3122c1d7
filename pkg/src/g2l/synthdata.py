"""Synthetic moment/query embedding datasets.

Each video carries a handful of annotated target moments with matching
queries. Moments are noisy copies of topic direction vectors; a
configurable fraction of the non-target moments reuse a target's topic,
reproducing the two pathologies the training objectives are aimed at:
semantically overlapping moments and sparsely annotated videos.

File format: magic line "G2LD1", one line of JSON header (config echo,
counts, targets, topic labels), then the moment and query matrices as
little-endian 64-bit floats.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .numcore import RngStream, l2_normalize_rows

MAGIC = b"G2LD1"

_TOPIC_STREAM = 1
_VIDEO_STREAM = 2


@dataclass(frozen=True)
class SynthConfig:
    videos: int = 64
    moments_per_video: int = 16
    queries_per_video: int = 4
    dim: int = 32
    topics: int = 8
    overlap: float = 0.4
    annotated_fraction: float = 0.25
    noise_sigma: float = 0.15
    seed: int = 0
    orthogonal_topics: bool = False

    def __post_init__(self):
        if self.videos < 0:
            raise ValueError("videos must be >= 0")
        if self.moments_per_video < 2:
            raise ValueError("moments_per_video must be >= 2")
        if self.queries_per_video < 1:
            raise ValueError("queries_per_video must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not (0.0 <= self.overlap <= 1.0):
            raise ValueError(f"overlap must be in [0, 1], got {self.overlap}")
        if not (0.0 < self.annotated_fraction <= 1.0):
            raise ValueError(
                f"annotated_fraction must be in (0, 1], got {self.annotated_fraction}"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        budget = max(1, int(self.annotated_fraction * self.moments_per_video))
        if self.queries_per_video > budget:
            raise ValueError(
                f"queries_per_video={self.queries_per_video} exceeds the annotated "
                f"budget {budget} (= annotated_fraction * moments_per_video)"
            )
        if self.topics < self.queries_per_video + 1:
            raise ValueError(
                "need at least queries_per_video + 1 topics so non-overlapping "
                "moments have an off-target topic to draw from"
            )
        if self.orthogonal_topics and self.dim < self.topics:
            raise ValueError(
                f"orthogonal topics need dim >= topics ({self.dim} < {self.topics})"
            )


@dataclass(frozen=True, eq=False)
class SynthDataset:
    """Generated embeddings plus annotations and hidden topic labels."""

    config: SynthConfig
    moments: np.ndarray         # (videos * moments_per_video, dim), unit rows
    queries: np.ndarray         # (videos * queries_per_video, dim), unit rows
    targets: np.ndarray         # (n_queries,) global moment index per query
    moment_topics: np.ndarray   # (n_moments,) topic label per moment

    @property
    def n_videos(self) -> int:
        return self.config.videos

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def video_of_query(self, i: int) -> int:
        return i // self.config.queries_per_video

    def query_videos(self) -> np.ndarray:
        return np.arange(self.n_queries) // self.config.queries_per_video

    def moment_block(self, video: int) -> slice:
        nm = self.config.moments_per_video
        return slice(video * nm, (video + 1) * nm)

    def equals(self, other: "SynthDataset") -> bool:
        return (
            self.config == other.config
            and np.array_equal(self.moments, other.moments)
            and np.array_equal(self.queries, other.queries)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.moment_topics, other.moment_topics)
        )


def _topic_vectors(cfg: SynthConfig, rng: RngStream) -> np.ndarray:
    gen = rng.derive(_TOPIC_STREAM).generator()
    raw = gen.standard_normal((cfg.topics, cfg.dim))
    if cfg.orthogonal_topics:
        q, _ = np.linalg.qr(raw.T)
        return np.ascontiguousarray(q.T[: cfg.topics])
    return l2_normalize_rows(raw)


def generate(cfg: SynthConfig) -> SynthDataset:
    """Deterministic dataset for a config; the same seed reproduces it bitwise."""
    nm, qv, dim = cfg.moments_per_video, cfg.queries_per_video, cfg.dim
    topic_vecs = _topic_vectors(cfg, RngStream(cfg.seed))
    moments = np.zeros((cfg.videos * nm, dim))
    queries = np.zeros((cfg.videos * qv, dim))
    targets = np.zeros(cfg.videos * qv, dtype=np.int64)
    moment_topics = np.zeros(cfg.videos * nm, dtype=np.int64)

    base = RngStream(cfg.seed)
    for v in range(cfg.videos):
        gen = base.derive(_VIDEO_STREAM, v).generator()
        slots = np.sort(gen.choice(nm, size=qv, replace=False))
        target_topics = gen.integers(0, cfg.topics, size=qv)
        off_topics = np.setdiff1d(np.arange(cfg.topics), target_topics)

        labels = np.empty(nm, dtype=np.int64)
        labels[slots] = target_topics
        for j in range(nm):
            if j in set(int(s) for s in slots):
                continue
            if gen.random() < cfg.overlap:
                labels[j] = target_topics[int(gen.integers(0, qv))]
            else:
                labels[j] = off_topics[int(gen.integers(0, off_topics.size))]

        noise_m = gen.standard_normal((nm, dim)) * cfg.noise_sigma
        moments[v * nm : (v + 1) * nm] = l2_normalize_rows(topic_vecs[labels] + noise_m)
        noise_q = gen.standard_normal((qv, dim)) * cfg.noise_sigma
        queries[v * qv : (v + 1) * qv] = l2_normalize_rows(topic_vecs[target_topics] + noise_q)
        targets[v * qv : (v + 1) * qv] = v * nm + slots
        moment_topics[v * nm : (v + 1) * nm] = labels

    return SynthDataset(
        config=cfg,
        moments=moments,
        queries=queries,
        targets=targets,
        moment_topics=moment_topics,
    )


def atomic_write_bytes(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save(ds: SynthDataset, path: str):
    """Write the versioned binary dataset file; the write is atomic."""
    header = {
        "version": 1,
        "config": asdict(ds.config),
        "counts": {
            "moments": int(ds.moments.shape[0]),
            "queries": int(ds.queries.shape[0]),
            "dim": int(ds.config.dim),
        },
        "targets": [int(t) for t in ds.targets],
        "moment_topics": [int(t) for t in ds.moment_topics],
    }
    payload = b"".join(
        [
            MAGIC,
            b"\n",
            json.dumps(header, sort_keys=True).encode("utf-8"),
            b"\n",
            np.ascontiguousarray(ds.moments, dtype="<f8").tobytes(),
            np.ascontiguousarray(ds.queries, dtype="<f8").tobytes(),
        ]
    )
    atomic_write_bytes(path, payload)


def load(path: str) -> SynthDataset:
    """Read a dataset file back; raises DataError on any malformation."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc

    nl1 = blob.find(b"\n")
    if nl1 < 0 or blob[:nl1] != MAGIC:
        raise DataError(f"{path}: missing magic {MAGIC.decode()} on line 1")
    nl2 = blob.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise DataError(f"{path}: missing header line 2")
    try:
        header = json.loads(blob[nl1 + 1 : nl2].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header at byte offset {nl1 + 1}: {exc}") from exc

    try:
        cfg = SynthConfig(**header["config"])
        counts = header["counts"]
        n_m, n_q, dim = int(counts["moments"]), int(counts["queries"]), int(counts["dim"])
        targets = np.asarray(header["targets"], dtype=np.int64)
        moment_topics = np.asarray(header["moment_topics"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid header: {exc}") from exc

    body = blob[nl2 + 1 :]
    expect = (n_m + n_q) * dim * 8
    if len(body) != expect:
        raise DataError(
            f"{path}: payload at byte offset {nl2 + 1} has {len(body)} bytes, expected {expect}"
        )
    flat = np.frombuffer(body, dtype="<f8")
    moments = flat[: n_m * dim].reshape(n_m, dim).astype(np.float64)
    queries = flat[n_m * dim :].reshape(n_q, dim).astype(np.float64)
    if targets.shape != (n_q,) or moment_topics.shape != (n_m,):
        raise DataError(f"{path}: annotation lengths do not match counts")
    if n_q and (targets.min() < 0 or targets.max() >= n_m):
        raise DataError(f"{path}: target index out of range")
    return SynthDataset(
        config=cfg,
        moments=moments,
        queries=queries,
        targets=targets,
        moment_topics=moment_topics,
    )
