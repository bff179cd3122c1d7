"""Command-line surface: dataset generation, training, evaluation,
standalone geodesic/Shapley computation, and the mode comparison harness.

Exit codes: 0 success, 1 I/O or data error, 2 argument validation,
3 numerical divergence. Data outputs (dataset, checkpoint, metric CSV and
JSON files) are byte-reproducible for fixed flags and seeds; wall-clock
timing and timestamps live only in the run manifests. G2L_THREADS caps
the number of parallel comparison cells (default: available cores).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .errors import DataError, DivergenceError
from .game import (
    sampled_pair_interaction,
    shapley_interaction_exact,
    shapley_value_exact,
    table_game,
)
from .geodesic import build_knn_graph, graph_to_json_dict, tables_from_targets
from .losses import GclConfig
from .numcore import EmbeddingMatrix, RngStream
from .synthdata import SynthConfig, atomic_write_bytes, generate, load, save
from .trainer import TrainConfig, evaluate, load_encoder, save_encoder, train

ABLATIONS = ("gcl", "ssi", "sa", "su")


class UsageError(Exception):
    """Bad flag values (exit code 2)."""


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path: str, command: str, config: dict, seed, inputs, outputs, started, timing=None):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifact_version": __version__,
        "inputs": list(inputs),
        "outputs": list(outputs),
        "started": started,
        "finished": _utcnow(),
    }
    if timing is not None:
        manifest["timing"] = timing
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"invalid value for {flag}: {text!r}") from exc


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    started = _utcnow()
    try:
        cfg = SynthConfig(
            videos=args.videos,
            moments_per_video=args.moments,
            queries_per_video=args.queries,
            dim=args.dim,
            topics=args.topics,
            overlap=args.overlap,
            annotated_fraction=args.annotated,
            noise_sigma=args.noise,
            seed=args.seed,
            orthogonal_topics=args.orthogonal_topics,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate(cfg)
    save(ds, args.out)
    _write_manifest(
        args.out + ".manifest.json",
        "gen",
        asdict(cfg),
        cfg.seed,
        inputs=[],
        outputs=[args.out],
        started=started,
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _gcl_config_from_args(args, ablate=()) -> GclConfig:
    return GclConfig(
        temperature=args.tau,
        topk=1 if "sa" in ablate else args.topk,
        neighbors=args.neighbors,
        g_cap=args.g_cap,
        ssi_k=args.ssi_k,
        ssi_mc_samples=args.ssi_samples,
        denominator_mode=args.denominator_mode,
        weighting="plain" if "su" in ablate else args.weighting,
        negate_weight=args.negate_weight,
    )


def _train_config_from_args(args, mode: str, seed: int, ablate=()) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        optimizer=args.optimizer,
        mode=mode,
        gcl=_gcl_config_from_args(args, ablate),
        seed=seed,
        warmup_epochs=args.warmup,
        out_dim=args.out_dim,
        hidden_dim=args.hidden_dim,
        group_size=args.group_size,
        ablate_gcl="gcl" in ablate,
        ablate_ssi="ssi" in ablate,
    )


def cmd_train(args) -> int:
    started = _utcnow()
    ds = load(args.data)
    cfg = _train_config_from_args(args, args.mode, args.seed, tuple(args.ablate))
    t0 = time.perf_counter()
    enc, report = train(ds, cfg)
    total_seconds = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    json_path = os.path.join(args.out, "metrics.json")
    enc_path = os.path.join(args.out, "encoder.g2le")
    atomic_write_bytes(csv_path, report.to_csv_text().encode())
    atomic_write_bytes(json_path, (json.dumps(report.to_json_dict(), sort_keys=True) + "\n").encode())
    save_encoder(enc, enc_path)
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        "train",
        {"train": asdict(cfg)},
        cfg.seed,
        inputs=[args.data],
        outputs=[csv_path, json_path, enc_path],
        started=started,
        timing={"total_seconds": total_seconds, "per_epoch_seconds": report.seconds},
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ds = load(args.data)
    enc = load_encoder(args.encoder)
    ns = _parse_int_list(args.n, "--n")
    if not ns or any(n < 1 for n in ns):
        raise UsageError(f"--n must list positive integers, got {args.n!r}")
    metrics = evaluate(enc, ds, ns=tuple(ns))
    _print_json(metrics)
    return 0


# ---------------------------------------------------------------------------
# shapley


def _load_game(path: str):
    try:
        with open(path, "rb") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read game file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from exc
    try:
        players = int(spec["players"])
        values = {int(k): float(v) for k, v in spec["values"].items()}
        return table_game(players, values)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid game specification: {exc}") from exc


def cmd_shapley(args) -> int:
    game = _load_game(args.game)
    pair = None
    if args.interaction is not None:
        pair = _parse_int_list(args.interaction, "--interaction")
        if len(pair) != 2 or pair[0] == pair[1]:
            raise UsageError(f"--interaction needs two distinct players, got {args.interaction!r}")
    out: dict = {"players": game.players}
    if args.sampled is not None:
        if args.sampled < 1:
            raise UsageError("--sampled must be >= 1")
        if pair is None:
            raise UsageError("--sampled requires --interaction \"i,j\"")
        est = sampled_pair_interaction(
            game, pair[0], pair[1], args.sampled, RngStream(args.seed)
        )
        out.update(
            {"interaction": est, "coalition": pair, "samples": args.sampled, "seed": args.seed}
        )
    else:
        if game.players > 20:
            raise UsageError(
                f"--exact refuses games with more than 20 players (got {game.players})"
            )
        out["values"] = [shapley_value_exact(game, p) for p in range(game.players)]
        if pair is not None:
            out["interaction"] = shapley_interaction_exact(game, pair)
            out["coalition"] = pair
    _print_json(out)
    return 0


# ---------------------------------------------------------------------------
# geodesic


def cmd_geodesic(args) -> int:
    ds = load(args.data)
    if not (0 <= args.video < ds.n_videos):
        raise DataError(f"video {args.video} out of range for {ds.n_videos} videos")
    block = ds.moments[ds.moment_block(args.video)]
    targets = _parse_int_list(args.targets, "--targets")
    nm = ds.config.moments_per_video
    for t in targets:
        if not (0 <= t < nm):
            raise DataError(f"target {t} out of range for {nm} moments")
    try:
        emb = EmbeddingMatrix.from_array(block, normalized=True)
        graph = build_knn_graph(emb, args.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tables = tables_from_targets(graph, targets, args.g_cap)
    _print_json(graph_to_json_dict(graph, tables))
    return 0


# ---------------------------------------------------------------------------
# compare


def _compare_cell(payload) -> dict:
    data_path, cfg = payload
    ds = load(data_path)
    _, report = train(ds, cfg)
    return report.final()


def cmd_compare(args) -> int:
    started = _utcnow()
    seeds = _parse_int_list(args.seeds, "--seeds")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    for m in modes:
        if m not in ("baseline", "g2l"):
            raise UsageError(f"--modes entries must be baseline or g2l, got {m!r}")
    ablate = tuple(args.ablate)
    for a in ablate:
        if a not in ABLATIONS:
            raise UsageError(f"--ablate must be one of {ABLATIONS}, got {a!r}")
    load(args.data)  # fail fast on bad data before spawning work
    t0 = time.perf_counter()

    cells = [(mode, seed) for mode in modes for seed in seeds]
    payloads = [
        (args.data, _train_config_from_args(args, mode, seed, ablate)) for mode, seed in cells
    ]
    workers = os.environ.get("G2L_THREADS")
    workers = int(workers) if workers else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(cells)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_cell, payloads))
    else:
        results = [_compare_cell(p) for p in payloads]

    metric_keys = ["l_total", "l_vg", "l_cl", "l_ssi", "alignment", "uniformity", "r1", "r5"]
    lines = ["mode,seed," + ",".join(metric_keys)]
    for (mode, seed), res in zip(cells, results):
        lines.append(f"{mode},{seed}," + ",".join(repr(res[k]) for k in metric_keys))
    summary = {}
    for mode in modes:
        vals = {k: np.array([r[k] for (m, _), r in zip(cells, results) if m == mode]) for k in metric_keys}
        summary[mode] = {k: (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0) for k, v in vals.items()}
        lines.append(
            f"{mode},mean±std,"
            + ",".join(f"{summary[mode][k][0]!r}±{summary[mode][k][1]!r}" for k in metric_keys)
        )
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "compare.csv")
    atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        "compare",
        {
            "seeds": seeds,
            "modes": modes,
            "ablate": list(ablate),
            "train": asdict(_train_config_from_args(args, modes[0], seeds[0], ablate)),
        },
        seeds,
        inputs=[args.data],
        outputs=[csv_path],
        started=started,
        timing={"total_seconds": time.perf_counter() - t0, "workers": workers},
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=None, help="default: 1e-2 sgd, 1e-3 adam")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--warmup", type=int, default=0, help="epochs with only the grounding loss in g2l mode")
    p.add_argument("--out-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=0)
    p.add_argument("--group-size", type=int, default=2, help="same-video queries placed together per batch")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--neighbors", type=int, default=10)
    p.add_argument("--g-cap", type=float, default=10.0)
    p.add_argument("--ssi-k", type=int, default=3)
    p.add_argument("--ssi-samples", type=int, default=32)
    p.add_argument("--denominator-mode", choices=("literal", "tempered"), default="literal")
    p.add_argument("--weighting", choices=("geodesic", "plain"), default="geodesic")
    p.add_argument("--negate-weight", action="store_true")
    p.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="g2l",
        description="Geodesic-guided contrastive training and interaction alignment at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=64)
    p.add_argument("--moments", type=int, default=16)
    p.add_argument("--queries", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--overlap", type=float, default=0.4)
    p.add_argument("--annotated", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--orthogonal-topics", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a dual encoder on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("baseline", "g2l"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an encoder checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--n", default="1,5")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shapley", help="exact or sampled game values from a JSON game file")
    p.add_argument("--game", required=True)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--sampled", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interaction", default=None, help='pair "i,j"')
    p.set_defaults(func=cmd_shapley)

    p = sub.add_parser("geodesic", help="dump one video's K-NN graph and geodesic tables")
    p.add_argument("--data", required=True)
    p.add_argument("--video", type=int, required=True)
    p.add_argument("--targets", required=True, help='comma-separated local moment indices')
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--g-cap", type=float, default=10.0)
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("compare", help="train all (mode, seed) cells and summarize final metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--modes", default="baseline,g2l")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
