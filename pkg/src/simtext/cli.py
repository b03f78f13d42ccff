"""Operator command line: train, embed, index, evaluate, simulate, serve.

Dataset arguments accept three spec forms:

    idx:IMAGES:LABELS      big-endian IDX image/label file pair
    synthetic:CONFIG.json  built-in renderer corpus (labels, per_label, style)
    DIRECTORY              folder with manifest.jsonl + PGM images

All subcommands take --seed and derive per-module RNG streams from it, so
every artifact is bitwise reproducible for a fixed seed. Progress goes to
stdout as JSON lines; artifacts carry no timestamps. Any flag default can be
overridden with a SIMTEXT_<FLAG> environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import clustering, data, index as index_mod, network, seeding, workflow

HEAD_COLUMNS = ("feat", "conv2", "relu", "ip")
HEAD_KEYS = {"feat": "feat", "conv2": "conv2_head", "relu": "relu_head", "ip": "ip"}


class CliError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _env(name: str, default, cast=str):
    raw = os.environ.get(f"SIMTEXT_{name.upper().replace('-', '_')}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as e:
        raise CliError(f"bad SIMTEXT_{name.upper()} value {raw!r}: {e}")


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def load_dataset(spec: str, seed: int, canvas: Optional[Tuple[int, int]] = None
                 ) -> List[data.ImageSample]:
    """Resolve a dataset spec string into samples."""
    try:
        if spec.startswith("idx:"):
            parts = spec[4:].rsplit(":", 1)
            if len(parts) != 2:
                raise data.DataError(f"idx spec needs idx:IMAGES:LABELS, got {spec!r}")
            samples = data.read_idx(parts[0], parts[1])
            if canvas is not None and samples and samples[0].pixels.shape[1:] != canvas:
                for s in samples:
                    s.pixels = data.to_canvas(s.pixels[0], canvas)
            return samples
        if spec.startswith("synthetic:"):
            config = json.loads(Path(spec[10:]).read_text("utf-8"))
            style = data.SynthStyle(
                scale=int(config.get("scale", 2)),
                slant=float(config.get("slant", 0.0)),
                noise=float(config.get("noise", 0.0)),
                canvas=tuple(config.get("canvas", (28, 56))),
            )
            corpus_seed = int(config.get("seed", seeding.stream_seed(seed, "synthetic-data")))
            return data.make_corpus(config["labels"], int(config["per_label"]),
                                    style, seed=corpus_seed)
        return data.read_manifest(spec, canvas=canvas or (28, 56))
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise data.DataError(f"cannot load dataset {spec!r}: {e}") from e


def _dataset_canvas(samples: Sequence[data.ImageSample]) -> Tuple[int, int]:
    if not samples:
        raise data.DataError("dataset is empty")
    return samples[0].pixels.shape[1:]


# ---------------------------------------------------------------------------
# embeddings TSV
# ---------------------------------------------------------------------------

def write_embeddings_tsv(path, samples: Sequence[data.ImageSample],
                         heads: Dict[str, np.ndarray]) -> None:
    dims = {col: heads[HEAD_KEYS[col]].shape[1] for col in HEAD_COLUMNS}
    with open(path, "w", encoding="utf-8") as f:
        cols = ["id", "label"]
        for col in HEAD_COLUMNS:
            cols.extend(f"{col}_{i}" for i in range(dims[col]))
        f.write("\t".join(cols) + "\n")
        for i, s in enumerate(samples):
            row = [s.id, s.label]
            for col in HEAD_COLUMNS:
                row.extend(repr(float(v)) for v in heads[HEAD_KEYS[col]][i])
            f.write("\t".join(row) + "\n")


def read_embeddings_tsv(path) -> Tuple[List[str], List[str], Dict[str, np.ndarray]]:
    lines = Path(path).read_text("utf-8").splitlines()
    if not lines:
        raise data.DataError(f"{path}: empty embeddings file")
    header = lines[0].split("\t")
    if header[:2] != ["id", "label"]:
        raise data.DataError(f"{path}: expected id/label leading columns")
    groups: Dict[str, List[int]] = {}
    for pos, name in enumerate(header[2:], start=2):
        prefix = name.rsplit("_", 1)[0]
        groups.setdefault(prefix, []).append(pos)
    ids, labels = [], []
    values: Dict[str, List[List[float]]] = {g: [] for g in groups}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise data.DataError(f"{path}:{lineno}: wrong column count")
        ids.append(parts[0])
        labels.append(parts[1])
        for g, cols in groups.items():
            values[g].append([float(parts[c]) for c in cols])
    return ids, labels, {g: np.array(v) for g, v in values.items()}


def _embed_dataset(spec_path: str, dataset: Sequence[data.ImageSample]
                   ) -> Dict[str, np.ndarray]:
    net_spec, params = network.load_checkpoint(spec_path)
    canvas = (net_spec.input_h, net_spec.input_w)
    if _dataset_canvas(dataset) != canvas:
        raise data.DataError(
            f"dataset canvas {_dataset_canvas(dataset)} != network input {canvas}"
        )
    images = np.stack([s.pixels for s in dataset])
    return network.embed_batch(net_spec, params, images)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        dataset = load_dataset(args.data, args.seed)
        canvas = _dataset_canvas(dataset)
        spec = network.NetworkSpec(
            input_h=canvas[0], input_w=canvas[1],
            conv1_channels=args.conv1_channels, conv2_channels=args.conv2_channels,
            ip_width=args.ip_width, feat_dim=args.feat_dim, margin=args.margin,
        )
        params = network.init_params(spec, seeding.stream(args.seed, "init"))
        opt = network.AdadeltaState.zeros(params)

        if args.pretrain_idx:
            pre = load_dataset(f"idx:{args.pretrain_idx}", args.seed, canvas=canvas)
            pool = data.build_pair_pool(
                pre, seeding.stream(args.seed, "pretrain-pairs"), args.pretrain_pairs)
            params, opt, history = network.fit_pairs(
                spec, params, opt, pool, epochs=args.pretrain_epochs,
                log=lambda e, l: _log("epoch", phase="pretrain", epoch=e, mean_loss=l))
        pool = data.build_pair_pool(
            dataset, seeding.stream(args.seed, "pairs"), args.pairs)
        params, opt, history = network.fit_pairs(
            spec, params, opt, pool, epochs=args.epochs,
            log=lambda e, l: _log("epoch", phase="finetune", epoch=e, mean_loss=l))
        network.save_checkpoint(args.out, spec, params)
        _log("checkpoint", path=str(args.out),
             first_loss=history[0], last_loss=history[-1])
        return 0
    except (data.DataError, network.TrainingError, ValueError) as e:
        raise CliError(str(e))


def cmd_embed(args) -> int:
    try:
        dataset = load_dataset(args.data, args.seed)
        heads = _embed_dataset(args.checkpoint, dataset)
        write_embeddings_tsv(args.out, dataset, heads)
        _log("embeddings", path=str(args.out), rows=len(dataset))
        return 0
    except (data.DataError, network.CheckpointError, ValueError) as e:
        raise CliError(str(e))


def cmd_knn_build(args) -> int:
    try:
        ids, labels, heads = read_embeddings_tsv(args.embeddings)
        if "feat" not in heads:
            raise data.DataError("embeddings file has no feat columns")
        idx = index_mod.build_index(list(zip(ids, heads["feat"], labels)))
        index_mod.save_index(args.out, idx)
        _log("index", path=str(args.out), entries=len(idx))
        return 0
    except (data.DataError, index_mod.ManifoldError) as e:
        raise CliError(str(e))


def cmd_eval_sim(args) -> int:
    try:
        dataset = load_dataset(args.pairs_from, args.seed)
        rng = seeding.stream(args.seed, "eval-pairs")
        pool = data.build_pair_pool(dataset, rng, args.num_pairs)
        net_spec, params = network.load_checkpoint(args.checkpoint)
        images = np.stack([p.a.pixels for p in pool] + [p.b.pixels for p in pool])
        feats = network.embed_batch(net_spec, params, images)["feat"]
        n = len(pool)
        dists = np.sqrt(((feats[:n] - feats[n:]) ** 2).sum(axis=1))
        scored = [(float(d), p.y) for d, p in zip(dists, pool)]
        theta, fp, fn = index_mod.select_similarity_threshold(scored)
        wrong = sum((d <= theta) != (y == 0) for d, y in scored)
        report = {
            "theta_sim": theta, "fp": fp, "fn": fn,
            "error": wrong / n, "num_pairs": n,
        }
        text = json.dumps(report, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
        return 0
    except (data.DataError, network.CheckpointError, ValueError) as e:
        raise CliError(str(e))


def _load_work_items(args, dataset) -> Tuple[List[workflow.WorkItem], index_mod.ManifoldIndex]:
    idx = index_mod.load_index(args.index)
    heads = _embed_dataset(args.checkpoint, dataset)
    feats = heads["feat"]
    if feats.shape[1] != idx.dim:
        raise data.DataError(f"feat dim {feats.shape[1]} != index dim {idx.dim}")
    items = [workflow.WorkItem(id=s.id, feat=feats[i], truth=s.label)
             for i, s in enumerate(dataset)]
    return items, idx


def cmd_simulate(args) -> int:
    try:
        dataset = load_dataset(args.test, args.seed)
        items, idx = _load_work_items(args, dataset)
        oracle = workflow.SimulatedOracle(
            truth={s.id: s.label for s in dataset},
            error_rate=args.oracle_error,
            seed=seeding.stream_seed(args.seed, "oracle"),
        )
        result = workflow.run(
            items, idx, oracle, workflow.Thresholds(args.theta1, args.theta2),
            args.mode, k=args.k, update_dictionary=not args.freeze_dictionary)
        snapshot = workflow.metrics_snapshot(result.counters)
        snapshot["parked"] = result.parked
        Path(args.metrics_out).write_text(
            json.dumps(snapshot, sort_keys=True) + "\n", encoding="utf-8")
        workflow.write_audit_jsonl(args.audit_out, result.records)
        _log("simulate", items=len(items), metrics=snapshot["metrics"])
        return 0
    except (data.DataError, network.CheckpointError,
            index_mod.ManifoldError, ValueError) as e:
        raise CliError(str(e))


def cmd_grid_search(args) -> int:
    try:
        dataset = load_dataset(args.validation, args.seed)
        items, idx = _load_work_items(args, dataset)
        scored = []
        for item in items:
            pred = idx.knn_predict(item.feat, min(args.k, len(idx)))
            correct = pred.label == data.canonical_label(item.truth)
            scored.append((pred.confidence, correct))
        result = workflow.grid_search(
            scored, target_hcfn=args.target_hcfn, mode=args.mode,
            start=args.start, stop=args.stop, step=args.step)
        report = {
            "theta1": result.thresholds.theta1,
            "theta2": result.thresholds.theta2,
            "feasible": result.feasible,
            "efficiency": result.efficiency,
            "hcfn": result.hcfn,
        }
        text = json.dumps(report, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
        return 0
    except (data.DataError, network.CheckpointError,
            index_mod.ManifoldError, ValueError) as e:
        raise CliError(str(e))


def cmd_cluster_eval(args) -> int:
    try:
        ids, labels, head_vectors = read_embeddings_tsv(args.embeddings)
        truth = clustering.from_labels(ids, labels)
        heads = HEAD_COLUMNS if args.head == "all" else (args.head,)
        partitions: Dict[str, Dict[str, int]] = {}
        ari: Dict[str, float] = {}
        params: Dict[str, object] = {"algorithm": args.algo}
        for head in heads:
            if head not in head_vectors:
                raise data.DataError(f"embeddings file has no {head} columns")
            vectors = head_vectors[head]
            if args.algo == "kmeans":
                part = clustering.kmeans(ids, vectors, k=args.k,
                                         seed=seeding.stream_seed(args.seed, "kmeans"))
                params["k"] = args.k
            elif args.algo == "agglomerative":
                part = clustering.agglomerative(
                    ids, vectors,
                    k=args.k if args.distance is None else None,
                    distance=args.distance)
                params["k"] = args.k if args.distance is None else None
                params["distance"] = args.distance
            elif args.algo == "dbscan":
                part = clustering.dbscan(ids, vectors, eps=args.eps,
                                         min_pts=args.min_pts)
                params["eps"] = args.eps
                params["min_pts"] = args.min_pts
            else:
                raise data.DataError(f"unknown algorithm {args.algo!r}")
            partitions[head] = part.assignment
            ari[head] = clustering.adjusted_rand_index(part, truth)
        Path(args.partition_out).write_text(
            json.dumps(partitions, sort_keys=True) + "\n", encoding="utf-8")
        scores = {"algorithm": args.algo, "params": params, "ari": ari}
        Path(args.scores_out).write_text(
            json.dumps(scores, sort_keys=True) + "\n", encoding="utf-8")
        print(json.dumps(scores, sort_keys=True))
        return 0
    except (data.DataError, clustering.ClusteringError) as e:
        raise CliError(str(e))


def build_service(args):
    """Assemble the annotation service and app from serve-style args."""
    from .service import AnnotationService, create_app

    dataset = load_dataset(args.data, args.seed)
    items, idx = _load_work_items(args, dataset)
    service = AnnotationService(
        samples=dataset, items=items, index=idx,
        thresholds=workflow.Thresholds(args.theta1, args.theta2),
        mode=args.mode, k=args.k, lease_ttl=args.lease_ttl,
        update_dictionary=not args.freeze_dictionary,
        audit_path=args.audit_out)
    return service, create_app(service, static_dir=args.static_dir)


def cmd_serve(args) -> int:
    import uvicorn

    try:
        service, app = build_service(args)
        _log("serving", port=args.port, queue_depth=service.queue_depth())
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return 0
    except (data.DataError, network.CheckpointError,
            index_mod.ManifoldError, ValueError) as e:
        raise CliError(str(e))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_env("seed", 0, int))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtext", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the network, optionally after pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrain-idx", default=None, metavar="IMAGES:LABELS")
    p.add_argument("--epochs", type=int, default=_env("epochs", 5, int))
    p.add_argument("--pretrain-epochs", type=int, default=1)
    p.add_argument("--pairs", type=int, default=_env("pairs", 2000, int))
    p.add_argument("--pretrain-pairs", type=int, default=2000)
    p.add_argument("--conv1-channels", type=int, default=20)
    p.add_argument("--conv2-channels", type=int, default=50)
    p.add_argument("--ip-width", type=int, default=500)
    p.add_argument("--feat-dim", type=int, default=10)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset to a TSV of all heads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("knn-build", help="build a manifold index from embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_knn_build)

    p = sub.add_parser("eval-sim", help="pair-similarity threshold and error report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs-from", required=True)
    p.add_argument("--num-pairs", type=int, default=1000)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_sim)

    p = sub.add_parser("simulate", help="run the workflow with a simulated oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mode", choices=workflow.MODES, default=workflow.ROBOTIC)
    p.add_argument("--theta1", type=float, default=_env("theta1", 0.94, float))
    p.add_argument("--theta2", type=float, default=_env("theta2", 0.99, float))
    p.add_argument("--oracle-error", type=float, default=0.0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--freeze-dictionary", action="store_true")
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--audit-out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grid-search", help="search thresholds for max efficiency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--target-hcfn", type=float, default=0.005)
    p.add_argument("--mode", choices=workflow.MODES, default=workflow.ROBOTIC)
    p.add_argument("--start", type=float, default=0.5)
    p.add_argument("--stop", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("cluster-eval", help="cluster embeddings and score ARI")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--algo", choices=("kmeans", "agglomerative", "dbscan"),
                   default="agglomerative")
    p.add_argument("--head", choices=(*HEAD_COLUMNS, "all"), default="all")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--min-pts", type=int, default=4)
    p.add_argument("--partition-out", required=True)
    p.add_argument("--scores-out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_cluster_eval)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    for name in ("checkpoint", "index", "data"):
        default = _env(name, None)
        p.add_argument(f"--{name}", default=default, required=default is None)
    p.add_argument("--host", default=_env("host", "127.0.0.1"))
    p.add_argument("--port", type=int, default=_env("port", 8000, int))
    p.add_argument("--mode", choices=workflow.MODES, default=workflow.ROBOTIC)
    p.add_argument("--theta1", type=float, default=_env("theta1", 0.94, float))
    p.add_argument("--theta2", type=float, default=_env("theta2", 0.99, float))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--lease-ttl", type=float, default=_env("lease_ttl", 600.0, float))
    p.add_argument("--freeze-dictionary", action="store_true")
    p.add_argument("--audit-out", default=None)
    p.add_argument("--static-dir", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
