"""End-to-end acceptance gate.

Each test here implements one release criterion at its stated tolerance and
prints an ACCEPTANCE PASS line when it holds; pytest's own report carries
the fail lines. The MNIST criteria need the IDX files under data/mnist
(scripts/fetch_mnist.py); they fail with instructions when absent.
"""

import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from simtext import cli, clustering, data, index as I, network, seeding, tensor as T
from simtext import workflow as W

ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = Path(os.environ.get("SIMTEXT_MNIST_DIR", ROOT / "data" / "mnist"))

TRAIN_BUDGET_SECONDS = 30 * 60
KNN_BUDGET_SECONDS = 2 * 60
GRADCHECK_BUDGET_SECONDS = 60

SYNTH_LABELS = ["ECHO", "LIMA", "NOVA"]


def _report(name: str, detail: str = "") -> None:
    suffix = f"  [{detail}]" if detail else ""
    print(f"ACCEPTANCE PASS: {name}{suffix}", file=sys.__stdout__, flush=True)


def _mnist_paths():
    paths = {
        "train_images": MNIST_DIR / "train-images-idx3-ubyte",
        "train_labels": MNIST_DIR / "train-labels-idx1-ubyte",
        "test_images": MNIST_DIR / "t10k-images-idx3-ubyte",
        "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte",
    }
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        pytest.fail(
            "MNIST IDX files missing; run scripts/fetch_mnist.py first. "
            f"Missing: {missing}"
        )
    return paths


# ---------------------------------------------------------------------------
# shared trained artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def mnist_model(tmp_path_factory):
    """Criterion 3's training run: 20k MNIST pairs, 5 epochs, fixed seed."""
    paths = _mnist_paths()
    root = tmp_path_factory.mktemp("mnist-model")
    ckpt = root / "mnist.dssn"
    t0 = time.monotonic()
    rc = cli.main([
        "train",
        "--data", f"idx:{paths['train_images']}:{paths['train_labels']}",
        "--pairs", "20000", "--epochs", "5", "--seed", "7",
        "--out", str(ckpt),
    ])
    train_seconds = time.monotonic() - t0
    assert rc == 0
    return {"ckpt": ckpt, "train_seconds": train_seconds, "paths": paths,
            "root": root}


@pytest.fixture(scope="session")
def synth_model(tmp_path_factory):
    """Model + artifacts for the synthetic-corpus workflow/cluster criteria."""
    root = tmp_path_factory.mktemp("synth-model")

    def config(name, seed, per_label=40, noise=0.02):
        path = root / f"{name}.json"
        path.write_text(json.dumps({
            "labels": SYNTH_LABELS, "per_label": per_label,
            "scale": 2, "slant": 0.1, "noise": noise, "seed": seed,
        }))
        return f"synthetic:{path}"

    train = config("train", seed=1000)
    ckpt = root / "synth.dssn"
    rc = cli.main(["train", "--data", train, "--pairs", "1500", "--epochs", "4",
                   "--seed", "11", "--out", str(ckpt)])
    assert rc == 0
    tsv = root / "train-emb.tsv"
    assert cli.main(["embed", "--checkpoint", str(ckpt), "--data", train,
                     "--out", str(tsv)]) == 0
    midx = root / "train.midx"
    assert cli.main(["knn-build", "--embeddings", str(tsv),
                     "--out", str(midx)]) == 0
    return {
        "root": root, "ckpt": ckpt, "tsv": tsv, "midx": midx,
        "train": train,
        "validation": config("validation", seed=2000),
        "heldout": config("heldout", seed=3000),
        "cluster": config("cluster", seed=4000, per_label=50, noise=0.01),
    }


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_gradient_correctness():
    """Combined-loss analytic gradients vs central differences, 20 seeds."""
    t0 = time.monotonic()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        spec = network.NetworkSpec(
            input_h=8, input_w=8, conv1_channels=2, conv1_kernel=5,
            conv2_channels=3, conv2_kernel=1, ip_width=7,
            relu_head_dim=4, feat_dim=3)
        params = network.init_params(spec, rng)
        img_a = rng.random((1, 1, 8, 8))
        img_b = rng.random((1, 1, 8, 8))
        ys = np.array([float(seed % 2)])
        for name in params:
            def f(w, name=name):
                p = dict(params)
                p[name] = w
                losses, grads = network.pair_batch_grads(spec, p, img_a, img_b, ys)
                return float(losses.mean()), grads[name]

            worst = max(worst, T.grad_check(f, params[name].copy(), eps=1e-4))
    elapsed = time.monotonic() - t0
    assert worst < 1e-3
    assert elapsed < GRADCHECK_BUDGET_SECONDS
    _report("gradient correctness",
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_loss_identities():
    """Closed-form pair-loss values and combined-loss additivity."""
    loss, _ = network.contrastive_loss(0.0, 0, 1.0)
    assert abs(loss) < 1e-12
    loss, _ = network.contrastive_loss(1.2, 1, 1.0)
    assert abs(loss) < 1e-12
    loss, _ = network.contrastive_loss(0.4, 1, 1.0)
    assert abs(loss - 0.18) < 1e-12

    rng = np.random.default_rng(0)
    spec = network.NetworkSpec(
        input_h=8, input_w=8, conv1_channels=2, conv1_kernel=5,
        conv2_channels=3, conv2_kernel=1, ip_width=7, relu_head_dim=4,
        feat_dim=3, head_weights=(0.5, 1.5, 2.0))
    params = network.init_params(spec, rng)
    emb_a = network.forward_embed(spec, params, rng.random((1, 8, 8)))
    emb_b = network.forward_embed(spec, params, rng.random((1, 8, 8)))
    for y in (0, 1):
        total, per_head = network.combined_loss(emb_a, emb_b, y, spec)
        assert abs(total - sum(per_head)) < 1e-12
    _report("loss identities", "closed forms and additivity to 1e-12")


def test_mnist_pair_similarity_analog(mnist_model):
    """Threshold picked on train pairs keeps held-out pair error <= 10%."""
    assert mnist_model["train_seconds"] <= TRAIN_BUDGET_SECONDS
    spec, params = network.load_checkpoint(mnist_model["ckpt"])
    paths = mnist_model["paths"]

    train = data.read_idx(paths["train_images"], paths["train_labels"])
    test = data.read_idx(paths["test_images"], paths["test_labels"])

    def pair_distances(samples, n_pairs, stream_name):
        pool = data.build_pair_pool(samples, seeding.stream(7, stream_name),
                                    n_pairs)
        imgs = np.stack([p.a.pixels for p in pool] + [p.b.pixels for p in pool])
        feats = network.embed_batch(spec, params, imgs)["feat"]
        n = len(pool)
        dists = np.sqrt(((feats[:n] - feats[n:]) ** 2).sum(axis=1))
        return [(float(d), p.y) for d, p in zip(dists, pool)]

    train_scored = pair_distances(train, 5000, "theta-select")
    theta, _, _ = I.select_similarity_threshold(train_scored)
    heldout = pair_distances(test, 5000, "heldout-pairs")
    wrong = sum((d <= theta) != (y == 0) for d, y in heldout)
    error = wrong / len(heldout)
    assert error <= 0.10
    _report("MNIST pair-similarity analog",
            f"train {mnist_model['train_seconds']:.0f}s, "
            f"held-out error {error:.4f} at theta {theta:.3f}")


def test_mnist_knn_recognition(mnist_model):
    """1-NN over feat embeddings: 5k train refs, 1k test queries, >=90%."""
    spec, params = network.load_checkpoint(mnist_model["ckpt"])
    paths = mnist_model["paths"]
    train = data.read_idx(paths["train_images"], paths["train_labels"])[:5000]
    test = data.read_idx(paths["test_images"], paths["test_labels"])[:1000]

    t0 = time.monotonic()
    train_feats = network.embed_batch(
        spec, params, np.stack([s.pixels for s in train]))["feat"]
    test_feats = network.embed_batch(
        spec, params, np.stack([s.pixels for s in test]))["feat"]
    idx = I.build_index([(s.id, train_feats[i], s.label)
                         for i, s in enumerate(train)])
    correct = sum(idx.knn_predict(test_feats[i], 1).label == s.label
                  for i, s in enumerate(test))
    elapsed = time.monotonic() - t0
    accuracy = correct / len(test)
    assert accuracy >= 0.90
    assert elapsed < KNN_BUDGET_SECONDS
    _report("MNIST KNN recognition",
            f"1-NN accuracy {accuracy:.3f} in {elapsed:.0f}s")


def test_threshold_selection_oracle_equivalence():
    """Both threshold searches equal brute force on 200 random instances."""
    from test_index import brute_force_threshold
    from test_workflow import brute_force_grid

    rng = np.random.default_rng(123)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        scored = [(float(rng.random() * 2), int(rng.integers(2)))
                  for _ in range(n)]
        if not any(y == 0 for _, y in scored):
            scored[0] = (scored[0][0], 0)
        if not any(y == 1 for _, y in scored):
            scored[-1] = (scored[-1][0], 1)
        theta, fp, fn = I.select_similarity_threshold(scored)
        _, theta_bf, fp_bf, fn_bf = brute_force_threshold(scored)
        assert theta == theta_bf and (fp, fn) == (fp_bf, fn_bf)

    grid = W.grid_values(0.5, 1.0, 0.05)
    for trial in range(200):
        n = int(rng.integers(2, 30))
        scored = [(float(rng.random()), bool(rng.integers(2)))
                  for _ in range(n)]
        target = float(rng.choice([0.0, 0.005, 0.1]))
        mode = W.MODES[trial % 2]
        (eff, t2, t1), feasible = brute_force_grid(scored, target, mode, grid)
        got = W.grid_search(scored, target_hcfn=target, mode=mode, step=0.05)
        assert got.feasible == feasible
        assert (got.thresholds.theta1, got.thresholds.theta2) == (t1, t2)
        assert abs(got.efficiency - eff) < 1e-12
    _report("threshold-selection oracle equivalence",
            "200 + 200 random instances, exact")


def test_workflow_guarantees(synth_model, tmp_path):
    """Assistive zero-error, robotic HCFN on held-out, efficiency bounds."""
    snapshots = []

    def simulate(tag, dataset, mode, theta1, theta2):
        metrics_path = tmp_path / f"{tag}-metrics.json"
        rc = cli.main([
            "simulate", "--checkpoint", str(synth_model["ckpt"]),
            "--index", str(synth_model["midx"]), "--test", dataset,
            "--mode", mode, "--theta1", str(theta1), "--theta2", str(theta2),
            "--seed", "21",
            "--metrics-out", str(metrics_path),
            "--audit-out", str(tmp_path / f"{tag}-audit.jsonl"),
        ])
        assert rc == 0
        snapshot = json.loads(metrics_path.read_text())
        snapshots.append(snapshot)
        return snapshot, tmp_path / f"{tag}-audit.jsonl"

    # assistive + perfect oracle: no unchecked model output can be wrong
    snapshot, audit = simulate("assistive", synth_model["heldout"],
                               W.ASSISTIVE, 0.94, 1.0)
    assert snapshot["counters"]["a2"] + snapshot["counters"]["b2"] == 0
    assert snapshot["counters"]["a1"] == 0
    assert snapshot["counters"]["fn_num"] == 0

    # robotic with thresholds grid-searched on a validation split
    grid_out = tmp_path / "grid.json"
    rc = cli.main([
        "grid-search", "--checkpoint", str(synth_model["ckpt"]),
        "--index", str(synth_model["midx"]),
        "--validation", synth_model["validation"],
        "--target-hcfn", "0.005", "--out", str(grid_out),
    ])
    assert rc == 0
    chosen = json.loads(grid_out.read_text())
    assert chosen["feasible"]
    snapshot, _ = simulate("robotic", synth_model["heldout"], W.ROBOTIC,
                           chosen["theta1"], chosen["theta2"])
    assert snapshot["metrics"]["hcfn"] is not None
    assert snapshot["metrics"]["hcfn"] <= 0.005

    for snap in snapshots:
        assert 0.0 <= snap["metrics"]["efficiency"] <= 1.0
    _report("workflow guarantees",
            f"assistive zero wrong finals; robotic held-out HCFN "
            f"{snapshot['metrics']['hcfn']:.4f} at "
            f"(theta1={chosen['theta1']}, theta2={chosen['theta2']})")


def test_efficiency_arithmetic():
    counters = W.WorkflowCounters(a1=2, b1=2, a2=3, b2=3, t=10)
    assert W.metrics(counters)["efficiency"] == 0.8
    _report("efficiency arithmetic", "((2+2)/2+3+3)/10 == 0.8 exactly")


def test_clustering_analog(synth_model, tmp_path):
    """Agglomerative ARI on a 3-class corpus plus the exact ARI properties."""
    emb = tmp_path / "cluster-emb.tsv"
    rc = cli.main(["embed", "--checkpoint", str(synth_model["ckpt"]),
                   "--data", synth_model["cluster"], "--out", str(emb)])
    assert rc == 0
    ids, labels, heads = cli.read_embeddings_tsv(emb)
    assert len(ids) == 150
    part = clustering.agglomerative(ids, heads["feat"], k=3)
    truth = clustering.from_labels(ids, labels)
    ari = clustering.adjusted_rand_index(part, truth)
    assert ari >= 0.9

    # exact ARI property suite
    p = clustering.Partition({"a": 0, "b": 0, "c": 1, "d": 1})
    q = clustering.Partition({"a": 1, "b": 1, "c": 0, "d": 0})
    assert clustering.adjusted_rand_index(p, p) == 1.0
    assert clustering.adjusted_rand_index(p, q) == 1.0
    from test_clustering import ari_pair_counting_oracle

    r = clustering.Partition({"a": 0, "b": 1, "c": 0, "d": 1})
    assert abs(clustering.adjusted_rand_index(p, r)
               - ari_pair_counting_oracle(p, r)) < 1e-12
    _report("clustering analog", f"3-class feat ARI {ari:.3f}")


def test_cli_determinism(synth_model, tmp_path):
    """Every artifact-producing subcommand is bitwise reproducible."""
    corpus = synth_model["train"]

    def run_twice(name, argv_fn):
        blobs = []
        for tag in ("one", "two"):
            out_dir = tmp_path / f"{name}-{tag}"
            out_dir.mkdir()
            outputs = argv_fn(out_dir)
            blobs.append({p.name: p.read_bytes() for p in outputs})
        assert blobs[0] == blobs[1], f"{name} not reproducible"

    def train_fn(out):
        ckpt = out / "m.dssn"
        cli.main(["train", "--data", corpus, "--epochs", "1", "--pairs", "100",
                  "--seed", "5", "--conv1-channels", "6",
                  "--conv2-channels", "10", "--ip-width", "48",
                  "--feat-dim", "5", "--out", str(ckpt)])
        return [ckpt]

    def embed_fn(out):
        tsv = out / "e.tsv"
        cli.main(["embed", "--checkpoint", str(synth_model["ckpt"]),
                  "--data", corpus, "--out", str(tsv)])
        return [tsv]

    def knn_fn(out):
        midx = out / "m.midx"
        cli.main(["knn-build", "--embeddings", str(synth_model["tsv"]),
                  "--out", str(midx)])
        return [midx]

    def evalsim_fn(out):
        rep = out / "r.json"
        cli.main(["eval-sim", "--checkpoint", str(synth_model["ckpt"]),
                  "--pairs-from", corpus, "--num-pairs", "100", "--seed", "2",
                  "--out", str(rep)])
        return [rep]

    def simulate_fn(out):
        m, a = out / "m.json", out / "a.jsonl"
        cli.main(["simulate", "--checkpoint", str(synth_model["ckpt"]),
                  "--index", str(synth_model["midx"]), "--test", corpus,
                  "--oracle-error", "0.1", "--seed", "3",
                  "--metrics-out", str(m), "--audit-out", str(a)])
        return [m, a]

    def grid_fn(out):
        rep = out / "g.json"
        cli.main(["grid-search", "--checkpoint", str(synth_model["ckpt"]),
                  "--index", str(synth_model["midx"]),
                  "--validation", corpus, "--out", str(rep)])
        return [rep]

    def cluster_fn(out):
        p, s = out / "p.json", out / "s.json"
        cli.main(["cluster-eval", "--embeddings", str(synth_model["tsv"]),
                  "--algo", "kmeans", "--k", "3", "--seed", "4",
                  "--partition-out", str(p), "--scores-out", str(s)])
        return [p, s]

    for name, fn in (("train", train_fn), ("embed", embed_fn),
                     ("knn-build", knn_fn), ("eval-sim", evalsim_fn),
                     ("simulate", simulate_fn), ("grid-search", grid_fn),
                     ("cluster-eval", cluster_fn)):
        run_twice(name, fn)

    # serve: identical construction yields identical responses
    from fastapi.testclient import TestClient

    def serve_state(audit_name):
        args = cli.build_parser().parse_args([
            "serve", "--checkpoint", str(synth_model["ckpt"]),
            "--index", str(synth_model["midx"]), "--data", corpus,
            "--seed", "0",
            "--audit-out", str(tmp_path / audit_name)])
        _, app = cli.build_service(args)
        client = TestClient(app)
        metrics = client.get("/api/v1/metrics").content
        task_res = client.get("/api/v1/tasks/next?annotator=a1")
        task = task_res.content
        item_id = task_res.json()["item_id"] if task_res.status_code == 200 \
            else json.loads(metrics)["counters"]
        image = client.get(f"/api/v1/images/{item_id}").content
        return metrics, task, image

    assert serve_state("audit-a.jsonl") == serve_state("audit-b.jsonl")
    _report("CLI determinism", "all subcommands bitwise reproducible")
