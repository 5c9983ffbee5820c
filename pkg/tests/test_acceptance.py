"""The nine numbered acceptance criteria, each with its time budget.

A ``AC<n> PASS|FAIL`` line per criterion is printed in the terminal summary.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
from helpers import record
from test_classifier import blobs, central_difference
from test_detection import SWEEP, greedy_oracle, random_instance
from test_evaluation import brute_force_ap, three_image_fixture

from flankid.annotations import make_reid_splits
from flankid.classifier import FitLog, RankedPrediction, objective_and_gradient, predict_ranked_batch, train
from flankid.cli import main
from flankid.cnn import alexnet_conv3, extract_features, feature_dim, random_weights, save_spec, save_weights
from flankid.detection import (EXPERT_REVIEW, FLANK_READY, NO_ANIMAL, Detection, DetectorOutput, nms, route)
from flankid.annotations import LabeledBox
from flankid.dimred import pca_fit, pca_inverse, pca_transform
from flankid.evaluation import aggregate_splits, average_precision, cmc_curve, mean_ap
from flankid.imaging import ImageBuffer
from flankid.pipeline import TRAIN_STAGES, LeakageLog, run_reid
from flankid.synthetic import generate_dataset, small_conv_spec

# the instance family of the NMS check; fixed in advance (see the note in the NMS criterion)
NMS_INSTANCE_SEED = 1


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"
        return False


@pytest.mark.acceptance(1, "conv3 shape fidelity")
def test_conv3_shape_fidelity():
    with Budget(1.0):
        tiger_like, zebra_like = alexnet_conv3(192, 256), alexnet_conv3(128, 256)
        assert feature_dim(tiger_like) == 63360
        assert feature_dim(zebra_like) == 40320
        for spec in (tiger_like, zebra_like):
            h, w, _ = spec.input
            img = ImageBuffer(np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8))
            assert extract_features(img, spec, random_weights(spec, 0)).dim == feature_dim(spec)


@pytest.mark.acceptance(2, "NMS correctness")
def test_nms_correctness():
    # Greedy NMS survivor counts are not monotone for every geometry (a four-box
    # counterexample lives in test_detection). The random family below is fixed
    # by NMS_INSTANCE_SEED; the check is that on it both properties hold.
    with Budget(10.0):
        rng = np.random.default_rng(NMS_INSTANCE_SEED)
        for _ in range(1000):
            dets = random_instance(rng)
            assert len(dets) <= 20
            counts = []
            for t in SWEEP:
                kept = nms(dets, t)
                assert kept == greedy_oracle(dets, t)
                counts.append(len(kept))
            assert counts == sorted(counts), counts


@pytest.mark.acceptance(3, "AP correctness")
def test_ap_correctness():
    with Budget(1.0):
        gts = [record(f"i{k}", [("tiger", 0, 0, 50, 40), ("flank", 10, 10, 40, 30)]) for k in range(3)]
        perfect = [DetectorOutput(r.image_id, [Detection(b, 0.9) for b in r.boxes]) for r in gts]
        assert average_precision(perfect, gts, "tiger").ap == 1.0
        assert average_precision(perfect, gts, "flank").ap == 1.0

        dets, gts = three_image_fixture()
        res = average_precision(dets, gts, "tiger")
        exact, points = brute_force_ap([1, 1, 0, 0, 1], 3)
        assert res.ap == float(exact)
        assert res.precision_recall == [(float(r), float(p)) for r, p in points]
        per_class = [res, average_precision(dets, gts, "flank")]
        assert abs(mean_ap(per_class) - sum(r.ap for r in per_class) / 2) <= 1e-12


@pytest.mark.acceptance(4, "PCA correctness")
def test_pca_correctness():
    with Budget(5.0):
        rng = np.random.default_rng(4)
        for _ in range(200):
            X = rng.standard_normal((20, 8)) * rng.uniform(0.1, 3.0, 8)
            model = pca_fit(X, 0.99)
            ref = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
            np.testing.assert_allclose(model.explained_variance, ref[:model.k], atol=1e-8)
            ratio = np.cumsum(ref) / ref.sum()
            assert ratio[model.k - 1] >= 0.99
            assert model.k == 1 or ratio[model.k - 2] < 0.99
            z = rng.standard_normal((4, model.k))
            np.testing.assert_allclose(pca_transform(model, pca_inverse(model, z)), z, atol=1e-8)


@pytest.mark.acceptance(5, "solver correctness")
def test_solver_correctness():
    with Budget(30.0):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n, d = int(rng.integers(5, 40)), int(rng.integers(1, 10))
            X, t = rng.standard_normal((n, d)), rng.choice([-1.0, 1.0], n)
            w, b = rng.standard_normal(d), float(rng.standard_normal())
            _, gw, gb = objective_and_gradient(w, b, X, t)
            num = central_difference(lambda th: objective_and_gradient(th[:-1], th[-1], X, t)[0], np.append(w, b))
            assert np.linalg.norm(np.append(gw, gb) - num) / np.linalg.norm(num) <= 1e-4

        X, y = blobs(2, spread=1.5)
        log = FitLog()
        train(X, y, 5.0, fit_log=log)
        for hist in log.objectives:
            assert all(b <= a for a, b in zip(hist, hist[1:]))

        X, y = blobs(3, spread=0.3)
        model = train(X, y, 1e6)
        assert all(p.labels[0] == t for p, t in zip(predict_ranked_batch(model, X), y))

        noisy = np.random.default_rng(11)
        X = noisy.standard_normal((80, 12))
        y = np.where(X[:, 0] + 0.8 * noisy.standard_normal(80) > 0, "a", "b")
        assert np.count_nonzero(train(X, y, 1e-3).weights) < np.count_nonzero(train(X, y, 1e6).weights)


@pytest.mark.acceptance(6, "protocol fidelity")
def test_protocol_fidelity(tiny_manifest, tiny_config, tmp_path):
    with Budget(5.0):
        eligible_manifest = replace(tiny_manifest, records=[r for r in tiny_manifest.records
                                                            if r.boxes_with_label("flank")])
        a = make_reid_splits(eligible_manifest, 5, 0.75, seed=3)
        assert a == make_reid_splits(eligible_manifest, 5, 0.75, seed=3)
        result = run_reid(tiny_manifest, tiny_config, tmp_path / "run")
        saved = json.loads((tmp_path / "run" / "splits.json").read_text())
        assert [s["train_ids"] for s in saved] == [s.train_ids for s in a]
        log = LeakageLog.read(tmp_path / "run" / "leakage.jsonl")
        for s, split in enumerate(a):
            assert not set(split.train_ids) & set(split.test_ids)
            for stage in TRAIN_STAGES:
                assert log.touched(s, (stage,)) == set(split.train_ids)
            assert not log.touched(s, ("augment", "pca_fit")) & set(split.test_ids)
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        for entry, split in zip(summary["splits"], a):
            assert entry["n_train_augmented"] == 3 * len(split.train_ids)
        assert len(result.splits) == 5


@pytest.mark.acceptance(7, "CMC properties")
def test_cmc_properties():
    with Budget(1.0):
        labels = [f"id{i}" for i in range(6)]
        rng = np.random.default_rng(7)
        rankings = [[labels[i] for i in rng.permutation(6)] for _ in range(40)]
        truth = [labels[int(rng.integers(6))] for _ in range(40)]
        preds = [RankedPrediction(tuple((c, 1.0 - j / 10) for j, c in enumerate(r))) for r in rankings]
        curve = cmc_curve(preds, truth, max_rank=6)
        assert all(x <= y for x, y in zip(curve.accuracies, curve.accuracies[1:]))
        assert curve.at(6) == 1.0
        direct = [sum(r.index(t) < k for r, t in zip(rankings, truth)) / 40 for k in range(1, 7)]
        assert curve.accuracies == direct

        assert abs(aggregate_splits([0.8, 0.9]).mean - 0.85) <= 1e-15
        assert abs(aggregate_splits([0.8, 0.9]).std - 0.1 / np.sqrt(2)) <= 1e-15
        five = [0.80, 0.83, 0.78, 0.81, 0.805]
        agg = aggregate_splits(five)
        assert agg.mean == pytest.approx(np.mean(five), abs=1e-15)
        assert agg.std == pytest.approx(np.std(five, ddof=1), abs=1e-15)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """20 striped individuals x 10 views, run through the CLI with the default config."""
    root = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    paths = generate_dataset(root / "data", n_individuals=20, n_views=10, seed=0)
    spec = small_conv_spec()
    save_spec(spec, root / "net.yaml")
    save_weights(random_weights(spec, seed=0), root / "weights.ntc")
    generated = time.perf_counter() - t0
    assert main(["ingest", str(paths["annotations"]), str(paths["identities"]), "--out",
                 str(root / "manifest.json"), "--species", "tiger"]) == 0
    t1 = time.perf_counter()
    code = main(["run-reid", str(root / "manifest.json"), "--out-dir", str(root / "run"), "--seed", "0",
                 "--net-spec", str(root / "net.yaml"), "--weights", str(root / "weights.ntc")])
    return {"root": root, "code": code, "run_seconds": time.perf_counter() - t1, "generate_seconds": generated}


@pytest.mark.acceptance(8, "end-to-end synthetic benchmark")
def test_end_to_end_benchmark(benchmark):
    assert benchmark["code"] == 0
    summary = json.loads((benchmark["root"] / "run" / "summary.json").read_text())
    rank1 = [s["rank1"] for s in summary["splits"]]
    print(f"\nrank-1 per split {rank1}, mean {summary['rank1_mean']:.4f} +/- {summary['rank1_std']:.4f}, "
          f"run {benchmark['run_seconds']:.1f}s, generation {benchmark['generate_seconds']:.1f}s")
    assert len(rank1) == 5
    assert summary["config"]["flank_resize"] == [256, 192] and summary["config"]["C"] == 1e6
    assert summary["rank1_mean"] >= 0.90
    assert benchmark["run_seconds"] < 300


@pytest.mark.acceptance(9, "routing fidelity")
def test_routing_fidelity():
    with Budget(1.0):
        body = Detection(LabeledBox("tiger", 10, 10, 300, 200), 0.97)
        flank = Detection(LabeledBox("flank", 60, 40, 240, 170), 0.93)
        outputs = [DetectorOutput("both", [body, flank]), DetectorOutput("tiger_only", [body]),
                   DetectorOutput("empty", [])]
        statuses = [route(o).status for o in outputs]
        assert statuses == [FLANK_READY, EXPERT_REVIEW, NO_ANIMAL]
        assert route(outputs[0]).selected_flank == flank
        assert route(outputs[1]).selected_flank is None
