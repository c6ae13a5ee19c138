"""Optimiser, schedule, checkpoints, metrics, training loop and embedding export."""

import csv
import json
import math

import numpy as np
import pytest

from loopsign import tensor as T
from loopsign import train as train_mod
from loopsign.config import RunConfig
from loopsign.data import DatasetManifest, SyntheticTaskSpec, generate_synthetic, load_batch
from loopsign.errors import ConfigError, DataError
from loopsign.losses import embed_sign
from loopsign.train import (
    AdamW,
    TrainingDiverged,
    accuracy,
    clip_gradients,
    evaluate,
    export_embeddings,
    learning_rate,
    load_checkpoint,
    sign_embeddings,
    train,
)

TINY = {
    "model.d_gcn": 4,
    "model.d_model": 8,
    "model.heads": 2,
    "model.d_ff": 16,
    "align.d_hyp": 4,
    "train.batch_size": 4,
    "train.warmup": 2,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return generate_synthetic(SyntheticTaskSpec(num_classes=3, samples_per_class=6, frames=6, seed=1), root)


def tiny_config(tmp_path, **overrides):
    return RunConfig().with_overrides({**TINY, "output_dir": str(tmp_path / "run"), **overrides})


class TestAdamW:
    def test_first_step_is_signed_lr(self):
        w = T.Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        w.grad = np.array([[0.5, -3.0]])
        AdamW({"w": w}, lr=0.1, weight_decay=0.0).step()
        np.testing.assert_allclose(w.data, [[0.9, -1.9]], atol=1e-7)

    def test_decoupled_decay_on_matrices_only(self):
        w = T.Tensor(np.ones((2, 2)), requires_grad=True)
        b = T.Tensor(np.ones(2), requires_grad=True)
        w.grad = np.zeros((2, 2))
        b.grad = np.zeros(2)
        AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(w.data, 0.95)
        np.testing.assert_allclose(b.data, 1.0)

    def test_parameters_without_grad_untouched(self):
        w = T.Tensor(np.ones((2, 2)), requires_grad=True)
        AdamW({"w": w}, lr=0.1).step()
        np.testing.assert_array_equal(w.data, 1.0)

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(0)
        w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype=np.float64)
        ref = w.data.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        opt = AdamW({"w": w}, lr=0.01, weight_decay=0.1)
        for t in range(1, 6):
            g = rng.normal(size=ref.shape)
            w.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * 0.1 * ref
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(w.data, ref, rtol=1e-12)


class TestSchedule:
    def test_warmup_then_cosine(self):
        cfg = RunConfig().with_overrides({"train.lr": 1.0, "train.warmup": 4, "train.steps": 14}).train
        assert learning_rate(cfg, 0) == pytest.approx(0.25)
        assert learning_rate(cfg, 3) == pytest.approx(1.0)
        assert learning_rate(cfg, 4) == pytest.approx(1.0)
        assert learning_rate(cfg, 9) == pytest.approx(0.5)
        assert learning_rate(cfg, 14) == pytest.approx(0.0, abs=1e-12)

    def test_constant(self):
        cfg = RunConfig().with_overrides({"train.lr": 0.3, "train.warmup": 0, "train.schedule": "constant"}).train
        assert learning_rate(cfg, 100) == 0.3


class TestClipping:
    def test_global_norm_clip(self):
        a = T.Tensor(np.zeros(2), requires_grad=True)
        b = T.Tensor(np.zeros(1), requires_grad=True)
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([4.0])
        norm = clip_gradients({"a": a, "b": b}, 1.0)
        assert norm == pytest.approx(5.0)
        total = math.sqrt((a.grad**2).sum() + (b.grad**2).sum())
        assert total == pytest.approx(1.0, rel=1e-9)

    def test_below_threshold_unchanged(self):
        a = T.Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, 0.4])
        clip_gradients({"a": a}, 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])


class TestAccuracy:
    def test_hand_computed_example(self):
        golds = ["a", "a", "a", "b"]
        preds = ["a", "a", "a", "a"]
        acc = accuracy(preds, golds)
        assert acc["p_i"] == 0.75
        assert acc["p_c"] == 0.5

    def test_perfect(self):
        acc = accuracy(["x", "y"], ["x", "y"])
        assert acc["p_i"] == acc["p_c"] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            accuracy([], [])

    def test_classes_absent_from_golds_excluded(self):
        acc = accuracy(["a", "c"], ["a", "b"])
        assert set(acc["per_class"]) == {"a", "b"}


class TestTrainLoop:
    def test_same_seed_identical_losses(self, tmp_path, dataset):
        cfg = tiny_config(tmp_path, **{"train.steps": 20})
        a = train(cfg, dataset, write=False, evaluate_at_end=False)
        b = train(cfg, dataset, write=False, evaluate_at_end=False)
        assert len(a.losses) == 20
        assert a.losses == b.losses

    def test_different_seed_differs(self, tmp_path, dataset):
        a = train(tiny_config(tmp_path, **{"train.steps": 3}), dataset, write=False, evaluate_at_end=False)
        b = train(tiny_config(tmp_path, **{"train.steps": 3, "train.seed": 1}), dataset, write=False,
                  evaluate_at_end=False)
        assert a.losses != b.losses

    def test_artifacts_and_metrics_schema(self, tmp_path, dataset):
        cfg = tiny_config(tmp_path, **{"train.steps": 4, "train.eval_every": 2, "loop.loops": 2})
        result = train(cfg, dataset)
        out = tmp_path / "run"
        assert {p.name for p in out.iterdir()} == {"config.json", "metrics.jsonl", "checkpoint.json"}
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert all(r["schema"] == train_mod.METRICS_SCHEMA for r in rows)
        steps = [r for r in rows if r["kind"] == "step"]
        evals = [r for r in rows if r["kind"] == "eval"]
        assert [r["step"] for r in steps] == [0, 1, 2, 3]
        assert [r["step"] for r in evals] == [2, 4]
        assert all(r["sigma"] > 0 for r in steps)
        for key in ("lm", "ga_final", "joint", "alpha", "tau", "lr", "grad_norm"):
            assert key in steps[0]
        assert evals[-1]["p_i"] == result.evaluation["p_i"]
        assert RunConfig.load(out / "config.json") == cfg

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path, dataset, monkeypatch):
        real = train_mod.compute_objective
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            out = real(*args, **kwargs)
            calls["n"] += 1
            if calls["n"] == 3:
                out.joint = out.joint * float("nan")
            return out

        monkeypatch.setattr(train_mod, "compute_objective", poisoned)
        with pytest.raises(TrainingDiverged, match="step 2"):
            train(tiny_config(tmp_path, **{"train.steps": 10}), dataset)
        diag = json.loads((tmp_path / "run" / "divergence.json").read_text())
        assert diag["step"] == 2
        assert len(diag["batch_ids"]) == 4
        assert diag["sigma"] > 0 and diag["tau"] > 0

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            train(tiny_config(tmp_path), None)

    def test_overfit_eight_samples(self, tmp_path, dataset):
        cfg = tiny_config(tmp_path, **{
            "train.steps": 150, "train.batch_size": 8, "train.lr": 0.01, "data.max_train": 8,
            "train.weight_decay": 0.0, "train.schedule": "constant",
        })
        result = train(cfg, dataset, write=False, evaluate_at_end=False, train_accuracy=True)
        assert result.train_accuracy["p_i"] == 1.0


class TestCheckpoint:
    def test_round_trip_same_predictions(self, tmp_path, dataset):
        result = train(tiny_config(tmp_path, **{"train.steps": 3, "loop.loops": 2}), dataset)
        model, vocab = load_checkpoint(tmp_path / "run" / "checkpoint.json")
        assert vocab == dataset.vocabulary
        for name, p in result.model.named_parameters().items():
            np.testing.assert_array_equal(p.data, model.named_parameters()[name].data)
        test = dataset.split("test")
        assert evaluate(model, test) == evaluate(result.model, test)

    def test_float64_round_trip(self, tmp_path, dataset):
        result = train(tiny_config(tmp_path, **{"train.steps": 1, "train.dtype": "float64"}), dataset)
        model, _ = load_checkpoint(tmp_path / "run" / "checkpoint.json")
        p = next(iter(model.named_parameters().values()))
        assert p.dtype == np.float64
        for name, q in result.model.named_parameters().items():
            np.testing.assert_array_equal(q.data, model.named_parameters()[name].data)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "missing.json")

    def test_shape_mismatch(self, tmp_path, dataset):
        train(tiny_config(tmp_path, **{"train.steps": 1}), dataset)
        path = tmp_path / "run" / "checkpoint.json"
        payload = json.loads(path.read_text())
        name = next(iter(payload["params"]))
        payload["params"][name]["shape"] = [999]
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestEvaluate:
    def test_empty_manifest(self, dataset):
        model = train(RunConfig().with_overrides({**TINY, "train.steps": 0}), dataset, write=False,
                      evaluate_at_end=False).model
        with pytest.raises(DataError):
            evaluate(model, dataset.split("nothing"))

    def test_vocabulary_mismatch(self, tmp_path, dataset):
        model = train(RunConfig().with_overrides({**TINY, "train.steps": 0}), dataset, write=False,
                      evaluate_at_end=False).model
        other = generate_synthetic(SyntheticTaskSpec(num_classes=4, samples_per_class=2, frames=6), tmp_path)
        with pytest.raises(ConfigError):
            evaluate(model, other, dataset.vocabulary)


class TestExport:
    @pytest.mark.parametrize("manifold", ["adaptive-poincare", "lorentz", "euclidean"])
    def test_row_count_and_columns(self, tmp_path, dataset, manifold):
        result = train(tiny_config(tmp_path, **{"train.steps": 1, "align.manifold": manifold}), dataset,
                       write=False, evaluate_at_end=False)
        path = tmp_path / "emb.csv"
        assert export_embeddings(result.model, dataset, path) == len(dataset)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["id", "gloss", "split", "e0", "e1", "e2", "e3"]
        assert len(rows) == len(dataset) + 1
        assert [r[0] for r in rows[1:]] == [r.id for r in dataset.records]

    def test_euclidean_is_identity(self, tmp_path, dataset):
        model = train(tiny_config(tmp_path, **{"train.steps": 0, "align.manifold": "euclidean"}), dataset,
                      write=False, evaluate_at_end=False).model
        batch = load_batch(dataset, range(4))
        with T.no_grad():
            raw = embed_sign(model.align, model.sign_features(batch), batch.frame_mask).point.data
        np.testing.assert_array_equal(sign_embeddings(model, batch), raw)

    def test_poincare_is_log_mapped(self, tmp_path, dataset):
        model = train(tiny_config(tmp_path, **{"train.steps": 0, "align.manifold": "poincare"}), dataset,
                      write=False, evaluate_at_end=False).model
        batch = load_batch(dataset, range(4))
        head = model.align
        with T.no_grad():
            mu = embed_sign(head, model.sign_features(batch), batch.frame_mask).point
            back = head.manifold.expmap0(T.Tensor(sign_embeddings(model, batch)), head.c()).data
        np.testing.assert_allclose(back, mu.data, atol=1e-9)

    def test_manifest_reloads(self, dataset):
        back = DatasetManifest.load(dataset.root / "manifest.json")
        assert len(back) == len(dataset)
