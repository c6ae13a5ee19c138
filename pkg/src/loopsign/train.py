"""Training loop, AdamW, evaluation, checkpoints and embedding export."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Batch, DatasetManifest, Vocabulary, load_batch
from .errors import ConfigError, DataError
from .losses import LossBreakdown, embed_sign, embed_text, ga_loss, joint_loss, lm_loss
from .model import SignModel

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
CHECKPOINT_FORMAT = "loopsign-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

@dataclass
class StepOutput:
    joint: T.Tensor
    breakdown: LossBreakdown
    frechet_iterations: int
    frechet_converged: bool


def compute_objective(model: SignModel, batch: Batch, rng=None, train: bool = False) -> StepOutput:
    cfg = model.config
    head = model.align
    state = model.forward(batch, rng=rng, train=train)
    logits = model.lm_head(state.final)
    lm = lm_loss(logits, batch.targets, batch.text_mask)

    sign = embed_sign(head, state.sign, batch.frame_mask)
    aligned = state.snapshots if state.snapshots else [state.final]
    ga = [ga_loss(head, sign.point, embed_text(head, h, batch.text_mask)) for h in aligned]
    loops = cfg.loop.loops
    joint, breakdown = joint_loss(
        lm, ga[-1], ga[:-1], head.alpha(), cfg.align.w_aux, loops=loops if loops >= 1 else None
    )
    return StepOutput(joint, breakdown, sign.iterations, sign.converged)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (decay skipped for vectors and scalars)."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if p.data.ndim >= 2 and self.weight_decay:
                p.data -= (lr * self.weight_decay * p.data).astype(p.dtype)
            p.data -= (lr * update).astype(p.dtype)


def learning_rate(cfg, step: int) -> float:
    base = cfg.lr
    if cfg.warmup and step < cfg.warmup:
        return base * (step + 1) / cfg.warmup
    if cfg.schedule == "constant" or cfg.steps <= cfg.warmup:
        return base
    progress = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
    return base * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


def clip_gradients(params: dict[str, T.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SignModel, vocab: Vocabulary) -> None:
    """JSON map: parameter path -> {shape, data}, plus config and vocabulary."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": str(next(iter(model.named_parameters().values())).dtype),
        "config": model.config.to_dict(),
        "vocabulary": vocab.tokens,
        "params": {
            name: {"shape": list(p.shape), "data": p.data.astype(np.float64).reshape(-1).tolist()}
            for name, p in model.named_parameters().items()
        },
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[SignModel, Vocabulary]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = RunConfig.from_dict(payload["config"])
    vocab = Vocabulary(payload["vocabulary"])
    with T.default_dtype(np.dtype(payload.get("dtype", "float32")).type):
        model = SignModel(cfg, len(vocab), np.random.default_rng(0))
    params = model.named_parameters()
    stored = payload["params"]
    if set(stored) != set(params):
        raise ConfigError(f"checkpoint parameters do not match the model built from its config ({path})")
    for name, p in params.items():
        entry = stored[name]
        if list(p.shape) != entry["shape"]:
            raise ConfigError(f"checkpoint shape mismatch for {name}: {entry['shape']} vs {list(p.shape)}")
        p.data[...] = np.asarray(entry["data"], dtype=p.dtype).reshape(p.shape)
    return model, vocab


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def accuracy(predictions: list[str], golds: list[str]) -> dict:
    """Per-instance and per-class Top-1 accuracy by exact string match."""
    if not golds:
        raise DataError("cannot score an empty set")
    if len(predictions) != len(golds):
        raise DataError("prediction and label counts differ")
    hits = np.array([p == g for p, g in zip(predictions, golds)])
    per_class = {}
    for cls in sorted(set(golds)):
        sel = np.array([g == cls for g in golds])
        per_class[cls] = float(hits[sel].mean())
    return {
        "p_i": float(hits.mean()),
        "p_c": float(np.mean(list(per_class.values()))),
        "n": len(golds),
        "per_class": per_class,
    }


def predict(model: SignModel, batch: Batch, vocab: Vocabulary, chunk: int = 128) -> list[str]:
    max_len = max(len(vocab.encode(g)) for g in batch.glosses) + 1
    out = []
    for start in range(0, batch.size, chunk):
        sub = batch.subset(range(start, min(start + chunk, batch.size)))
        ids = model.greedy_decode(sub, max_len)
        out.extend(vocab.decode(row) for row in ids)
    return out


def evaluate(model: SignModel, manifest: DatasetManifest, vocab: Vocabulary | None = None) -> dict:
    if len(manifest) == 0:
        raise DataError("evaluation manifest is empty")
    if vocab is not None and vocab != manifest.vocabulary:
        raise ConfigError("checkpoint vocabulary does not match the dataset vocabulary")
    vocab = manifest.vocabulary
    with _model_dtype(model):
        batch = load_batch(manifest, range(len(manifest)))
        preds = predict(model, batch, vocab)
    return accuracy(preds, batch.glosses)


@contextlib.contextmanager
def _model_dtype(model: SignModel):
    dtype = next(iter(model.named_parameters().values())).dtype.type
    with T.default_dtype(dtype):
        yield


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SignModel
    vocabulary: Vocabulary
    losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    evaluation: dict | None = None
    train_accuracy: dict | None = None
    seconds: float = 0.0


def _write_line(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def train(
    cfg: RunConfig,
    manifest: DatasetManifest | None = None,
    write: bool = True,
    evaluate_at_end: bool = True,
    train_accuracy: bool = False,
) -> TrainResult:
    """Train one model; writes metrics.jsonl and checkpoint.json under ``cfg.output_dir``."""
    cfg.validate()
    if manifest is None:
        if not cfg.data.manifest:
            raise ConfigError("data.manifest is not set")
        manifest = DatasetManifest.load(cfg.data.manifest)
    train_set = manifest.split(cfg.data.train_split)
    if len(train_set) == 0:
        raise DataError(f"split {cfg.data.train_split!r} is empty")
    if cfg.data.max_train:
        train_set.records = train_set.records[: cfg.data.max_train]
    vocab = manifest.vocabulary
    out_dir = Path(cfg.output_dir)
    dtype = np.float64 if cfg.train.dtype == "float64" else np.float32
    started = time.perf_counter()

    with T.default_dtype(dtype), contextlib.ExitStack() as stack:
        rng = np.random.default_rng(cfg.train.seed)
        model = SignModel(cfg, len(vocab), rng)
        params = model.named_parameters()
        opt = AdamW(params, cfg.train.lr, cfg.train.weight_decay)
        data = load_batch(train_set, range(len(train_set)))
        metrics = None
        if write:
            out_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(out_dir / "config.json")
            metrics = stack.enter_context(open(out_dir / "metrics.jsonl", "w", encoding="utf-8"))
        result = TrainResult(model, vocab)
        order = np.empty(0, dtype=np.int64)
        for step in range(cfg.train.steps):
            if order.size < cfg.train.batch_size:
                order = np.concatenate([order, rng.permutation(data.size)])
            idx, order = order[: cfg.train.batch_size], order[cfg.train.batch_size :]
            batch = data.subset(idx)
            model.zero_grad()
            out = compute_objective(model, batch, rng=rng, train=True)
            loss = float(out.joint.data)
            head = model.align
            if not math.isfinite(loss):
                diag = {
                    "step": step,
                    "batch_ids": batch.ids,
                    "breakdown": out.breakdown.to_dict(),
                    "sigma": head.curvature.sigma if head.curvature else None,
                    "tau": float(np.exp(head.log_tau.data)),
                }
                if write:
                    (out_dir / "divergence.json").write_text(json.dumps(diag, indent=1), encoding="utf-8")
                raise TrainingDiverged(f"non-finite loss at step {step}: {diag}")
            T.backward(out.joint)
            gnorm = clip_gradients(params, cfg.train.grad_clip)
            lr = learning_rate(cfg.train, step)
            opt.step(lr)
            if head.curvature is not None:
                assert head.curvature.sigma > 0
            assert float(np.exp(head.log_tau.data)) > 0
            result.losses.append(loss)
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                record = {
                    "schema": METRICS_SCHEMA,
                    "kind": "step",
                    "step": step,
                    **out.breakdown.to_dict(),
                    "sigma": head.curvature.sigma if head.curvature else None,
                    "curvature": float(head.curvature) if head.curvature else 0.0,
                    "tau": float(np.exp(head.log_tau.data)),
                    "lr": lr,
                    "grad_norm": gnorm,
                    "frechet_iterations": out.frechet_iterations,
                    "frechet_converged": out.frechet_converged,
                }
                result.history.append(record)
                _write_line(metrics, record)
                if not out.frechet_converged:
                    log.warning("step %d: Frechet mean hit max iterations without converging", step)
            if cfg.train.eval_every and (step + 1) % cfg.train.eval_every == 0 and step + 1 < cfg.train.steps:
                ev = {"schema": METRICS_SCHEMA, "kind": "eval", "step": step + 1, **_eval_split(model, manifest, cfg)}
                result.history.append(ev)
                _write_line(metrics, ev)
        if evaluate_at_end:
            result.evaluation = _eval_split(model, manifest, cfg)
            _write_line(metrics, {"schema": METRICS_SCHEMA, "kind": "eval", "step": cfg.train.steps, **result.evaluation})
        if train_accuracy:
            result.train_accuracy = accuracy(predict(model, data, vocab), data.glosses)
        if write:
            save_checkpoint(out_dir / "checkpoint.json", model, vocab)
    result.seconds = time.perf_counter() - started
    return result


def _eval_split(model, manifest, cfg) -> dict:
    split = manifest.split(cfg.data.eval_split)
    if len(split) == 0:
        raise DataError(f"evaluation split {cfg.data.eval_split!r} is empty")
    ev = evaluate(model, split)
    return {"split": cfg.data.eval_split, "p_i": ev["p_i"], "p_c": ev["p_c"], "n": ev["n"]}


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def sign_embeddings(model: SignModel, batch: Batch) -> np.ndarray:
    """Frechet-mean sign embeddings mapped to the tangent space at the origin."""
    head = model.align
    with T.no_grad():
        mu = embed_sign(head, model.sign_features(batch), batch.frame_mask).point
        if head.curvature is None:
            return mu.data
        return head.manifold.logmap0(mu, head.c()).data


def export_embeddings(model: SignModel, manifest: DatasetManifest, path: str | Path, chunk: int = 128) -> int:
    if len(manifest) == 0:
        raise DataError("export manifest is empty")
    rows = 0
    with _model_dtype(model), open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        dim = model.config.align.d_hyp
        writer.writerow(["id", "gloss", "split"] + [f"e{i}" for i in range(dim)])
        for start in range(0, len(manifest), chunk):
            idx = range(start, min(start + chunk, len(manifest)))
            batch = load_batch(manifest, idx)
            emb = sign_embeddings(model, batch)
            for i, row in zip(idx, emb):
                rec = manifest.records[i]
                writer.writerow([rec.id, rec.gloss, rec.split] + [f"{v:.8g}" for v in row])
                rows += 1
    return rows
