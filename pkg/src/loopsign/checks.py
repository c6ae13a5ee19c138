"""Runtime self-checks: the geometry property suite and end-to-end gradient checking."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass

import numpy as np

from . import manifold as M
from . import tensor as T
from .config import MANIFOLD_SETTINGS, VARIANTS, RunConfig
from .data import SyntheticTaskSpec, Vocabulary, collate, synthesize


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def format_table(results: list[CheckResult]) -> str:
    width = max(len(f"{r.group}/{r.name}") for r in results)
    lines = [f"{'check':<{width}}  {'result':<6}  {'value':>10}  {'limit':>8}"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.group + '/' + r.name:<{width}}  {status:<6}  {r.value:>10.3g}  {r.threshold:>8.1g}  {r.detail}".rstrip())
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _ball_points(rng, n, d, c, max_radius=0.9):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * rng.uniform(0, max_radius, size=(n, 1)) / math.sqrt(c)


def _err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def grid_frechet_1d(points, weights, c, grid=100_000) -> float:
    """Dense search for the weighted Frechet mean of points on a 1-D ball."""
    lo, hi = min(points), max(points)
    xs = np.linspace(lo, hi, grid)
    sc = math.sqrt(c)
    total = np.zeros_like(xs)
    for p, w in zip(points, weights):
        # on a line the Mobius difference reduces to (p - x) / (1 - c x p)
        total += w * ((2 / sc) * np.arctanh(sc * np.abs((p - xs) / (1 - c * xs * p)))) ** 2
    return float(xs[np.argmin(total)])


def geometry_checks(seed: int = 0) -> list[CheckResult]:
    """Property suite for the ball, the hyperboloid and the Frechet mean (64-bit)."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def add(group, name, value, limit, detail=""):
        out.append(CheckResult(group, name, bool(value < limit), float(value), limit, detail))

    with T.default_dtype(np.float64):
        curvatures = (0.5, 1.0, 1.5, 2.0)
        worst_origin = worst_base = worst_norm = worst_lorentz = 0.0
        for c in curvatures:
            # keep sqrt(c)|v| below 6: beyond ~12 the map saturates into the clip radius
            v = rng.normal(size=(200, 5))
            v *= rng.uniform(0.01, 6.0, size=(200, 1)) / (np.linalg.norm(v, axis=-1, keepdims=True) * math.sqrt(c))
            y = M.exp_origin(v, c)
            worst_origin = max(worst_origin, _err(M.log_origin(y, c).data, v))
            worst_norm = max(worst_norm, _err(M.dist_poincare(np.zeros_like(v), y, c).data, np.linalg.norm(v, axis=-1)))
            base = _ball_points(rng, 200, 5, c, 0.7)
            tan = rng.normal(size=(200, 5)) * 0.3
            there = M.exp_at(base, tan, c)
            worst_base = max(worst_base, _err(M.log_at(base, there, c).data, tan))
            lv = rng.normal(size=(200, 5))
            worst_lorentz = max(worst_lorentz, _err(M.lorentz_log_origin(M.lorentz_exp_origin(lv, c), c).data, lv))
        add("ball", "exp/log roundtrip at origin", worst_origin, 1e-6, "c in {0.5,1,1.5,2}")
        add("ball", "exp/log roundtrip at base", worst_base, 1e-6)
        add("ball", "dist(0, exp0(v)) = |v|", worst_norm, 1e-6)
        add("lorentz", "exp/log roundtrip at origin", worst_lorentz, 1e-6)

        u, v = _ball_points(rng, 1000, 6, 1.0), _ball_points(rng, 1000, 6, 1.0)
        main = M.dist_poincare(u, v, 1.0).data
        closed = M.dist_poincare_arcosh(u, v, 1.0).data
        add("ball", "atanh vs arcosh distance (c=1)", _err(main, closed), 1e-9)
        spot = np.array([0.5, 0.0])
        spot_main = float(M.dist_poincare(np.zeros(2), spot, 1.0).data)
        spot_closed = float(M.dist_poincare_arcosh(np.zeros(2), spot, 1.0).data)
        add("ball", "spot value ln 3", max(abs(spot_main - math.log(3)), abs(spot_closed - math.log(3))), 1e-9,
            f"{spot_main:.4f} / {spot_closed:.4f}")

        worst_iso = 0.0
        for c in curvatures:
            a, b = _ball_points(rng, 1000, 4, c), _ball_points(rng, 1000, 4, c)
            la, lb = M.poincare_to_lorentz(a, c), M.poincare_to_lorentz(b, c)
            worst_iso = max(worst_iso, _err(M.dist_poincare(a, b, c).data, M.dist_lorentz(la, lb, c).data))
        add("lorentz", "isometry on 1000 pairs", worst_iso, 1e-6)

        a, b = _ball_points(rng, 1000, 4, 1.3, 0.8), _ball_points(rng, 1000, 4, 1.3, 0.8)
        cancel = M.mobius_add(-a, M.mobius_add(a, b, 1.3), 1.3).data
        add("ball", "Mobius left cancellation", _err(cancel, b), 1e-6)

        x, y, z = (_ball_points(rng, 10_000, 3, 1.0) for _ in range(3))
        dxy, dyz, dxz = (M.dist_poincare(p, q, 1.0).data for p, q in ((x, y), (y, z), (x, z)))
        add("ball", "triangle inequality (1e4 triples)", max(0.0, float(np.max(dxz - dxy - dyz))), 1e-9)

        big = rng.normal(size=(500, 4)) * 50
        clipped = M.exp_origin(big, 2.0).data
        add("ball", "clip radius", max(0.0, float(np.max(np.linalg.norm(clipped, axis=-1) * math.sqrt(2.0) - (1 - 1e-5)))), 1e-12)

        # Frechet mean
        pts = np.array([[[0.2], [0.6]]])
        res = M.frechet_mean(pts, np.array([[0.5, 0.5]]), 1.0, tol=1e-12, max_iter=500)
        oracle = grid_frechet_1d([0.2, 0.6], [0.5, 0.5], 1.0)
        add("frechet", "1-D grid oracle (0.2, 0.6)", abs(float(res.point.data[0, 0]) - oracle), 1e-3,
            f"mean {float(res.point.data[0, 0]):.5f}, grid {oracle:.5f}")
        worst_grid = 0.0
        for _ in range(5):
            p = sorted(rng.uniform(-0.8, 0.8, size=2))
            w = rng.dirichlet([1, 1])
            r = M.frechet_mean(np.array([[[p[0]], [p[1]]]]), w[None], 1.0, tol=1e-12, max_iter=500)
            worst_grid = max(worst_grid, abs(float(r.point.data[0, 0]) - grid_frechet_1d(p, w, 1.0)))
        add("frechet", "1-D grid oracle (random)", worst_grid, 1e-3)

        increase = 0.0
        for manifold in ("poincare", "lorentz"):
            tangent = rng.normal(size=(8, 12, 5)) * 2.0
            points = M.get_manifold(manifold).expmap0(tangent, 1.0)
            w = rng.dirichlet(np.ones(12), size=8)
            r = M.frechet_mean(points, w, 1.0, manifold=manifold, track_objective=True)
            obj = np.asarray(r.objective)
            increase = max(increase, float(np.max(np.diff(obj), initial=0.0)) / max(obj[0], 1e-12))
        add("frechet", "objective non-increasing", max(increase, 0.0), 1e-12)

        tangent = rng.normal(size=(4, 6, 3))
        w = rng.dirichlet(np.ones(6), size=4)
        flat = M.frechet_mean(M.exp_origin(tangent, 1e-6), w, 1e-6)
        expect = (w[..., None] * M.exp_origin(tangent, 1e-6).data).sum(axis=1)
        add("frechet", "flat limit c=1e-6", _err(flat.point.data, expect), 1e-3)
    return out


def run_geomtest(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = geometry_checks(seed)
    return results, time.perf_counter() - start


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@dataclass
class GradRecord:
    variant: str
    manifold: str
    param: str
    probe: str
    analytic: float
    numeric: float
    rel_err: float

    @property
    def passed(self) -> bool:
        return self.rel_err < GRAD_TOL


GRAD_TOL = 1e-4
# Central differences at h=1e-4 carry ~1e-11 of roundoff, so gradients that
# are identically zero (key biases under softmax) need a floor on the scale.
_ABS_FLOOR = 1e-5


def gradcheck_config(variant: str, manifold: str) -> RunConfig:
    return RunConfig().with_overrides({
        "model.d_gcn": 2,
        "model.d_model": 4,
        "model.heads": 1,
        "model.d_ff": 4,
        "loop.variant": variant,
        "loop.loops": 2,
        "align.manifold": manifold,
        "align.d_hyp": 3,
        "align.learn_scale": True,
        "align.frechet_tol": 1e-13,
        "align.frechet_max_iter": 400,
        "train.dtype": "float64",
    })


def _batch():
    spec = SyntheticTaskSpec(num_classes=2, samples_per_class=1, frames=3, seed=3)
    seqs = synthesize(spec)
    vocab = Vocabulary.from_glosses(s.gloss for s in seqs)
    return collate(seqs, vocab), vocab


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _ABS_FLOOR)


def gradcheck_model(variant: str, manifold: str, coords: int = 1, h: float = 1e-4, seed: int = 0) -> list[GradRecord]:
    """Compare autodiff against central differences for every trainable tensor.

    Each tensor gets one probe along a random unit direction plus probes on
    its ``coords`` largest-gradient entries. For the encoder variant the
    intermediate decoder is held at its unperturbed weights, matching the
    stop-gradient the model applies there.
    """
    from .model import SignModel
    from .train import compute_objective

    rng = np.random.default_rng(seed)
    batch, vocab = _batch()
    records = []
    with T.default_dtype(np.float64):
        model = SignModel(gradcheck_config(variant, manifold), len(vocab), np.random.default_rng(seed))
        # move the zero-initialised scorer off its symmetric point
        model.align.scorer.weight.data[:] = rng.normal(scale=0.5, size=model.align.scorer.weight.shape)

        if variant == "encoder":
            # Intermediate decodes run through a gradient-stopped decoder copy;
            # pin it at the base point so differences see the same objective.
            frozen = copy.deepcopy(model.decoder.detached())
            model.decoder.detached = lambda: frozen

        def f() -> float:
            with T.no_grad():
                return float(compute_objective(model, batch).joint.data)

        model.zero_grad()
        T.backward(compute_objective(model, batch).joint)
        for name, p in model.named_parameters().items():
            g = np.zeros(p.shape) if p.grad is None else p.grad.copy()
            direction = rng.normal(size=p.shape)
            direction /= np.linalg.norm(direction)
            probes = [("direction", direction)]
            for idx in np.argsort(-np.abs(g).ravel())[: min(coords, g.size)]:
                e = np.zeros(p.size)
                e[idx] = 1.0
                probes.append((f"coord {np.unravel_index(idx, p.shape)}", e.reshape(p.shape)))
            for label, e in probes:
                saved = p.data.copy()
                p.data[...] = saved + h * e
                up = f()
                p.data[...] = saved - h * e
                down = f()
                p.data[...] = saved
                numeric = (up - down) / (2 * h)
                analytic = float((g * e).sum())
                records.append(GradRecord(variant, manifold, name, label, analytic, numeric, _rel(analytic, numeric)))
    return records


def run_gradcheck(variants=VARIANTS, manifolds=MANIFOLD_SETTINGS, coords: int = 1):
    start = time.perf_counter()
    records = []
    for variant in variants:
        for manifold in manifolds:
            records.extend(gradcheck_model(variant, manifold, coords=coords))
    return records, time.perf_counter() - start


def summarize_gradcheck(records: list[GradRecord]) -> list[CheckResult]:
    """One row per (variant, manifold) with the worst relative error."""
    rows = []
    keys = sorted({(r.variant, r.manifold) for r in records}, key=lambda k: (VARIANTS.index(k[0]), k[1]))
    for variant, manifold in keys:
        sub = [r for r in records if (r.variant, r.manifold) == (variant, manifold)]
        worst = max(sub, key=lambda r: r.rel_err)
        params = len({r.param for r in sub})
        rows.append(CheckResult(
            "gradcheck", f"{variant}/{manifold}", all(r.passed for r in sub), worst.rel_err, GRAD_TOL,
            f"{params} tensors, {len(sub)} probes; worst {worst.param} {worst.probe}",
        ))
    return rows
