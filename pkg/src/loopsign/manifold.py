"""Hyperbolic geometry on the adaptive Poincare ball and the Lorentz hyperboloid.

Every routine accepts numpy arrays or :class:`~loopsign.tensor.Tensor` objects
and returns Tensors, so the same code serves the property checks and the
differentiable training path. Points are stored along the last axis; leading
axes are batch axes.

Tangent-vector convention on the ball: the origin map is

    exp0(v) = tanh(sqrt(c) |v| / 2) * v / (sqrt(c) |v|)

which makes ``dist(0, exp0(v)) == |v|`` with the ``2/sqrt(c) * atanh`` distance.
This is the usual gyrovector map applied to ``v / 2``; :func:`exp_at` and
:func:`log_at` carry the same halving to every base point, so on the ball a
tangent vector ``v`` at ``x`` has geodesic length ``lambda_x * |v| / 2`` with
``lambda_x = 2 / (1 - c |x|^2)``. The Karcher iteration is invariant to this
per-point scaling, so the Frechet mean is unaffected.

The hyperboloid of curvature ``-c`` is ``<x, x>_L = -1/c`` with ``x0 > 0``;
its tangent vectors use the plain Minkowski norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .nn import Module
from .tensor import Tensor, as_tensor

BALL_EPS = 1e-5
ATANH_MAX = 1.0 - 1e-7
_NORM_FLOOR = 1e-30


class Curvature(Module):
    """Effective curvature ``c_hat = sigma * c`` with ``sigma = exp(log_scale)``."""

    def __init__(self, base: float = 1.0, adaptive: bool = False):
        if not base > 0:
            raise ConfigError(f"base curvature must be positive, got {base}")
        self.base = float(base)
        self.adaptive = bool(adaptive)
        self.log_scale = Tensor(0.0, requires_grad=self.adaptive)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_scale.data))

    def effective(self) -> Tensor:
        return T.exp(self.log_scale) * self.base

    def __float__(self) -> float:
        return self.sigma * self.base


def _c(c) -> Tensor:
    if isinstance(c, Curvature):
        return c.effective()
    return as_tensor(c)


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return T.sum_(a * b, axis=-1, keepdims=True)


def _norm(x: Tensor) -> Tensor:
    return T.norm(x, axis=-1, keepdims=True, eps=_NORM_FLOOR)


def _check_in_ball(x: Tensor, c: Tensor, what: str) -> None:
    r = np.sqrt(np.asarray(c.data)) * np.linalg.norm(x.data, axis=-1)
    if np.any(r >= 1.0):
        raise DomainError(f"{what} lies outside the ball (sqrt(c)*|x| = {r.max():.6g} >= 1)")


# ---------------------------------------------------------------------------
# Poincare ball
# ---------------------------------------------------------------------------

def project_ball(x, c) -> Tensor:
    """Clip points to radius ``(1 - 1e-5) / sqrt(c)``."""
    x, c = as_tensor(x), _c(c)
    max_norm = (1.0 - BALL_EPS) / T.sqrt(c)
    factor = T.clamp(max_norm / _norm(x), max=1.0)
    return x * factor


def _mobius_add_raw(u: Tensor, v: Tensor, c: Tensor) -> Tensor:
    uv = _dot(u, v)
    u2 = _dot(u, u)
    v2 = _dot(v, v)
    num = (1.0 + 2.0 * c * uv + c * v2) * u + (1.0 - c * u2) * v
    den = 1.0 + 2.0 * c * uv + c * c * u2 * v2
    return num / T.clamp(den, min=1e-15)


def mobius_add(u, v, c) -> Tensor:
    """Gyrovector addition ``u (+)_c v`` on the ball, re-clipped into it."""
    u, v, c = as_tensor(u), as_tensor(v), _c(c)
    _check_in_ball(u, c, "mobius_add left operand")
    _check_in_ball(v, c, "mobius_add right operand")
    return project_ball(_mobius_add_raw(u, v, c), c)


def conformal_factor(x, c) -> Tensor:
    x, c = as_tensor(x), _c(c)
    return 2.0 / (1.0 - c * _dot(x, x))


def exp_origin(v, c) -> Tensor:
    v, c = as_tensor(v), _c(c)
    if not np.all(np.isfinite(v.data)):
        raise DomainError("exp_origin received a non-finite tangent vector")
    sc = T.sqrt(c)
    n = _norm(v)
    return project_ball(T.tanh(sc * n * 0.5) * v / (sc * n), c)


def log_origin(y, c) -> Tensor:
    y, c = as_tensor(y), _c(c)
    sc = T.sqrt(c)
    n = _norm(y)
    return (2.0 / sc) * T.atanh(T.clamp(sc * n, max=ATANH_MAX)) * y / n


def dist_poincare(u, v, c) -> Tensor:
    """Geodesic distance ``2/sqrt(c) * atanh(sqrt(c) |(-u) (+)_c v|)``; trailing axis dropped."""
    u, v, c = as_tensor(u), as_tensor(v), _c(c)
    sc = T.sqrt(c)
    w = _mobius_add_raw(-u, v, c)
    d = (2.0 / sc) * T.atanh(T.clamp(sc * _norm(w), max=ATANH_MAX))
    return d[..., 0]


def dist_poincare_arcosh(u, v, c=1.0) -> Tensor:
    """Closed-form distance ``arcosh(1 + 2c|u-v|^2 / ((1-c|u|^2)(1-c|v|^2))) / sqrt(c)``."""
    u, v, c = as_tensor(u), as_tensor(v), _c(c)
    diff = u - v
    arg = 1.0 + 2.0 * c * _dot(diff, diff) / ((1.0 - c * _dot(u, u)) * (1.0 - c * _dot(v, v)))
    return (T.arccosh(T.clamp(arg, min=1.0)) / T.sqrt(c))[..., 0]


def _exp_poincare(x: Tensor, v: Tensor, c: Tensor) -> Tensor:
    sc = T.sqrt(c)
    n = _norm(v)
    lam = conformal_factor(x, c)
    step = T.tanh(sc * lam * n * 0.25) * v / (sc * n)
    return project_ball(_mobius_add_raw(x, step, c), c)


def _log_poincare(x: Tensor, y: Tensor, c: Tensor) -> Tensor:
    sc = T.sqrt(c)
    w = _mobius_add_raw(-x, y, c)
    n = _norm(w)
    lam = conformal_factor(x, c)
    return (4.0 / (sc * lam)) * T.atanh(T.clamp(sc * n, max=ATANH_MAX)) * w / n


def riemannian_rescale(euclidean_grad, at, c) -> Tensor:
    """Turn a Euclidean gradient at a ball point into the Riemannian one."""
    g, x, c = as_tensor(euclidean_grad), as_tensor(at), _c(c)
    factor = T.square(1.0 - c * _dot(x, x)) * 0.25
    return g * factor


# ---------------------------------------------------------------------------
# Lorentz hyperboloid
# ---------------------------------------------------------------------------

def lorentz_inner(x, y) -> Tensor:
    """Minkowski form ``-x0 y0 + sum_i xi yi``; trailing axis dropped."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"lorentz_inner: ambient dimensions differ, {x.shape} vs {y.shape}")
    return _linner(x, y)[..., 0]


def _linner(x: Tensor, y: Tensor) -> Tensor:
    sign = np.ones(x.shape[-1], dtype=x.dtype)
    sign[0] = -1.0
    return T.sum_(x * y * T.Tensor(sign, dtype=x.dtype), axis=-1, keepdims=True)


def lorentz_origin(dim: int, c, dtype=None) -> np.ndarray:
    o = np.zeros(dim + 1, dtype=dtype or T.get_default_dtype())
    o[0] = 1.0 / np.sqrt(float(np.asarray(_c(c).data)))
    return o


def project_hyperboloid(x, c) -> Tensor:
    """Recompute the time coordinate so that ``<x, x>_L = -1/c``."""
    x, c = as_tensor(x), _c(c)
    space = x[..., 1:]
    x0 = T.sqrt(1.0 / c + _dot(space, space))
    return T.concat([x0, space], axis=-1)


def dist_lorentz(x, y, c) -> Tensor:
    x, y, c = as_tensor(x), as_tensor(y), _c(c)
    arg = T.clamp(-c * _linner(x, y), min=1.0)
    return (T.arccosh(arg) / T.sqrt(c))[..., 0]


def _dist_lorentz_chord(x: Tensor, y: Tensor, c: Tensor) -> Tensor:
    # 2/sqrt(c) * asinh(sqrt(c) * |x - y|_L / 2): same value as the arccosh form,
    # but with a finite derivative at coincident points.
    sc = T.sqrt(c)
    diff = x - y
    chord = T.sqrt(T.clamp(_linner(diff, diff), min=_NORM_FLOOR))
    z = sc * chord * 0.5
    return (2.0 / sc) * T.log(z + T.sqrt(T.square(z) + 1.0))


def _exp_lorentz(x: Tensor, v: Tensor, c: Tensor) -> Tensor:
    sc = T.sqrt(c)
    n = T.sqrt(T.clamp(_linner(v, v), min=_NORM_FLOOR))
    a = sc * n
    return project_hyperboloid(T.cosh(a) * x + T.sinh(a) * v / a, c)


def _log_lorentz(x: Tensor, y: Tensor, c: Tensor) -> Tensor:
    sc = T.sqrt(c)
    u = y + c * _linner(x, y) * x
    d = _dist_lorentz_chord(x, y, c)
    a = sc * d
    # |u|_L = sinh(sqrt(c) d) / sqrt(c); the ratio below is smooth at d = 0.
    return u * (a / T.sinh(T.clamp(a, min=1e-15)))


def lorentz_exp_origin(v, c) -> Tensor:
    """Map a d-dimensional tangent vector at the origin onto the hyperboloid."""
    v, c = as_tensor(v), _c(c)
    sc = T.sqrt(c)
    n = _norm(v)
    a = sc * n
    x0 = T.cosh(a) / sc
    space = T.sinh(a) * v / a
    return T.concat([x0, space], axis=-1)


def lorentz_log_origin(x, c) -> Tensor:
    x, c = as_tensor(x), _c(c)
    sc = T.sqrt(c)
    space = x[..., 1:]
    n = _norm(space)
    # distance from the origin is asinh(sqrt(c) |space|) / sqrt(c)
    z = sc * n
    d = T.log(z + T.sqrt(T.square(z) + 1.0)) / sc
    return d * space / n


def poincare_to_lorentz(p, c) -> Tensor:
    """``x0 = (1 + c|p|^2) / (sqrt(c)(1 - c|p|^2))``, ``x_space = 2p / (1 - c|p|^2)``."""
    p, c = as_tensor(p), _c(c)
    p2 = c * _dot(p, p)
    den = 1.0 - p2
    x0 = (1.0 + p2) / (T.sqrt(c) * den)
    return T.concat([x0, 2.0 * p / den], axis=-1)


def lorentz_to_poincare(x, c) -> Tensor:
    x, c = as_tensor(x), _c(c)
    return x[..., 1:] / (T.sqrt(c) * x[..., 0:1] + 1.0)


# ---------------------------------------------------------------------------
# manifold objects used by the alignment head
# ---------------------------------------------------------------------------

class Euclidean:
    name = "euclidean"
    hyperbolic = False

    def expmap0(self, v, c=None) -> Tensor:
        return as_tensor(v)

    def logmap0(self, x, c=None) -> Tensor:
        return as_tensor(x)

    def expmap(self, x, v, c=None) -> Tensor:
        return as_tensor(x) + as_tensor(v)

    def logmap(self, x, y, c=None) -> Tensor:
        return as_tensor(y) - as_tensor(x)

    def dist(self, x, y, c=None) -> Tensor:
        diff = as_tensor(x) - as_tensor(y)
        return T.sqrt(T.clamp(T.sum_(T.square(diff), axis=-1), min=_NORM_FLOOR))


class PoincareBall:
    name = "poincare"
    hyperbolic = True

    def expmap0(self, v, c) -> Tensor:
        return exp_origin(v, c)

    def logmap0(self, x, c) -> Tensor:
        return log_origin(x, c)

    def expmap(self, x, v, c) -> Tensor:
        return _exp_poincare(as_tensor(x), as_tensor(v), _c(c))

    def logmap(self, x, y, c) -> Tensor:
        return _log_poincare(as_tensor(x), as_tensor(y), _c(c))

    def dist(self, x, y, c) -> Tensor:
        return dist_poincare(x, y, c)


class Lorentz:
    name = "lorentz"
    hyperbolic = True

    def expmap0(self, v, c) -> Tensor:
        return lorentz_exp_origin(v, c)

    def logmap0(self, x, c) -> Tensor:
        return lorentz_log_origin(x, c)

    def expmap(self, x, v, c) -> Tensor:
        return _exp_lorentz(as_tensor(x), as_tensor(v), _c(c))

    def logmap(self, x, y, c) -> Tensor:
        return _log_lorentz(as_tensor(x), as_tensor(y), _c(c))

    def dist(self, x, y, c) -> Tensor:
        return _dist_lorentz_chord(as_tensor(x), as_tensor(y), _c(c))[..., 0]


MANIFOLDS = {"euclidean": Euclidean(), "poincare": PoincareBall(), "lorentz": Lorentz()}


def get_manifold(name: str):
    try:
        return MANIFOLDS[name]
    except KeyError:
        raise ConfigError(f"unknown manifold {name!r}; expected one of {sorted(MANIFOLDS)}") from None


def exp_at(base, v, c, manifold: str = "poincare") -> Tensor:
    return get_manifold(manifold).expmap(base, v, c)


def log_at(base, y, c, manifold: str = "poincare") -> Tensor:
    return get_manifold(manifold).logmap(base, y, c)


# ---------------------------------------------------------------------------
# weighted Frechet mean
# ---------------------------------------------------------------------------

@dataclass
class FrechetResult:
    point: Tensor
    iterations: int
    converged: bool
    objective: list[float] = field(default_factory=list)


def frechet_objective(mu, points, weights, c, manifold: str = "poincare") -> np.ndarray:
    """``sum_t w_t d(mu, h_t)^2`` per batch element (numpy, no graph)."""
    m = get_manifold(manifold)
    with T.no_grad():
        mu = as_tensor(mu)
        d = m.dist(T.reshape(mu, mu.shape[:-1] + (1, mu.shape[-1])), points, c)
        return (as_tensor(weights).data * d.data**2).sum(axis=-1)


def _damping(dist: Tensor, weights: Tensor, c: Tensor) -> Tensor:
    """Step length ``1 / sum_t w_t z_t coth(z_t)`` with ``z_t = sqrt(c) d_t``.

    ``z coth z`` bounds the Hessian of half the squared distance, so the
    damped step never overshoots; it tends to 1 as the points coalesce.
    """
    z = T.clamp(T.sqrt(c) * dist, min=1e-6)
    bound = T.sum_(weights * (z / T.tanh(z)), axis=-1, keepdims=True)
    return 1.0 / bound


def frechet_mean(
    points,
    weights,
    c,
    manifold: str = "poincare",
    tol: float = 1e-6,
    max_iter: int = 100,
    track_objective: bool = False,
) -> FrechetResult:
    """Karcher iteration ``mu <- exp_mu(eta * sum_t w_t log_mu(h_t))`` from ``mu = h_1``.

    On hyperbolic manifolds ``eta`` is the curvature-aware damping of
    ``_damping``; in flat space ``eta = 1`` and one step reaches the mean.

    ``points`` has shape (..., T, D) and ``weights`` (..., T). Iteration stops
    once the largest tangent update in the batch is below ``tol``; hitting
    ``max_iter`` first returns the last iterate with ``converged=False``.
    The loop is unrolled in the autodiff graph, so gradients flow to the
    points, the weights and the curvature.
    """
    points, weights = as_tensor(points), as_tensor(weights)
    if points.ndim < 2 or weights.shape != points.shape[:-1]:
        raise ShapeError(f"frechet_mean: weights {weights.shape} do not match points {points.shape}")
    w = weights.data
    if np.any(w < 0) or not np.allclose(w.sum(axis=-1), 1.0, atol=1e-6):
        raise ContractError("frechet_mean weights must be nonnegative and sum to 1")
    m = get_manifold(manifold)
    c = _c(c) if manifold != "euclidean" else None

    trace: list[float] = []
    if np.all(points.data == points.data[..., :1, :]):
        mu = points[..., 0, :]
        if track_objective:
            trace.append(float(frechet_objective(mu, points, weights, c, manifold).sum()))
        return FrechetResult(mu, 0, True, trace)

    w_col = T.reshape(weights, weights.shape + (1,))
    mu = points[..., 0, :]
    if track_objective:
        trace.append(float(frechet_objective(mu, points, weights, c, manifold).sum()))
    converged = False
    iterations = 0
    for _ in range(max_iter):
        anchor = T.reshape(mu, mu.shape[:-1] + (1, mu.shape[-1]))
        step = T.sum_(w_col * m.logmap(anchor, points, c), axis=-2)
        if m.hyperbolic:
            step = step * _damping(m.dist(anchor, points, c), weights, c)
        size = float(np.max(np.linalg.norm(step.data, axis=-1)))
        mu = m.expmap(mu, step, c)
        iterations += 1
        if track_objective:
            trace.append(float(frechet_objective(mu, points, weights, c, manifold).sum()))
        if size < tol:
            converged = True
            break
    return FrechetResult(mu, iterations, converged, trace)
