"""Hyperbolic contrastive alignment, language-modelling loss and the joint objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import manifold as M
from . import tensor as T
from .config import AlignConfig
from .errors import ConfigError, ContractError, DataError
from .nn import Linear, Module
from .tensor import Tensor

NEG = -1e9


class AlignmentHead(Module):
    """Projection into the chosen geometry plus the loss scalars.

    The head always computes in float64: single precision cannot resolve
    points near the ball boundary or on the far sheet of the hyperboloid.

    Holds the shared projection ``W``, the frame scorer that produces the
    Frechet weights, the curvature, the projection scale, the temperature
    ``tau = exp(log_tau)`` and the pre-sigmoid mixing scalar for ``alpha``.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, cfg: AlignConfig):
        cfg.validate()
        with T.default_dtype(np.float64):
            self._build(rng, d_model, cfg)

    def _build(self, rng, d_model, cfg):
        self._cfg = cfg
        self._manifold = M.get_manifold(cfg.geometry)
        self.proj = Linear(rng, d_model, cfg.d_hyp, bias=False)
        self.scorer = Linear(rng, d_model, 1, zero=True)
        if cfg.uniform_weights:
            self.scorer.weight.requires_grad = False
            self.scorer.bias.requires_grad = False
        hyperbolic = cfg.geometry != "euclidean"
        self.curvature = M.Curvature(cfg.curvature, adaptive=cfg.adaptive) if hyperbolic else None
        # flat space has no curvature to trade against, so its scale stays fixed
        self.log_proj_scale = Tensor(np.log(cfg.scale), requires_grad=cfg.learn_scale and hyperbolic)
        self.log_tau = Tensor(np.log(cfg.tau), requires_grad=True)
        self.alpha_logit = Tensor(np.log(cfg.alpha / (1 - cfg.alpha)), requires_grad=cfg.alpha_mode == "learnable")

    @property
    def manifold(self):
        return self._manifold

    @property
    def config(self) -> AlignConfig:
        return self._cfg

    def c(self) -> Tensor | None:
        return None if self.curvature is None else self.curvature.effective()

    def tau(self) -> Tensor:
        return T.exp(self.log_tau)

    def alpha(self) -> Tensor:
        return T.sigmoid(self.alpha_logit)

    def to_tangent(self, x: Tensor) -> Tensor:
        return self.proj(T.cast(x, np.float64)) * T.exp(self.log_proj_scale)

    def frame_weights(self, sign: Tensor, frame_mask: np.ndarray) -> Tensor:
        scores = self.scorer(T.cast(sign, np.float64))[..., 0]
        bias = np.where(frame_mask, 0.0, NEG).astype(scores.dtype)
        return T.softmax(scores + T.Tensor(bias, dtype=scores.dtype), axis=-1)


@dataclass
class PooledEmbeddings:
    sign: Tensor  # (B, D) Frechet means
    text: list[Tensor]  # one (B, D) batch per cross-modal state
    frechet_iterations: int = 0
    frechet_converged: bool = True


def embed_sign(head: AlignmentHead, sign: Tensor, frame_mask: np.ndarray):
    """Per-frame projection onto the manifold, then the weighted Frechet mean."""
    cfg = head.config
    c = head.c()
    points = head.manifold.expmap0(head.to_tangent(sign), c)
    weights = head.frame_weights(sign, frame_mask)
    return M.frechet_mean(
        points, weights, c, manifold=head.manifold.name, tol=cfg.frechet_tol, max_iter=cfg.frechet_max_iter
    )


def embed_text(head: AlignmentHead, text_feats: Tensor, text_mask: np.ndarray) -> Tensor:
    """Mean over valid tokens, then projection onto the manifold."""
    keep = T.Tensor(text_mask[..., None], dtype=text_feats.dtype)
    count = T.Tensor(np.maximum(text_mask.sum(-1, keepdims=True), 1), dtype=text_feats.dtype)
    pooled = T.sum_(text_feats * keep, axis=1) / count
    return head.manifold.expmap0(head.to_tangent(pooled), head.c())


def project_and_pool(
    head: AlignmentHead,
    sign: Tensor,
    frame_mask: np.ndarray,
    text_states: list[Tensor],
    text_mask: np.ndarray,
) -> PooledEmbeddings:
    result = embed_sign(head, sign, frame_mask)
    texts = [embed_text(head, h, text_mask) for h in text_states]
    return PooledEmbeddings(result.point, texts, result.iterations, result.converged)


def pairwise_distances(head: AlignmentHead, a: Tensor, b: Tensor) -> Tensor:
    """``D[i, k] = d(a_i, b_k)`` on the head's manifold."""
    n, dim = a.shape
    m = b.shape[0]
    return head.manifold.dist(T.reshape(a, (n, 1, dim)), T.reshape(b, (1, m, dim)), head.c())


def contrastive_from_distances(dist: Tensor, tau, margin: float) -> Tensor:
    """Mean over anchors ``i`` of ``-log softmax_k(-(D[i,k] + m [k != i]) / tau)[i]``."""
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ContractError(f"distance matrix must be square, got {dist.shape}")
    off = (1.0 - np.eye(n)) * margin
    logits = (dist + T.Tensor(off, dtype=dist.dtype)) * (-1.0) / tau
    logp = T.log_softmax(logits, axis=-1)
    diag = logp[np.arange(n), np.arange(n)]
    return T.mean(diag) * -1.0


def ga_loss(head: AlignmentHead, sign_points: Tensor, text_points: Tensor, symmetric: bool | None = None) -> Tensor:
    """Sign-anchored contrastive loss against every text candidate in the batch."""
    if sign_points.shape != text_points.shape or sign_points.shape[0] < 1:
        raise ContractError(f"ga_loss needs matching non-empty batches, got {sign_points.shape} and {text_points.shape}")
    cfg = head.config
    dist = pairwise_distances(head, sign_points, text_points)
    loss = contrastive_from_distances(dist, head.tau(), cfg.margin)
    if cfg.symmetric if symmetric is None else symmetric:
        loss = (loss + contrastive_from_distances(T.transpose(dist, (1, 0)), head.tau(), cfg.margin)) * 0.5
    return loss


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over non-pad target tokens."""
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise DataError("every target position is padding")
    logp = T.log_softmax(logits, axis=-1)
    idx = np.nonzero(mask)
    picked = logp[idx + (targets[idx],)]
    return T.sum_(picked) * (-1.0 / count)


@dataclass
class LossBreakdown:
    lm: float
    ga_final: float
    ga_aux: list[float] = field(default_factory=list)
    joint: float = 0.0
    alpha: float = 0.5
    w_aux: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def joint_loss(lm, ga_final, ga_aux, alpha, w_aux: float = 0.1, loops: int | None = None):
    """``alpha * lm + (1 - alpha) * (ga_final + w_aux * sum(ga_aux))``.

    Accepts Tensors or floats; returns ``(joint, LossBreakdown)``. When
    ``loops`` is given, ``ga_aux`` must hold exactly ``loops - 1`` terms.
    """
    ga_aux = list(ga_aux)
    if loops is not None and len(ga_aux) != max(loops - 1, 0):
        raise ContractError(f"expected {max(loops - 1, 0)} auxiliary losses for {loops} loops, got {len(ga_aux)}")
    a = alpha if isinstance(alpha, Tensor) else T.as_tensor(alpha)
    a_val = float(a.data)
    if not 0.0 < a_val < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {a_val}")
    align = T.as_tensor(ga_final)
    if ga_aux:
        aux = ga_aux[0]
        for term in ga_aux[1:]:
            aux = T.add(aux, term)
        align = align + T.as_tensor(aux) * w_aux
    joint = a * lm + (1.0 - a) * align
    breakdown = LossBreakdown(
        lm=_f(lm), ga_final=_f(ga_final), ga_aux=[_f(g) for g in ga_aux], joint=_f(joint), alpha=a_val, w_aux=float(w_aux)
    )
    return joint, breakdown


def _f(x) -> float:
    return float(np.asarray(x.data if isinstance(x, Tensor) else x))
