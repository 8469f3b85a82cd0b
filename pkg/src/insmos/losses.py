"""Training objectives.

Contrastive feature learning over frames and batch items, Hungarian-matched
mask/motion supervision with focal and dice terms, supervised and photometric
flow losses, and their weighted total.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = (1e-6, 1 - 1e-6)
COS_EPS = 1e-8


@dataclass
class FlowLossParams:
    eps: float = 0.01
    q: float = 0.4

    def __post_init__(self):
        if self.eps <= 0 or not 0 < self.q <= 1:
            raise ValueError("robust penalty needs eps > 0 and 0 < q <= 1")


@dataclass
class LossWeights:
    lambda_cl: float = 1.0
    lambda_flow: float = 2.0
    focal: float = 20.0
    dice: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if min(self.lambda_cl, self.lambda_flow, self.focal, self.dice, self.focal_gamma, self.focal_alpha) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Assignment:
    mapping: dict  # gt index -> prediction index
    total_cost: float

    def __len__(self):
        return len(self.mapping)


# ------------------------------------------------------------- contrastive


def similarity(a, b, alpha):
    """exp(cos(a, b) / alpha) for flattened features."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError("similarity: feature shapes differ")
    a = T.reshape(a, (-1,))
    b = T.reshape(b, (-1,))
    alpha = T.as_tensor(alpha, like=a)
    dot = T.sum(a * b)
    norms = T.l2norm(a, axis=0) * T.l2norm(b, axis=0)
    if norms.data == 0:
        log.debug("similarity: zero-norm feature, cosine taken as 0")
    cos = dot * T.power(norms + COS_EPS, -1.0)
    return T.exp(cos * T.power(alpha, -1.0))


def _cosine_matrix(x, y):
    """Pairwise cosine between rows of x (P×D) and rows of y (Q×D)."""
    nx = T.l2norm(x, axis=1, keepdims=True)
    ny = T.l2norm(y, axis=1, keepdims=True)
    return T.matmul(x, T.transpose(y)) * T.power(T.matmul(nx, T.transpose(ny)) + COS_EPS, -1.0)


def _similarity_blocks(feats_t, feats_m, alpha):
    """Similarity tensors for stacked features of shape B×K×D.

    Returns s_TT, s_MM, s_TM, each (B·K)×(B·K) with row index b*K + k.
    """
    b, k = feats_t.shape[:2]
    flat_t = T.reshape(feats_t, (b * k, -1))
    flat_m = T.reshape(feats_m, (b * k, -1))
    inv_alpha = T.power(T.as_tensor(alpha, like=flat_t), -1.0)
    s_tt = T.exp(_cosine_matrix(flat_t, flat_t) * inv_alpha)
    s_mm = T.exp(_cosine_matrix(flat_m, flat_m) * inv_alpha)
    s_tm = T.exp(_cosine_matrix(flat_t, flat_m) * inv_alpha)
    return s_tt, s_mm, s_tm


def _index_masks(b, k, cs_exclude_self=False):
    bi = np.repeat(np.arange(b), k)
    ki = np.tile(np.arange(k), b)
    same_b = bi[:, None] == bi[None, :]
    same_k = ki[:, None] == ki[None, :]
    # ordered pairs of distinct frames within one batch item
    fc = same_b & ~same_k
    # same frame, other batch items
    ss = same_k & ~same_b
    cs = ~same_b if cs_exclude_self else np.ones_like(same_b)
    owner = np.zeros((b, b * k))
    owner[bi, np.arange(b * k)] = 1.0
    return fc.astype(float), ss.astype(float), cs.astype(float), owner


def _stack_features(features):
    """features[b][k] = (f_T, f_M) -> two B×K×D tensors."""
    t = T.stack([T.stack([T.reshape(f[0], (-1,)) for f in item]) for item in features])
    m = T.stack([T.stack([T.reshape(f[1], (-1,)) for f in item]) for item in features])
    return t, m


def frame_consistency(features, alpha):
    """(FC_T, FC_M) per batch item as length-B tensors.

    ``features[b][k]`` holds ``(f_T, f_M)``; sums run over ordered frame pairs.
    """
    if len(features[0]) < 2:
        raise ValueError("frame consistency needs at least two frames")
    ft, fm = _stack_features(features)
    b, k = ft.shape[:2]
    s_tt, s_mm, _ = _similarity_blocks(ft, fm, alpha)
    fc, _, _, owner = _index_masks(b, k)
    own = Tensor(owner.astype(ft.dtype))
    fct = T.sum(T.matmul(own, s_tt * fc.astype(ft.dtype)), axis=1)
    fcm = T.sum(T.matmul(own, s_mm * fc.astype(ft.dtype)), axis=1)
    return fct, fcm


def batch_similarities(features, alpha, cs_exclude_self=False):
    """(SS_T, SS_M, CS_TM) per batch item as length-B tensors."""
    if len(features) == 0:
        raise ValueError("empty batch")
    ft, fm = _stack_features(features)
    b, k = ft.shape[:2]
    s_tt, s_mm, s_tm = _similarity_blocks(ft, fm, alpha)
    _, ss, cs, owner = _index_masks(b, k, cs_exclude_self)
    own = Tensor(owner.astype(ft.dtype))
    sst = T.sum(T.matmul(own, s_tt * ss.astype(ft.dtype)), axis=1)
    ssm = T.sum(T.matmul(own, s_mm * ss.astype(ft.dtype)), axis=1)
    cst = T.sum(T.matmul(own, s_tm * cs.astype(ft.dtype)), axis=1)
    return sst, ssm, cst


def contrastive_from_terms(fc_t, fc_m, ss_t, ss_m, cs):
    """-(1/B) Σ_b log[(FC_T + FC_M) / (SS_T + SS_M + CS)]."""
    num = fc_t + fc_m
    den = ss_t + ss_m + cs
    return T.scale(T.sum(T.log(num) - T.log(den)), -1.0 / num.shape[0])


def contrastive_loss(features, alpha, cs_exclude_self=False):
    fc_t, fc_m = frame_consistency(features, alpha)
    ss_t, ss_m, cs = batch_similarities(features, alpha, cs_exclude_self)
    return contrastive_from_terms(fc_t, fc_m, ss_t, ss_m, cs)


# ---------------------------------------------------------------- matching


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of the m rows to n >= m columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    m, n = cost.shape
    if m > n:
        raise ValueError(f"more rows than columns ({m} > {n})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return Assignment(mapping, float(cost[rows, cols].sum()))


# -------------------------------------------------------------- mask terms


def focal_loss(pred, gt, gamma=2.0, alpha=0.25):
    """Mean focal loss for probabilities ``pred`` against a binary ``gt``."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError("focal_loss: shape mismatch")
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise ValueError("focal_loss: probabilities must lie in [0, 1]")
    p = T.clamp(pred, *PROB_CLAMP)
    p_t = p * gt + (1.0 - p) * (1.0 - gt)
    alpha_t = alpha * gt + (1 - alpha) * (1 - gt)
    mod = T.power(1.0 - p_t, gamma)
    return T.mean(T.scale(mod * T.log(p_t) * alpha_t.astype(pred.dtype), -1.0))


def dice_loss(pred, gt):
    """1 - (2Σpg + 1) / (Σp + Σg + 1)."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError("dice_loss: shape mismatch")
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise ValueError("dice_loss: probabilities must lie in [0, 1]")
    num = T.scale(T.sum(pred * gt), 2.0) + 1.0
    den = T.sum(pred) + float(gt.sum()) + 1.0
    return 1.0 - num * T.power(den, -1.0)


def mask_loss(logits, gt, weights: LossWeights):
    prob = T.sigmoid(logits)
    return T.scale(focal_loss(prob, gt, weights.focal_gamma, weights.focal_alpha), weights.focal) + T.scale(
        dice_loss(prob, gt), weights.dice
    )


def class_ce(logits2, target):
    """Cross-entropy of a 2-class logit vector against class ``target``."""
    prob = T.clamp(T.softmax(logits2, axis=0), *PROB_CLAMP)
    return T.scale(T.log(prob[target]), -1.0)


def downsample_nearest(mask, h, w):
    """Nearest-neighbour resize of a binary H×W mask to h×w (pixel centres)."""
    mask = np.asarray(mask)
    H, W = mask.shape
    ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return mask[np.ix_(ys, xs)]


# ---------------------------------------------------------- numpy mirrors


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _np_focal(p, g, gamma, alpha):
    p = np.clip(p, *PROB_CLAMP)
    p_t = p * g + (1 - p) * (1 - g)
    a_t = alpha * g + (1 - alpha) * (1 - g)
    return float(np.mean(-a_t * (1 - p_t) ** gamma * np.log(p_t)))


def _np_dice(p, g):
    return float(1 - (2 * (p * g).sum() + 1) / (p.sum() + g.sum() + 1))


def _np_ce(logits2, target):
    z = logits2 - logits2.max()
    prob = np.exp(z) / np.exp(z).sum()
    return float(-np.log(np.clip(prob[target], *PROB_CLAMP)))


def match_cost(S_all, ms_mov, gt_masks, gt_flags, weights: LossWeights | None = None):
    """GT-by-prediction cost matrix built from the supervision terms.

    ``S_all`` n×h×w logits, ``ms_mov`` 2×n logits, ``gt_masks`` list of h×w
    binary masks already at decoder resolution, ``gt_flags`` list of 0/1.
    """
    w = weights or LossWeights()
    S = np.asarray(S_all.data if isinstance(S_all, Tensor) else S_all, dtype=np.float64)
    ms = np.asarray(ms_mov.data if isinstance(ms_mov, Tensor) else ms_mov, dtype=np.float64)
    n = S.shape[0]
    if ms.shape != (2, n):
        raise ValueError("match_cost: score/mask count mismatch")
    cost = np.zeros((len(gt_masks), n))
    probs = _np_sigmoid(S)
    for i, (g, flag) in enumerate(zip(gt_masks, gt_flags)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != S.shape[1:]:
            raise ValueError("match_cost: GT mask size differs from decoder output")
        for j in range(n):
            c = _np_ce(ms[:, j], int(flag))
            if flag == 1:
                c += w.focal * _np_focal(probs[j], g, w.focal_gamma, w.focal_alpha) + w.dice * _np_dice(probs[j], g)
            cost[i, j] = c
    return cost


def mos_loss(S_all, ms_mov, gt_masks, gt_flags, assignment: Assignment, weights: LossWeights | None = None):
    """Matched CE + gated mask loss, plus static-class CE for unmatched embeddings."""
    w = weights or LossWeights()
    n = S_all.shape[0]
    targets = set(assignment.mapping.values())
    if len(targets) != len(assignment.mapping) or any(not 0 <= j < n for j in targets):
        raise ValueError("invalid assignment")
    if len(assignment.mapping) != len(gt_masks):
        raise ValueError("assignment does not cover every GT entry")
    terms = []
    for i, j in sorted(assignment.mapping.items()):
        terms.append(class_ce(ms_mov[:, j], int(gt_flags[i])))
        if gt_flags[i] == 1:
            terms.append(mask_loss(S_all[j], gt_masks[i], w))
    for j in range(n):
        if j not in targets:
            terms.append(class_ce(ms_mov[:, j], 0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# -------------------------------------------------------------------- flow


def flow_supervised(F_pred, F_gt, valid=None):
    """Mean end-point error over valid pixels (2×H×W fields)."""
    F_pred = T.as_tensor(F_pred)
    F_gt = np.asarray(F_gt, dtype=F_pred.dtype)
    if F_pred.shape != F_gt.shape:
        raise ValueError("flow_supervised: shape mismatch")
    err = T.l2norm(F_pred - F_gt, axis=-3)
    if valid is None:
        return T.mean(err)
    valid = np.broadcast_to(np.asarray(valid, dtype=F_pred.dtype), err.shape)
    count = float(valid.sum())
    if count == 0:
        log.warning("flow_supervised: empty valid set, returning 0")
        return T.scale(T.sum(err), 0.0)
    return T.scale(T.sum(err * valid), 1.0 / count)


def pixel_grid(h, w, dtype=np.float64):
    ys, xs = np.mgrid[0:h, 0:w].astype(dtype)
    return np.stack([xs, ys])


def robust_penalty(x, params: FlowLossParams | None = None):
    p = params or FlowLossParams()
    return T.power(T.abs_(x) + p.eps, p.q)


def flow_photometric(I_t, I_next, F_pred, params: FlowLossParams | None = None):
    """Mean robust penalty of I_t(x) - I_next(x + F(x)); images C×H×W or N×C×H×W."""
    F_pred = T.as_tensor(F_pred)
    I_t = T.as_tensor(I_t, like=F_pred)
    I_next = T.as_tensor(I_next, like=F_pred)
    if I_t.shape != I_next.shape:
        raise ValueError("flow_photometric: frame sizes differ")
    h, w = I_t.shape[-2:]
    coords = F_pred + pixel_grid(h, w, F_pred.dtype)
    warped = T.bilinear_sample(I_next, coords)
    return T.mean(robust_penalty(I_t - warped, params))


def total_loss(l_mos, l_cl=None, l_flow=None, weights: LossWeights | None = None):
    w = weights or LossWeights()
    total = T.as_tensor(l_mos)
    if l_cl is not None and w.lambda_cl != 0:
        total = total + T.scale(l_cl, w.lambda_cl)
    if l_flow is not None and w.lambda_flow != 0:
        total = total + T.scale(l_flow, w.lambda_flow)
    return total
