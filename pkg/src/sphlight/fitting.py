"""Inverse-rendering lighting estimation and the median-scaled evaluation metric."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import sh
from .images import EquirectImage, NormalMap
from .losses import LossWeights, PhotometricObjective, _prior_channel, loss_rc, loss_sh
from .render import C4, irradiance_basis_for


class ComputationError(Exception):
    """Numerical failure: rank deficiency, divergence, undefined scaling."""


@dataclass
class FitConfig:
    method: str = "least_squares"       # or "gradient_descent"
    max_iters: int = 500
    step_size: float = 1e-2
    momentum: float = 0.9
    ridge: float = 1e-8
    use_prior: bool = False
    convergence_tol: float = 1e-9

    def __post_init__(self):
        if self.method not in ("least_squares", "gradient_descent"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if self.step_size <= 0 or self.ridge < 0 or self.max_iters < 0:
            raise ValueError("step_size must be > 0, ridge >= 0, max_iters >= 0")


@dataclass
class EvalResult:
    m_rmse: float
    scale_applied: float | list
    per_channel_rmse: list

    def to_json(self) -> str:
        return json.dumps({
            "m_rmse": self.m_rmse,
            "scale": self.scale_applied,
            "per_channel": [float(v) for v in self.per_channel_rmse],
        })


def fit_least_squares(base: EquirectImage, normals: NormalMap, target: EquirectImage,
                      ridge: float = 1e-8) -> sh.ShCoefficients:
    """Recover lighting by solving the per-channel 9x9 normal equations.

    The render is linear in the coefficients (irradiance basis times base pixel),
    so the solid-angle-weighted least squares has a closed form. Pixels with
    degenerate normals or zero base contribute nothing. The Tikhonov term is
    `ridge` times the mean diagonal of the normal matrix.
    """
    if (base.width, base.height) != (target.width, target.height) or \
       (base.width, base.height) != (normals.width, normals.height):
        raise ValueError("base, normals and target dimensions must match")
    b = (irradiance_basis_for(normals.normals) * normals.valid[..., None]).reshape(-1, 9)
    dom = sh.solid_angle_weights(base.width, base.height).reshape(-1)
    base_px = base.pixels.reshape(-1, 3)
    target_px = target.pixels.reshape(-1, 3)
    out = np.zeros((3, 9))
    for c in range(3):
        w = dom * base_px[:, c] * base_px[:, c]
        m = (b * w[:, None]).T @ b
        rhs = b.T @ (dom * base_px[:, c] * target_px[:, c])
        lam = ridge * (np.trace(m) / 9.0 if np.trace(m) > 0 else 1.0)
        if lam > 0:
            m = m + lam * np.eye(9)
        try:
            out[c] = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            raise ComputationError(
                f"rank-deficient normal coverage in channel {c}; "
                "supply a positive ridge") from None
    return sh.ShCoefficients(out)


def _ambient_init(base: EquirectImage, target: EquirectImage) -> np.ndarray:
    """Uniform-lighting guess: per channel, DC such that C4*L00*mean(base) = mean(target)."""
    mb = base.pixels.reshape(-1, 3).mean(axis=0)
    mt = target.pixels.reshape(-1, 3).mean(axis=0)
    init = np.zeros((3, 9))
    init[:, 0] = np.where(mb > 0, mt / (C4 * np.maximum(mb, 1e-300)), 0.0)
    return init


class _DescentObjective:
    """Weighted fitting objective: photometric term against a fixed target plus
    optional coefficient/reconstruction anchors to known ground truth."""

    def __init__(self, base, normals, target, gt, weights: LossWeights, use_prior: bool):
        self.photo = PhotometricObjective(target, base, normals, weights.alpha,
                                          dtype=np.float32)
        self.gt = gt
        self.weights = weights
        self.use_prior = use_prior
        self.rc_size = (base.width, base.height)

    def _effective(self, raw: np.ndarray):
        if not self.use_prior:
            return raw, None
        pairs = [_prior_channel(ch) for ch in raw]
        return np.array([p for p, _ in pairs]), [j for _, j in pairs]

    def value(self, raw: np.ndarray) -> float:
        pred, _ = self._effective(raw)
        w = self.weights
        val = w.lambda_rl * self.photo.value(pred) if w.lambda_rl > 0 else 0.0
        if self.gt is not None:
            pred_c = sh.ShCoefficients(pred)
            if w.lambda_sh > 0:
                val += w.lambda_sh * loss_sh(self.gt, pred_c)[0]
            if w.lambda_rc > 0:
                val += w.lambda_rc * loss_rc(self.gt, pred_c, *self.rc_size)[0]
        return val

    def value_grad(self, raw: np.ndarray, l1_smooth_width: float):
        pred, jacobians = self._effective(raw)
        w = self.weights
        val, grad = 0.0, np.zeros((3, 9))
        if w.lambda_rl > 0:
            v, g = self.photo.value_grad(pred, l1_smooth_width)
            val += w.lambda_rl * v
            grad += w.lambda_rl * g
        if self.gt is not None:
            pred_c = sh.ShCoefficients(pred)
            if w.lambda_sh > 0:
                v, g = loss_sh(self.gt, pred_c)
                val += w.lambda_sh * v
                grad += w.lambda_sh * g
            if w.lambda_rc > 0:
                v, g = loss_rc(self.gt, pred_c, *self.rc_size)
                val += w.lambda_rc * v
                grad += w.lambda_rc * g
        if jacobians is not None:
            grad = np.array([jacobians[c].T @ grad[c] for c in range(3)])
        return val, grad


# Smoothing continuation for the L1 kink: descent directions come from a
# Huber-smoothed gradient whose width shrinks whenever progress stalls; step
# acceptance always uses the exact loss, so the trace is monotone.
_MU_START = 1e-2
_MU_FLOOR = 1e-9
_STEP_GROWTH = 1.25
_STEP_CAP = 10.0
_STALL_WINDOW = 10


def fit_gradient_descent(base: EquirectImage, normals: NormalMap, target: EquirectImage,
                         gt: sh.ShCoefficients | None = None,
                         weights: LossWeights = LossWeights(),
                         config: FitConfig | None = None):
    """Momentum descent on raw coefficients against a photometric target.

    Without `gt` the coefficient and reconstruction terms are disabled
    (photometric-only). With `config.use_prior` the optimization runs through the
    spectral prior reparameterization and the returned coefficients are the
    post-prior prediction. Returns (coefficients, per-iteration loss trace); the
    trace is non-increasing because steps are only accepted on improvement.
    """
    if (base.width, base.height) != (target.width, target.height) or \
       (base.width, base.height) != (normals.width, normals.height):
        raise ValueError("base, normals and target dimensions must match")
    cfg = config or FitConfig(method="gradient_descent")
    if gt is None:
        weights = LossWeights(lambda_sh=0.0, lambda_rc=0.0,
                              lambda_rl=weights.lambda_rl or 1.0, alpha=weights.alpha)
    objective = _DescentObjective(base, normals, target, gt, weights, cfg.use_prior)

    raw = _ambient_init(base, target)
    mu = _MU_START
    val, grad = objective.value_grad(raw, mu)
    if not np.isfinite(val):
        raise ComputationError("non-finite loss at iteration 0")
    vel = np.zeros_like(raw)
    step = cfg.step_size
    trace = [val]
    for it in range(cfg.max_iters):
        accepted = False
        while step >= 1e-15:
            vel_try = cfg.momentum * vel - step * grad
            val_try = objective.value(raw + vel_try)
            if np.isfinite(val_try) and val_try <= val + 1e-12 * max(1.0, abs(val)):
                raw = raw + vel_try
                vel = vel_try
                val = val_try
                _, grad = objective.value_grad(raw, mu)
                step = min(step * _STEP_GROWTH, cfg.step_size * _STEP_CAP)
                accepted = True
                break
            vel = vel * 0.5
            step *= 0.5
        if accepted:
            trace.append(val)
        if not np.isfinite(val):
            raise ComputationError(f"non-finite loss at iteration {it + 1}")
        window_flat = (len(trace) > _STALL_WINDOW and
                       abs(trace[-1 - _STALL_WINDOW] - trace[-1])
                       <= cfg.convergence_tol * max(trace[-1 - _STALL_WINDOW], 1e-30))
        if not accepted or window_flat:
            if mu > _MU_FLOOR:
                mu *= 0.1
                step = cfg.step_size
                vel[:] = 0.0
                _, grad = objective.value_grad(raw, mu)
            else:
                break
    final, _ = objective._effective(raw)
    return sh.ShCoefficients(final), trace


def m_rmse(pred_map: EquirectImage, gt_map: EquirectImage,
           per_channel_scale: bool = False) -> EvalResult:
    """Median-scaled RMSE with spherical distortion weighting.

    The prediction is scaled by the ratio of medians (pooled over all pixel-channel
    values by default, per channel behind the flag) before the attention-weighted
    RMSE, removing scale ambiguity between methods.
    """
    if (pred_map.width, pred_map.height) != (gt_map.width, gt_map.height):
        raise ValueError("prediction and ground-truth dimensions must match")
    p, g = pred_map.pixels, gt_map.pixels
    if per_channel_scale:
        med_p = np.median(p.reshape(-1, 3), axis=0)
        med_g = np.median(g.reshape(-1, 3), axis=0)
        if np.any(med_p <= 0):
            raise ComputationError("non-positive prediction median; scale undefined")
        scale = med_g / med_p
        scale_out = [float(s) for s in scale]
    else:
        med_p = np.median(p)
        med_g = np.median(g)
        if med_p <= 0:
            raise ComputationError("non-positive prediction median; scale undefined")
        scale = med_g / med_p
        scale_out = float(scale)
    mask = sh.attention_mask(pred_map.width, pred_map.height)
    sq = (scale * p - g) ** 2
    denom = mask.sum()
    per_channel = np.sqrt(np.einsum("hw,hwc->c", mask, sq) / denom)
    value = float(np.sqrt(np.sum(mask[..., None] * sq) / (3.0 * denom)))
    return EvalResult(m_rmse=value, scale_applied=scale_out,
                      per_channel_rmse=[float(v) for v in per_channel])


def evaluate_pair(pred: sh.ShCoefficients, gt: sh.ShCoefficients,
                  width: int = 512, height: int = 256,
                  per_channel_scale: bool = False) -> EvalResult:
    """m-RMSE between dense reconstructions of two coefficient sets."""
    return m_rmse(sh.reconstruct(pred, width, height), sh.reconstruct(gt, width, height),
                  per_channel_scale=per_channel_scale)
