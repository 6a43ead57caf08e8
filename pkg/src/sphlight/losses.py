"""Supervision losses on predicted lighting coefficients with analytic gradients.

Three terms: a sparse L2 on the coefficients, a dense L2 on reconstructed
environment maps, and a photometric term on relit images (log-domain L1 blended
with structural dissimilarity). All gradients are with respect to the predicted
coefficients and are validated against central finite differences.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import sh
from .images import EquirectImage, NormalMap
from .render import irradiance_basis_for, relight

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
SSIM_WINDOW = 7

DEFAULT_ALPHA = 0.85


@dataclass(frozen=True)
class LossWeights:
    lambda_sh: float = 0.01
    lambda_rc: float = 0.3
    lambda_rl: float = 0.7
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if min(self.lambda_sh, self.lambda_rc, self.lambda_rl) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class LossReport:
    loss_sh: float
    loss_rc: float
    loss_rl: float
    total: float
    grad: np.ndarray          # (27,) in coefficient layout, d total / d raw prediction
    active: dict = field(default_factory=dict)   # which terms contributed

    def to_json(self) -> str:
        return json.dumps({
            "loss_sh": self.loss_sh,
            "loss_rc": self.loss_rc,
            "loss_rl": self.loss_rl,
            "total": self.total,
            "grad": [float(g) for g in self.grad],
        }, indent=2)


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _prior_channel(v: np.ndarray):
    """Magnitude-preserving softmax of one 9-vector and its Jacobian."""
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v), np.zeros((v.size, v.size))
    s = _softmax(v)
    jac = np.outer(s, v / norm) + norm * (np.diag(s) - np.outer(s, s))
    return norm * s, jac


def spectral_prior(coeffs: sh.ShCoefficients) -> sh.ShCoefficients:
    """Reshape each channel to norm * softmax, enforcing a DC-dominant spectrum."""
    out = np.array([_prior_channel(ch)[0] for ch in coeffs.values])
    return sh.ShCoefficients(out)


def loss_sh(gt: sh.ShCoefficients, pred: sh.ShCoefficients):
    """Mean squared error over all 27 coefficients; gradient w.r.t. pred."""
    diff = pred.values - gt.values
    value = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return value, grad


def loss_rc(gt: sh.ShCoefficients, pred: sh.ShCoefficients, width: int, height: int):
    """Attention-weighted squared error between reconstructed environment maps."""
    basis = sh.basis_grid(width, height)            # (h, w, 9)
    mask = sh.attention_mask(width, height)         # (h, w)
    diff = basis.reshape(-1, 9) @ (gt.values - pred.values).T   # (hw, 3)
    diff = diff.reshape(height, width, 3)
    n = width * height
    value = float(np.sum(mask * np.sum(diff * diff, axis=-1)) / n)
    weighted = (mask[..., None] * diff).reshape(-1, 3)
    grad = (-2.0 / n) * (weighted.T @ basis.reshape(-1, 9))     # (3, 9)
    return value, grad


def _box(a: np.ndarray) -> np.ndarray:
    """Normalized box window with zero padding; self-adjoint, which the gradient relies on."""
    size = (SSIM_WINDOW, SSIM_WINDOW) + (1,) * (a.ndim - 2)
    return uniform_filter(a, size=size, mode="constant", cval=0.0)


class PhotometricObjective:
    """Log-domain photometric distance from a fixed target image to relit predictions.

    Target-side statistics are precomputed; `value`/`value_grad` evaluate candidate
    coefficients. Arrays follow the constructor dtype (float64 for exact checks,
    float32 is adequate for fitting). `l1_smooth_width` > 0 replaces the L1
    subgradient sign with a Huber slope for optimizer use; the value is always the
    exact loss.
    """

    def __init__(self, target: EquirectImage, base: EquirectImage, normals: NormalMap,
                 alpha: float, dtype=np.float64):
        if (target.width, target.height) != (base.width, base.height) or \
           (base.width, base.height) != (normals.width, normals.height):
            raise ValueError("target, base and normals dimensions must match")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        h, w = base.height, base.width
        self.shape = (h, w)
        self.dtype = dtype
        self.alpha = float(alpha)
        basis = irradiance_basis_for(normals.normals) * normals.valid[..., None]
        self.basis_flat = basis.reshape(-1, 9).astype(dtype)
        self.base = base.pixels.astype(dtype)
        n = h * w
        # Attention weight over N pixels, split evenly over the 3 channels.
        self.up3 = (sh.attention_mask(w, h) / n).astype(dtype)[..., None] / dtype(3.0)
        x = np.log1p(np.asarray(target.pixels, dtype=dtype))
        self.x = x
        self.mx = _box(x)
        self.sxx = _box(x * x) - self.mx * self.mx

    def _forward(self, coeff_values: np.ndarray):
        e = (self.basis_flat @ coeff_values.T.astype(self.dtype)).reshape(*self.shape, 3)
        pos = e > 0
        r = np.where(pos, e, 0) * self.base
        g = np.log1p(r)
        diff = self.x - g
        my = _box(g)
        syy = _box(g * g) - my * my
        sxy = _box(self.x * g) - self.mx * my
        a1 = 2 * self.mx * my + SSIM_C1
        a2 = 2 * sxy + SSIM_C2
        b1 = self.mx * self.mx + my * my + SSIM_C1
        b2 = self.sxx + syy + SSIM_C2
        ssim = (a1 * a2) / (b1 * b2)
        value = self.alpha * float(np.sum(self.up3 * np.abs(diff)))
        if self.alpha < 1.0:
            # Explicit (1 - S)/2 so identical images yield exactly zero.
            value += (1.0 - self.alpha) * 0.5 * float(np.sum(self.up3 * (1.0 - ssim)))
        return value, (pos, r, g, diff, my, a1, a2, b1, b2)

    def value(self, coeffs: sh.ShCoefficients | np.ndarray) -> float:
        values = coeffs.values if isinstance(coeffs, sh.ShCoefficients) else coeffs
        return self._forward(values)[0]

    def value_grad(self, coeffs: sh.ShCoefficients | np.ndarray, l1_smooth_width: float = 0.0):
        values = coeffs.values if isinstance(coeffs, sh.ShCoefficients) else coeffs
        value, (pos, r, g, diff, my, a1, a2, b1, b2) = self._forward(values)
        if l1_smooth_width > 0.0:
            slope = np.clip(diff / self.dtype(l1_smooth_width), -1.0, 1.0)
        else:
            slope = np.sign(diff)
        dl_dg = (-self.alpha) * self.up3 * slope
        if self.alpha < 1.0:
            # d(sum up*SD)/dS = -up/2, routed through the windowed statistics of g.
            ups = (-(1.0 - self.alpha) * 0.5) * self.up3
            t1 = ups * (a2 / b2) * 2 * (self.mx * b1 - my * a1) / (b1 * b1)
            t2 = ups * (-a1 * a2 / (b1 * b2 * b2))
            t3 = ups * (a1 / b1) * (2.0 / b2)
            dl_dg = dl_dg + _box(t1) + 2 * g * _box(t2) - 2 * _box(t2 * my) \
                + self.x * _box(t3) - _box(t3 * self.mx)
        dl_de = np.where(pos, self.base / (1 + r), 0) * dl_dg
        grad = (dl_de.reshape(-1, 3).T @ self.basis_flat).astype(np.float64)
        return value, grad


def loss_rl(base_hdr: EquirectImage, normals: NormalMap,
            gt: sh.ShCoefficients, pred: sh.ShCoefficients,
            alpha: float = DEFAULT_ALPHA):
    """Photometric loss between renders under ground-truth and predicted lighting."""
    target = relight(base_hdr, normals, gt)
    objective = PhotometricObjective(target, base_hdr, normals, alpha)
    return objective.value_grad(pred)


def total_loss(gt: sh.ShCoefficients, pred_raw: sh.ShCoefficients,
               weights: LossWeights = LossWeights(),
               base: EquirectImage | None = None, normals: NormalMap | None = None,
               use_prior: bool = False,
               rc_size: tuple[int, int] | None = None) -> LossReport:
    """Weighted objective over the active terms, gradient w.r.t. the raw prediction.

    With `use_prior` the prediction is reshaped through the spectral prior before
    every term and the gradient is chained through its Jacobian. The reconstruction
    term runs at `rc_size` (defaults to the base image size, else 512x256).
    """
    if use_prior:
        pairs = [_prior_channel(ch) for ch in pred_raw.values]
        pred = sh.ShCoefficients(np.array([p for p, _ in pairs]))
        jacobians = [j for _, j in pairs]
    else:
        pred = pred_raw

    active = {"sh": weights.lambda_sh > 0, "rc": weights.lambda_rc > 0,
              "rl": weights.lambda_rl > 0}
    v_sh, g_sh = (0.0, np.zeros((3, 9)))
    v_rc, g_rc = (0.0, np.zeros((3, 9)))
    v_rl, g_rl = (0.0, np.zeros((3, 9)))
    if active["sh"]:
        v_sh, g_sh = loss_sh(gt, pred)
    if active["rc"]:
        if rc_size is None:
            rc_size = (base.width, base.height) if base is not None else (512, 256)
        v_rc, g_rc = loss_rc(gt, pred, rc_size[0], rc_size[1])
    if active["rl"]:
        if base is None or normals is None:
            raise ValueError("photometric term requires base image and normals")
        v_rl, g_rl = loss_rl(base, normals, gt, pred, weights.alpha)

    total = weights.lambda_sh * v_sh + weights.lambda_rc * v_rc + weights.lambda_rl * v_rl
    grad = weights.lambda_sh * g_sh + weights.lambda_rc * g_rc + weights.lambda_rl * g_rl
    if use_prior:
        grad = np.array([jacobians[c].T @ grad[c] for c in range(3)])
    return LossReport(loss_sh=v_sh, loss_rc=v_rc, loss_rl=v_rl, total=total,
                      grad=grad.reshape(27), active=active)


def check_gradients(evaluator, point: sh.ShCoefficients, epsilon: float = 1e-4) -> float:
    """Max relative deviation between the evaluator's gradient and central differences.

    The evaluator maps coefficients to (value, gradient); the gradient may be
    shaped (3, 9) or flat (27,).
    """
    _, grad = evaluator(point)
    grad = np.asarray(grad, dtype=np.float64).reshape(27)
    worst = 0.0
    flat = point.values.reshape(27)
    for k in range(27):
        bumped = flat.copy()
        bumped[k] += epsilon
        f_plus, _ = evaluator(sh.ShCoefficients(bumped.reshape(3, 9)))
        bumped[k] -= 2 * epsilon
        f_minus, _ = evaluator(sh.ShCoefficients(bumped.reshape(3, 9)))
        fd = (f_plus - f_minus) / (2.0 * epsilon)
        worst = max(worst, abs(grad[k] - fd) / (abs(fd) + 1e-8))
    return worst
