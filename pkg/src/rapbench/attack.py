"""Gradient attack on region-proposal scoring and box regression.

A proposal is *positive* when its decoded box overlaps some ground-truth box
with IoU above mu1 and its confidence exceeds mu2 (both strict). The attack
minimizes, with respect to the image,

    label loss:  sum_j z_j * log(s_j)
    shape loss:  sum_j z_j * ((dx_j - tau_x)^2 + (dy_j - tau_y)^2
                              + (dw_j - tau_w)^2 + (dh_j - tau_h)^2)

where the indicator z is recomputed from each fresh forward pass and treated
as a constant (no gradient flows through it). Each iteration takes a step of
fixed L2 norm lam along the negative gradient, clips pixels to [0, 255], and
stops when the iteration budget is exhausted, no positives remain, the
luminance PSNR to the clean image would drop below epsilon (the offending
iterate is discarded, so the returned image always satisfies the bound), or
the gradient vanishes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .numerics import Tape, Tensor, backward, clamp, leaf, masked_select
from .metrics import iou_matrix, psnr_luminance, psnr_for_output
from .rpn import RpnModel, forward
from .scenes import RAW_PERTURBATION_MAGIC, read_rawimg, write_rawimg

TERMINATION_REASONS = ("max-iters", "no-positives", "psnr-floor", "stalled")


@dataclass(frozen=True)
class AttackConfig:
    mu1: float = 0.1                    # IoU threshold for the indicator
    mu2: float = 0.4                    # score threshold for the indicator
    tau: tuple[float, float, float, float] = (1e5, 1e5, 1e5, 1e5)
    lam: float = 30.0                   # fixed L2 step norm
    max_iters: int = 210
    epsilon: float = 30.0               # PSNR floor in dB
    alpha: float = 0.5                  # accumulation scale
    use_shape_loss: bool = True
    shape_loss_weight: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.mu1 < 1.0:
            raise ValueError(f"mu1 must be in [0, 1), got {self.mu1}")
        if not 0.0 < self.mu2 < 1.0:
            raise ValueError(f"mu2 must be in (0, 1), got {self.mu2}")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if len(self.tau) != 4:
            raise ValueError("tau must have four components (x, y, w, h)")


@dataclass
class Perturbation:
    """Signed pixel delta plus provenance of the run that produced it."""
    values: np.ndarray
    source_model: str
    iterations: int
    final_psnr: float
    termination_reason: str


@dataclass
class TraceRow:
    loss: float
    n_positive: int
    psnr: float
    step_norm: float


@dataclass
class AttackTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)


def positive_mask(proposals, truth, mu1: float, mu2: float) -> np.ndarray:
    """0/1 indicator per proposal; constant w.r.t. differentiation.

    z_j = 1 iff some ground-truth box has IoU(gt, decoded_j) > mu1 and
    s_j > mu2. Empty ground truth yields the all-zero mask.
    """
    scores = proposals.scores.values
    if not truth.boxes:
        return np.zeros(len(scores), dtype=np.int8)
    gt = np.array([b.as_array() for b in truth.boxes])
    overlap = iou_matrix(proposals.decoded, gt).max(axis=1)
    return ((overlap > mu1) & (scores > mu2)).astype(np.int8)


def label_loss(proposals, z: np.ndarray) -> Tensor:
    """sum_j z_j log(s_j); zero when no positives. Scores clamped >= 1e-12."""
    if not z.any():
        return Tensor(0.0)
    sel = masked_select(proposals.scores, z.astype(bool))
    return nm.reduce_sum(nm.log(clamp(sel, lo=1e-12)))


def shape_loss(proposals, z: np.ndarray, tau) -> Tensor:
    """Squared distance of positive proposals' raw offsets from tau."""
    if not z.any():
        return Tensor(0.0)
    row_mask = np.repeat(z.astype(bool)[:, None], 4, axis=1)
    sel = masked_select(proposals.offsets, row_mask)
    targets = np.tile(np.asarray(tau, dtype=np.float64), int(z.sum()))
    return nm.reduce_sum(nm.square(nm.subtract(sel, Tensor(targets))))


def combined_loss(proposals, z: np.ndarray, config: AttackConfig) -> Tensor:
    loss = label_loss(proposals, z)
    if config.use_shape_loss:
        loss = nm.add(loss, nm.scale(shape_loss(proposals, z, config.tau),
                                     config.shape_loss_weight))
    return loss


def run_attack(model: RpnModel, scene, config: AttackConfig):
    """Iterative perturbation generation against one scene.

    Returns (Perturbation, AttackTrace). The perturbed image is guaranteed to
    keep PSNR >= config.epsilon against the clean scene and all pixels within
    [0, 255]; the trace records (loss, positive count, PSNR, step norm) per
    forward pass.
    """
    config.validate()
    original = np.asarray(scene.image, dtype=np.float64)
    current = original.copy()
    trace = AttackTrace()

    def finish(reason: str, iterations: int) -> tuple[Perturbation, AttackTrace]:
        pert = Perturbation(
            values=current - original,
            source_model=model.name,
            iterations=iterations,
            final_psnr=psnr_luminance(original, current),
            termination_reason=reason,
        )
        return pert, trace

    if not scene.truth.boxes:
        trace.rows.append(TraceRow(0.0, 0, math.inf, 0.0))
        return finish("no-positives", 0)

    t = 0
    while t < config.max_iters:
        psnr_now = psnr_luminance(original, current)
        with Tape():
            img = leaf(current)
            out = forward(model, img)
            z = positive_mask(out, scene.truth, config.mu1, config.mu2)
            n_pos = int(z.sum())
            if n_pos == 0:
                trace.rows.append(TraceRow(0.0, 0, psnr_now, 0.0))
                return finish("no-positives", t)
            loss = combined_loss(out, z, config)
            grad = backward(loss)[img].values
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm == 0.0:
            trace.rows.append(TraceRow(loss.item(), n_pos, psnr_now, 0.0))
            return finish("stalled", t)
        step = (config.lam / grad_norm) * grad
        trace.rows.append(TraceRow(loss.item(), n_pos, psnr_now,
                                   float(np.linalg.norm(step))))
        candidate = np.clip(current - step, 0.0, 255.0)
        if psnr_luminance(original, candidate) < config.epsilon:
            # discard the fresh iterate: the result must respect the bound
            return finish("psnr-floor", t)
        current = candidate
        t += 1
    return finish("max-iters", t)


def accumulate(perturbations: list[Perturbation], alpha: float) -> Perturbation:
    """Scaled sum alpha * sum_i p_i of same-shape perturbations.

    The accumulated perturbation is not PSNR-bounded by construction; its
    PSNR is measured when applied.
    """
    if not perturbations:
        raise ValueError("accumulate: need at least one perturbation")
    shape = perturbations[0].values.shape
    for p in perturbations[1:]:
        if p.values.shape != shape:
            raise ValueError(
                f"accumulate: shape mismatch {p.values.shape} vs {shape}")
    total = alpha * np.sum([p.values for p in perturbations], axis=0)
    return Perturbation(
        values=total,
        source_model="P",
        iterations=0,
        final_psnr=math.nan,
        termination_reason="accumulated",
    )


def apply_perturbation(image: np.ndarray, perturbation) -> np.ndarray:
    values = perturbation.values if isinstance(perturbation, Perturbation) \
        else np.asarray(perturbation)
    return np.clip(np.asarray(image, dtype=np.float64) + values, 0.0, 255.0)


def gaussian_baseline(image: np.ndarray, target_psnr: float, seed: int,
                      tolerance_db: float = 0.1,
                      max_steps: int = 50) -> Perturbation:
    """Zero-mean Gaussian noise bisection-scaled to a luminance PSNR target.

    The achieved PSNR (measured after clipping to [0, 255]) lands within
    +-tolerance_db of target_psnr.
    """
    if target_psnr <= 0:
        raise ValueError("target_psnr must be positive")
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(image.shape)

    def achieved(scale: float) -> float:
        return psnr_luminance(image, np.clip(image + scale * noise, 0.0, 255.0))

    lo, hi = 0.0, 1.0
    for _ in range(60):
        if achieved(hi) <= target_psnr:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise ValueError(
            f"gaussian_baseline: target {target_psnr} dB unreachable")
    scale = hi
    for _ in range(max_steps):
        value = achieved(scale)
        if abs(value - target_psnr) <= tolerance_db:
            break
        if value > target_psnr:
            lo = scale
        else:
            hi = scale
        scale = (lo + hi) / 2.0
    else:
        raise ValueError(
            f"gaussian_baseline: did not reach {target_psnr} dB within "
            f"{max_steps} bisection steps")
    final = np.clip(image + scale * noise, 0.0, 255.0)
    return Perturbation(
        values=final - image,
        source_model="random",
        iterations=0,
        final_psnr=psnr_luminance(image, final),
        termination_reason="matched-psnr",
    )


# ---------------------------------------------------------------------------
# persistence: .rawimg payload (magic RAPP) + JSON sidecar


def save_perturbation(path_base, perturbation: Perturbation,
                      config: AttackConfig | None = None) -> None:
    """Write <base>.rawimg and <base>.json next to each other."""
    base = str(path_base)
    write_rawimg(base + ".rawimg", perturbation.values,
                 magic=RAW_PERTURBATION_MAGIC)
    sidecar = {
        "source_model": perturbation.source_model,
        "iterations": perturbation.iterations,
        "final_psnr": _json_psnr(perturbation.final_psnr),
        "termination_reason": perturbation.termination_reason,
        "config": asdict(config) if config is not None else None,
    }
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_perturbation(path_base) -> Perturbation:
    base = str(path_base)
    values = read_rawimg(base + ".rawimg", magic=RAW_PERTURBATION_MAGIC)
    with open(base + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    psnr = sidecar["final_psnr"]
    return Perturbation(
        values=values,
        source_model=sidecar["source_model"],
        iterations=sidecar["iterations"],
        final_psnr=math.nan if psnr is None else float(psnr),
        termination_reason=sidecar["termination_reason"],
    )


def _json_psnr(value: float):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return psnr_for_output(value)
