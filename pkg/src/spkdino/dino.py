"""Self-distillation objective: sharpening, centering, multi-view cross-entropy,
EMA teacher updates and the training schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SCHEDULE_DEFAULTS = {
    "lambda": (0.996, 1.0),
    "lr": (0.2, 5e-5),
    "tau_t": (0.04, 0.07),
}


class DinoError(ValueError):
    pass


@dataclass
class DinoState:
    center: np.ndarray
    m: float = 0.9
    tau_s: float = 0.1
    tau_t_schedule: tuple = (0.04, 0.07, 0.2)
    lambda_schedule: tuple = (0.996, 1.0)
    step: int = 0
    total_steps: int = 1
    centering: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        start, end, warm = self.tau_t_schedule
        if self.tau_s <= 0:
            raise DinoError("tau_s must be positive")
        if not 0.0 < self.m < 1.0:
            raise DinoError(f"center momentum {self.m} must lie in (0, 1)")
        if not 0 < start <= end:
            raise DinoError("teacher temperature must be positive and non-decreasing")
        # centering-disabled ablations may run the teacher at the student temperature
        if self.centering and end >= self.tau_s:
            raise DinoError("teacher temperature must stay below the student temperature")
        if not 0.0 <= warm <= 1.0:
            raise DinoError("tau_t warm fraction must be in [0, 1]")

    @classmethod
    def fresh(cls, out_dim: int, **kw) -> "DinoState":
        return cls(center=np.zeros(out_dim), **kw)

    @property
    def tau_t(self) -> float:
        start, end, warm = self.tau_t_schedule
        return schedule_value("tau_t", self.step, self.total_steps, start, end, warm)

    @property
    def ema_lambda(self) -> float:
        start, end = self.lambda_schedule
        return schedule_value("lambda", self.step, self.total_steps, start, end)


@dataclass
class ViewOutputs:
    teacher_q: np.ndarray  # (long views, out_dim) or (batch, long views, out_dim)
    student_q: np.ndarray  # (views, out_dim) or (batch, views, out_dim); long views first


def schedule_value(kind: str, step: int, total: int, start: float | None = None,
                   end: float | None = None, warm_fraction: float = 0.2) -> float:
    """Cosine schedule for ``lambda``/``lr``; linear warm-up then constant for ``tau_t``."""
    if kind not in SCHEDULE_DEFAULTS:
        raise DinoError(f"unknown schedule {kind!r}")
    d_start, d_end = SCHEDULE_DEFAULTS[kind]
    start = d_start if start is None else start
    end = d_end if end is None else end
    if total <= 0:
        return end
    if not 0 <= step <= total:
        raise DinoError(f"step {step} outside [0, {total}]")
    if kind == "tau_t":
        warm_steps = warm_fraction * total
        if warm_steps <= 0 or step >= warm_steps:
            return end
        return start + (end - start) * (step / warm_steps)
    if step == total:
        return end
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / total))


def sharpen(q, tau: float) -> np.ndarray:
    if tau <= 0:
        raise DinoError("temperature must be positive")
    z = np.asarray(q, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_sharpen(q, tau: float) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def center_and_update(state: DinoState, teacher_qs):
    """Center with the current statistic, then fold the raw batch mean into it."""
    q = np.asarray(teacher_qs, dtype=np.float64)
    flat = q.reshape(-1, q.shape[-1])
    if flat.shape[0] < 1:
        raise DinoError("empty teacher batch")
    centered = q - state.center if state.centering else q.copy()
    new_center = state.m * state.center + (1.0 - state.m) * flat.mean(axis=0)
    return centered, replace(state, center=new_center)


def pair_count(n_long: int, n_views: int) -> int:
    return n_long * (n_views - 1)


def dino_loss(outputs: ViewOutputs, state: DinoState, tau_t: float | None = None):
    """Cross-entropy between every (teacher long view i, student view j != i) pair.

    Accepts a single utterance (2-D arrays) or a batch (3-D arrays); the loss is
    averaged over utterances.  Returns ``(loss, d_loss/d_student_q, info)``;
    no gradient is produced for the teacher side.
    """
    tq = np.asarray(outputs.teacher_q, dtype=np.float64)
    sq = np.asarray(outputs.student_q, dtype=np.float64)
    single = tq.ndim == 2
    if single:
        tq, sq = tq[None], sq[None]
    b, n_long, k = tq.shape
    n_views = sq.shape[1]
    if n_views < 2:
        raise DinoError("need at least two views (L + M >= 2)")
    if n_long < 1 or n_long > n_views or sq.shape[0] != b or sq.shape[2] != k:
        raise DinoError(f"teacher {tq.shape} and student {sq.shape} views do not line up")
    tau_t = state.tau_t if tau_t is None else tau_t
    centered = tq - state.center if state.centering else tq
    p_t = sharpen(centered, tau_t)                 # (B, L, K)
    log_p_s = log_sharpen(sq, state.tau_s)         # (B, V, K)
    p_s = np.exp(log_p_s)

    # ce[b, i, j] = H(p_t^i, p_s^j)
    ce = -np.einsum("bik,bjk->bij", p_t, log_p_s)
    mask = np.ones((n_long, n_views), dtype=bool)
    mask[np.arange(n_long), np.arange(n_long)] = False
    n_pairs = pair_count(n_long, n_views)
    loss = float(ce[:, mask].sum() / (n_pairs * b))

    # d H(p_t^i, p_s^j) / d q_s^j = (p_s^j - p_t^i) / tau_s
    n_partners = mask.sum(axis=0).astype(float)    # teachers paired with view j
    t_sum = np.einsum("ij,bik->bjk", mask.astype(float), p_t)
    grad = (n_partners[None, :, None] * p_s - t_sum) / (state.tau_s * n_pairs * b)
    info = {
        "pairs": n_pairs,
        "teacher_entropy": float(entropy(p_t).mean()),
        "teacher_argmax": p_t.argmax(axis=-1),
    }
    if single:
        grad = grad[0]
    return loss, grad, info


def ema_update(student_params: dict, teacher_params: dict, lam: float) -> dict:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, in place."""
    if not 0.0 <= lam <= 1.0:
        raise DinoError(f"EMA coefficient {lam} outside [0, 1]")
    for name, t in teacher_params.items():
        s = student_params[name]
        if s.shape != t.shape:
            raise DinoError(f"shape mismatch for {name}: {s.shape} vs {t.shape}")
        if lam == 1.0:
            continue
        t *= lam
        t += (1.0 - lam) * s
    return teacher_params
