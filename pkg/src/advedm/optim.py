"""Constrained first-order optimisation of an image perturbation.

The optimisation variable is the perturbation ``delta`` added to a fixed base
image.  Every step is an Adam update followed by projection onto the
epsilon ball and then onto the [0, 1] pixel box, so every iterate the loss is
ever evaluated at is feasible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from advedm.encoders.base import as_image
from advedm.regions import PatchMask, RegionSpec

logger = logging.getLogger(__name__)

NORM_MODES = {"linf": "linf", "per_pixel_infinity": "linf", "l2": "l2", "global_l2": "l2"}

REMOVAL_WEIGHTS = (0.5, 2.0, 0.2)
ADDITION_WEIGHTS = (0.8, 2.0, 0.3)


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    norm_mode: str = "linf"
    iterations: int = 500
    step_size: float = 0.005
    weights: tuple[float, float, float] = REMOVAL_WEIGHTS
    alpha: float = 0.5
    beta: float = 0.4
    selection_mode: str = "top_fraction"
    selection_param: float = 0.2
    region: RegionSpec | None = None
    region_size: int | None = None
    region_pixels: int = 100
    foreground: tuple[str, ...] = ()
    attention_mode: str = "literal"
    seed: int = 0
    random_start: bool = False
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.norm_mode = NORM_MODES.get(self.norm_mode, self.norm_mode)
        self.weights = tuple(float(w) for w in self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.foreground = tuple(self.foreground)
        if isinstance(self.region, dict):
            self.region = RegionSpec(**self.region)
        elif isinstance(self.region, (list, tuple)):
            self.region = RegionSpec(*self.region)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.norm_mode not in ("linf", "l2"):
            raise ValueError(f"unknown norm mode {self.norm_mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError(f"weights must be three nonnegative numbers, got {self.weights}")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.attention_mode not in ("literal", "weighted"):
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")

    @classmethod
    def removal(cls, **overrides) -> "AttackConfig":
        return cls(**{"weights": REMOVAL_WEIGHTS, **overrides})

    @classmethod
    def addition(cls, **overrides) -> "AttackConfig":
        return cls(**{"weights": ADDITION_WEIGHTS, **overrides})

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["adam_betas"] = list(self.adam_betas)
        d["foreground"] = list(self.foreground)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    """Loss terms at one iterate, with the feasibility figures of that iterate."""

    l_cls: float
    l_p: float
    l_fix: float
    total: float
    residual: float = 0.0
    pixel_min: float = 0.0
    pixel_max: float = 0.0

    @classmethod
    def combine(cls, terms, weights) -> "LossBreakdown":
        l_cls, l_p, l_fix = (float(t) for t in terms)
        w1, w2, w3 = weights
        return cls(l_cls, l_p, l_fix, w1 * l_cls + w2 * l_p + w3 * l_fix)


# The removal attack's name for the same record.
RemovalLossBreakdown = LossBreakdown


@dataclass
class AttackResult:
    adversarial: np.ndarray
    mask: PatchMask | None
    trace: list[LossBreakdown]
    residual: float
    iterations_run: int
    best_iteration: int = 0
    aborted: bool = False
    diagnostic: str = ""
    region: RegionSpec | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def best_loss(self) -> float:
        return self.trace[self.best_iteration].total if self.trace else math.nan


def _tighten(bound, base, ok, toward):
    # step the sum base + bound one ulp at a time until it passes the float check;
    # stepping the bound itself would move far less than one ulp of base
    for _ in range(64):
        x = base + bound
        bad = ~ok(x)
        if not bad.any():
            return bound
        bound = np.where(bad, np.nextafter(x, toward) - base, bound)
    raise FloatingPointError("could not find float-feasible perturbation bounds")


def delta_bounds(base: np.ndarray, epsilon: float | None):
    """Per-pixel [lo, hi] for delta such that base + delta is feasible in floats.

    Feasible means 0 <= base + delta <= 1 and, when ``epsilon`` is given,
    |(base + delta) - base| <= epsilon, all evaluated in float64.
    """
    if epsilon is None:
        hi = 1.0 - base
        lo = -base
        hi = _tighten(hi, base, lambda x: x <= 1.0, -np.inf)
        lo = _tighten(lo, base, lambda x: x >= 0.0, np.inf)
        return lo, hi
    hi = np.minimum(epsilon, 1.0 - base)
    lo = np.maximum(-epsilon, -base)
    hi = _tighten(hi, base, lambda x: (x <= 1.0) & (np.abs(x - base) <= epsilon), -np.inf)
    lo = _tighten(lo, base, lambda x: (x >= 0.0) & (np.abs(x - base) <= epsilon), np.inf)
    return lo, hi


def _l2_ball(delta: np.ndarray, epsilon: float, base=None) -> np.ndarray:
    """Shrink delta so that both |delta| and |fl(base + delta) - base| are <= epsilon."""

    def size(d):
        n = np.linalg.norm(d)
        return n if base is None else max(n, np.linalg.norm((base + d) - base))

    norm = size(delta)
    if norm <= epsilon:
        return delta
    delta = delta * (epsilon / np.linalg.norm(delta))
    shrink = 1.0
    while size(delta) > epsilon:
        shrink = np.nextafter(shrink, 0.0) if shrink == 1.0 else 1.0 - 2.0 * (1.0 - shrink)
        delta = delta * shrink
    return delta


def project(delta, epsilon: float, norm_mode: str, base_image, bounds=None) -> np.ndarray:
    """Project a perturbation onto the epsilon ball, then the pixel box.

    ``linf`` clamps each entry to [-epsilon, epsilon]; ``l2`` rescales to
    norm epsilon when larger.  The result always keeps ``base + delta`` in
    [0, 1].  ``bounds`` may carry precomputed :func:`delta_bounds`.
    """
    delta = np.asarray(delta, dtype=np.float64)
    base = np.asarray(base_image, dtype=np.float64)
    mode = NORM_MODES.get(norm_mode, norm_mode)
    if delta.shape != base.shape:
        raise ValueError(f"delta shape {delta.shape} differs from image shape {base.shape}")
    if mode == "linf":
        lo, hi = bounds if bounds is not None else delta_bounds(base, epsilon)
        return np.clip(delta, lo, hi)
    if mode == "l2":
        lo, hi = bounds if bounds is not None else delta_bounds(base, None)
        # clipping toward zero never grows either norm, so one final pass suffices
        return _l2_ball(np.clip(_l2_ball(delta, epsilon), lo, hi), epsilon, base)
    raise ValueError(f"unknown norm mode {norm_mode!r}")


def residual(adversarial, base_image, norm_mode: str = "linf") -> float:
    diff = np.asarray(adversarial, dtype=np.float64) - np.asarray(base_image, dtype=np.float64)
    if NORM_MODES.get(norm_mode, norm_mode) == "l2":
        return float(np.linalg.norm(diff))
    return float(np.abs(diff).max(initial=0.0))


LossFn = Callable[[np.ndarray], tuple]


def optimize(
    loss_fn: LossFn,
    base_image,
    config: AttackConfig,
    mask: PatchMask | None = None,
    on_iterate: Callable[[int, np.ndarray], None] | None = None,
) -> AttackResult:
    """Minimise ``loss_fn`` over feasible perturbations of ``base_image``.

    ``loss_fn(image)`` returns ``(loss, gradient)`` or
    ``(loss, gradient, LossBreakdown)``.  The loss is evaluated at the start
    point and after each of ``config.iterations`` updates, so the trace has
    ``iterations + 1`` entries.  The lowest-loss iterate is returned.
    """
    base = as_image(base_image)
    mode = config.norm_mode
    bounds = delta_bounds(base, config.epsilon if mode == "linf" else None)
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        delta = project(rng.uniform(-config.epsilon, config.epsilon, base.shape), config.epsilon, mode, base, bounds)
    else:
        delta = np.zeros_like(base)
    b1, b2 = config.adam_betas
    m = np.zeros_like(base)
    v = np.zeros_like(base)

    trace: list[LossBreakdown] = []
    best_x, best_loss, best_k = base.copy(), math.inf, 0
    aborted, diagnostic = False, ""
    for k in range(config.iterations + 1):
        x = base + delta
        if on_iterate is not None:
            on_iterate(k, x)
        out = loss_fn(x)
        loss, grad = float(out[0]), np.asarray(out[1], dtype=np.float64)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            aborted = True
            diagnostic = f"non-finite loss or gradient at iteration {k} (loss={loss})"
            logger.warning(diagnostic)
            break
        entry = out[2] if len(out) > 2 and out[2] is not None else LossBreakdown(math.nan, math.nan, math.nan, loss)
        entry.residual = residual(x, base, mode)
        entry.pixel_min = float(x.min())
        entry.pixel_max = float(x.max())
        trace.append(entry)
        if loss < best_loss:
            best_x, best_loss, best_k = x.copy(), loss, k
        if k == config.iterations:
            break
        t = k + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        delta = project(
            delta - config.step_size * m_hat / (np.sqrt(v_hat) + config.adam_eps), config.epsilon, mode, base, bounds
        )

    return AttackResult(
        adversarial=best_x,
        mask=mask,
        trace=trace,
        residual=residual(best_x, base, mode),
        iterations_run=max(len(trace) - 1, 0),
        best_iteration=best_k,
        aborted=aborted,
        diagnostic=diagnostic,
    )
