"""Black-box transfer: average the attack loss over surrogate encoders.

Each optimisation step evaluates every ensemble member on a few
spectrum-augmented copies of the current image (random frequency-domain
rescaling plus pixel noise) and averages losses and gradients.  An optional
sharpness-style inner ascent step evaluates each member's gradient at a
nearby worse point instead of at the image itself.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn

from advedm.encoders.base import EncoderDescriptor, EncoderOutput, VisionTextEncoder, as_image
from advedm.encoders.registry import create_encoder
from advedm.errors import AdvEDMError, DimensionMismatchError
from advedm.optim import AttackConfig, AttackResult, LossBreakdown, optimize

logger = logging.getLogger(__name__)


class EnsembleMemberError(AdvEDMError):
    def __init__(self, encoder_id: str, error: Exception):
        super().__init__(f"[{encoder_id}] {type(error).__name__}: {error}")
        self.encoder_id = encoder_id
        self.error = error


@dataclass
class EnsembleSpec:
    encoder_ids: list[str] = field(default_factory=lambda: ["toy:0"])
    augmentations_per_step: int = 4
    spectrum_sigma: float = 16 / 255
    spectrum_rho: float = 0.5
    iterations: int = 30
    epsilon: float = 16 / 255
    inner_radius: float = 0.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.encoder_ids = list(self.encoder_ids)
        if not self.encoder_ids:
            raise ValueError("an ensemble needs at least one encoder")
        if len(set(self.encoder_ids)) != len(self.encoder_ids):
            raise ValueError("ensemble encoder ids must be unique")
        if self.augmentations_per_step < 0 or self.iterations < 0:
            raise ValueError("augmentations_per_step and iterations must be nonnegative")
        if self.spectrum_sigma < 0 or not 0.0 <= self.spectrum_rho <= 1.0:
            raise ValueError("spectrum_sigma must be >= 0 and spectrum_rho in [0, 1]")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.inner_radius < 0:
            raise ValueError("inner_radius must be nonnegative")


def _spectrum_draw(shape, sigma, rho, rng):
    noise = rng.normal(0.0, 1.0, size=shape) * sigma
    gain = rng.uniform(1.0 - rho, 1.0 + rho, size=shape)
    return noise, gain


def _spectrum_apply(image, noise, gain):
    raw = idctn(dctn(image + noise, axes=(0, 1), norm="ortho") * gain, axes=(0, 1), norm="ortho")
    return np.clip(raw, 0.0, 1.0), (raw >= 0.0) & (raw <= 1.0)


def _spectrum_backward(grad_out, gain, inside):
    # the transform is C^T diag(gain) C with an orthonormal C, so it is self-adjoint
    g = np.where(inside, grad_out, 0.0)
    return idctn(dctn(g, axes=(0, 1), norm="ortho") * gain, axes=(0, 1), norm="ortho")


def spectrum_augment(image, sigma: float, rho: float, seed) -> np.ndarray:
    """Randomly rescale the image's cosine spectrum and add pixel noise."""
    img = as_image(image)
    rng = np.random.default_rng(seed)
    noise, gain = _spectrum_draw(img.shape, sigma, rho, rng)
    return _spectrum_apply(img, noise, gain)[0]


def _unpack(out):
    loss, grad = float(out[0]), np.asarray(out[1], dtype=np.float64)
    terms = out[2] if len(out) > 2 else None
    return loss, grad, terms


def _mean(values):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total / len(values)


def ensemble_loss(image, spec: EnsembleSpec, per_encoder_loss: dict, step: int = 0):
    """Mean loss and gradient over members and augmented copies.

    ``per_encoder_loss`` maps encoder id to ``f(image) -> (loss, grad[, LossBreakdown])``.
    With ``augmentations_per_step == 0`` each member sees the image itself.
    Returns ``(loss, grad, LossBreakdown | None)``.
    """
    img = as_image(image)
    ids = list(per_encoder_loss)

    def member(idx):
        enc_id = ids[idx]
        fn = per_encoder_loss[enc_id]
        results = []
        try:
            if spec.augmentations_per_step == 0:
                results.append(_inner(fn, img, spec))
            else:
                rng = np.random.default_rng([spec.seed, step, idx])
                for _ in range(spec.augmentations_per_step):
                    noise, gain = _spectrum_draw(img.shape, spec.spectrum_sigma, spec.spectrum_rho, rng)
                    aug, inside = _spectrum_apply(img, noise, gain)
                    loss, grad, terms = _inner(fn, aug, spec)
                    results.append((loss, _spectrum_backward(grad, gain, inside), terms))
        except EnsembleMemberError:
            raise
        except Exception as e:
            raise EnsembleMemberError(enc_id, e) from e
        return results

    if spec.workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            per_member = list(pool.map(member, range(len(ids))))
    else:
        per_member = [member(i) for i in range(len(ids))]
    flat = [r for rs in per_member for r in rs]
    loss = _mean([r[0] for r in flat])
    grad = _mean([r[1] for r in flat])
    terms = None
    if all(isinstance(r[2], LossBreakdown) for r in flat):
        terms = LossBreakdown(
            _mean([r[2].l_cls for r in flat]),
            _mean([r[2].l_p for r in flat]),
            _mean([r[2].l_fix for r in flat]),
            _mean([r[2].total for r in flat]),
        )
    return loss, grad, terms


def _inner(fn, image, spec):
    loss, grad, terms = _unpack(fn(image))
    if spec.inner_radius <= 0:
        return loss, grad, terms
    norm = np.linalg.norm(grad)
    if norm == 0:
        return loss, grad, terms
    probe = np.clip(image + spec.inner_radius * grad / norm, 0.0, 1.0)
    _, probe_grad, _ = _unpack(fn(probe))
    return loss, probe_grad, terms


class ResizedEncoder(VisionTextEncoder):
    """Presents an encoder at a different input resolution via bilinear resizing."""

    def __init__(self, inner: VisionTextEncoder, resolution: int):
        d = inner.descriptor
        if resolution % d.grid_side:
            raise DimensionMismatchError(f"resolution {resolution} does not split into {d.grid_side} patches")
        self.inner = inner
        self.dtype = inner.dtype
        self.differentiable = inner.differentiable
        self.descriptor = EncoderDescriptor(
            identifier=f"{d.identifier}@{resolution}",
            patch_size=resolution // d.grid_side,
            input_resolution=resolution,
            embedding_dim=d.embedding_dim,
            joint_space=d.joint_space,
        )

    def forward(self, pixels: torch.Tensor) -> EncoderOutput:
        h = pixels.shape[0] // self.descriptor.patch_size * self.inner.descriptor.patch_size
        w = pixels.shape[1] // self.descriptor.patch_size * self.inner.descriptor.patch_size
        if (h, w) == tuple(pixels.shape[:2]):
            return self.inner.forward(pixels)
        x = pixels.permute(2, 0, 1)[None]
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return self.inner.forward(x[0].permute(1, 2, 0))

    def embed_text(self, phrase: str) -> torch.Tensor:
        return self.inner.embed_text(phrase)


def _objective(kind, image, target, config, encoder, reference, region):
    if kind == "removal":
        from advedm.removal import RemovalObjective

        return RemovalObjective(image, target, config, encoder)
    if kind == "addition":
        from advedm.addition import AdditionObjective

        if reference is None:
            raise ValueError("addition transfer attack needs a reference image")
        return AdditionObjective(image, reference, target, config, encoder, region)
    raise ValueError(f"unknown attack kind {kind!r}")


def run_transfer_attack(
    image,
    attack_kind: str,
    target: str,
    spec: EnsembleSpec | None = None,
    config: AttackConfig | None = None,
    encoders: list[VisionTextEncoder] | None = None,
    reference=None,
    region=None,
    on_iterate=None,
) -> AttackResult:
    """Run a removal or addition attack through the ensemble-averaged loss.

    Iteration count and epsilon come from ``spec``; other settings from
    ``config`` (attack defaults when omitted).
    """
    spec = spec or EnsembleSpec()
    if config is None:
        config = AttackConfig.addition() if attack_kind == "addition" else AttackConfig.removal()
    config = config.with_(iterations=spec.iterations, epsilon=spec.epsilon)
    if encoders is None:
        encoders = [create_encoder(i) for i in spec.encoder_ids]
    if len(encoders) != len(spec.encoder_ids):
        raise ValueError("encoders and spec.encoder_ids differ in length")
    res = {e.descriptor.input_resolution for e in encoders}
    if len(res) > 1:
        raise DimensionMismatchError(f"ensemble members disagree on input resolution {sorted(res)}; wrap with ResizedEncoder")

    objectives = {}
    for enc_id, enc in zip(spec.encoder_ids, encoders):
        try:
            objectives[enc_id] = _objective(attack_kind, image, target, config, enc, reference, region)
        except Exception as e:
            raise EnsembleMemberError(enc_id, e) from e
    first = next(iter(objectives.values()))

    step = 0

    def loss_fn(x):
        nonlocal step
        out = ensemble_loss(x, spec, objectives, step)
        step += 1
        return out

    result = optimize(loss_fn, first.image, config, mask=first.mask, on_iterate=on_iterate)
    result.region = getattr(first, "region", None)
    result.metadata.update(
        attack=attack_kind,
        transfer=True,
        target=first.target,
        ensemble=list(spec.encoder_ids),
        augmentations_per_step=spec.augmentations_per_step,
        iterations=config.iterations,
        epsilon=config.epsilon,
    )
    return result
