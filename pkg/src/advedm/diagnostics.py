"""Embedding-level readouts of an attack outcome (no captioning model needed)."""

from __future__ import annotations

import numpy as np
import torch

from advedm._ops import cosine, row_cosine
from advedm.encoders.base import VisionTextEncoder
from advedm.regions import PatchMask


def attack_readout(encoder: VisionTextEncoder, clean, adversarial, target: str, mask: PatchMask | None) -> dict:
    """Target cosine of [CLS] before/after and mean kept-patch cosine."""
    text = encoder.encode_text(target)
    before = encoder.encode_image(clean)
    after = encoder.encode_image(adversarial)
    out = {
        "target_cos_clean": float(cosine(before.cls, text)),
        "target_cos_adv": float(cosine(after.cls, text)),
    }
    out["target_cos_shift"] = out["target_cos_adv"] - out["target_cos_clean"]
    if mask is not None and np.any(mask.bits == 1):
        keep = torch.as_tensor(mask.bits == 1)
        out["kept_patch_cos"] = float(row_cosine(after.patches, before.patches)[keep].mean())
        if np.any(mask.bits == 0):
            sel = torch.as_tensor(mask.bits == 0)
            sims = (after.patches[sel] @ text) / (after.patches[sel].norm(dim=1) * text.norm())
            sims0 = (before.patches[sel] @ text) / (before.patches[sel].norm(dim=1) * text.norm())
            out["region_target_cos_shift"] = float(sims.mean() - sims0.mean())
    return out
