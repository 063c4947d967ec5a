"""Seeded toy-encoder attack scenarios shared by the statistical tests."""

from __future__ import annotations

from functools import lru_cache

from advedm.addition import prepare_reference
from advedm.encoders import make_toy_encoder, synthetic_scene
from advedm.encoders.toy import render_reference
from advedm.optim import AttackConfig

REMOVAL_TARGETS = ("car", "dog", "tree", "person", "traffic light", "bus", "cat", "bench")
ADDITION_TARGETS = ("car", "dog")
FOREGROUND = ("tree", "person")
WINDOW = 2


@lru_cache(maxsize=None)
def encoder(seed: int = 0):
    return make_toy_encoder(seed)


@lru_cache(maxsize=None)
def reference(target: str, enc_seed: int = 0):
    enc = encoder(enc_seed)
    return prepare_reference(render_reference(enc, target, WINDOW), WINDOW, enc)


def removal_case(seed: int):
    return synthetic_scene(seed), REMOVAL_TARGETS[seed % len(REMOVAL_TARGETS)]


def addition_case(seed: int):
    target = ADDITION_TARGETS[seed % len(ADDITION_TARGETS)]
    return synthetic_scene(seed), target, reference(target)


def addition_config(**changes) -> AttackConfig:
    return AttackConfig.addition(region_size=WINDOW, foreground=FOREGROUND, **changes)
