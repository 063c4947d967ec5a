"""Encoder registry.

Identifiers look like ``name`` or ``name:arg`` (``toy:3`` is the toy encoder
with seed 3).  Third-party adapters register through the
``advedm.encoders`` entry-point group; each entry point resolves to a
factory ``f(arg: str | None, **options) -> VisionTextEncoder``.
"""

from __future__ import annotations

import logging
from importlib.metadata import entry_points
from typing import Callable

from advedm.encoders.base import VisionTextEncoder

logger = logging.getLogger(__name__)

_FACTORIES: dict[str, Callable[..., VisionTextEncoder]] = {}
_PLUGINS_LOADED = False


def register_encoder(name: str, factory: Callable[..., VisionTextEncoder]) -> None:
    _FACTORIES[name] = factory


def _load_plugins() -> None:
    global _PLUGINS_LOADED
    if _PLUGINS_LOADED:
        return
    _PLUGINS_LOADED = True
    for ep in entry_points(group="advedm.encoders"):
        if ep.name in _FACTORIES:
            continue
        try:
            _FACTORIES[ep.name] = ep.load()
        except Exception:  # a broken plugin must not take down the registry
            logger.exception("failed to load encoder plugin %s", ep.name)


def available_encoders() -> list[str]:
    _load_plugins()
    return sorted(_FACTORIES)


def create_encoder(identifier: str, **options) -> VisionTextEncoder:
    name, _, arg = identifier.partition(":")
    _load_plugins()
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise KeyError(f"unknown encoder {identifier!r}; available: {', '.join(available_encoders())}") from None
    return factory(arg or None, **options)


def _toy_factory(arg=None, **options):
    from advedm.encoders.toy import ToyEncoder

    return ToyEncoder(int(arg) if arg else options.pop("seed", 0), **options)


def _hf_clip_factory(arg=None, **options):
    from advedm.encoders.hf_clip import HFCLIPEncoder

    path = arg or options.pop("weights", None)
    if path is None:
        raise ValueError("hf-clip encoder needs a weight path: 'hf-clip:/path/to/checkpoint'")
    return HFCLIPEncoder.from_pretrained(path, **options)


register_encoder("toy", _toy_factory)
register_encoder("hf-clip", _hf_clip_factory)
