"""Manifests, configuration files and on-disk run records."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from advedm.errors import ManifestError
from advedm.optim import AttackConfig, AttackResult, NORM_MODES, residual
from advedm.regions import PatchMask, RegionSpec

MODES = ("removal", "addition")


def parse_number(text) -> float:
    """Float from ``0.031``, ``8/255`` or a number."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(str(text).strip()))


def format_budget(value: float) -> str:
    """``8/255`` when value is a whole number of 8-bit levels, else a decimal."""
    levels = value * 255
    if abs(levels - round(levels)) < 1e-9:
        return f"{int(round(levels))}/255"
    return f"{value:g}"


# manifests


@dataclass
class ManifestEntry:
    image_path: Path
    target_object: str
    mode: str = "removal"
    reference_path: Path | None = None
    region: RegionSpec | None = None
    foreground: tuple[str, ...] = ()
    entry_id: str = ""

    def to_dict(self) -> dict:
        d = {
            "id": self.entry_id,
            "image": str(self.image_path),
            "target": self.target_object,
            "mode": self.mode,
        }
        if self.reference_path is not None:
            d["reference"] = str(self.reference_path)
        if self.region is not None:
            d["region"] = [self.region.row, self.region.col, self.region.m]
        if self.foreground:
            d["foreground"] = list(self.foreground)
        return d


def _region(value) -> RegionSpec | None:
    if value is None:
        return None
    if isinstance(value, dict):
        return RegionSpec(int(value["row"]), int(value["col"]), int(value["m"]))
    row, col, m = value
    return RegionSpec(int(row), int(col), int(m))


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSON-lines manifest; relative paths resolve against its folder.

    Every entry is validated before anything is returned, so a bad line
    fails the whole manifest up front.
    """
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e})") from e
            try:
                entries.append(_entry(raw, root, len(entries)))
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    return entries


def _entry(raw: dict, root: Path, index: int) -> ManifestEntry:
    image = root / raw["image"]
    mode = raw.get("mode", "removal")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    target = str(raw["target"]).strip()
    if not target:
        raise ValueError("empty target object")
    if not image.is_file():
        raise ValueError(f"image not found: {image}")
    reference = raw.get("reference")
    if mode == "addition":
        if not reference:
            raise ValueError("addition entry has no reference image")
        reference = root / reference
        if not reference.is_file():
            raise ValueError(f"reference not found: {reference}")
    else:
        reference = None
    return ManifestEntry(
        image_path=image,
        target_object=target,
        mode=mode,
        reference_path=reference,
        region=_region(raw.get("region")),
        foreground=tuple(raw.get("foreground", ())),
        entry_id=str(raw.get("id", index)),
    )


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict() if isinstance(e, ManifestEntry) else e) + "\n")


# configuration

CONFIG_SECTIONS = ("removal", "addition", "ensemble")


def load_config_file(path) -> dict:
    """Read a JSON config: AttackConfig keys at top level, plus optional
    ``removal`` / ``addition`` override sections and an ``ensemble`` section."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def resolve_config(mode: str, file_config: dict | None = None, overrides: dict | None = None) -> AttackConfig:
    base = AttackConfig.addition() if mode == "addition" else AttackConfig.removal()
    values = base.to_dict()
    file_config = dict(file_config or {})
    section = file_config.pop(mode, {}) or {}
    for other in CONFIG_SECTIONS:
        file_config.pop(other, None)
    for layer in (file_config, section, overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key == "epsilon":
                value = parse_number(value)
            values[key] = value
    return AttackConfig.from_dict(values)


# images


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize(adversarial, base, epsilon: float, norm_mode: str = "linf") -> np.ndarray:
    """Snap to 8-bit levels while keeping the perturbation budget.

    Each pixel takes the nearest 8-bit level inside the per-pixel budget
    window, so the saved file, not just the float buffer, is feasible.
    """
    adv = np.asarray(adversarial, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    mode = NORM_MODES.get(norm_mode, norm_mode)
    levels = np.rint(adv * 255.0)
    if mode == "linf":
        lo = np.clip(np.ceil((base - epsilon) * 255.0 - 1e-7), 0, 255)
        hi = np.clip(np.floor((base + epsilon) * 255.0 + 1e-7), 0, 255)
        levels = np.clip(levels, lo, hi)
        q = levels / 255.0
        for _ in range(4):
            # the 1e-7 slack can admit a level just outside the budget
            over = np.abs(q - base) > epsilon
            if not over.any():
                break
            levels = np.where(over, levels - np.sign(q - base), levels)
            q = levels / 255.0
        if np.any(np.abs(q - base) > epsilon):
            raise ValueError("epsilon is too small to hold any 8-bit level near the base image")
        return q
    levels = np.clip(levels, 0, 255)
    home = np.clip(np.rint(base * 255.0), 0, 255)
    q = levels / 255.0
    while np.linalg.norm(q - base) > epsilon:
        movable = levels != home
        if not movable.any():
            raise ValueError("epsilon is too small to hold the base image at 8-bit precision")
        diff = np.where(movable, np.abs(q - base), -1.0)
        worst = np.unravel_index(np.argmax(diff), diff.shape)
        levels[worst] += np.sign(home[worst] - levels[worst])
        q = levels / 255.0
    return q


def save_png(image, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def save_heatmap(similarity, image, patch_size: int, path) -> None:
    """Overlay per-patch similarity (blue low, red high) on the image."""
    img = np.asarray(image, dtype=np.float64)
    s = np.asarray(similarity, dtype=np.float64)
    side = img.shape[0] // patch_size
    grid = s.reshape(side, -1)
    span = grid.max() - grid.min()
    norm = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
    heat = np.stack([norm, np.zeros_like(norm), 1.0 - norm], axis=-1)
    heat = np.repeat(np.repeat(heat, patch_size, 0), patch_size, 1)
    save_png(0.5 * img + 0.5 * heat, path)


# masks and run records


def mask_to_dict(mask: PatchMask, region: RegionSpec | None = None) -> dict:
    d = {
        "selection_mode": mask.selection_mode,
        "bits": [int(b) for b in mask.bits],
        "grid": mask.to_grid_text(),
    }
    if region is not None:
        d["region"] = {"row": region.row, "col": region.col, "m": region.m}
    return d


def mask_from_dict(data: dict) -> PatchMask:
    return PatchMask(np.array(data["bits"]), data["selection_mode"])


def save_mask(mask: PatchMask, path, region: RegionSpec | None = None, extra: dict | None = None) -> None:
    d = mask_to_dict(mask, region)
    if extra:
        d.update(extra)
    write_json(path, d)


def load_mask(path) -> PatchMask:
    with open(path, encoding="utf-8") as fh:
        return mask_from_dict(json.load(fh))


def write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def trace_to_list(result: AttackResult) -> list[dict]:
    return [
        {"iteration": k, "l_cls": t.l_cls, "l_p": t.l_p, "l_fix": t.l_fix, "total": t.total, "residual": t.residual}
        for k, t in enumerate(result.trace)
    ]


_RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass
class RunRecord:
    run_id: str
    config: dict
    encoder: str
    entries: list[dict] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "encoder": self.encoder,
            "entries": self.entries,
            "reports": self.reports,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


class RunStore:
    """Directory layout for one run: ``<root>/<run_id>/``."""

    def __init__(self, root, run_id: str):
        if not _RUN_ID.match(run_id):
            raise ValueError(f"invalid run id {run_id!r}")
        self.root = Path(root)
        self.run_id = run_id
        self.path = self.root / run_id

    def create(self) -> "RunStore":
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            self.path.mkdir()
        except FileExistsError:
            raise FileExistsError(f"run {self.run_id!r} already exists in {self.root}") from None
        for sub in ("images", "masks", "traces"):
            (self.path / sub).mkdir()
        return self

    def exists(self) -> bool:
        return (self.path / "record.json").is_file()

    def save_record(self, record: RunRecord) -> None:
        write_json(self.path / "record.json", record.to_dict())

    def load_record(self) -> RunRecord:
        if not self.exists():
            raise FileNotFoundError(f"no run {self.run_id!r} in {self.root}")
        return RunRecord.from_dict(read_json(self.path / "record.json"))

    def file(self, *parts) -> Path:
        return self.path.joinpath(*parts)

    def relative(self, p: Path) -> str:
        return os.path.relpath(p, self.path)


def check_budget(adversarial, base, config: AttackConfig) -> float:
    r = residual(adversarial, base, config.norm_mode)
    if r > config.epsilon:
        raise ValueError(f"perturbation {r} exceeds budget {config.epsilon}")
    return r
