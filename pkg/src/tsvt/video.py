"""Clip loading, temporal sub-sampling, normalization, and the synthetic
moving-shapes dataset used to exercise the two-stream pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import ParameterError


class ConfigError(ValueError):
    """A dataset or run configuration is invalid."""


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, values in [0, 1]
    label: int | None = None
    clip_id: str = ""
    meta: dict = field(default_factory=dict)


@dataclass
class NormalizationSpec:
    mean: tuple = (0.45, 0.45, 0.45)
    std: tuple = (0.225, 0.225, 0.225)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ParameterError(f"std must be positive, got {self.std}")


def temporal_subsample(total: int, target: int) -> list[int]:
    """Evenly spaced frame indices: floor(i * (L-1) / (S-1))."""
    if total < 1 or target < 1:
        raise ParameterError(f"frame counts must be >= 1, got L={total}, S={target}")
    if target == 1:
        return [0]
    return [i * (total - 1) // (target - 1) for i in range(target)]


def normalize(frames: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return (frames - np.asarray(spec.mean)) / np.asarray(spec.std)


def denormalize(frames: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return frames * np.asarray(spec.std) + np.asarray(spec.mean)


# synthetic dataset ----------------------------------------------------

DIRECTIONS = {
    "E": (1.0, 0.0),
    "NE": (np.sqrt(0.5), -np.sqrt(0.5)),
    "N": (0.0, -1.0),
    "NW": (-np.sqrt(0.5), -np.sqrt(0.5)),
    "W": (-1.0, 0.0),
    "SW": (-np.sqrt(0.5), np.sqrt(0.5)),
    "S": (0.0, 1.0),
    "SE": (np.sqrt(0.5), np.sqrt(0.5)),
}

SHAPES = ("square", "disc")


@dataclass
class SynthDatasetConfig:
    """Classes are (shape appearance, motion direction) pairs."""

    classes: list  # list of (shape, direction) tuples
    clips_per_class: int = 30
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0
    noise_amp: float = 0.05
    shape_size: int = 8
    speed: float = 2.0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError("need at least 2 classes")
        for shape, direction in self.classes:
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape {shape!r}")
            if direction not in DIRECTIONS:
                raise ConfigError(f"unknown direction {direction!r}")
        if not 0.0 <= self.noise_amp <= 0.5:
            raise ConfigError(f"noise_amp must be in [0, 0.5], got {self.noise_amp}")
        travel = int(np.ceil(self.speed * (self.frames - 1)))
        if self.shape_size + travel >= min(self.height, self.width):
            raise ConfigError(
                f"shape of size {self.shape_size} moving {travel} px does not fit "
                f"in a {self.height}x{self.width} frame"
            )

    def class_name(self, idx: int) -> str:
        shape, direction = self.classes[idx]
        return f"{shape}_{direction}"


def _shape_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
    return yy * yy + xx * xx <= (size / 2.0) ** 2


def _render_clip(cfg: SynthDatasetConfig, label: int, rng: np.random.Generator) -> VideoClip:
    shape, direction = cfg.classes[label]
    d = np.array(DIRECTIONS[direction])
    size = cfg.shape_size
    mask = _shape_mask(shape, size)
    texture = 0.7 + 0.3 * rng.random((size, size))

    travel = cfg.speed * (cfg.frames - 1)
    # Sample the trajectory midpoint from a window that is the same for every
    # direction, then back out the start. Keeping the midpoint distribution
    # direction-independent stops a static position cue from leaking the
    # motion class into single frames.
    half = travel / 2.0
    cx = half + rng.random() * (cfg.width - size - travel)
    cy = half + rng.random() * (cfg.height - size - travel)
    start = np.array([cx, cy]) - half * d

    frames = np.empty((cfg.frames, cfg.height, cfg.width, 3))
    positions = []
    for t in range(cfg.frames):
        bg = 0.5 + cfg.noise_amp * (2.0 * rng.random((cfg.height, cfg.width)) - 1.0)
        frame = np.repeat(bg[..., None], 3, axis=-1)
        pos = start + t * cfg.speed * d
        x0, y0 = int(round(pos[0])), int(round(pos[1]))
        patch = frame[y0 : y0 + size, x0 : x0 + size]
        patch[mask] = texture[mask, None]
        frames[t] = np.clip(frame, 0.0, 1.0)
        positions.append((x0, y0))
    return VideoClip(
        frames=frames,
        label=label,
        meta={"shape": shape, "direction": direction, "positions": positions},
    )


def generate_synthetic_dataset(cfg: SynthDatasetConfig) -> dict:
    """Stratified 70/10/20 train/val/test splits, fully determined by cfg.seed."""
    splits = {"train": [], "val": [], "test": []}
    n = cfg.clips_per_class
    n_train, n_val = int(n * 0.7), int(n * 0.1)
    for label in range(len(cfg.classes)):
        class_ss = np.random.SeedSequence([cfg.seed, label])
        clips = []
        for k in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, label, k]))
            clip = _render_clip(cfg, label, rng)
            clip.clip_id = f"{cfg.class_name(label)}_{k:03d}"
            clips.append(clip)
        order = np.random.default_rng(class_ss).permutation(n)
        for j, idx in enumerate(order):
            if j < n_train:
                splits["train"].append(clips[idx])
            elif j < n_train + n_val:
                splits["val"].append(clips[idx])
            else:
                splits["test"].append(clips[idx])
    return {
        "splits": splits,
        "class_names": [cfg.class_name(i) for i in range(len(cfg.classes))],
        "config": cfg,
    }


# disk layout ----------------------------------------------------------


def save_frame_png(path, frame: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_dataset(root, dataset: dict) -> dict:
    """Write `<root>/<split>/<class>/<clip-id>/frame_%04d.png` plus manifest.json."""
    from pathlib import Path

    root = Path(root)
    cfg: SynthDatasetConfig = dataset["config"]
    manifest = {
        "class_names": dataset["class_names"],
        "seed": cfg.seed,
        "config": {
            "classes": [list(c) for c in cfg.classes],
            "clips_per_class": cfg.clips_per_class,
            "frames": cfg.frames,
            "height": cfg.height,
            "width": cfg.width,
            "noise_amp": cfg.noise_amp,
            "shape_size": cfg.shape_size,
            "speed": cfg.speed,
        },
        "splits": {},
    }
    for split, clips in dataset["splits"].items():
        entries = []
        for clip in clips:
            cls = dataset["class_names"][clip.label]
            clip_dir = root / split / cls / clip.clip_id
            clip_dir.mkdir(parents=True, exist_ok=True)
            for t in range(clip.frames.shape[0]):
                save_frame_png(clip_dir / f"frame_{t:04d}.png", clip.frames[t])
            entries.append({"id": clip.clip_id, "class": cls, "label": clip.label})
        manifest["splits"][split] = entries
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_clip_dir(path, size: tuple | None = None, target_frames: int | None = None) -> VideoClip:
    """Load a directory of lexicographically ordered PNG frames."""
    from pathlib import Path

    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise IOError(f"{path}: no PNG frames found")
    if target_frames is not None:
        files = [files[i] for i in temporal_subsample(len(files), target_frames)]
    frames = []
    for f in files:
        try:
            img = Image.open(f).convert("RGB")
        except Exception as exc:
            raise IOError(f"{f}: cannot decode PNG ({exc})") from exc
        if size is not None:
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float64) / 255.0)
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise IOError(f"{path}: inconsistent frame sizes {sorted(shapes)}")
    return VideoClip(frames=np.stack(frames), clip_id=path.name)
