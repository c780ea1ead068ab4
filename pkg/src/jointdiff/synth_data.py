"""Synthetic paired image-caption data with an exact attribute oracle.

Scenes are a single colored shape on a flat background, rasterized at
32x32 without anti-aliasing, values in [-1, 1]. The caption is a pure
function of the scene, from a fixed injective template, so image/text
consistency is decidable without a learned critic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, asdict, field

import numpy as np
import torch

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
POSITIONS = ("top", "bottom", "left", "right", "center")
BACKGROUNDS = ("dark", "light")

IMAGE_HW = 32

COLOR_RGB = {
    "red": (0.9, -0.9, -0.9),
    "green": (-0.9, 0.9, -0.9),
    "blue": (-0.9, -0.9, 0.9),
    "yellow": (0.9, 0.9, -0.9),
}
BACKGROUND_LEVEL = {"dark": -0.85, "light": 0.7}
POSITION_CENTER = {
    "top": (8, 16), "bottom": (23, 16), "left": (16, 8),
    "right": (16, 23), "center": (16, 16),
}
SIZE_RADIUS = {"small": 4, "large": 7}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    position: str
    background: str

    def __post_init__(self):
        for val, allowed in ((self.shape, SHAPES), (self.color, COLORS),
                             (self.size, SIZES), (self.position, POSITIONS),
                             (self.background, BACKGROUNDS)):
            if val not in allowed:
                raise ValueError(f"{val!r} not in {allowed}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthSample:
    image: torch.Tensor  # (3, 32, 32) in [-1, 1]
    caption: str
    spec: SceneSpec


def all_specs() -> list[SceneSpec]:
    """All 240 scene specifications, in a fixed enumeration order."""
    return [SceneSpec(*combo) for combo in
            itertools.product(SHAPES, COLORS, SIZES, POSITIONS, BACKGROUNDS)]


def caption_grammar(spec: SceneSpec) -> str:
    return (f"a {spec.size} {spec.color} {spec.shape} at the "
            f"{spec.position} on a {spec.background} background")


def shape_mask(shape: str, size: str, position: str) -> np.ndarray:
    """Boolean (32, 32) rasterization of the shape footprint."""
    r0, c0 = POSITION_CENTER[position]
    radius = SIZE_RADIUS[size]
    rr, cc = np.mgrid[0:IMAGE_HW, 0:IMAGE_HW]
    if shape == "circle":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(rr - r0) <= radius) & (np.abs(cc - c0) <= radius)
    # upward triangle: width grows linearly from apex to base
    dr = rr - (r0 - radius)
    inside_rows = (dr >= 0) & (dr <= 2 * radius)
    return inside_rows & (np.abs(cc - c0) <= dr / 2)


def render(spec: SceneSpec) -> torch.Tensor:
    """Deterministic rasterization; returns (3, 32, 32) float32 in [-1, 1]."""
    img = np.full((3, IMAGE_HW, IMAGE_HW), BACKGROUND_LEVEL[spec.background],
                  dtype=np.float32)
    mask = shape_mask(spec.shape, spec.size, spec.position)
    for ch, level in enumerate(COLOR_RGB[spec.color]):
        img[ch][mask] = level
    return torch.from_numpy(img)


# -- oracle -----------------------------------------------------------------

GEOMETRY_CONF_THRESHOLD = 0.5
COLOR_CONF_THRESHOLD = 0.5
BACKGROUND_CONF_THRESHOLD = 0.5

_GEOM_TEMPLATES = None


def _geometry_templates():
    global _GEOM_TEMPLATES
    if _GEOM_TEMPLATES is None:
        _GEOM_TEMPLATES = [
            ((s, z, p), shape_mask(s, z, p))
            for s, z, p in itertools.product(SHAPES, SIZES, POSITIONS)
        ]
    return _GEOM_TEMPLATES


@dataclass(frozen=True)
class OracleResult:
    spec: SceneSpec
    confidence: dict  # attribute -> confidence in [0, 1]
    flagged: tuple[str, ...]  # attributes below their confidence threshold

    @property
    def confident(self) -> bool:
        return not self.flagged


def oracle_classify(image: torch.Tensor) -> OracleResult:
    """Rule-based recovery of all attributes from an image.

    Exact on clean renders. Background comes from corner statistics, the
    shape footprint from deviation against the background level, geometry
    from IoU template matching over the closed shape set, and color from
    nearest prototype of the footprint mean.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (3, IMAGE_HW, IMAGE_HW):
        raise ValueError(f"expected (3, {IMAGE_HW}, {IMAGE_HW}) image, got {img.shape}")

    # background from the four 3x3 corners (shapes never reach them)
    k = 3
    corners = np.concatenate([
        img[:, :k, :k].reshape(3, -1), img[:, :k, -k:].reshape(3, -1),
        img[:, -k:, :k].reshape(3, -1), img[:, -k:, -k:].reshape(3, -1),
    ], axis=1)
    corner_med = np.median(corners, axis=1)
    bg_dists = {bg: float(np.linalg.norm(corner_med - lvl)) for bg, lvl in BACKGROUND_LEVEL.items()}
    bg_sorted = sorted(bg_dists, key=bg_dists.get)
    background = bg_sorted[0]
    d1, d2 = bg_dists[bg_sorted[0]], bg_dists[bg_sorted[1]]
    bg_conf = 1.0 - d1 / d2 if d2 > 0 else 0.0

    # footprint: pixels deviating from the background level in any channel
    bg_level = BACKGROUND_LEVEL[background]
    mask = (np.abs(img - bg_level) > 0.5).any(axis=0)

    # geometry by best IoU over the closed template set
    best_geom, best_iou = None, -1.0
    for (s, z, p), tmpl in _geometry_templates():
        inter = float(np.logical_and(mask, tmpl).sum())
        union = float(np.logical_or(mask, tmpl).sum())
        iou = inter / union if union else 0.0
        if iou > best_iou:
            best_geom, best_iou = (s, z, p), iou
    shape, size, position = best_geom
    geom_conf = best_iou

    # color from mean footprint pixel vs prototypes
    if mask.sum() == 0:
        color, color_conf = COLORS[0], 0.0
    else:
        mean_rgb = img[:, mask].mean(axis=1)
        cd = {c: float(np.linalg.norm(mean_rgb - np.array(rgb))) for c, rgb in COLOR_RGB.items()}
        cs = sorted(cd, key=cd.get)
        color = cs[0]
        color_conf = 1.0 - cd[cs[0]] / cd[cs[1]] if cd[cs[1]] > 0 else 0.0

    confidence = {
        "shape": geom_conf, "size": geom_conf, "position": geom_conf,
        "color": color_conf, "background": bg_conf,
    }
    thresholds = {
        "shape": GEOMETRY_CONF_THRESHOLD, "size": GEOMETRY_CONF_THRESHOLD,
        "position": GEOMETRY_CONF_THRESHOLD, "color": COLOR_CONF_THRESHOLD,
        "background": BACKGROUND_CONF_THRESHOLD,
    }
    flagged = tuple(a for a, c in confidence.items() if c < thresholds[a])
    spec = SceneSpec(shape=shape, color=color, size=size,
                     position=position, background=background)
    return OracleResult(spec=spec, confidence=confidence, flagged=flagged)


# -- dataset -----------------------------------------------------------------

def spec_from_rng(rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        size=SIZES[rng.integers(len(SIZES))],
        position=POSITIONS[rng.integers(len(POSITIONS))],
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
    )


def make_dataset(n: int, seed: int) -> list[SynthSample]:
    """n uniform i.i.d. samples; sample i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        spec = spec_from_rng(rng)
        out.append(SynthSample(image=render(spec), caption=caption_grammar(spec), spec=spec))
    return out


def parse_caption(caption: str) -> SceneSpec | None:
    """Inverse of caption_grammar; None when the words do not fit the template."""
    words = caption.split()
    template = ["a", None, None, None, "at", "the", None, "on", "a", None, "background"]
    if len(words) != len(template):
        return None
    for w, fixed in zip(words, template):
        if fixed is not None and w != fixed:
            return None
    size, color, shape, position, background = words[1], words[2], words[3], words[6], words[9]
    try:
        return SceneSpec(shape=shape, color=color, size=size,
                         position=position, background=background)
    except ValueError:
        return None


def export_dataset(samples: list[SynthSample], images_path, sidecar_path) -> None:
    """Raw image tensors to one .npy file plus a TSV sidecar of captions/specs."""
    images = np.stack([s.image.numpy() for s in samples])
    np.save(images_path, images)
    with open(sidecar_path, "w", encoding="utf-8") as f:
        f.write("index\tcaption\tshape\tcolor\tsize\tposition\tbackground\n")
        for i, s in enumerate(samples):
            d = s.spec
            f.write(f"{i}\t{s.caption}\t{d.shape}\t{d.color}\t{d.size}\t{d.position}\t{d.background}\n")


def corpus_captions() -> list[str]:
    """Every caption the grammar can produce (closed vocabulary)."""
    return [caption_grammar(s) for s in all_specs()]
