"""Procedural paired-domain image factory.

Every image is rendered from a shared latent (position, scale, orientation,
part offsets) plus a domain spec (shape family, palette, pattern, marker
placement rule), so two domains rendered from the same latent are exact
cross-domain correspondences.  Rendering is pure: the same (latent, spec,
size) always produces the same pixels, and a dataset is reproducible from
its manifest alone.

Creatures are horizontal lobes with a thick end and a thin end; the latent's
``orientation`` is the screen direction the thick end faces.  The semantic
head is a white marker disk whose side is chosen by the domain's
``head_marker_side_rule`` — "same_as_orientation" puts it on the thick end,
"opposite" on the thin end.  Anti-correlating that rule between two domains
builds the orientation trap used by the position-supervision experiments.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .semi import LabelAnnotation

MARKER_COLOR = (1.0, 1.0, 1.0)
SHAPE_FAMILIES = ("blob", "box", "winged", "finned", "tadpole")
MARKER_AXIS_POS = 0.62   # marker center along the half-axis
TIP_AXIS_POS = 0.85      # annotated tail tip along the half-axis


@dataclass(frozen=True)
class SharedLatent:
    """Domain-independent scene description; the correspondence carrier."""

    position: tuple[float, float]          # (x, y) normalized to [0, 1]
    scale: float                           # body half-length fraction, [0.2, 0.6]
    orientation: str                       # "left" | "right": thick-end direction
    part_offsets: tuple[float, ...]        # small shape/texture jitters
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.position[0] <= 1.0 and 0.0 <= self.position[1] <= 1.0):
            raise ValueError("position must lie in [0,1]^2")
        if not 0.2 <= self.scale <= 0.6:
            raise ValueError("scale must lie in [0.2, 0.6]")
        if self.orientation not in ("left", "right"):
            raise ValueError("orientation must be 'left' or 'right'")

    @classmethod
    def sample(cls, seed: int) -> "SharedLatent":
        rng = np.random.default_rng(seed)
        pos = tuple(0.40 + 0.20 * rng.random(2))
        scale = 0.34 + 0.22 * rng.random()
        orientation = "right" if rng.random() < 0.5 else "left"
        offsets = tuple((rng.random(4) - 0.5) * 0.16)
        return cls(pos, float(scale), orientation, offsets, seed)


@dataclass(frozen=True)
class DomainSpec:
    """Appearance program for one domain."""

    id: int
    name: str
    shape_family: str
    base_color: tuple[float, float, float]
    bg_color: tuple[float, float, float]
    pattern: str = "solid"                 # solid | stripes | spots
    pattern_freq: float = 6.0
    pattern_strength: float = 0.8
    head_marker_side_rule: str = "same_as_orientation"

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.head_marker_side_rule not in ("same_as_orientation", "opposite"):
            raise ValueError("head_marker_side_rule must be 'same_as_orientation' or 'opposite'")

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "shape_family": self.shape_family,
                "base_color": list(self.base_color), "bg_color": list(self.bg_color),
                "pattern": self.pattern, "pattern_freq": self.pattern_freq,
                "pattern_strength": self.pattern_strength,
                "head_marker_side_rule": self.head_marker_side_rule}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["base_color"] = tuple(d["base_color"])
        d["bg_color"] = tuple(d["bg_color"])
        return cls(**d)


@dataclass
class PairedSample:
    """Cross-domain correlated pair sharing one latent."""

    x: np.ndarray
    y: np.ndarray
    l_x: int
    l_y: int
    x_s: np.ndarray
    y_s: np.ndarray
    ann_x: LabelAnnotation
    ann_y: LabelAnnotation
    seed: int


def _half_height(t: np.ndarray, family: str, amp: float, offs: tuple[float, ...]) -> np.ndarray:
    """Vertical half-extent of the body along the axis coordinate t in [-1, 1];
    t = +1 is the thick end."""
    t = np.clip(t, -1.0, 1.0)
    ellipse = np.sqrt(np.maximum(1.0 - t * t, 0.0))
    if family == "blob":
        return amp * ellipse * (0.70 + 0.30 * (1.0 + t) / 2.0)
    if family == "box":
        core = np.where(np.abs(t) <= 0.92, 1.0, 0.0)
        return amp * core * np.where(t > -0.1, 1.0, 0.55)
    if family == "winged":
        return amp * ellipse * (0.62 + 0.28 * (1.0 + t) / 2.0)
    if family == "finned":
        return amp * ellipse * (0.66 + 0.26 * (1.0 + t) / 2.0)
    if family == "tadpole":
        return amp * ellipse * (0.30 + 0.70 * (1.0 + t) / 2.0)
    raise ValueError(family)


def _body_mask(size: int, cx: float, cy: float, half_len: float, amp: float,
               direction: int, family: str, offs: tuple[float, ...]) -> np.ndarray:
    ii = np.arange(size, dtype=np.float64)[:, None]
    jj = np.arange(size, dtype=np.float64)[None, :]
    t = (jj - cx) / half_len * direction
    v = ii - cy
    inside_axis = np.abs(t) <= 1.0
    h = _half_height(t, family, amp, offs)
    mask = inside_axis & (np.abs(v) <= h)
    if family == "winged":
        span = 0.30
        tw = np.abs(t - 0.10)
        wing = inside_axis & (tw <= span) & (v <= 0) & (-v <= 2.1 * amp * (1.0 - tw / span))
        mask |= wing
    if family == "finned":
        span = 0.18
        tf = np.abs(t + 0.78)
        fin = (tf <= span) & (np.abs(v) <= 2.0 * amp * (1.0 - tf / span))
        mask |= fin
    return mask


def _mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    idx = np.argwhere(mask)
    return float(idx[:, 0].mean()), float(idx[:, 1].mean())


def render(latent: SharedLatent, spec: DomainSpec, size: int) -> tuple[np.ndarray, np.ndarray, LabelAnnotation]:
    """Renders (image (3,S,S) in [0,1], foreground mask (S,S) in {0,1}, annotation).

    The drawing is recentered once so the mask centroid lands on
    ``position * size``; outside the mask the image equals the background
    color exactly.
    """
    s = size
    direction = 1 if latent.orientation == "right" else -1
    half_len = latent.scale * s / 2.0
    amp = half_len * (0.52 + latent.part_offsets[0])
    target = (latent.position[1] * s, latent.position[0] * s)  # (row, col)

    cx, cy = target[1], target[0]
    for _ in range(2):  # second pass recenters on the measured centroid
        mask = _body_mask(s, cx, cy, half_len, amp, direction, spec.shape_family,
                          latent.part_offsets)
        if not mask.any():
            raise ValueError("degenerate render: empty mask")
        mr, mc = _mask_centroid(mask)
        cy += target[0] - mr
        cx += target[1] - mc

    # pattern over the foreground
    ii = np.arange(s, dtype=np.float64)[:, None]
    jj = np.arange(s, dtype=np.float64)[None, :]
    phase = latent.part_offsets[2] * 40.0
    freq = 2.0 * np.pi * spec.pattern_freq / s
    if spec.pattern == "stripes":
        wave = np.sin(freq * (jj * direction + 0.35 * ii) + phase)
    elif spec.pattern == "spots":
        wave = np.sin(freq * ii + phase) * np.sin(freq * jj + 1.7 + phase)
    else:
        wave = np.zeros((s, s))
    shade = 0.72 + 0.28 * spec.pattern_strength * wave

    img = np.empty((3, s, s), dtype=np.float64)
    for ch in range(3):
        img[ch] = spec.bg_color[ch]
        fg = np.clip(spec.base_color[ch] * shade, 0.0, 0.82)
        img[ch][mask] = fg[mask]

    # head marker disk, clipped to the body so background pixels stay pristine
    marker_t = MARKER_AXIS_POS if spec.head_marker_side_rule == "same_as_orientation" \
        else -MARKER_AXIS_POS
    mx = cx + direction * marker_t * half_len
    my = cy + latent.part_offsets[3] * amp
    marker_r = max(2.0, 0.30 * float(_half_height(np.array(marker_t), spec.shape_family,
                                                  amp, latent.part_offsets)) + 1.0)
    disk = ((ii - my) ** 2 + (jj - mx) ** 2 <= marker_r ** 2) & mask
    for ch in range(3):
        img[ch][disk] = MARKER_COLOR[ch]

    tail_t = -marker_t / abs(marker_t) * TIP_AXIS_POS
    tail_x = cx + direction * tail_t * half_len
    ann = LabelAnnotation(
        image_id=str(latent.seed),
        radius=int(round(marker_r)) + 1,
        points=[{"kind": "head", "x": int(round(np.clip(mx, 0, s - 1))),
                 "y": int(round(np.clip(my, 0, s - 1)))},
                {"kind": "tail", "x": int(round(np.clip(tail_x, 0, s - 1))),
                 "y": int(round(np.clip(cy, 0, s - 1)))}],
    )
    return img.astype(np.float32), mask.astype(np.float32), ann


def make_pair(seed: int, d1: DomainSpec, d2: DomainSpec, size: int) -> PairedSample:
    """Renders the same latent in two distinct domains."""
    if d1.id == d2.id:
        raise ValueError("pair domains must differ")
    latent = SharedLatent.sample(seed)
    x, x_s, ann_x = render(latent, d1, size)
    y, y_s, ann_y = render(latent, d2, size)
    return PairedSample(x, y, d1.id, d2.id, x_s, y_s, ann_x, ann_y, seed)


_PALETTES = [
    ((0.62, 0.30, 0.22), (0.16, 0.13, 0.18)),
    ((0.22, 0.45, 0.62), (0.24, 0.20, 0.14)),
    ((0.30, 0.58, 0.28), (0.13, 0.18, 0.22)),
    ((0.64, 0.52, 0.18), (0.20, 0.24, 0.20)),
    ((0.48, 0.26, 0.58), (0.26, 0.26, 0.30)),
    ((0.24, 0.52, 0.50), (0.30, 0.22, 0.24)),
]
_PATTERNS = ["stripes", "spots", "solid", "stripes", "spots", "solid"]
_FAMILIES = ["blob", "box", "winged", "finned", "blob", "box"]


def default_domains(n: int = 6) -> list[DomainSpec]:
    if n > len(_PALETTES):
        raise ValueError(f"at most {len(_PALETTES)} built-in domains")
    specs = []
    for i in range(n):
        base, bg = _PALETTES[i]
        specs.append(DomainSpec(id=i, name=f"{_FAMILIES[i]}{i}", shape_family=_FAMILIES[i],
                                base_color=base, bg_color=bg, pattern=_PATTERNS[i],
                                pattern_freq=5.0 + 2.0 * i, pattern_strength=0.8))
    return specs


@dataclass
class AdversarialOrientationSet:
    """Two domains whose appearance cue (thick side) anti-correlates with the
    semantic head, plus the subset of seeds exposed as labeled."""

    domain_a: DomainSpec
    domain_b: DomainSpec
    seeds: list[int]
    labeled_seeds: list[int]


def make_adversarial_orientation_set(n: int, seeds: list[int] | None = None,
                                     labeled: int = 4, seed0: int = 9000) -> AdversarialOrientationSet:
    if n < 8:
        raise ValueError("need at least 8 samples per domain")
    if seeds is None:
        seeds = [seed0 + k for k in range(n)]
    if len(seeds) != n:
        raise ValueError("len(seeds) must equal n")
    domain_a = DomainSpec(id=0, name="thickhead", shape_family="tadpole",
                          base_color=(0.60, 0.34, 0.20), bg_color=(0.15, 0.16, 0.20),
                          pattern="solid", head_marker_side_rule="same_as_orientation")
    domain_b = DomainSpec(id=1, name="thinhead", shape_family="tadpole",
                          base_color=(0.22, 0.42, 0.60), bg_color=(0.22, 0.18, 0.14),
                          pattern="solid", head_marker_side_rule="opposite")
    return AdversarialOrientationSet(domain_a, domain_b, list(seeds), list(seeds[:labeled]))


# --- marker / foreground probes (shared by evaluation) ---------------------

def marker_mass(image: np.ndarray, reach: float = 0.45) -> np.ndarray:
    """Per-pixel likeness to the head marker color, in [0, 1]."""
    diff = image - np.asarray(MARKER_COLOR, dtype=image.dtype).reshape(3, 1, 1)
    dist = np.sqrt((diff ** 2).sum(axis=0))
    return np.clip(1.0 - dist / reach, 0.0, 1.0) ** 2


def foreground_mass(image: np.ndarray, margin: float = 0.12) -> np.ndarray:
    """Distance from the border-median color, thresholded; a palette-free
    foreground estimate that also works on generated images."""
    border = np.concatenate([image[:, 0, :], image[:, -1, :],
                             image[:, :, 0], image[:, :, -1]], axis=1)
    bg = np.median(border, axis=1).reshape(3, 1, 1)
    dist = np.sqrt(((image - bg) ** 2).sum(axis=0))
    return np.clip(dist - margin, 0.0, None)


def _np_centroid(mass: np.ndarray) -> tuple[float, float] | None:
    total = mass.sum()
    if total < 1e-6:
        return None
    ii = np.arange(mass.shape[0])[:, None]
    jj = np.arange(mass.shape[1])[None, :]
    return float((mass * ii).sum() / total), float((mass * jj).sum() / total)


def foreground_centroid(image: np.ndarray) -> tuple[float, float] | None:
    return _np_centroid(foreground_mass(image))


def estimate_head_tail(image: np.ndarray) -> dict | None:
    """Marker-based head/tail estimate for any image following the factory's
    marker convention: head = marker-likeness centroid, tail = the head
    reflected through the foreground centroid.  Returns {"head": (row, col),
    "tail": (row, col)} or None when no marker mass is found."""
    head = _np_centroid(marker_mass(image))
    body = foreground_centroid(image)
    if head is None or body is None:
        return None
    tail = (2.0 * body[0] - head[0], 2.0 * body[1] - head[1])
    return {"head": head, "tail": tail}


# --- dataset directory layout ----------------------------------------------

def _to_png(path: str, array: np.ndarray):
    from PIL import Image as PILImage
    arr = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    PILImage.fromarray(arr).save(path)


def load_image(path: str) -> np.ndarray:
    from PIL import Image as PILImage
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


@dataclass
class DatasetManifest:
    domains: list[DomainSpec]
    seeds: list[int]
    image_size: int
    train_count: int
    extras: dict = field(default_factory=dict)

    @property
    def train_seeds(self) -> list[int]:
        return self.seeds[:self.train_count]

    @property
    def heldout_seeds(self) -> list[int]:
        return self.seeds[self.train_count:]

    def to_dict(self) -> dict:
        return {"domains": [d.to_dict() for d in self.domains], "seeds": self.seeds,
                "image_size": self.image_size, "train_count": self.train_count,
                "extras": self.extras}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls([DomainSpec.from_dict(x) for x in d["domains"]], list(d["seeds"]),
                   int(d["image_size"]), int(d["train_count"]), dict(d.get("extras", {})))

    def save(self, root: str):
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, "dataset.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, root_or_path: str) -> "DatasetManifest":
        path = root_or_path
        if os.path.isdir(path):
            path = os.path.join(path, "dataset.json")
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def write_dataset(root: str, manifest: DatasetManifest):
    """Materializes every (domain, seed) render under ``root``."""
    manifest.save(root)
    for spec in manifest.domains:
        ddir = os.path.join(root, str(spec.id))
        os.makedirs(ddir, exist_ok=True)
        for seed in manifest.seeds:
            latent = SharedLatent.sample(seed)
            img, seg, ann = render(latent, spec, manifest.image_size)
            _to_png(os.path.join(ddir, f"{seed}.png"), img)
            _to_png(os.path.join(ddir, f"{seed}.seg.png"), seg)
            ann.save(os.path.join(ddir, f"{seed}.json"))


class RenderCache:
    """Lazy memoized renders keyed by (domain id, seed)."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.domains = {d.id: d for d in manifest.domains}
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, LabelAnnotation]] = {}

    def get(self, domain_id: int, seed: int) -> tuple[np.ndarray, np.ndarray, LabelAnnotation]:
        key = (domain_id, seed)
        if key not in self._cache:
            latent = SharedLatent.sample(seed)
            self._cache[key] = render(latent, self.domains[domain_id], self.manifest.image_size)
        return self._cache[key]
