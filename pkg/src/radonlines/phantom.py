"""Synthetic lung-ultrasound-like phantoms with exact line ground truth.

A phantom is a dim background carrying a bright horizontal pleural
stripe, optional dimmer horizontal repeats below it (A-lines at multiples
of the pleural depth), and vertical stripes running from the pleural line
to the bottom of the image (B-lines).  Multiplicative log-normal speckle
and a Gaussian blur degrade the clean geometry.  Every stripe's exact
position is recorded so detections can be scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json
from pathlib import Path

import numpy as np
from PIL import Image as PilImage
from scipy.ndimage import gaussian_filter

PLEURAL_THICKNESS = 3
A_LINE_THICKNESS = 2
DEFAULT_BOX_WIDTH = 16.0
MIN_ORIGIN_SEPARATION = 0.05  # fraction of width between B-line origins


class PhantomError(ValueError):
    """Invalid phantom specification."""


@dataclass(frozen=True)
class PhantomSpec:
    pleural_depth: float = 0.3  # fraction of height
    pleural_intensity: float = 0.9
    a_line_count: int = 2
    a_line_spacing: float | None = None  # fraction of height; None -> pleural_depth
    b_line_origins: tuple = ()  # column fractions
    b_line_widths: tuple = ()  # pixels
    b_line_intensities: tuple = ()
    speckle_sigma: float = 0.3
    blur_radius: float = 1.0
    background_gain: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.pleural_depth < 1):
            raise PhantomError("pleural_depth must lie in (0, 1)")
        n = len(self.b_line_origins)
        if len(self.b_line_widths) != n or len(self.b_line_intensities) != n:
            raise PhantomError("B-line origins, widths, intensities must align")
        for frac in self.b_line_origins:
            if not (0 < frac < 1):
                raise PhantomError("B-line origins must lie in (0, 1)")
        origins = sorted(self.b_line_origins)
        for a, b in zip(origins, origins[1:]):
            if b - a <= MIN_ORIGIN_SEPARATION:
                raise PhantomError(
                    "B-line origins closer than the minimum separation")
        if self.a_line_count < 0 or self.speckle_sigma < 0 or self.blur_radius < 0:
            raise PhantomError("counts, noise and blur must be nonnegative")
        if not (0 <= self.background_gain < 1):
            raise PhantomError("background_gain must lie in [0, 1)")


@dataclass(frozen=True)
class GroundTruthBox:
    x_center: float
    width: float
    y_top: int
    y_bottom: int


@dataclass(frozen=True)
class PlantedLine:
    kind: str  # pleural | a_line | b_line
    r: float  # signed offset from image center
    omega: float  # degrees


def generate(spec: PhantomSpec, dims=(256, 256)):
    """Render a phantom; returns (image, ground-truth boxes, planted lines)."""
    height, width = dims
    img = np.full((height, width), spec.background_gain)
    boxes = []
    planted = []

    pleural_row = int(round(spec.pleural_depth * height))
    half = PLEURAL_THICKNESS // 2
    img[max(0, pleural_row - half):pleural_row + half + 1, :] = np.maximum(
        img[max(0, pleural_row - half):pleural_row + half + 1, :],
        spec.pleural_intensity)
    planted.append(PlantedLine("pleural", pleural_row - height / 2.0, 90.0))

    spacing = spec.a_line_spacing if spec.a_line_spacing is not None \
        else spec.pleural_depth
    for k in range(1, spec.a_line_count + 1):
        row = pleural_row + int(round(k * spacing * height))
        if row >= height - A_LINE_THICKNESS:
            break
        intensity = spec.pleural_intensity * 0.5 ** k
        img[row:row + A_LINE_THICKNESS, :] = np.maximum(
            img[row:row + A_LINE_THICKNESS, :], intensity)
        planted.append(PlantedLine("a_line", row - height / 2.0, 90.0))

    for frac, w, intensity in zip(spec.b_line_origins, spec.b_line_widths,
                                  spec.b_line_intensities):
        col = int(round(frac * width))
        lo = max(0, col - w // 2)
        img[pleural_row:, lo:lo + w] = np.maximum(
            img[pleural_row:, lo:lo + w], intensity)
        planted.append(PlantedLine("b_line", col - width / 2.0, 0.0))
        boxes.append(GroundTruthBox(float(col), DEFAULT_BOX_WIDTH,
                                    pleural_row, height - 1))

    if spec.speckle_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img = img * np.exp(rng.normal(0.0, spec.speckle_sigma, img.shape))
    if spec.blur_radius > 0:
        img = gaussian_filter(img, spec.blur_radius)
    return np.clip(img, 0.0, 1.0), boxes, planted


def random_spec(seed: int, noise: float = 0.3, max_b_lines: int = 3) -> PhantomSpec:
    """Deterministic pseudo-random phantom parameters for one seed."""
    rng = np.random.default_rng(seed)
    b_count = int(rng.integers(0, max_b_lines + 1))
    origins = []
    while len(origins) < b_count:
        cand = float(rng.uniform(0.12, 0.88))
        if all(abs(cand - o) > MIN_ORIGIN_SEPARATION * 1.6 for o in origins):
            origins.append(cand)
    origins.sort()
    return PhantomSpec(
        pleural_depth=float(rng.uniform(0.25, 0.4)),
        pleural_intensity=float(rng.uniform(0.8, 0.95)),
        a_line_count=int(rng.integers(0, 3)),
        b_line_origins=tuple(origins),
        b_line_widths=tuple(int(rng.integers(2, 5)) for _ in origins),
        b_line_intensities=tuple(float(rng.uniform(0.6, 0.9)) for _ in origins),
        speckle_sigma=noise,
        blur_radius=1.0,
        background_gain=0.1,
        seed=seed,
    )


def default_suite(noise: float = 0.3):
    """The reproducible 50 training + 20 test specs (seeds 0..69)."""
    train = [random_spec(seed, noise) for seed in range(50)]
    test = [random_spec(seed, noise) for seed in range(50, 70)]
    return train, test


# --------------------------------------------------------------------------
# Manifest and image file I/O.


def save_manifest(specs, path, dims=(256, 256)) -> None:
    payload = {
        "height": dims[0],
        "width": dims[1],
        "phantoms": [asdict(s) for s in specs],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    payload = json.loads(Path(path).read_text())
    dims = (payload["height"], payload["width"])
    specs = []
    for entry in payload["phantoms"]:
        entry = dict(entry)
        for key in ("b_line_origins", "b_line_widths", "b_line_intensities"):
            entry[key] = tuple(entry[key])
        specs.append(PhantomSpec(**entry))
    return specs, dims


def save_truth(boxes, path) -> None:
    Path(path).write_text(json.dumps(
        {"boxes": [asdict(b) for b in boxes]}, indent=2, sort_keys=True) + "\n")


def load_truth(path):
    payload = json.loads(Path(path).read_text())
    return [GroundTruthBox(**b) for b in payload["boxes"]]


def save_image(img: np.ndarray, path) -> None:
    data = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    PilImage.fromarray(data, mode="L").save(path)


def load_image(path) -> np.ndarray:
    """Read a grayscale raster (PNG/PGM/...) as floats in [0, 1]."""
    try:
        with PilImage.open(path) as im:
            gray = im.convert("L")
            return np.asarray(gray, dtype=float) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise IOError(f"unreadable image file {path}: {exc}") from exc


def resize(img: np.ndarray, width: int = 256, height: int = 256) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling and edge clamping."""
    img = np.asarray(img, dtype=float)
    h_in, w_in = img.shape
    if (h_in, w_in) == (height, width):
        return img.copy()
    rows = (np.arange(height) + 0.5) * (h_in / height) - 0.5
    cols = (np.arange(width) + 0.5) * (w_in / width) - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h_in - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w_in - 1)
    r1 = np.clip(r0 + 1, 0, h_in - 1)
    c1 = np.clip(c0 + 1, 0, w_in - 1)
    wr = np.clip(rows - r0, 0.0, 1.0)[:, None]
    wc = np.clip(cols - c0, 0.0, 1.0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - wc) + img[np.ix_(r0, c1)] * wc
    bot = img[np.ix_(r1, c0)] * (1 - wc) + img[np.ix_(r1, c1)] * wc
    return top * (1 - wr) + bot * wr
