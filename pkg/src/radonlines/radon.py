"""Discrete Radon projection and its exact adjoint.

Images are 2-D float arrays (height, width) with row 0 at the top.
A line is parameterised by a signed offset ``r`` (pixels from the image
center) and an orientation ``omega`` (degrees from the horizontal axis):
the line is the set of points whose position ``(i, j)`` relative to the
center satisfies ``i*cos(omega) + j*sin(omega) = r``, with ``i`` running
along columns and ``j`` down the rows.  Under this convention omega = 0
responds to vertical lines (column sums) and omega = 90 to horizontal
lines (row sums), so a bright horizontal stripe peaks near 90 degrees.

Sinograms are (radii_count, angle_count) arrays.  The forward map and the
synthesis (backprojection) map are built from one sparse sampling matrix,
so they are exact transposes of each other by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
import scipy.sparse as sp

DEFAULT_RAY_STEP = 0.5  # pixels along each ray
DEFAULT_RADIUS_SPACING = 1.0  # pixels between radius bins
MIN_IMAGE_DIM = 8


class GeometryError(ValueError):
    """Raised for invalid operator geometry or mismatched shapes."""


@dataclass(frozen=True)
class AngleSet:
    """Ordered set of distinct projection angles in degrees."""

    angles: tuple
    step: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        if a.ndim != 1 or a.size == 0:
            raise GeometryError("angle set must be a non-empty 1-D sequence")
        if self.step <= 0:
            raise GeometryError("angle step must be positive")
        if np.any(np.diff(a) <= 0):
            raise GeometryError("angles must be strictly increasing")
        if a[0] < -90.0 or a[-1] >= 180.0:
            raise GeometryError("angles must lie in [-90, 180)")
        object.__setattr__(self, "angles", tuple(float(x) for x in a))

    def __len__(self):
        return len(self.angles)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=float)

    @classmethod
    def band(cls, lo: float, hi: float, step: float = 1.0) -> "AngleSet":
        """Angles lo, lo+step, ..., up to and including hi."""
        n = int(round((hi - lo) / step))
        return cls(tuple(lo + k * step for k in range(n + 1)), step)

    @classmethod
    def vertical_band(cls, half_width: float = 15.0, step: float = 1.0) -> "AngleSet":
        """Band around 0 degrees where vertical line artefacts live."""
        return cls.band(-half_width, half_width, step)

    @classmethod
    def horizontal_band(cls, half_width: float = 5.0, step: float = 1.0) -> "AngleSet":
        """Band around 90 degrees where horizontal lines live."""
        return cls.band(90.0 - half_width, 90.0 + half_width, step)


def concat_angle_sets(a: AngleSet, b: AngleSet) -> AngleSet:
    """Merge two disjoint angle sets into one sorted set."""
    merged = np.concatenate([a.as_array(), b.as_array()])
    merged.sort()
    if np.any(np.diff(merged) < 1e-9):
        raise GeometryError("angle sets overlap")
    return AngleSet(tuple(merged), min(a.step, b.step))


def default_radii_count(width: int, height: int, spacing: float = DEFAULT_RADIUS_SPACING) -> int:
    """Smallest default bin count covering the image diagonal, plus one."""
    return int(math.ceil(math.hypot(width, height) / spacing)) + 1


class RadonOperator:
    """Precomputed projection geometry for one image size and angle set.

    Immutable after construction; safe to share between workers.  Use
    :func:`build_operator` instead of calling the constructor directly.
    """

    def __init__(self, width, height, angle_set, radii_count,
                 spacing=DEFAULT_RADIUS_SPACING, ray_step=DEFAULT_RAY_STEP):
        if width < MIN_IMAGE_DIM or height < MIN_IMAGE_DIM:
            raise GeometryError(
                f"image dimensions must be at least {MIN_IMAGE_DIM}, got {width}x{height}")
        diagonal = math.hypot(width, height)
        if radii_count * spacing < diagonal:
            raise GeometryError(
                f"radii_count={radii_count} at spacing {spacing} does not cover "
                f"the image diagonal ({diagonal:.1f} px)")
        self.width = int(width)
        self.height = int(height)
        self.angle_set = angle_set
        self.radii_count = int(radii_count)
        self.spacing = float(spacing)
        self.ray_step = float(ray_step)
        # Signed radius offset of each bin, symmetric about the image center.
        self.radii = (np.arange(self.radii_count) - (self.radii_count - 1) / 2.0) * spacing
        self._build_matrix()

    # Shapes --------------------------------------------------------------

    @property
    def image_shape(self):
        return (self.height, self.width)

    @property
    def sinogram_shape(self):
        return (self.radii_count, len(self.angle_set))

    def angle_index(self, omega: float) -> int:
        idx = np.nonzero(np.isclose(self.angle_set.as_array(), omega))[0]
        if idx.size == 0:
            raise GeometryError(f"angle {omega} not in operator angle set")
        return int(idx[0])

    def radius_index(self, r: float) -> int:
        return int(np.argmin(np.abs(self.radii - r)))

    # Construction ---------------------------------------------------------

    def _build_matrix(self):
        h, w = self.height, self.width
        n_angles = len(self.angle_set)
        half_len = math.hypot(w, h) / 2.0
        n_steps = int(math.ceil(2.0 * half_len / self.ray_step)) + 1
        t = (np.arange(n_steps) - (n_steps - 1) / 2.0) * self.ray_step
        # Single normalization shared by forward and synthesis so the pair
        # stays an exact transpose; ray_step/|angles| keeps the synthesis
        # response to a flat sinogram at unit scale.
        scale = self.ray_step / n_angles

        rows_all, cols_all, vals_all = [], [], []
        for a_idx, omega in enumerate(self.angle_set.angles):
            theta = math.radians(omega)
            nx, ny = math.cos(theta), math.sin(theta)
            dx, dy = -math.sin(theta), math.cos(theta)
            # Sample points for every (radius bin, step): (R, S)
            px = self.radii[:, None] * nx + t[None, :] * dx
            py = self.radii[:, None] * ny + t[None, :] * dy
            fc = px + w / 2.0  # fractional column index
            fr = py + h / 2.0  # fractional row index
            c0 = np.floor(fc).astype(np.int64)
            r0 = np.floor(fr).astype(np.int64)
            wc = fc - c0
            wr = fr - r0
            ray = np.broadcast_to(
                (np.arange(self.radii_count)[:, None]), fc.shape)

            rows_a, cols_a, vals_a = [], [], []
            for drow, dcol, wgt in (
                (0, 0, (1 - wr) * (1 - wc)),
                (0, 1, (1 - wr) * wc),
                (1, 0, wr * (1 - wc)),
                (1, 1, wr * wc),
            ):
                rr = r0 + drow
                cc = c0 + dcol
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wgt > 0)
                rows_a.append(ray[ok])
                cols_a.append((rr[ok] * w + cc[ok]))
                vals_a.append(wgt[ok])
            # Deduplicate within the angle before accumulating.
            block = sp.coo_matrix(
                (np.concatenate(vals_a),
                 (np.concatenate(rows_a), np.concatenate(cols_a))),
                shape=(self.radii_count, h * w)).tocsr().tocoo()
            rows_all.append((block.row.astype(np.int64) * n_angles + a_idx).astype(np.int32))
            cols_all.append(block.col.astype(np.int32))
            vals_all.append(block.data * scale)

        mat = sp.coo_matrix(
            (np.concatenate(vals_all),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(self.radii_count * n_angles, h * w))
        self._forward = mat.tocsr()
        self._adjoint = self._forward.T.tocsr()

    # Application ----------------------------------------------------------

    def project(self, img: np.ndarray) -> np.ndarray:
        """Forward Radon projection of an image, shape (radii, angles)."""
        img = np.asarray(img, dtype=float)
        if img.shape != self.image_shape:
            raise GeometryError(
                f"image shape {img.shape} does not match operator {self.image_shape}")
        out = self._forward @ img.ravel()
        return out.reshape(self.sinogram_shape)

    def synthesize(self, sino: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`project` (unfiltered backprojection)."""
        sino = np.asarray(sino, dtype=float)
        if sino.shape != self.sinogram_shape:
            raise GeometryError(
                f"sinogram shape {sino.shape} does not match operator {self.sinogram_shape}")
        out = self._adjoint @ sino.ravel()
        return out.reshape(self.image_shape)


def build_operator(width: int, height: int, angles: AngleSet,
                   radii_count: int | None = None) -> RadonOperator:
    """Build the projection operator for a fixed geometry.

    radii_count defaults to ceil(diagonal) + 1 bins at 1 px spacing.
    """
    if radii_count is None:
        radii_count = default_radii_count(width, height)
    return RadonOperator(width, height, angles, radii_count)


def project(op: RadonOperator, img: np.ndarray) -> np.ndarray:
    return op.project(img)


def synthesize(op: RadonOperator, sino: np.ndarray) -> np.ndarray:
    return op.synthesize(sino)


def default_angle_set(step: float = 1.0) -> AngleSet:
    """Vertical and horizontal detection bands merged (the working set)."""
    return concat_angle_sets(AngleSet.vertical_band(step=step),
                             AngleSet.horizontal_band(step=step))
