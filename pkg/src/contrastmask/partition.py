"""Foreground/background partitions of an RoI lattice and GT boundaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class EmptyPartitionSide(ValueError):
    """Foreground or background partition is empty; skip the proposal for CL."""


@dataclass(frozen=True)
class Partition:
    """Disjoint foreground/background locations as sorted row-major flat indices."""

    fg: np.ndarray
    bg: np.ndarray
    shape: tuple[int, int]
    source: str  # "gt_mask" or "cam"

    def fg_coords(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in divmod(i, self.shape[1])) for i in self.fg]

    def bg_coords(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in divmod(i, self.shape[1])) for i in self.bg]

    def label_map(self) -> np.ndarray:
        """1 for foreground, 0 for background, -1 for unassigned."""
        out = np.full(self.shape[0] * self.shape[1], -1, dtype=np.int8)
        out[self.bg] = 0
        out[self.fg] = 1
        return out.reshape(self.shape)


@dataclass(frozen=True)
class BoundarySet:
    mask: np.ndarray  # bool H x W, True on boundary locations

    @property
    def locations(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in np.argwhere(self.mask)]

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, loc: tuple[int, int]) -> bool:
        return bool(self.mask[loc])


def _check_lattice(arr: np.ndarray) -> None:
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"lattice must be 2-D with H, W >= 2, got shape {arr.shape}")


def partition_from_mask(M: np.ndarray) -> Partition:
    M = np.asarray(M)
    _check_lattice(M)
    if not np.isin(M, (0, 1)).all():
        raise ValueError("mask must be binary")
    flat = M.astype(bool).ravel()
    fg, bg = np.flatnonzero(flat), np.flatnonzero(~flat)
    if fg.size == 0 or bg.size == 0:
        raise EmptyPartitionSide("mask is single-valued")
    return Partition(fg=fg, bg=bg, shape=M.shape, source="gt_mask")


def partition_from_cam(A: np.ndarray, delta: float) -> Partition:
    A = np.asarray(A, dtype=np.float64)
    _check_lattice(A)
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 0.5), got {delta}")
    if A.min() < 0.0 or A.max() > 1.0:
        raise ValueError("CAM values must lie in [0, 1]")
    flat = A.ravel()
    fg = np.flatnonzero(flat >= 1.0 - delta)
    bg = np.flatnonzero(flat <= delta)
    if fg.size == 0 or bg.size == 0:
        raise EmptyPartitionSide(f"CAM partition has |fg|={fg.size}, |bg|={bg.size}")
    return Partition(fg=fg, bg=bg, shape=A.shape, source="cam")


def extract_boundary(M: np.ndarray) -> BoundarySet:
    """Inner 4-connected boundary: foreground pixels with an in-lattice background 4-neighbour."""
    M = np.asarray(M).astype(bool)
    _check_lattice(M)
    if M.all() or not M.any():
        raise ValueError("boundary needs both foreground and background")
    has_bg = np.zeros_like(M)
    has_bg[1:, :] |= ~M[:-1, :]
    has_bg[:-1, :] |= ~M[1:, :]
    has_bg[:, 1:] |= ~M[:, :-1]
    has_bg[:, :-1] |= ~M[:, 1:]
    return BoundarySet(mask=M & has_bg)


def boundary_distance_map(B: BoundarySet) -> np.ndarray:
    """Squared Euclidean distance from every location to its nearest boundary location."""
    if len(B) == 0:
        raise ValueError("boundary set is empty")
    d = ndimage.distance_transform_edt(~B.mask)
    return np.rint(d * d).astype(np.int64)


def boundary_distance_squared(i: tuple[int, int], B: BoundarySet) -> int:
    if len(B) == 0:
        raise ValueError("boundary set is empty")
    locs = np.argwhere(B.mask)
    d2 = ((locs - np.asarray(i)) ** 2).sum(axis=1)
    return int(d2.min())


def nearest_boundary(i: tuple[int, int], B: BoundarySet) -> tuple[int, int]:
    """b_i: the nearest boundary location, ties broken row-major."""
    locs = np.argwhere(B.mask)  # already row-major
    d2 = ((locs - np.asarray(i)) ** 2).sum(axis=1)
    r, c = locs[int(np.argmin(d2))]
    return int(r), int(c)


def render_partition(P: Partition) -> np.ndarray:
    """Three-level uint8 image: background 0, unassigned 128, foreground 255."""
    labels = P.label_map()
    out = np.full(P.shape, 128, dtype=np.uint8)
    out[labels == 0] = 0
    out[labels == 1] = 255
    return out
