"""Shared queries and per-proposal hard/easy key mining.

A projected map is a ``(H*W, C)`` tensor whose rows follow the row-major
location order used by :class:`~contrastmask.partition.Partition`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .partition import BoundarySet, Partition, boundary_distance_map

HARD_DIST2 = 2


@dataclass
class KeySets:
    fg_easy: torch.Tensor
    fg_hard: torch.Tensor
    bg_easy: torch.Tensor
    bg_hard: torch.Tensor
    # source locations (flat indices) for inspection
    fg_easy_idx: np.ndarray
    fg_hard_idx: np.ndarray
    bg_easy_idx: np.ndarray
    bg_hard_idx: np.ndarray

    def sizes(self) -> tuple[int, int, int, int]:
        return (len(self.fg_easy_idx), len(self.fg_hard_idx), len(self.bg_easy_idx), len(self.bg_hard_idx))


@dataclass
class SharedQueries:
    q_fg: torch.Tensor
    q_bg: torch.Tensor
    n_contributing: int


def flatten_projected(Z: torch.Tensor) -> torch.Tensor:
    """``(C, H, W)`` model output -> ``(H*W, C)`` row-major."""
    C = Z.shape[0]
    return Z.reshape(C, -1).t()


def compute_shared_queries(
    batch: list[tuple[torch.Tensor, Partition]], detach: bool = True
) -> SharedQueries:
    """Average of per-proposal foreground/background means across the batch."""
    if not batch:
        raise ValueError("cannot compute queries from an empty batch")
    fg_means, bg_means = [], []
    for Z, P in batch:
        if P.fg.size == 0 or P.bg.size == 0:
            raise ValueError("partitions must have both sides; filter EmptyPartitionSide first")
        fg_means.append(Z[torch.as_tensor(P.fg)].mean(dim=0))
        bg_means.append(Z[torch.as_tensor(P.bg)].mean(dim=0))
    q_fg = torch.stack(fg_means).mean(dim=0)
    q_bg = torch.stack(bg_means).mean(dim=0)
    if detach:
        q_fg, q_bg = q_fg.detach(), q_bg.detach()
    return SharedQueries(q_fg=q_fg, q_bg=q_bg, n_contributing=len(batch))


def sample_count(n: int, sigma: float) -> int:
    if n == 0:
        return 0
    # half-up rounding: max(1, round(sigma * n))
    return max(1, min(n, int(math.floor(sigma * n + 0.5))))


def sample_subset(locations: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < sigma <= 1.0:
        raise ValueError(f"sigma must lie in (0, 1], got {sigma}")
    locations = np.asarray(locations)
    k = sample_count(len(locations), sigma)
    if k == 0:
        return locations[:0]
    picked = rng.choice(len(locations), size=k, replace=False)
    return locations[np.sort(picked)]


def _gather(Z: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    return Z[torch.as_tensor(idx, dtype=torch.long)]


def _keysets(Z: torch.Tensor, fe, fh, be, bh) -> KeySets:
    return KeySets(
        fg_easy=_gather(Z, fe),
        fg_hard=_gather(Z, fh),
        bg_easy=_gather(Z, be),
        bg_hard=_gather(Z, bh),
        fg_easy_idx=fe,
        fg_hard_idx=fh,
        bg_easy_idx=be,
        bg_hard_idx=bh,
    )


def mine_keys_base(
    Z: torch.Tensor, P: Partition, B: BoundarySet, sigma: float, rng: np.random.Generator
) -> KeySets:
    """Hard keys lie within squared distance 2 of the GT boundary, easy keys beyond."""
    if P.source != "gt_mask":
        raise ValueError("mine_keys_base needs a gt_mask partition")
    if len(B) == 0:
        raise ValueError("boundary set is empty")
    d2 = boundary_distance_map(B).ravel()
    s_fg = sample_subset(P.fg, sigma, rng)
    s_bg = sample_subset(P.bg, sigma, rng)
    hard_fg = d2[s_fg] <= HARD_DIST2
    hard_bg = d2[s_bg] <= HARD_DIST2
    return _keysets(Z, s_fg[~hard_fg], s_fg[hard_fg], s_bg[~hard_bg], s_bg[hard_bg])


def _split_random(s: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(len(s))
    n_hard = len(s) // 2
    hard = np.sort(s[perm[:n_hard]])
    easy = np.sort(s[perm[n_hard:]])
    return easy, hard


def mine_keys_novel(Z: torch.Tensor, P: Partition, sigma: float, rng: np.random.Generator) -> KeySets:
    """Random disjoint hard/easy split of each sampled side; easy gets the odd key."""
    if P.source != "cam":
        raise ValueError("mine_keys_novel needs a cam partition")
    fe, fh = _split_random(sample_subset(P.fg, sigma, rng), rng)
    be, bh = _split_random(sample_subset(P.bg, sigma, rng), rng)
    return _keysets(Z, fe, fh, be, bh)
