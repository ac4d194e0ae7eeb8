"""Scalar reference implementation of the contrastive loss and numerical checks.

The reference functions use plain Python floats and explicit loops with a
direct ``log(sum(exp))``. They share nothing with the tensor implementation
in :mod:`contrastmask.losses` and serve as its oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .losses import query_sharing_loss
from .sampling import KeySets, SharedQueries

Vec = list[float]
TAUS = (0.05, 0.3, 0.7, 5.0)
EPS = 1e-8


def ref_cosine(a: Vec, b: Vec) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (max(na, EPS) * max(nb, EPS))


def ref_term(q: Vec, K_pos: list[Vec], K_neg: list[Vec], tau: float) -> float:
    if not K_pos:
        return 0.0
    acc = 0.0
    for kp in K_pos:
        s = ref_cosine(q, kp) / tau
        denom = math.exp(s)
        for kn in K_neg:
            denom += math.exp(ref_cosine(q, kn) / tau)
        acc += s - math.log(denom)
    return -acc / len(K_pos)


def ref_loss(q_fg: Vec, q_bg: Vec, keysets: list[dict[str, list[Vec]]], tau_easy: float, tau_hard: float) -> float:
    if not keysets:
        return 0.0
    total = 0.0
    for ks in keysets:
        total += ref_term(q_fg, ks["fg_easy"], ks["bg_easy"], tau_easy)
        total += ref_term(q_fg, ks["fg_hard"], ks["bg_hard"], tau_hard)
        total += ref_term(q_bg, ks["bg_easy"], ks["fg_easy"], tau_easy)
        total += ref_term(q_bg, ks["bg_hard"], ks["fg_hard"], tau_hard)
    return total / len(keysets)


# --------------------------------------------------------------------------
# random instances

KEY_NAMES = ("fg_easy", "fg_hard", "bg_easy", "bg_hard")


@dataclass
class LossInstance:
    q_fg: Vec
    q_bg: Vec
    keysets: list[dict[str, list[Vec]]]
    tau_easy: float
    tau_hard: float

    @property
    def dim(self) -> int:
        return len(self.q_fg)


def random_instance(rng: np.random.Generator, max_dim: int = 8, max_keys: int = 20) -> LossInstance:
    C = int(rng.integers(2, max_dim + 1))
    n_props = int(rng.integers(1, 4))
    keysets = []
    for _ in range(n_props):
        # split at most max_keys keys over the four sets
        total = int(rng.integers(2, max_keys + 1))
        cuts = np.sort(rng.integers(0, total + 1, size=3))
        sizes = np.diff(np.concatenate([[0], cuts, [total]]))
        keysets.append({name: rng.standard_normal((int(n), C)).tolist() for name, n in zip(KEY_NAMES, sizes)})
    taus = rng.choice(TAUS, size=2)
    return LossInstance(
        q_fg=rng.standard_normal(C).tolist(),
        q_bg=rng.standard_normal(C).tolist(),
        keysets=keysets,
        tau_easy=float(taus[0]),
        tau_hard=float(taus[1]),
    )


def _to_keysets(inst: LossInstance, dtype: torch.dtype, requires_grad: bool = False) -> list[KeySets]:
    out = []
    empty = np.zeros(0, dtype=np.int64)
    for ks in inst.keysets:
        tensors = {
            name: torch.tensor(ks[name], dtype=dtype).reshape(-1, inst.dim).requires_grad_(requires_grad)
            for name in KEY_NAMES
        }
        out.append(KeySets(**tensors, fg_easy_idx=empty, fg_hard_idx=empty, bg_easy_idx=empty, bg_hard_idx=empty))
    return out


def tensor_loss(inst: LossInstance, dtype: torch.dtype = torch.float64) -> float:
    q = SharedQueries(torch.tensor(inst.q_fg, dtype=dtype), torch.tensor(inst.q_bg, dtype=dtype), len(inst.keysets))
    return float(query_sharing_loss(q, _to_keysets(inst, dtype), inst.tau_easy, inst.tau_hard).total)


def oracle_equivalence(n: int = 100, seed: int = 0) -> float:
    """Max absolute difference between tensor and reference losses on ``n`` random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        inst = random_instance(rng)
        ref = ref_loss(inst.q_fg, inst.q_bg, inst.keysets, inst.tau_easy, inst.tau_hard)
        worst = max(worst, abs(tensor_loss(inst) - ref))
    return worst


# --------------------------------------------------------------------------
# finite differences


def _flat_params(inst: LossInstance, with_queries: bool) -> list[tuple[list[float], int]]:
    """(owner list, index) handles for every scalar being checked."""
    handles = []
    if with_queries:
        handles += [(inst.q_fg, j) for j in range(inst.dim)]
        handles += [(inst.q_bg, j) for j in range(inst.dim)]
    for ks in inst.keysets:
        for name in KEY_NAMES:
            for vec in ks[name]:
                handles += [(vec, j) for j in range(inst.dim)]
    return handles


def finite_difference_grad(inst: LossInstance, with_queries: bool, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences of the reference loss, step ``rel_step * max(1, |x|)``."""

    def f() -> float:
        return ref_loss(inst.q_fg, inst.q_bg, inst.keysets, inst.tau_easy, inst.tau_hard)

    grads = []
    for owner, j in _flat_params(inst, with_queries):
        x0 = owner[j]
        h = rel_step * max(1.0, abs(x0))
        owner[j] = x0 + h
        fp = f()
        owner[j] = x0 - h
        fm = f()
        owner[j] = x0
        grads.append((fp - fm) / (2 * h))
    return np.asarray(grads)


def analytic_grad(inst: LossInstance, query_gradient: str, dtype: torch.dtype = torch.float32) -> np.ndarray:
    flow = query_gradient == "flow"
    q_fg = torch.tensor(inst.q_fg, dtype=dtype, requires_grad=flow)
    q_bg = torch.tensor(inst.q_bg, dtype=dtype, requires_grad=flow)
    keysets = _to_keysets(inst, dtype, requires_grad=True)
    q = SharedQueries(q_fg, q_bg, len(keysets))
    loss = query_sharing_loss(q, keysets, inst.tau_easy, inst.tau_hard).total
    inputs = ([q_fg, q_bg] if flow else []) + [getattr(ks, n) for ks in keysets for n in KEY_NAMES]
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    parts = [
        (g if g is not None else torch.zeros_like(x)).reshape(-1).double().numpy()
        for g, x in zip(grads, inputs)
    ]
    return np.concatenate(parts)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of the numeric gradient."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def gradient_check(
    n: int = 20, seed: int = 0, query_gradient: str = "flow", dtype: torch.dtype = torch.float32
) -> float:
    """Worst relative error of the autograd gradient against finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        inst = random_instance(rng)
        numeric = finite_difference_grad(inst, with_queries=query_gradient == "flow")
        worst = max(worst, relative_error(analytic_grad(inst, query_gradient, dtype), numeric))
    return worst
