"""Pixel-level contrastive loss with shared foreground/background queries."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ConfigError
from .sampling import KeySets, SharedQueries

EPS = 1e-8

# number of near-zero vectors seen by cosine normalisation
_degenerate_norms = 0


def degenerate_norm_count() -> int:
    return _degenerate_norms


def _normalize(x: torch.Tensor) -> torch.Tensor:
    global _degenerate_norms
    norms = x.norm(dim=-1, keepdim=True)
    small = int((norms < EPS).sum())
    if small:
        _degenerate_norms += small
    return x / norms.clamp_min(EPS)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis, broadcasting; 0 for near-zero vectors."""
    return (_normalize(a) * _normalize(b)).sum(dim=-1)


def contrastive_term(q: torch.Tensor, K_pos: torch.Tensor, K_neg: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over positives of ``-log softmax`` of the positive against the negatives.

    ``K_pos`` is ``(P, C)``, ``K_neg`` is ``(N, C)``. Returns 0 when ``P == 0``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if K_pos.shape[0] == 0:
        return q.new_zeros(())
    qn = _normalize(q)
    s_pos = (_normalize(K_pos) @ qn) / tau  # (P,)
    if K_neg.shape[0] == 0:
        logits = s_pos[:, None]
    else:
        s_neg = (_normalize(K_neg) @ qn) / tau  # (N,)
        logits = torch.cat([s_pos[:, None], s_neg[None, :].expand(s_pos.shape[0], -1)], dim=1)
    # logsumexp subtracts the row max internally
    return (torch.logsumexp(logits, dim=1) - s_pos).mean()


@dataclass
class LossBreakdown:
    term_fg_easy: torch.Tensor
    term_fg_hard: torch.Tensor
    term_bg_easy: torch.Tensor
    term_bg_hard: torch.Tensor
    total: torch.Tensor
    n_proposals: int

    def as_floats(self) -> dict[str, float]:
        return {
            "term_fg_easy": float(self.term_fg_easy),
            "term_fg_hard": float(self.term_fg_hard),
            "term_bg_easy": float(self.term_bg_easy),
            "term_bg_hard": float(self.term_bg_hard),
            "total": float(self.total),
            "n_proposals": self.n_proposals,
        }


def proposal_terms(
    q_fg: torch.Tensor, q_bg: torch.Tensor, ks: KeySets, tau_easy: float, tau_hard: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    return (
        contrastive_term(q_fg, ks.fg_easy, ks.bg_easy, tau_easy),
        contrastive_term(q_fg, ks.fg_hard, ks.bg_hard, tau_hard),
        contrastive_term(q_bg, ks.bg_easy, ks.fg_easy, tau_easy),
        contrastive_term(q_bg, ks.bg_hard, ks.fg_hard, tau_hard),
    )


def query_sharing_loss(
    queries: SharedQueries | list[SharedQueries],
    keysets: list[KeySets],
    tau_easy: float,
    tau_hard: float,
) -> LossBreakdown:
    """Four-term loss per proposal, averaged over proposals.

    ``queries`` is either one shared pair for the whole batch, or a list with
    one pair per proposal (the non-shared ablation).
    """
    if tau_easy <= 0 or tau_hard <= 0:
        raise ConfigError("temperatures must be positive")
    if not keysets:
        zero = torch.zeros(())
        return LossBreakdown(zero, zero, zero, zero, zero, 0)
    per_prop = queries if isinstance(queries, list) else [queries] * len(keysets)
    if len(per_prop) != len(keysets):
        raise ValueError("need one query pair per proposal")
    terms = [proposal_terms(q.q_fg, q.q_bg, ks, tau_easy, tau_hard) for q, ks in zip(per_prop, keysets)]
    fe, fh, be, bh = (torch.stack(col).mean() for col in zip(*terms))
    return LossBreakdown(fe, fh, be, bh, fe + fh + be + bh, len(keysets))
