"""Similarity -> evidence -> subjective-logic opinion -> Dirichlet."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ._validation import check_alpha, check_similarity
from .exceptions import EmptyEvidence, IndexOutOfRange, OffSimplex, ShapeMismatch

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class EvidenceConfig:
    tau_e: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau_e < 1.0:
            raise ValueError(f"tau_e must lie in (0, 1), got {self.tau_e}")


@dataclass(frozen=True)
class Opinion:
    belief: np.ndarray
    uncertainty: float
    alpha: np.ndarray
    strength: float


def extract_evidence(S, cfg: EvidenceConfig = EvidenceConfig()) -> np.ndarray:
    """Elementwise ``exp(tanh(S / tau_e))``; values lie in (1/e, e)."""
    S = check_similarity(S, square=False)
    return np.exp(np.tanh(S / cfg.tau_e))


def evidence_derivative(S, cfg: EvidenceConfig = EvidenceConfig()) -> np.ndarray:
    """d evidence / dS, elementwise."""
    t = np.tanh(np.asarray(S, dtype=np.float64) / cfg.tau_e)
    return np.exp(t) * (1.0 - t * t) / cfg.tau_e


def build_opinion(evidence_row) -> Opinion:
    e = np.asarray(evidence_row, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise EmptyEvidence("evidence row is empty")
    if np.any(e <= 0):
        raise ValueError("evidence must be strictly positive")
    alpha = e + 1.0
    strength = float(alpha.sum())
    return Opinion(
        belief=e / strength,
        uncertainty=e.size / strength,
        alpha=alpha,
        strength=strength,
    )


def dirichlet_log_density(p, alpha) -> float:
    """Log Dirichlet density; ``-inf`` just outside the simplex closure.

    Points further than the tolerance from the simplex raise :class:`OffSimplex`.
    """
    alpha = check_alpha(alpha)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size != alpha.size:
        raise ShapeMismatch(f"p has length {p.size}, alpha {alpha.size}")
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise OffSimplex("p is not on the probability simplex")
    p = np.clip(p, 0.0, None)
    log_norm = gammaln(alpha.sum()) - gammaln(alpha).sum()
    a1 = alpha - 1.0
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    # 0 * log 0 = 0 for alpha_j == 1
    terms = np.where(a1 == 0.0, 0.0, a1 * logp)
    return float(log_norm + terms.sum())


def pair_evidence_score(E_i2t, E_t2i, i: int) -> float:
    """Bidirectional evidence of the annotated pair ``i``."""
    E_i2t = np.asarray(E_i2t, dtype=np.float64)
    E_t2i = np.asarray(E_t2i, dtype=np.float64)
    if E_i2t.shape != E_t2i.shape or E_i2t.ndim != 2 or E_i2t.shape[0] != E_i2t.shape[1]:
        raise ShapeMismatch("evidence matrices must be square and of equal shape")
    if not 0 <= i < E_i2t.shape[0]:
        raise IndexOutOfRange(f"pair index {i} out of range")
    return float((E_i2t[i, i] + E_t2i[i, i]) / 2.0)


def matched_pair_scores(sim_diag, cfg: EvidenceConfig = EvidenceConfig()) -> np.ndarray:
    """Vectorised :func:`pair_evidence_score` from the matched-pair cosines.

    Both directions see the same diagonal entry, so the score reduces to the
    evidence of ``S_ii``.
    """
    d = np.asarray(sim_diag, dtype=np.float64).reshape(1, -1)
    e = extract_evidence(d, cfg)[0]
    return (e + e) / 2.0
