"""Loss terms over a K x K image-text similarity matrix.

Every batch-level loss returns a :class:`LossReport` holding the scalar value
and the exact gradient with respect to ``S`` (rows are image queries,
columns are text candidates).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from ._validation import check_alpha, check_labels, check_one_hot, check_similarity
from .evidence import EvidenceConfig, evidence_derivative, extract_evidence
from .exceptions import NoNegatives, ShapeMismatch

TERMS = ("L_e", "L_h", "L_TAL", "L_m_i2t", "L_m_t2i", "L_KL_i2t", "L_KL_t2i")


@dataclass
class BatchLabels:
    pair_index: np.ndarray
    identity: np.ndarray
    treat_as_noisy: np.ndarray

    @classmethod
    def diagonal(cls, identity, treat_as_noisy=None) -> "BatchLabels":
        """Labels for a batch whose i-th image is annotated with the i-th text."""
        identity = np.asarray(identity)
        K = identity.shape[0]
        if treat_as_noisy is None:
            treat_as_noisy = np.zeros(K, dtype=bool)
        return cls(np.arange(K), identity, np.asarray(treat_as_noisy, dtype=bool))

    def __post_init__(self):
        self.pair_index = np.asarray(self.pair_index, dtype=np.int64)
        self.identity = np.asarray(self.identity)
        self.treat_as_noisy = np.asarray(self.treat_as_noisy, dtype=bool)

    @property
    def inverse_pair(self) -> np.ndarray:
        """For each text column, the row of the image annotated with it."""
        inv = np.empty_like(self.pair_index)
        inv[self.pair_index] = np.arange(self.pair_index.size)
        return inv


@dataclass(frozen=True)
class DshSchedule:
    batch_size: int
    eta: float = 0.05
    mu: int = 8
    step: int = 0

    def __post_init__(self):
        if self.eta < 0 or self.mu < 1 or self.mu > self.batch_size:
            raise ValueError(f"invalid DSH schedule {self}")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    m: float = 0.1
    tau_h: float = 0.05
    tau_t: float = 0.015
    tau_e: float = 0.1
    lambda2: float = 0.1
    lambda2_max: float = 0.1
    lambda2_anneal_epochs: int = 10
    # optional hook: (row similarities, positive mask) -> weights summing to 1
    tal_weights: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if min(self.gamma, self.m, self.lambda2, self.lambda2_max) < 0:
            raise ValueError("margins and lambda2 must be non-negative")
        if min(self.tau_h, self.tau_t, self.tau_e) <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def evidence(self) -> EvidenceConfig:
        return EvidenceConfig(self.tau_e)

    def lambda2_at(self, epoch: int) -> float:
        if self.lambda2_anneal_epochs <= 0:
            return self.lambda2_max
        return min(1.0, epoch / self.lambda2_anneal_epochs) * self.lambda2_max


@dataclass
class LossReport:
    value: float
    grad_S: np.ndarray
    per_term: dict = field(default_factory=dict)

    def __add__(self, other: "LossReport") -> "LossReport":
        terms = dict(self.per_term)
        for k, v in other.per_term.items():
            terms[k] = terms.get(k, 0.0) + v
        return LossReport(self.value + other.value, self.grad_S + other.grad_S, terms)


# ---------------------------------------------------------------------------
# per-query evidential terms, vectorised over rows of alpha


def loss_m_rows(alpha: np.ndarray, target: np.ndarray):
    """Dirichlet mean-squared loss for each row; returns (values, d/d alpha)."""
    Q, K = alpha.shape
    L = alpha.sum(axis=1, keepdims=True)
    p = alpha / L
    sq = np.sum(p * p, axis=1, keepdims=True)
    rows = np.arange(Q)
    p_t = p[rows, target][:, None]
    # sum_j (y_j - p_j)^2 = 1 - 2 p_t + sum p^2 ; variance term = (1 - sum p^2) / (L + 1)
    values = (1.0 - 2.0 * p_t + sq + (1.0 - sq) / (L + 1.0))[:, 0]
    onehot = np.zeros_like(alpha)
    onehot[rows, target] = 1.0
    d_sq = 2.0 * (p - sq) / L
    d_pt = (onehot - p_t) / L
    grad = -2.0 * d_pt + d_sq * (1.0 - 1.0 / (L + 1.0)) - (1.0 - sq) / (L + 1.0) ** 2
    return values, grad


def loss_kl_rows(alpha: np.ndarray, target: np.ndarray):
    """KL(Dir(alpha_tilde) || Dir(1)) per row; returns (values, d/d alpha).

    ``target[r] < 0`` means no coordinate is reset, i.e. the whole row is
    pushed toward the uniform Dirichlet.
    """
    Q, K = alpha.shape
    keep = np.ones_like(alpha)
    has_t = target >= 0
    keep[np.flatnonzero(has_t), target[has_t]] = 0.0
    at = keep * alpha + (1.0 - keep)
    s = at.sum(axis=1, keepdims=True)
    values = (
        gammaln(s)[:, 0]
        - gammaln(at).sum(axis=1)
        - gammaln(K)
        + np.sum((at - 1.0) * (digamma(at) - digamma(s)), axis=1)
    )
    grad_t = (at - 1.0) * polygamma(1, at) - polygamma(1, s) * np.sum(at - 1.0, axis=1, keepdims=True)
    return values, grad_t * keep


def loss_m(alpha, y):
    alpha = check_alpha(alpha)
    t = check_one_hot(y, alpha.size)
    v, g = loss_m_rows(alpha[None, :], np.array([t]))
    return float(v[0]), g[0]


def loss_kl(alpha, y):
    alpha = check_alpha(alpha)
    t = check_one_hot(y, alpha.size)
    v, g = loss_kl_rows(alpha[None, :], np.array([t]))
    return float(max(v[0], 0.0)), g[0]


# ---------------------------------------------------------------------------
# batch losses


def _prepare(S, labels):
    S = check_similarity(S)
    check_labels(labels, S.shape[0])
    return S


def loss_evidential(S, labels: BatchLabels, cfg: LossConfig = LossConfig()) -> LossReport:
    S = _prepare(S, labels)
    K = S.shape[0]
    E = extract_evidence(S, cfg.evidence)
    dE = evidence_derivative(S, cfg.evidence)
    inv = labels.inverse_pair
    noisy_img = labels.treat_as_noisy
    noisy_txt = labels.treat_as_noisy[inv]

    per_term = {}
    grad_E = np.zeros_like(S)
    total = 0.0
    for name, alpha, target, noisy, transpose in (
        ("i2t", E + 1.0, labels.pair_index, noisy_img, False),
        ("t2i", E.T + 1.0, inv, noisy_txt, True),
    ):
        m_val, m_grad = loss_m_rows(alpha, target)
        m_val = np.where(noisy, 0.0, m_val)
        m_grad[noisy] = 0.0
        kl_target = np.where(noisy, -1, target)
        kl_val, kl_grad = loss_kl_rows(alpha, kl_target)
        g = m_grad + cfg.lambda2 * kl_grad
        grad_E += g.T if transpose else g
        per_term[f"L_m_{name}"] = float(m_val.sum() / K)
        per_term[f"L_KL_{name}"] = float(kl_val.sum() / K)
        total += float(m_val.sum() + cfg.lambda2 * kl_val.sum())

    value = total / K
    per_term["L_e"] = value
    return LossReport(value, grad_E * dE / K, per_term)


def dsh_negative_count(sched: DshSchedule, available: Optional[int] = None) -> int:
    """Annealed number of hard negatives, ``max(ceil(K - eta*step), mu)``."""
    raw = sched.batch_size - sched.eta * sched.step
    n = max(math.ceil(round(raw, 9)), sched.mu)
    if available is not None:
        n = min(n, available)
    return max(n, 1)


def _side_ids(labels: BatchLabels):
    inv = labels.inverse_pair
    row_id = labels.identity
    col_id = labels.identity[inv]
    return row_id, col_id, inv


def _directions(S, labels):
    """Yield (rows-as-queries matrix, query ids, candidate ids, positive col,
    query noisy, candidate noisy, transpose flag) for i2t then t2i."""
    row_id, col_id, inv = _side_ids(labels)
    noisy_row = labels.treat_as_noisy
    noisy_col = labels.treat_as_noisy[inv]
    yield S, row_id, col_id, labels.pair_index, noisy_row, noisy_col, False
    yield S.T, col_id, row_id, inv, noisy_col, noisy_row, True


def _dsh_direction(M, q_id, c_id, pos, anchor, n, tau, gamma):
    Q = M.shape[0]
    rows = np.arange(Q)
    neg = q_id[:, None] != c_id[None, :]
    n_neg = neg.sum(axis=1)
    if np.any(anchor & (n_neg == 0)):
        raise NoNegatives("a query has no candidate with a different identity")
    masked = np.where(neg, M, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :n]
    hard = np.take_along_axis(masked, order, axis=1)
    top = hard[:, :1]
    top = np.where(np.isfinite(top), top, 0.0)
    # rows without negatives are never anchors; silence their 0/0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.exp((hard - top) / tau)
        lse = top[:, 0] + tau * np.log(z.sum(axis=1))
        w = z / z.sum(axis=1, keepdims=True)
    arg = gamma - M[rows, pos] + lse
    active = anchor & (arg > 0)
    grad = np.zeros_like(M)
    a = np.flatnonzero(active)
    np.add.at(grad, (np.repeat(a, order.shape[1]), order[a].ravel()), w[a].ravel())
    grad[a, pos[a]] -= 1.0
    return float(arg[active].sum()), grad


def loss_dsh(S, labels: BatchLabels, sched: DshSchedule, cfg: LossConfig = LossConfig()) -> LossReport:
    S = _prepare(S, labels)
    if sched.batch_size != S.shape[0]:
        raise ShapeMismatch(f"schedule batch size {sched.batch_size} != {S.shape[0]}")
    n = dsh_negative_count(sched)
    n = min(n, S.shape[0])
    count = int(np.sum(~labels.treat_as_noisy))
    grad = np.zeros_like(S)
    total = 0.0
    for M, q_id, c_id, pos, q_noisy, _, transpose in _directions(S, labels):
        v, g = _dsh_direction(M, q_id, c_id, pos, ~q_noisy, n, cfg.tau_h, cfg.gamma)
        total += v
        grad += g.T if transpose else g
    if count == 0:
        return LossReport(0.0, np.zeros_like(S), {"L_h": 0.0})
    value = total / count
    return LossReport(value, grad / count, {"L_h": value})


def _tal_direction(M, q_id, c_id, pos, q_noisy, c_noisy, tau, m, hook):
    Q = M.shape[0]
    rows = np.arange(Q)
    positive = (q_id[:, None] == c_id[None, :]) & ~c_noisy[None, :]
    positive[rows, pos] = True
    if hook is None:
        weights = positive / positive.sum(axis=1, keepdims=True)
    else:
        weights = np.vstack([hook(M[r], positive[r]) for r in range(Q)])
    s_pos = np.sum(weights * M, axis=1)
    top = M.max(axis=1, keepdims=True)
    z = np.exp((M - top) / tau)
    lse = top[:, 0] + tau * np.log(z.sum(axis=1))
    soft = z / z.sum(axis=1, keepdims=True)
    arg = m - s_pos + lse
    active = ~q_noisy & (arg > 0)
    grad = np.where(active[:, None], soft - weights, 0.0)
    return float(arg[active].sum()), grad


def loss_tal(S, labels: BatchLabels, cfg: LossConfig = LossConfig()) -> LossReport:
    S = _prepare(S, labels)
    count = int(np.sum(~labels.treat_as_noisy))
    if count == 0:
        return LossReport(0.0, np.zeros_like(S), {"L_TAL": 0.0})
    grad = np.zeros_like(S)
    total = 0.0
    for M, q_id, c_id, pos, q_noisy, c_noisy, transpose in _directions(S, labels):
        v, g = _tal_direction(M, q_id, c_id, pos, q_noisy, c_noisy, cfg.tau_t, cfg.m, cfg.tal_weights)
        total += v
        grad += g.T if transpose else g
    value = total / count
    return LossReport(value, grad / count, {"L_TAL": value})


def loss_triplet(S, labels: BatchLabels, cfg: LossConfig = LossConfig()) -> LossReport:
    """Hardest-negative hinge over both directions, ignoring noisy flags.

    This is the comparison baseline, not part of the robust objective.
    """
    S = _prepare(S, labels)
    K = S.shape[0]
    grad = np.zeros_like(S)
    total = 0.0
    for M, q_id, c_id, pos, _, _, transpose in _directions(S, labels):
        rows = np.arange(K)
        neg = q_id[:, None] != c_id[None, :]
        if np.any(neg.sum(axis=1) == 0):
            raise NoNegatives("a query has no candidate with a different identity")
        masked = np.where(neg, M, -np.inf)
        hardest = np.argmax(masked, axis=1)
        arg = cfg.gamma - M[rows, pos] + masked[rows, hardest]
        active = arg > 0
        g = np.zeros_like(M)
        a = np.flatnonzero(active)
        g[a, hardest[a]] += 1.0
        g[a, pos[a]] -= 1.0
        total += float(arg[active].sum())
        grad += g.T if transpose else g
    value = total / K
    return LossReport(value, grad / K, {"L_triplet": value})


ALL_COMPONENTS = ("e", "h", "tal")


def loss_total(
    S,
    labels: BatchLabels,
    sched: DshSchedule,
    cfg: LossConfig = LossConfig(),
    components=ALL_COMPONENTS,
) -> LossReport:
    """Sum of the evidential, DSH and TAL terms (or a subset of them).

    ``components`` may also contain ``"triplet"`` for the baseline objective.
    """
    S = _prepare(S, labels)
    report = LossReport(0.0, np.zeros_like(S), {name: 0.0 for name in TERMS})
    if "e" in components:
        report = report + loss_evidential(S, labels, cfg)
    if "h" in components:
        report = report + loss_dsh(S, labels, sched, cfg)
    if "tal" in components:
        report = report + loss_tal(S, labels, cfg)
    if "triplet" in components:
        report = report + loss_triplet(S, labels, cfg)
    return report
