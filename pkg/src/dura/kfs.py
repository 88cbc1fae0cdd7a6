"""Key feature selector: MLP -> squeeze-excitation -> + FC(global) -> Max-K pool.

The forward pass works on a batch of items (``B x M x d`` tokens, ``B x d``
globals) and records a :class:`KfsTape` that :func:`kfs_backward` consumes.
Single-item helpers wrap the batched path with ``B = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .exceptions import KOutOfRange, ShapeMismatch, StaleTape
from .numeric import Rng


@dataclass
class TokenSet:
    tokens: np.ndarray  # M x d
    global_: np.ndarray  # d

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        self.global_ = np.asarray(self.global_, dtype=np.float64).reshape(-1)
        if self.tokens.shape[1] != self.global_.size:
            raise ShapeMismatch("token and global dimensions differ")


@dataclass
class KfsParams:
    W1: np.ndarray  # d x h     MLP hidden
    b1: np.ndarray
    W2: np.ndarray  # h x d     MLP out
    b2: np.ndarray
    W3: np.ndarray  # d x d/r   SE squeeze
    b3: np.ndarray
    W4: np.ndarray  # d/r x d   SE excite
    b4: np.ndarray
    W5: np.ndarray  # d x d     FC on the global feature
    b5: np.ndarray
    k_ratio: float = 0.5

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "k_ratio"}

    def copy(self) -> "KfsParams":
        return KfsParams(**{k: v.copy() for k, v in self.arrays().items()}, k_ratio=self.k_ratio)

    def k_for(self, M: int) -> int:
        return min(M, max(1, math.ceil(round(self.k_ratio * M, 9))))

    @classmethod
    def init(cls, dim: int, hidden: int, rng: Rng, reduction: int = 4, k_ratio: float = 0.5) -> "KfsParams":
        """Fan-in scaled uniform init; MLP and FC start close to identity."""
        if reduction < 1:
            raise ValueError("reduction must be >= 1")
        if not 0 < k_ratio <= 1:
            raise ValueError("k_ratio must lie in (0, 1]")
        r = max(1, dim // reduction)

        def u(shape, fan_in, scale=1.0):
            lim = scale / math.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        W1 = u((dim, hidden), dim)
        W1[:, : min(dim, hidden)] += np.eye(dim, min(dim, hidden))
        W2 = u((hidden, dim), hidden)
        W2[: min(dim, hidden), :] += np.eye(min(dim, hidden), dim)
        return cls(
            W1=W1,
            b1=np.zeros(hidden),
            W2=W2,
            b2=np.zeros(dim),
            W3=u((dim, r), dim),
            b3=np.zeros(r),
            W4=u((r, dim), r),
            b4=np.zeros(dim),
            W5=np.eye(dim) + u((dim, dim), dim, 0.1),
            b5=np.zeros(dim),
            k_ratio=k_ratio,
        )


@dataclass
class KfsTape:
    tokens: np.ndarray  # B x M x d
    glob: np.ndarray  # B x d
    h: np.ndarray  # B x M x h
    z: np.ndarray  # B x M x d
    s: np.ndarray  # B x d
    q: np.ndarray  # B x r
    gate: np.ndarray  # B x d
    v: np.ndarray  # B x M x d
    selected: np.ndarray  # B x k x d token indices per channel
    k: int


def mlp(tokens, p: KfsParams):
    h = np.tanh(tokens @ p.W1 + p.b1)
    return h, h @ p.W2 + p.b2


def se_gate(z, p: KfsParams):
    """Channel gates from the token-mean squeeze; returns (s, q, gate)."""
    s = z.mean(axis=-2)
    q = np.tanh(s @ p.W3 + p.b3)
    gate = 1.0 / (1.0 + np.exp(-(q @ p.W4 + p.b4)))
    return s, q, gate


def se_recalibrate(tokens, p: KfsParams) -> np.ndarray:
    """Scale every token channelwise by the squeeze-excitation gate."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != p.W3.shape[0]:
        raise ShapeMismatch(f"token dim {tokens.shape[-1]} != {p.W3.shape[0]}")
    _, _, gate = se_gate(tokens, p)
    return tokens * gate[..., None, :]


def _select(v, k):
    M = v.shape[-2]
    if not 1 <= k <= M:
        raise KOutOfRange(f"k={k} outside [1, {M}]")
    # stable sort on the negated values: ties go to the lowest token index
    return np.argsort(-v, axis=-2, kind="stable")[..., :k, :]


def max_k_pool(tokens, k: int) -> np.ndarray:
    """Per-channel mean of the ``k`` largest values across tokens."""
    tokens = np.asarray(tokens, dtype=np.float64)
    idx = _select(tokens, k)
    return np.take_along_axis(tokens, idx, axis=-2).mean(axis=-2)


def kfs_forward_batch(tokens, glob, p: KfsParams):
    tokens = np.asarray(tokens, dtype=np.float64)
    glob = np.asarray(glob, dtype=np.float64)
    if tokens.ndim != 3 or glob.ndim != 2 or tokens.shape[0] != glob.shape[0]:
        raise ShapeMismatch("expected B x M x d tokens and B x d globals")
    if tokens.shape[2] != p.dim or glob.shape[1] != p.dim:
        raise ShapeMismatch(f"feature dim must be {p.dim}")
    k = p.k_for(tokens.shape[1])
    h, z = mlp(tokens, p)
    s, q, gate = se_gate(z, p)
    v = z * gate[:, None, :] + (glob @ p.W5 + p.b5)[:, None, :]
    sel = _select(v, k)
    out = np.take_along_axis(v, sel, axis=1).mean(axis=1)
    return out, KfsTape(tokens, glob, h, z, s, q, gate, v, sel, k)


def kfs_backward_batch(tape: KfsTape, upstream, p: KfsParams):
    """Gradients of ``sum(upstream * refined)``.

    Returns ``(param_grads: KfsParams, d_tokens, d_global)``.
    """
    g_out = np.asarray(upstream, dtype=np.float64)
    B, M, d = tape.v.shape
    if g_out.shape != (B, d) or p.dim != d or tape.h.shape[2] != p.W1.shape[1]:
        raise StaleTape("tape does not match the upstream gradient or parameters")

    dv = np.zeros_like(tape.v)
    np.put_along_axis(dv, tape.selected, np.repeat(g_out[:, None, :] / tape.k, tape.k, axis=1), axis=1)

    # FC branch, broadcast over tokens
    dfc = dv.sum(axis=1)
    dW5 = tape.glob.T @ dfc
    db5 = dfc.sum(axis=0)
    d_glob = dfc @ p.W5.T

    # SE: v = z * gate
    dz = dv * tape.gate[:, None, :]
    dgate = np.sum(dv * tape.z, axis=1)
    da = dgate * tape.gate * (1.0 - tape.gate)
    dW4 = tape.q.T @ da
    db4 = da.sum(axis=0)
    dpre3 = (da @ p.W4.T) * (1.0 - tape.q**2)
    dW3 = tape.s.T @ dpre3
    db3 = dpre3.sum(axis=0)
    ds = dpre3 @ p.W3.T
    dz += ds[:, None, :] / M

    # MLP
    dW2 = np.einsum("bmh,bmd->hd", tape.h, dz)
    db2 = dz.sum(axis=(0, 1))
    dpre1 = (dz @ p.W2.T) * (1.0 - tape.h**2)
    dW1 = np.einsum("bmd,bmh->dh", tape.tokens, dpre1)
    db1 = dpre1.sum(axis=(0, 1))
    d_tokens = dpre1 @ p.W1.T

    grads = KfsParams(dW1, db1, dW2, db2, dW3, db3, dW4, db4, dW5, db5, k_ratio=p.k_ratio)
    return grads, d_tokens, d_glob


def kfs_forward(inp: TokenSet, p: KfsParams):
    """Refine one item; returns ``(refined vector, tape)``."""
    out, tape = kfs_forward_batch(inp.tokens[None], inp.global_[None], p)
    return out[0], tape


def kfs_backward(tape: KfsTape, upstream, p: KfsParams):
    """Single-item backward; returns ``(param grads, d_tokens M x d, d_global d)``."""
    grads, dt, dg = kfs_backward_batch(tape, np.asarray(upstream, dtype=np.float64)[None], p)
    return grads, dt[0], dg[0]
