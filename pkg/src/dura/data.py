"""Synthetic identity-clustered image/text pairs with injected mismatches.

Each identity owns a unit centroid.  An image feature is the centroid plus
view jitter plus modality nuisance; each caption of that image is drawn the
same way from the centroid.  Every item carries a noisy global vector and
``M`` local tokens that are cleaner per-token views of the same feature, so
pooling tokens recovers detail that the global vector blurs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DerangementInfeasible, EmptyScores, InfeasibleMargin
from .io import read_record, write_record
from .numeric import Rng, l2_normalize_rows

DATASET_KIND = b"DS"


@dataclass(frozen=True)
class GenConfig:
    n_identities: int = 200
    images_per_identity: int = 5
    captions_per_image: int = 2
    n_test_identities: int = 100
    feature_dim: int = 32
    token_count: int = 8
    sigma_within: float = 0.5
    sigma_global: float = 0.8
    sigma_token: float = 0.6
    nuisance_dims: int = 8
    sigma_nuisance: float = 0.4
    inter_identity_margin: float = 0.6
    noise_rate: float = 0.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if min(self.n_identities, self.images_per_identity, self.captions_per_image) < 1:
            raise ValueError("identity/image/caption counts must be >= 1")
        if self.feature_dim < 2 or self.token_count < 1:
            raise ValueError("feature_dim must be >= 2 and token_count >= 1")
        if not 0 <= self.nuisance_dims <= self.feature_dim:
            raise ValueError("nuisance_dims must lie in [0, feature_dim]")

    @property
    def n_pairs(self) -> int:
        return self.n_identities * self.images_per_identity * self.captions_per_image


@dataclass
class NoisyPairedDataset:
    img_global: np.ndarray  # N x d
    img_tokens: np.ndarray  # N x M x d
    txt_global: np.ndarray
    txt_tokens: np.ndarray
    identity: np.ndarray  # label of the caption side
    image_label: np.ndarray  # y^v, follows the image
    image_identity: np.ndarray  # true identity of the image now in the pair
    is_mismatched: np.ndarray
    config: GenConfig = field(default_factory=GenConfig)
    split: str = "train"

    def __len__(self):
        return self.identity.shape[0]

    @property
    def rho(self) -> float:
        return float(self.is_mismatched.mean()) if len(self) else 0.0

    @property
    def n_mismatched(self) -> int:
        return int(self.is_mismatched.sum())

    def gallery(self):
        """Indices of the first pair holding each distinct image."""
        _, first = np.unique(self.image_label, return_index=True)
        return np.sort(first)

    def save(self, path):
        meta = {
            "version": 1,
            "config": asdict(self.config),
            "split": self.split,
            "C": self.config.n_identities,
            "d": self.img_global.shape[1],
            "M": self.img_tokens.shape[1],
            "rho": self.rho,
            "seed": self.config.seed,
            "n_pairs": len(self),
            "n_mismatched": self.n_mismatched,
        }
        arrays = {name: getattr(self, name) for name in _ARRAY_FIELDS}
        return write_record(path, DATASET_KIND, meta, arrays)

    @classmethod
    def load(cls, path) -> "NoisyPairedDataset":
        meta, arrays = read_record(path, DATASET_KIND)
        return cls(**arrays, config=GenConfig(**meta["config"]), split=meta["split"])


_ARRAY_FIELDS = (
    "img_global",
    "img_tokens",
    "txt_global",
    "txt_tokens",
    "identity",
    "image_label",
    "image_identity",
    "is_mismatched",
)


def _centroids(cfg: GenConfig, rng: Rng, count: int) -> np.ndarray:
    """Unit centroids with pairwise cosine at most ``1 - margin``."""
    max_cos = 1.0 - cfg.inter_identity_margin
    d = cfg.feature_dim
    out = np.empty((count, d))
    for c in range(count):
        for _ in range(cfg.max_retries):
            v = rng.normal(size=d)
            v /= np.linalg.norm(v)
            if c == 0 or np.max(out[:c] @ v) <= max_cos:
                out[c] = v
                break
        else:
            raise InfeasibleMargin(
                f"could not place centroid {c} of {count} in {d} dims with cosine <= {max_cos:.3f}"
            )
    return out


def _jitter(rng: Rng, cfg: GenConfig, shape, sigma: float) -> np.ndarray:
    # per-coordinate std sigma/sqrt(d) so the jitter norm is about sigma
    return rng.normal(scale=sigma / math.sqrt(cfg.feature_dim), size=shape)


def _nuisance(rng: Rng, cfg: GenConfig, n: int) -> np.ndarray:
    out = np.zeros((n, cfg.feature_dim))
    if cfg.nuisance_dims:
        out[:, -cfg.nuisance_dims :] = rng.normal(scale=cfg.sigma_nuisance, size=(n, cfg.nuisance_dims))
    return out


def _views(base, rng: Rng, cfg: GenConfig):
    n = base.shape[0]
    glob = base + _jitter(rng, cfg, (n, cfg.feature_dim), cfg.sigma_global)
    tokens = base[:, None, :] + _jitter(rng, cfg, (n, cfg.token_count, cfg.feature_dim), cfg.sigma_token)
    return glob, tokens


def generate(cfg: GenConfig, split: str = "train") -> NoisyPairedDataset:
    """Draw a dataset; ``split="test"`` draws clean pairs for unseen identities."""
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = Rng(cfg.seed)
    world = _centroids(cfg, root.split("world"), cfg.n_identities + cfg.n_test_identities)
    if split == "train":
        ids = np.arange(cfg.n_identities)
    else:
        ids = np.arange(cfg.n_identities, cfg.n_identities + cfg.n_test_identities)
    rng = root.split("features", split)

    n_img = ids.size * cfg.images_per_identity
    img_id = np.repeat(ids, cfg.images_per_identity)
    img_base = world[img_id] + _jitter(rng, cfg, (n_img, cfg.feature_dim), cfg.sigma_within) + _nuisance(rng, cfg, n_img)
    img_glob, img_tok = _views(img_base, rng, cfg)

    # each caption describes one image; pair p holds image p // captions_per_image
    pair_img = np.repeat(np.arange(n_img), cfg.captions_per_image)
    n = pair_img.size
    txt_base = world[img_id[pair_img]] + _jitter(rng, cfg, (n, cfg.feature_dim), cfg.sigma_within) + _nuisance(rng, cfg, n)
    txt_glob, txt_tok = _views(txt_base, rng, cfg)

    label_offset = 0 if split == "train" else cfg.n_identities * cfg.images_per_identity
    ds = NoisyPairedDataset(
        img_global=img_glob[pair_img],
        img_tokens=img_tok[pair_img],
        txt_global=txt_glob,
        txt_tokens=txt_tok,
        identity=img_id[pair_img].astype(np.int64),
        image_label=(pair_img + label_offset).astype(np.int64),
        image_identity=img_id[pair_img].astype(np.int64),
        is_mismatched=np.zeros(n, dtype=bool),
        config=cfg if split == "train" else replace(cfg, noise_rate=0.0),
        split=split,
    )
    if split == "train" and cfg.noise_rate > 0:
        ds = inject_noise(ds, cfg.noise_rate, root.split("noise"))
    return ds


def pair_separation(ds: NoisyPairedDataset) -> float:
    """Mean matched-pair cosine minus mean cross-identity cosine of the global vectors."""
    x = l2_normalize_rows(ds.img_global)
    y = l2_normalize_rows(ds.txt_global)
    matched = float(np.mean(np.sum(x * y, axis=1)))
    S = x @ y.T
    other = ds.image_identity[:, None] != ds.identity[None, :]
    return matched - float(S[other].mean())


def _derange(sel_txt_id, sel_img_id, rng: Rng, budget: int):
    n = sel_txt_id.size
    perm = rng.permutation(n)
    for _ in range(budget):
        bad = np.flatnonzero(sel_img_id[perm] == sel_txt_id)
        if bad.size == 0:
            return perm
        for b in bad:
            j = int(rng.integers(n))
            # swap only if both positions end up mismatched
            if sel_img_id[perm[j]] != sel_txt_id[b] and sel_img_id[perm[b]] != sel_txt_id[j]:
                perm[b], perm[j] = perm[j], perm[b]
    return None


def inject_noise(ds: NoisyPairedDataset, rho: float, rng: Rng, attempts: int = 10) -> NoisyPairedDataset:
    """Shuffle the images of ``floor(rho * N)`` random pairs among themselves.

    The shuffle is a derangement with respect to identity, so every selected
    pair ends up truly mismatched.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    N = len(ds)
    n_sel = int(math.floor(rho * N + 1e-9))
    if n_sel == 0:
        return replace(ds, config=replace(ds.config, noise_rate=rho))
    for attempt in range(attempts):
        sel_rng = rng.split("select", attempt)
        sel = np.sort(sel_rng.choice(N, size=n_sel, replace=False))
        perm = _derange(ds.identity[sel], ds.image_identity[sel], sel_rng.split("derange"), budget=200)
        if perm is not None:
            break
    else:
        raise DerangementInfeasible(f"no identity derangement found for {n_sel} selected pairs")

    src = np.arange(N)
    src[sel] = sel[perm]
    image_identity = ds.image_identity[src]
    return replace(
        ds,
        img_global=ds.img_global[src],
        img_tokens=ds.img_tokens[src],
        image_label=ds.image_label[src],
        image_identity=image_identity,
        is_mismatched=image_identity != ds.identity,
        config=replace(ds.config, noise_rate=rho),
    )


# ---------------------------------------------------------------------------
# clean / noisy split


@dataclass
class SplitResult:
    clean_indices: np.ndarray
    noisy_indices: np.ndarray
    scores: np.ndarray
    clean_posterior: np.ndarray
    method: str  # "warmup", "gmm" or "median"
    threshold: float = float("nan")
    means: tuple = ()
    weights: tuple = ()

    @property
    def noisy_mask(self) -> np.ndarray:
        mask = np.zeros(self.scores.size, dtype=bool)
        mask[self.noisy_indices] = True
        return mask


class EvidenceSplitter(BaseEstimator):
    """Two-component 1-D Gaussian mixture over per-pair evidence scores.

    Scores are min-max normalised, sorted (so results do not depend on input
    order), seeded with k-means++ plus Lloyd refinement, then refined by EM.
    The higher-mean component is the clean one.
    """

    def __init__(self, n_iter=50, min_weight=0.05, min_separation=0.05, reg_var=1e-6, random_state=0):
        self.n_iter = n_iter
        self.min_weight = min_weight
        self.min_separation = min_separation
        self.reg_var = reg_var
        self.random_state = random_state

    def _normalize(self, scores):
        lo, hi = self.range_
        if hi - lo <= 0:
            return np.zeros_like(scores)
        return (scores - lo) / (hi - lo)

    def fit(self, scores, y=None):
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if scores.size == 0:
            raise EmptyScores("no scores to split")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        self.range_ = (float(scores.min()), float(scores.max()))
        self.median_ = float(np.median(scores))
        x = np.sort(self._normalize(scores))
        rng = Rng(self.random_state).split("split")

        centers = self._kmeans_pp(x, rng)
        resp = np.zeros((x.size, 2))
        resp[np.arange(x.size), np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)] = 1.0
        means, var, weights = self._m_step(x, resp)
        for _ in range(self.n_iter):
            resp = self._e_step(x, means, var, weights)
            means, var, weights = self._m_step(x, resp)

        hi = int(np.argmax(means))
        order = [1 - hi, hi]
        self.means_ = means[order]
        self.vars_ = var[order]
        self.weights_ = weights[order]
        self.degenerate_ = bool(
            x.size < 2
            or self.weights_.min() < self.min_weight
            or abs(self.means_[1] - self.means_[0]) < self.min_separation
        )
        return self

    def _kmeans_pp(self, x, rng: Rng, lloyd_iter: int = 10):
        c0 = x[int(rng.integers(x.size))]
        d2 = (x - c0) ** 2
        if d2.sum() > 0:
            c1 = x[int(rng.choice(x.size, p=d2 / d2.sum()))]
        else:
            c1 = c0
        centers = np.array([c0, c1])
        for _ in range(lloyd_iter):
            assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
            for k in range(2):
                if np.any(assign == k):
                    centers[k] = x[assign == k].mean()
        return centers

    def _m_step(self, x, resp):
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk + self.reg_var
        return means, var, nk / x.size

    @staticmethod
    def _log_joint(x, means, var, weights):
        return (
            np.log(weights)[None, :]
            - 0.5 * np.log(2 * np.pi * var)[None, :]
            - 0.5 * (x[:, None] - means[None, :]) ** 2 / var[None, :]
        )

    def _e_step(self, x, means, var, weights):
        lj = self._log_joint(x, means, var, weights)
        lj -= lj.max(axis=1, keepdims=True)
        r = np.exp(lj)
        return r / r.sum(axis=1, keepdims=True)

    def predict_proba(self, scores):
        """Posterior probability that each pair is clean."""
        x = self._normalize(np.asarray(scores, dtype=np.float64).reshape(-1))
        return self._e_step(x, self.means_, self.vars_, self.weights_)[:, 1]

    def predict(self, scores):
        """Boolean mask, True for clean pairs."""
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if self.degenerate_:
            return scores >= self.median_
        return self.predict_proba(scores) >= 0.5


def split_clean_noisy(scores, warmup_done: bool = True, seed: int = 0) -> SplitResult:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise EmptyScores("no scores to split")
    if not warmup_done:
        return SplitResult(np.arange(scores.size), np.array([], dtype=np.int64), scores, np.ones(scores.size), "warmup")
    sp = EvidenceSplitter(random_state=seed).fit(scores)
    clean = sp.predict(scores)
    if sp.degenerate_:
        post = clean.astype(np.float64)
        method, thr = "median", sp.median_
    else:
        post = sp.predict_proba(scores)
        method, thr = "gmm", float("nan")
    return SplitResult(
        clean_indices=np.flatnonzero(clean),
        noisy_indices=np.flatnonzero(~clean),
        scores=scores,
        clean_posterior=post,
        method=method,
        threshold=thr,
        means=tuple(float(m) for m in sp.means_),
        weights=tuple(float(w) for w in sp.weights_),
    )
