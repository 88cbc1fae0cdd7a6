"""End-to-end training of linear (optionally KFS-refined) dual encoders."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from sklearn.metrics import roc_auc_score

from .data import NoisyPairedDataset, split_clean_noisy
from .evidence import EvidenceConfig, matched_pair_scores
from .exceptions import ConfigError, Divergence, ZeroVector
from .io import read_record, write_record
from .kfs import KfsParams, kfs_backward_batch, kfs_forward_batch
from .losses import TERMS, BatchLabels, DshSchedule, LossConfig, dsh_negative_count, loss_total
from .metrics import EvalReport, evaluate
from .numeric import Rng, l2_normalize_rows

log = logging.getLogger(__name__)

CHECKPOINT_KIND = b"CK"
HIST_BINS = np.linspace(math.exp(-1), math.e, 21)


@dataclass(frozen=True)
class MethodSpec:
    components: tuple
    use_kfs: bool
    use_split: bool


def _spec(components, kfs):
    return MethodSpec(tuple(components), kfs, "e" in components)


METHODS = {
    "dura": _spec(("e", "h", "tal"), True),
    "triplet": _spec(("triplet",), False),
    "baseline": _spec(("triplet",), False),
    "tal": _spec(("tal",), False),
    "tal+lh": _spec(("h", "tal"), False),
    "tal+le": _spec(("e", "tal"), False),
    "tal+kfs": _spec(("tal",), True),
    "tal+kfs+le": _spec(("e", "tal"), True),
    "tal+kfs+lh": _spec(("h", "tal"), True),
    "tal+kfs+le+lh": _spec(("e", "h", "tal"), True),
}

# component stack of the ablation table, in row order
ABLATION_ROWS = (
    (0, "Baseline", "baseline"),
    (1, "+TAL", "tal"),
    (2, "+TAL+L_h", "tal+lh"),
    (3, "+TAL+L_e", "tal+le"),
    (4, "+TAL+KFS", "tal+kfs"),
    (5, "+TAL+KFS+L_e", "tal+kfs+le"),
    (6, "+TAL+KFS+L_h", "tal+kfs+lh"),
    (7, "+TAL+KFS+L_e+L_h", "tal+kfs+le+lh"),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 3e-3
    warmup_epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    emb_dim: int = 32
    kfs_hidden: int = 32
    kfs_reduction: int = 4
    k_ratio: float = 0.5
    dsh_eta: float = 0.05
    dsh_mu: int = 8
    split_warmup_epochs: int = 5
    method: str = "dura"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4")
        if self.emb_dim < 2:
            raise ConfigError("emb_dim must be >= 2")
        if not 1 <= self.dsh_mu <= self.batch_size:
            raise ConfigError("dsh_mu must lie in [1, batch_size]")

    @property
    def spec(self) -> MethodSpec:
        return METHODS[self.method]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"].pop("tal_weights", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {}) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        lknown = {f.name for f in fields(LossConfig)}
        if set(loss) - lknown:
            raise ConfigError(f"unknown loss keys: {sorted(set(loss) - lknown)}")
        return cls(**d, loss=LossConfig(**loss))


@dataclass
class EncoderParams:
    A: np.ndarray
    B: np.ndarray
    kfs_img: Optional[KfsParams] = None
    kfs_txt: Optional[KfsParams] = None

    def arrays(self) -> dict:
        out = {"A": self.A, "B": self.B}
        for side in ("kfs_img", "kfs_txt"):
            p = getattr(self, side)
            if p is not None:
                out.update({f"{side}.{k}": v for k, v in p.arrays().items()})
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.A.copy(),
            self.B.copy(),
            None if self.kfs_img is None else self.kfs_img.copy(),
            None if self.kfs_txt is None else self.kfs_txt.copy(),
        )

    @classmethod
    def init(cls, d_in: int, cfg: TrainConfig) -> "EncoderParams":
        rng = Rng(cfg.seed).split("init")
        lim = 1.0 / math.sqrt(d_in)
        A = rng.split("A").uniform(-lim, lim, size=(d_in, cfg.emb_dim))
        B = rng.split("B").uniform(-lim, lim, size=(d_in, cfg.emb_dim))
        kfs_img = kfs_txt = None
        if cfg.spec.use_kfs:
            kfs_img = KfsParams.init(d_in, cfg.kfs_hidden, rng.split("kfs_img"), cfg.kfs_reduction, cfg.k_ratio)
            kfs_txt = KfsParams.init(d_in, cfg.kfs_hidden, rng.split("kfs_txt"), cfg.kfs_reduction, cfg.k_ratio)
        return cls(A, B, kfs_img, kfs_txt)

    @classmethod
    def from_arrays(cls, arrays: dict, k_ratio: float = 0.5) -> "EncoderParams":
        sides = {}
        for side in ("kfs_img", "kfs_txt"):
            sub = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(side + ".")}
            sides[side] = KfsParams(**sub, k_ratio=k_ratio) if sub else None
        return cls(arrays["A"], arrays["B"], sides["kfs_img"], sides["kfs_txt"])


@dataclass
class Batch:
    img_global: np.ndarray
    img_tokens: np.ndarray
    txt_global: np.ndarray
    txt_tokens: np.ndarray


@dataclass
class ForwardTape:
    batch: Batch
    r_img: np.ndarray
    r_txt: np.ndarray
    x_norm: np.ndarray
    y_norm: np.ndarray
    x_hat: np.ndarray
    y_hat: np.ndarray
    kfs_img: object = None
    kfs_txt: object = None


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    n_hard: int
    lambda2: float
    loss: float
    terms: dict
    split_method: str
    tp: int
    fp: int
    fn: int
    tn: int
    evidence_auc: float
    eval: Optional[dict]
    hist_clean: list = field(default_factory=list)
    hist_noisy: list = field(default_factory=list)

    def csv_row(self) -> dict:
        row = {
            "epoch": self.epoch,
            "step": self.step,
            "lr": f"{self.lr:.6e}",
            "n_hard": self.n_hard,
            "lambda2": f"{self.lambda2:.4f}",
            "loss": f"{self.loss:.6f}",
        }
        for name in ("L_triplet",) + TERMS:
            row[name] = f"{self.terms.get(name, 0.0):.6f}"
        row.update(split=self.split_method, tp=self.tp, fp=self.fp, fn=self.fn, tn=self.tn)
        row["evidence_auc"] = "" if math.isnan(self.evidence_auc) else f"{self.evidence_auc:.4f}"
        ev = self.eval or {}
        for key in ("rank1", "rank5", "rank10", "mAP", "mINP"):
            row[key] = f"{ev[key]:.4f}" if key in ev else ""
        return row


# ---------------------------------------------------------------------------
# forward / backward


def normalized_inputs(ds: NoisyPairedDataset) -> Batch:
    """Unit-norm global and token features for the whole dataset."""
    return Batch(
        l2_normalize_rows(ds.img_global),
        l2_normalize_rows(ds.img_tokens),
        l2_normalize_rows(ds.txt_global),
        l2_normalize_rows(ds.txt_tokens),
    )


def take(batch: Batch, idx) -> Batch:
    return Batch(batch.img_global[idx], batch.img_tokens[idx], batch.txt_global[idx], batch.txt_tokens[idx])


def _refine(tokens, glob, kfs):
    if kfs is None:
        return glob, None
    return kfs_forward_batch(tokens, glob, kfs)


def encode(params: EncoderParams, batch: Batch):
    """Unit-norm image and text embeddings plus the intermediates."""
    r_img, t_img = _refine(batch.img_tokens, batch.img_global, params.kfs_img)
    r_txt, t_txt = _refine(batch.txt_tokens, batch.txt_global, params.kfs_txt)
    x = r_img @ params.A
    y = r_txt @ params.B
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    yn = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(~(xn >= 1e-30)) or np.any(~(yn >= 1e-30)):
        raise ZeroVector("an embedding collapsed to zero")
    return ForwardTape(batch, r_img, r_txt, xn, yn, x / xn, y / yn, t_img, t_txt)


def forward_batch(params: EncoderParams, batch: Batch):
    tape = encode(params, batch)
    return tape.x_hat @ tape.y_hat.T, tape


def _unnormalize_grad(d_hat, hat, norm):
    # Jacobian of v / |v| is (I - v_hat v_hat^T) / |v|
    return (d_hat - hat * np.sum(hat * d_hat, axis=1, keepdims=True)) / norm


def backward_batch(params: EncoderParams, tape: ForwardTape, grad_S) -> dict:
    """Gradient of ``sum(grad_S * S)`` for every parameter array, keyed like
    :meth:`EncoderParams.arrays`."""
    dx = _unnormalize_grad(grad_S @ tape.y_hat, tape.x_hat, tape.x_norm)
    dy = _unnormalize_grad(grad_S.T @ tape.x_hat, tape.y_hat, tape.y_norm)
    grads = {"A": tape.r_img.T @ dx, "B": tape.r_txt.T @ dy}
    for side, kfs, ktape, d in (
        ("kfs_img", params.kfs_img, tape.kfs_img, dx @ params.A.T),
        ("kfs_txt", params.kfs_txt, tape.kfs_txt, dy @ params.B.T),
    ):
        if kfs is not None:
            g, _, _ = kfs_backward_batch(ktape, d, kfs)
            grads.update({f"{side}.{k}": v for k, v in g.arrays().items()})
    return grads


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at the last step."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    if total <= warm:
        return cfg.base_lr
    t = min(step, total) - warm
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / (total - warm)))


class Adam:
    def __init__(self, arrays: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in arrays.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# evaluation helpers


def embed_dataset(params: EncoderParams, ds: NoisyPairedDataset, chunk: int = 256):
    inputs = normalized_inputs(ds)
    xs, ys = [], []
    for start in range(0, len(ds), chunk):
        tape = encode(params, take(inputs, slice(start, start + chunk)))
        xs.append(tape.x_hat)
        ys.append(tape.y_hat)
    return np.vstack(xs), np.vstack(ys)


def pair_scores(params: EncoderParams, ds: NoisyPairedDataset, tau_e: float) -> np.ndarray:
    """Matched-pair evidence for every training pair."""
    x, y = embed_dataset(params, ds)
    diag = np.clip(np.sum(x * y, axis=1), -1.0, 1.0)
    return matched_pair_scores(diag, EvidenceConfig(tau_e))


def evaluate_params(params: EncoderParams, ds: NoisyPairedDataset) -> EvalReport:
    """Text queries against the de-duplicated image gallery."""
    x, y = embed_dataset(params, ds)
    g = ds.gallery()
    return evaluate(y @ x[g].T, ds.identity, ds.image_identity[g])


def evidence_auc(scores, is_mismatched) -> float:
    """ROC-AUC of the evidence score as a detector of clean pairs."""
    if is_mismatched.all() or not is_mismatched.any():
        return float("nan")
    return float(roc_auc_score(~is_mismatched, scores))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: EncoderParams
    opt: Adam
    epoch: int = 0  # epochs completed
    step: int = 0
    noisy: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    best_rank1: float = -1.0
    logs: list = field(default_factory=list)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, tag: str = "last"):
    arrays = dict(state.params.arrays())
    arrays.update({f"adam.m.{k}": v for k, v in state.opt.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.opt.v.items()})
    arrays["noisy"] = state.noisy.astype(bool)
    arrays["scores"] = state.scores
    meta = {
        "version": 1,
        "tag": tag,
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "adam_t": state.opt.t,
        "best_rank1": state.best_rank1,
        # every random draw is a pure function of (seed, label path, epoch)
        "rng": {"seed": cfg.seed, "next_epoch": state.epoch},
        "logs": [asdict(lg) for lg in state.logs],
    }
    return write_record(path, CHECKPOINT_KIND, meta, arrays)


def load_checkpoint(path):
    """Return ``(TrainConfig, TrainState)``."""
    meta, arrays = read_record(path, CHECKPOINT_KIND)
    cfg = TrainConfig.from_dict(meta["config"])
    pa = {k: v for k, v in arrays.items() if not k.startswith("adam.") and k not in ("noisy", "scores")}
    params = EncoderParams.from_arrays(pa, cfg.k_ratio)
    opt = Adam(params.arrays(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt.t = meta["adam_t"]
    opt.m = {k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    opt.v = {k[len("adam.v.") :]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    state = TrainState(
        params=params,
        opt=opt,
        epoch=meta["epoch"],
        step=meta["step"],
        noisy=arrays["noisy"],
        scores=arrays["scores"],
        best_rank1=meta["best_rank1"],
        logs=[EpochLog(**lg) for lg in meta["logs"]],
    )
    return cfg, state


def _confusion(noisy, truth):
    return (
        int(np.sum(noisy & truth)),
        int(np.sum(noisy & ~truth)),
        int(np.sum(~noisy & truth)),
        int(np.sum(~noisy & ~truth)),
    )


def train(
    cfg: TrainConfig,
    ds: NoisyPairedDataset,
    test_ds: Optional[NoisyPairedDataset] = None,
    checkpoint_dir=None,
    resume: Optional[TrainState] = None,
    stop_after: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochLog, TrainState], None]] = None,
):
    """Train and return ``(EncoderParams, list[EpochLog])``.

    ``stop_after`` ends the run after that many total epochs (for resume
    tests); ``on_epoch`` is called after each epoch's log is appended.
    """
    spec = cfg.spec
    N = len(ds)
    K = cfg.batch_size
    if N < K:
        raise ConfigError(f"dataset of {N} pairs is smaller than batch size {K}")
    steps_per_epoch = N // K
    inputs = normalized_inputs(ds)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    if resume is None:
        params = EncoderParams.init(ds.img_global.shape[1], cfg)
        state = TrainState(params, Adam(params.arrays(), cfg.beta1, cfg.beta2, cfg.adam_eps))
        state.noisy = np.zeros(N, dtype=bool)
        state.scores = pair_scores(params, ds, cfg.loss.tau_e)
    else:
        state = resume
    last_good = None
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    for epoch in range(state.epoch, end):
        lam = cfg.loss.lambda2_at(epoch)
        lcfg = replace(cfg.loss, lambda2=lam)
        if spec.use_split and epoch >= cfg.split_warmup_epochs:
            split = split_clean_noisy(state.scores, warmup_done=True, seed=cfg.seed)
            state.noisy = split.noisy_mask
            split_method = split.method
        else:
            state.noisy = np.zeros(N, dtype=bool)
            split_method = "off" if not spec.use_split else "warmup"

        order = Rng(cfg.seed).split("shuffle", epoch).permutation(N)
        arrays = state.params.arrays()
        sums = {}
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * K : (b + 1) * K]
            state.step += 1
            lr = lr_at(state.step, cfg, steps_per_epoch)
            sched = DshSchedule(K, cfg.dsh_eta, cfg.dsh_mu, state.step)
            labels = BatchLabels.diagonal(ds.identity[idx], state.noisy[idx])
            try:
                S, tape = forward_batch(state.params, take(inputs, idx))
                report = loss_total(S, labels, sched, lcfg, spec.components)
            except ZeroVector as exc:
                raise Divergence(f"embedding collapsed at step {state.step}", last_good) from exc
            if not (np.isfinite(report.value) and np.all(np.isfinite(report.grad_S))):
                raise Divergence(f"non-finite loss at step {state.step}", last_good)
            grads = backward_batch(state.params, tape, report.grad_S)
            state.opt.step(arrays, grads, lr)
            total += report.value
            for k, v in report.per_term.items():
                sums[k] = sums.get(k, 0.0) + v

        state.epoch = epoch + 1
        state.scores = pair_scores(state.params, ds, cfg.loss.tau_e)
        truth = ds.is_mismatched
        tp, fp, fn, tn = _confusion(state.noisy, truth)
        ev = evaluate_params(state.params, test_ds).as_dict() if test_ds is not None else None
        entry = EpochLog(
            epoch=epoch + 1,
            step=state.step,
            lr=lr_at(state.step, cfg, steps_per_epoch),
            n_hard=dsh_negative_count(DshSchedule(K, cfg.dsh_eta, cfg.dsh_mu, state.step), K),
            lambda2=lam,
            loss=total / steps_per_epoch,
            terms={k: v / steps_per_epoch for k, v in sorted(sums.items())},
            split_method=split_method,
            tp=tp,
            fp=fp,
            fn=fn,
            tn=tn,
            evidence_auc=evidence_auc(state.scores, truth),
            eval=ev,
            hist_clean=np.histogram(state.scores[~truth], HIST_BINS)[0].tolist(),
            hist_noisy=np.histogram(state.scores[truth], HIST_BINS)[0].tolist(),
        )
        state.logs.append(entry)
        log.info("epoch %d loss %.4f rank1 %s", entry.epoch, entry.loss, ev and round(ev["rank1"], 2))

        is_best = ev is not None and ev["rank1"] > state.best_rank1
        if is_best:
            state.best_rank1 = ev["rank1"]
        if ckdir is not None:
            last_good = save_checkpoint(ckdir / "last.ckpt", state, cfg, "last")
            if is_best:
                save_checkpoint(ckdir / "best.ckpt", state, cfg, "best")
        if on_epoch is not None:
            on_epoch(entry, state)

    return state.params, state.logs
