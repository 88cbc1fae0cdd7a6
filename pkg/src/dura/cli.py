"""Experiment command line: generate, train, eval, sweep, print-config.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import GenConfig, NoisyPairedDataset, generate
from .exceptions import ConfigError, Divergence, DuraError, FormatError
from .losses import LossConfig
from .metrics import CSV_FIELDS
from .trainer import (
    ABLATION_ROWS,
    HIST_BINS,
    METHODS,
    TrainConfig,
    evaluate_params,
    load_checkpoint,
    train,
)

log = logging.getLogger("dura")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SUMMARY_FIELDS = (
    "run_id", "config_hash", "noise_rate", "method", "label", "seed", "row",
    "epoch", "r1", "r5", "r10", "mAP", "mINP", "status",
)


@dataclass(frozen=True)
class SweepConfig:
    noise: tuple = (0.0, 0.2, 0.5)
    methods: tuple = ("dura", "triplet")
    seeds: tuple = (0,)


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "dura"
    out: str = "runs"
    data: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        sw = asdict(self.sweep)
        return {
            "run_id": self.run_id,
            "out": self.out,
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "sweep": {k: list(v) for k, v in sw.items()},
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output path does not)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# config parsing with line diagnostics


def _key_lines(text: str) -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = prefix + (str(k.value),)
                out[".".join(path)] = k.start_mark.line + 1
                walk(v, path)

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return out


def _where(lines: dict, path: str, source: str) -> str:
    while path:
        if path in lines:
            return f"{source}:{lines[path]}"
        path = path.rpartition(".")[0]
    return source


def _build(cls, d, path, lines, source):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{_where(lines, path, source)}: section '{path}' must be a mapping")
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            key = f"{path}.{k}" if path else k
            raise ConfigError(f"{_where(lines, key, source)}: unknown key '{key}'")
    return d


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
        lines = _key_lines(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: {exc.problem}") from exc
    raw = _build(RunConfig, raw, "", lines, source)
    try:
        data = GenConfig(**_build(GenConfig, raw.get("data"), "data", lines, source))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, 'data', source)}: {exc}") from exc
    tr = dict(_build(TrainConfig, raw.get("train"), "train", lines, source))
    try:
        _build(LossConfig, tr.get("loss"), "train.loss", lines, source)
        train_cfg = TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, 'train', source)}: {exc}") from exc
    sw = _build(SweepConfig, raw.get("sweep"), "sweep", lines, source)
    try:
        sweep = SweepConfig(**{k: tuple(v) for k, v in sw.items()})
    except TypeError as exc:
        raise ConfigError(f"{_where(lines, 'sweep', source)}: {exc}") from exc
    for m in sweep.methods:
        if m not in METHODS and m != "ablation":
            raise ConfigError(f"{_where(lines, 'sweep.methods', source)}: unknown method '{m}'")
    return RunConfig(
        run_id=str(raw.get("run_id", RunConfig.run_id)),
        out=str(raw.get("out", RunConfig.out)),
        data=data,
        train=train_cfg,
        sweep=sweep,
    )


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad noise list {text!r}") from exc


def _method_list(text: str) -> tuple:
    methods = tuple(t.strip() for t in text.split(",") if t.strip())
    for m in methods:
        if m not in METHODS and m != "ablation":
            raise ConfigError(f"unknown method {m!r}; choose from {sorted(METHODS) + ['ablation']}")
    return methods


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(
            cfg,
            data=replace(cfg.data, seed=args.seed),
            train=replace(cfg.train, seed=args.seed),
            sweep=replace(cfg.sweep, seeds=(args.seed,)),
        )
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "noise", None) is not None:
        noise = _float_list(args.noise)
        cfg = replace(cfg, sweep=replace(cfg.sweep, noise=noise))
        if len(noise) == 1:
            try:
                cfg = replace(cfg, data=replace(cfg.data, noise_rate=noise[0]))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    if getattr(args, "methods", None) is not None:
        methods = _method_list(args.methods)
        cfg = replace(cfg, sweep=replace(cfg.sweep, methods=methods))
        if len(methods) == 1 and methods[0] in METHODS:
            cfg = replace(cfg, train=replace(cfg.train, method=methods[0]))
    return cfg


# ---------------------------------------------------------------------------
# file helpers


def _write_csv(path: Path, fieldnames, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stamp(cfg: RunConfig) -> dict:
    return {"run_id": cfg.run_id, "config_hash": cfg.config_hash()}


def _save_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())


def generate_pair(cfg: RunConfig):
    return generate(cfg.data, "train"), generate(cfg.data, "test")


def load_data(path):
    """Load ``(train, test)`` from a dataset directory or a single file."""
    p = Path(path)
    if p.is_dir():
        tr, te = p / "train.ds", p / "test.ds"
        if not tr.is_file():
            raise FileNotFoundError(f"no train.ds in {p}")
        return NoisyPairedDataset.load(tr), NoisyPairedDataset.load(te) if te.is_file() else None
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    ds = NoisyPairedDataset.load(p)
    return ds, ds


def epoch_rows(logs, stamp: dict, noise_rate: float):
    rows = []
    for lg in logs:
        row = dict(stamp)
        row["noise_rate"] = f"{noise_rate:g}"
        row.update(lg.csv_row())
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_print_config(cfg: RunConfig, args) -> int:
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    _save_config(cfg, out)
    train_ds, test_ds = generate_pair(cfg)
    train_ds.save(out / "train.ds")
    test_ds.save(out / "test.ds")
    manifest = dict(_stamp(cfg))
    manifest.update(
        seed=cfg.data.seed,
        requested_rho=cfg.data.noise_rate,
        realized_rho=train_ds.rho,
        n_pairs=len(train_ds),
        n_flagged=train_ds.n_mismatched,
        n_test_pairs=len(test_ds),
        files={"train.ds": _sha256(out / "train.ds"), "test.ds": _sha256(out / "test.ds")},
    )
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {out / 'train.ds'} ({len(train_ds)} pairs, {train_ds.n_mismatched} flagged)")
    return EXIT_OK


def _train_run(cfg: RunConfig, train_ds, test_ds, out: Path):
    """Train one configuration into ``out``; returns the epoch logs."""
    _save_config(cfg, out)
    stamp = _stamp(cfg)

    written = []

    def on_epoch(entry, state):
        written.append(entry)

    try:
        _, logs = train(cfg.train, train_ds, test_ds, checkpoint_dir=out, on_epoch=on_epoch)
    finally:
        if written:
            rows = epoch_rows(written, stamp, train_ds.rho)
            _write_csv(out / "epochs.csv", rows[0].keys(), rows)
    return logs


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    if args.data is not None:
        train_ds, test_ds = load_data(args.data)
    else:
        train_ds, test_ds = generate_pair(cfg)
    logs = _train_run(cfg, train_ds, test_ds, out)
    last = logs[-1].eval or {}
    print(f"trained {len(logs)} epochs; last Rank-1 {last.get('rank1', float('nan')):.2f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ck_cfg, state = load_checkpoint(args.checkpoint)
    if args.data is not None:
        _, ds = load_data(args.data)
        if ds is None:
            raise FileNotFoundError(f"no test.ds in {args.data}")
    else:
        ds = generate(cfg.data, "test")
    report = evaluate_params(state.params, ds)
    run = replace(cfg, train=ck_cfg)
    row = dict(_stamp(run))
    row.update(report.csv_row(run.run_id, ds.rho, state.epoch))
    out = Path(cfg.out)
    _write_csv(out / "eval.csv", ("config_hash",) + CSV_FIELDS, [row])
    print(report.to_csv(run.run_id, ds.rho, state.epoch), end="")
    return EXIT_OK


def _expand_methods(methods):
    """``(method, label)`` pairs, the ablation preset expanding to its rows."""
    out = []
    for m in methods:
        if m == "ablation":
            out.extend((key, f"No.{no} {label}") for no, label, key in ABLATION_ROWS)
        else:
            out.append((m, m))
    return out


def _cell_id(noise, method, seed):
    return f"rho{noise:g}_{method}_s{seed}"


def _summary_rows(stamp, noise, method, label, seed, logs, status):
    rows = []
    evals = [(lg.epoch, lg.eval) for lg in logs if lg.eval is not None]
    base = dict(stamp, noise_rate=f"{noise:g}", method=method, label=label, seed=seed, status=status)
    if not evals:
        for name in ("Best", "Last"):
            rows.append(dict(base, row=name, epoch="", r1="", r5="", r10="", mAP="", mINP=""))
        return rows
    best = max(evals, key=lambda t: (t[1]["rank1"], -t[0]))
    for name, (ep, ev) in (("Best", best), ("Last", evals[-1])):
        rows.append(
            dict(
                base,
                row=name,
                epoch=ep,
                r1=f"{ev['rank1']:.4f}",
                r5=f"{ev['rank5']:.4f}",
                r10=f"{ev['rank10']:.4f}",
                mAP=f"{ev['mAP']:.4f}",
                mINP=f"{ev['mINP']:.4f}",
            )
        )
    return rows


def _hist_stages(cfg: TrainConfig, n_epochs: int):
    stages = [("start", 1), ("split_on", min(cfg.split_warmup_epochs + 1, n_epochs)), ("final", n_epochs)]
    return [(name, ep) for name, ep in stages if 1 <= ep <= n_epochs]


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    _save_config(cfg, out)
    stamp = _stamp(cfg)
    summary, curves, hists = [], [], []
    for noise in cfg.sweep.noise:
        for seed in cfg.sweep.seeds:
            data_cfg = replace(cfg.data, noise_rate=noise, seed=seed)
            train_ds, test_ds = generate(data_cfg, "train"), generate(data_cfg, "test")
            for method, label in _expand_methods(cfg.sweep.methods):
                cell = replace(
                    cfg,
                    run_id=f"{cfg.run_id}/{_cell_id(noise, method, seed)}",
                    data=data_cfg,
                    train=replace(cfg.train, method=method, seed=seed),
                )
                cell_out = out / "cells" / _cell_id(noise, method, seed)
                status, logs = "ok", []
                try:
                    logs = _train_run(replace(cell, out=str(cell_out)), train_ds, test_ds, cell_out)
                except Divergence as exc:
                    status = f"diverged: {exc}"
                    log.warning("cell %s diverged: %s", cell.run_id, exc)
                except DuraError as exc:
                    status = f"failed: {exc}"
                    log.warning("cell %s failed: %s", cell.run_id, exc)
                summary.extend(_summary_rows(stamp, noise, method, label, seed, logs, status))
                for lg in logs:
                    if lg.eval is not None:
                        curves.append(
                            dict(stamp, noise_rate=f"{noise:g}", method=method, label=label, seed=seed,
                                 epoch=lg.epoch, rank1=f"{lg.eval['rank1']:.4f}")
                        )
                for stage, ep in _hist_stages(cell.train, len(logs)):
                    lg = logs[ep - 1]
                    for b in range(len(HIST_BINS) - 1):
                        hists.append(
                            dict(stamp, noise_rate=f"{noise:g}", method=method, seed=seed, stage=stage, epoch=ep,
                                 bin_lo=f"{HIST_BINS[b]:.6f}", bin_hi=f"{HIST_BINS[b + 1]:.6f}",
                                 clean=lg.hist_clean[b], noisy=lg.hist_noisy[b])
                        )
                print(f"cell {cell.run_id}: {status}", flush=True)
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    curve_fields = ("run_id", "config_hash", "noise_rate", "method", "label", "seed", "epoch", "rank1")
    _write_csv(out / "rank1_vs_epoch.csv", curve_fields, curves)
    hist_fields = ("run_id", "config_hash", "noise_rate", "method", "seed", "stage", "epoch",
                   "bin_lo", "bin_hi", "clean", "noisy")
    _write_csv(out / "evidence_hist.csv", hist_fields, hists)
    if not args.no_plots:
        _plot(out, curves, hists, stamp)
    failed = sum(1 for r in summary if r["status"] != "ok") // 2
    print(f"sweep done: {len(summary) // 2} cells, {failed} failed; summary in {out / 'summary.csv'}")
    return EXIT_OK


def _plot(out: Path, curves, hists, stamp):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plot-data CSVs are already written
        return
    meta = {"Software": None}
    title = f"{stamp['run_id']} [{stamp['config_hash']}]"
    for noise in sorted({r["noise_rate"] for r in curves}):
        fig, ax = plt.subplots(figsize=(6, 4))
        series = {}
        for r in curves:
            if r["noise_rate"] == noise:
                series.setdefault((r["label"], r["seed"]), []).append((r["epoch"], float(r["rank1"])))
        for (label, seed), pts in series.items():
            ep, r1 = zip(*pts)
            ax.plot(ep, r1, label=f"{label} s{seed}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("Rank-1 (%)")
        ax.set_title(f"noise {noise} {title}", fontsize=8)
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(out / f"rank1_vs_epoch_rho{noise}.png", metadata=meta)
        plt.close(fig)
    groups = {}
    for r in hists:
        groups.setdefault((r["noise_rate"], r["method"], r["seed"]), []).append(r)
    centers = (HIST_BINS[:-1] + HIST_BINS[1:]) / 2
    width = HIST_BINS[1] - HIST_BINS[0]
    for (noise, method, seed), rows in groups.items():
        stages = list(dict.fromkeys(r["stage"] for r in rows))
        fig, axes = plt.subplots(1, len(stages), figsize=(3 * len(stages), 3), squeeze=False)
        for ax, stage in zip(axes[0], stages):
            sel = [r for r in rows if r["stage"] == stage]
            ax.bar(centers, [r["clean"] for r in sel], width, alpha=0.6, label="clean")
            ax.bar(centers, [r["noisy"] for r in sel], width, alpha=0.6, label="noisy")
            ax.set_title(f"{stage} (epoch {sel[0]['epoch']})", fontsize=8)
            ax.set_xlabel("pair evidence")
        axes[0][0].legend(fontsize=6)
        fig.suptitle(f"{method} noise {noise} s{seed} {title}", fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"evidence_hist_rho{noise}_{method}_s{seed}.png", metadata=meta)
        plt.close(fig)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "print-config": cmd_print_config,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dura", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config; defaults are used for missing keys")
        p.add_argument("--seed", type=int, help="override data, train and sweep seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--noise", help="comma separated noise rates")
        p.add_argument("--methods", help="comma separated methods, or 'ablation'")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit reproducibility)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval"):
            p.add_argument("--data", help="dataset directory (train.ds/test.ds) or file")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name == "sweep":
            p.add_argument("--no-plots", action="store_true", help="write plot-data CSVs only")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Divergence as exc:
        where = exc.checkpoint if exc.checkpoint is not None else "none"
        print(f"training diverged: {exc}; last good checkpoint: {where}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, FileNotFoundError, DuraError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
