"""``clat`` command line: pretrain, finetune, criticality, attack-eval, report.

Every command writes into ``<output.dir>/<command>/``: the resolved config,
``run.log`` and its own artifacts.  Failures exit nonzero with an
``error[category]: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_config
from .criticality import criticality_indices, select_topk, stability_probe
from .data import check_architecture
from .errors import ClatError, ParseError, UsageError
from .trainer import CSV_HEADER, TrainState, evaluate, load_run, run_clat, save_run

log = logging.getLogger("clat")


# ---------------------------------------------------------------------------
# plumbing


def _run_dir(cfg: RunConfig, command: str, override: str | None) -> Path:
    path = Path(override) if override else Path(cfg.output.dir) / command
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")
    return path


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("clat")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _detach_log(handler: logging.Handler) -> None:
    logging.getLogger("clat").removeHandler(handler)
    handler.close()


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("", "<defaults>")
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    return cfg


class _MetricsWriter:
    def __init__(self, path: Path):
        self.file = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.file, lineterminator="\n")
        self.writer.writerow(CSV_HEADER)

    def __call__(self, net, m, state):
        self.writer.writerow(m.to_row())
        self.file.flush()

    def close(self):
        self.file.close()


def _train(cfg: RunConfig, run_dir: Path, net, state: TrainState, stop_at: int) -> tuple:
    train, test = cfg.data.load(cfg.model.num_classes, cfg.model.input_shape[0])
    writer = _MetricsWriter(run_dir / cfg.output.metrics)
    try:
        net, metrics, state = run_clat(net, train, cfg.train, state=state,
                                       eval_data=test if cfg.output.evaluate else None,
                                       stop_at=stop_at, on_epoch=writer)
    finally:
        writer.close()
    ckpt = save_run(run_dir / cfg.output.checkpoint, net, state, cfg.train)
    log.info("wrote %s and %s", ckpt, run_dir / cfg.output.metrics)
    return net, metrics, state


def _load_checkpoint(cfg: RunConfig, path) -> tuple:
    net, state = load_run(path, cfg.train.momentum)
    check_architecture(net, cfg.model.build(seed=0).architecture())
    return net, state


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir(cfg, "pretrain", args.out)
    handler = _attach_log(run_dir)
    try:
        log.info("pretrain: %d epochs (%s), seed %d", cfg.train.pretrain_epochs, cfg.train.pretrain_mode,
                 cfg.train.seed)
        net = cfg.model.build(seed=cfg.train.seed)
        state = TrainState.fresh(cfg.train.seed, cfg.train.momentum)
        _, metrics, _ = _train(cfg, run_dir, net, state, stop_at=cfg.train.pretrain_epochs)
        _print_last(metrics)
    finally:
        _detach_log(handler)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load(args)
    changes = {}
    if args.k is not None:
        changes["k"] = args.k
    if args.fixed_layers:
        changes["fixed_layers"] = True
    cfg = cfg.with_train(**changes)
    run_dir = _run_dir(cfg, "finetune", args.out)
    handler = _attach_log(run_dir)
    try:
        net, state = _load_checkpoint(cfg, args.checkpoint)
        if state.epoch < cfg.train.pretrain_epochs:
            log.info("checkpoint at epoch %d; fine-tuning starts after epoch %d of the schedule",
                     state.epoch, cfg.train.pretrain_epochs)
            state.epoch = cfg.train.pretrain_epochs
        log.info("finetune: epochs %d..%d, k=%d, fixed_layers=%s", state.epoch + 1, cfg.train.epochs,
                 cfg.train.resolve_k(net.depth), cfg.train.fixed_layers)
        _, metrics, _ = _train(cfg, run_dir, net, state, stop_at=cfg.train.epochs)
        _print_last(metrics)
    finally:
        _detach_log(handler)
    return 0


def _print_last(metrics) -> None:
    if metrics:
        m = metrics[-1]
        print(f"epoch {m.epoch} {m.phase}: clean {m.clean_acc:.4f} adv {m.adv_acc:.4f} "
              f"trainable {m.trainable_frac:.4f}")
    else:
        print("no epochs run")


def cmd_criticality(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir(cfg, "criticality", args.out)
    handler = _attach_log(run_dir)
    try:
        net, _ = _load_checkpoint(cfg, args.checkpoint)
        train, _ = cfg.data.load(cfg.model.num_classes, cfg.model.input_shape[0])
        k = args.k if args.k is not None else cfg.train.resolve_k(net.depth)
        rng = np.random.default_rng([cfg.train.seed, 0xC1])
        size = min(args.batch_size or cfg.train.crit_batch_size, len(train))
        idx = np.sort(rng.choice(len(train), size=size, replace=False))
        report = criticality_indices(net, train.images[idx], train.labels[idx], cfg.attack, rng=rng,
                                     seed=cfg.train.seed)
        report = replace(report, selected=select_topk(report, k))
        lines = [f"{'layer':>5} {'weakness':>14} {'criticality':>14}"]
        lines += [f"{i:>5} {w:>14.6e} {c:>14.6e}" for i, w, c in report.ranked()]
        lines.append(f"selected (k={k}): {','.join(map(str, report.selected))}")
        lines.append(f"reconstruction error: {report.reconstruction_error():.3e}")
        if args.stability:
            sizes = [int(v) for v in args.batch_sizes.split(",")]
            result = stability_probe(net, train.images, train.labels, sizes, args.trials, k, cfg.attack,
                                     seed=cfg.train.seed)
            lines.append(result.summary())
        text = "\n".join(lines) + "\n"
        (run_dir / "criticality.txt").write_text(text + "\n" + report.to_record(), encoding="utf-8")
        print(text, end="")
    finally:
        _detach_log(handler)
    return 0


def cmd_attack_eval(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir(cfg, "attack-eval", args.out)
    handler = _attach_log(run_dir)
    try:
        net, _ = _load_checkpoint(cfg, args.checkpoint)
        _, test = cfg.data.load(cfg.model.num_classes, cfg.model.input_shape[0])
        attacks = [a.strip() for a in args.attacks.split(",") if a.strip()]
        eps_list = [float(e) for e in args.eps.split(",")] if args.eps else [cfg.attack.epsilon]
        clean, _ = evaluate(net, test)
        rows = []
        for name in attacks:
            if name not in ("pgd", "fgsm"):
                raise UsageError(f"unknown attack {name!r}; expected pgd or fgsm")
            for eps in eps_list:
                # keep the configured step-to-budget ratio across the sweep
                ratio = cfg.attack.alpha / cfg.attack.epsilon if cfg.attack.epsilon else 0.25
                attack = replace(cfg.attack, epsilon=eps, alpha=max(ratio * eps, 1e-12))
                _, adv = evaluate(net, test, attack, seed=[cfg.train.seed, 0xE7A1], restarts=args.restarts,
                                  method=name)
                rows.append((name, eps, args.restarts, clean, adv))
                log.info("%s eps=%g restarts=%d clean=%.4f adv=%.4f", name, eps, args.restarts, clean, adv)
        with open(run_dir / "attack_eval.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("attack", "epsilon", "restarts", "clean_acc", "adv_acc"))
            w.writerows([(a, repr(e), r, repr(c), repr(v)) for a, e, r, c, v in rows])
        print(f"{'attack':<6} {'epsilon':>8} {'restarts':>8} {'clean':>8} {'adv':>8}")
        for a, e, r, c, v in rows:
            print(f"{a:<6} {e:>8.4f} {r:>8d} {c:>8.4f} {v:>8.4f}")
    finally:
        _detach_log(handler)
    return 0


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV; malformed rows raise ParseError with the row number."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", source=str(path)) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}", 1, str(path))
        rows = []
        for n, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", n, str(path))
            try:
                rows.append({"epoch": int(row[0]), "phase": row[1], "clean_acc": float(row[2]),
                             "adv_acc": float(row[3]), "ce_loss": float(row[4]), "crit_loss": float(row[5]),
                             "critical_set": row[6], "trainable_frac": float(row[7])})
            except ValueError as exc:
                raise ParseError(str(exc), n, str(path)) from None
    return rows


def summarize(runs: dict) -> str:
    """Plot-ready aligned series, final/best per run and deltas against the first run."""
    names = list(runs)
    epochs = sorted({r["epoch"] for rows in runs.values() for r in rows})
    by_epoch = {name: {r["epoch"]: r for r in rows} for name, rows in runs.items()}
    out = ["# series", "epoch," + ",".join(f"{n}:clean_acc,{n}:adv_acc" for n in names)]
    for e in epochs:
        cells = []
        for n in names:
            r = by_epoch[n].get(e)
            cells += [repr(r["clean_acc"]), repr(r["adv_acc"])] if r else ["", ""]
        out.append(f"{e}," + ",".join(cells))
    out += ["", "# summary", "run,final_epoch,final_clean,final_adv,best_adv,best_adv_epoch"]
    finals = {}
    for n in names:
        rows = runs[n]
        if not rows:
            out.append(f"{n},,,,,")
            continue
        final = rows[-1]
        best = max(rows, key=lambda r: (r["adv_acc"], -r["epoch"]))
        finals[n] = final
        out.append(f"{n},{final['epoch']},{final['clean_acc']!r},{final['adv_acc']!r},"
                   f"{best['adv_acc']!r},{best['epoch']}")
    out += ["", "# delta vs " + names[0], "run,d_final_clean,d_final_adv"]
    ref = finals.get(names[0])
    for n in names[1:]:
        if ref is None or n not in finals:
            out.append(f"{n},,")
            continue
        out.append(f"{n},{finals[n]['clean_acc'] - ref['clean_acc']!r},{finals[n]['adv_acc'] - ref['adv_acc']!r}")
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    runs = {}
    for path in args.metrics:
        name = Path(path).parent.name or Path(path).stem
        while name in runs:
            name += "'"
        runs[name] = read_metrics(path)
    text = summarize(runs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override [train] seed")
        sp.add_argument("--out", help="output directory (default <output.dir>/<command>)")

    sp = sub.add_parser("pretrain", help="adversarial (or clean) pretraining")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune the critical layers of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int, help="number of critical layers")
    sp.add_argument("--fixed-layers", action="store_true", help="select once and never reselect")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("criticality", help="per-layer weakness and criticality of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--stability", action="store_true", help="also run the batch-size stability probe")
    sp.add_argument("--batch-sizes", default="10,30,50,100")
    sp.add_argument("--trials", type=int, default=50)
    sp.set_defaults(func=cmd_criticality)

    sp = sub.add_parser("attack-eval", help="clean and adversarial accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--attacks", default="pgd")
    sp.add_argument("--eps", help="comma-separated budgets (default: [attack] epsilon)")
    sp.add_argument("--restarts", type=int, default=1)
    sp.set_defaults(func=cmd_attack_eval)

    sp = sub.add_parser("report", help="compare metrics CSV files")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--out", help="also write the report here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ClatError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
