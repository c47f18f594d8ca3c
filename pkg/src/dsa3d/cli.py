"""``dsa3d`` command line.

Every subcommand reads one config file (the packaged default when omitted)
plus ``--seed``/``--out``/``--task``/``--threads`` overrides, and writes into
``<out>/<config hash>/``. Stages reuse artifacts already present in that
directory and otherwise compute them, so ``dsa3d crossval`` on a fresh
directory runs the whole pipeline.

Exit status is 0 on success, 1 for usage or config errors and 2 for runtime
failures; failures print one ``key=value`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .cae import load_stack, save_stack
from .config import ConfigError, default_config_text, format_config, parse_config, parse_config_text
from .evaluation import (METRIC_NAMES, classification_report, roc_curve, trapezoid_auc,
                         write_embedding_csv, write_metrics_csv, write_roc_csv)
from .network import load_network, save_network
from .phantom import write_set
from .plotting import emit_svg
from .tsne import tsne_embed
from .volume import TASKS, get_task, load_manifest, load_volume, write_manifest

log = logging.getLogger("dsa3d")

COMMANDS = ("gen-phantom", "pretrain", "transfer", "finetune", "crossval", "embed", "roc", "eval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsa3d", description="Autoencoder-pretrained, deeply supervised 3D CNN "
                                          "toolkit on synthetic phantoms.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("config", nargs="?", help="run config file (default: packaged default.cfg)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] output_dir")
    common.add_argument("--task", help="override [run] task")
    common.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    helps = {
        "gen-phantom": "write source and target phantom volumes with manifests",
        "pretrain": "train the autoencoder stack on the source phantoms",
        "transfer": "initialise a network for the task from the stack",
        "finetune": "fine-tune the transferred network on all target samples of the task",
        "crossval": "stratified cross-validation of the pipeline on the task",
        "embed": "t-SNE of the fine-tuned network's last hidden layer",
        "roc": "ROC curve from out-of-fold scores",
        "eval": "cross-validate every task; ROC plots for the binary ones",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return p


# -- run context --------------------------------------------------------------------

class Run:
    """Resolved config plus lazily produced, disk-backed pipeline stages.

    Stages always go through their on-disk form (float32 tensors) so a run in
    one process and a run resumed from files compute identical numbers.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = cfg.run_dir()
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.cfg").write_text(format_config(cfg))
        self._data = None
        self._stack = None
        self._cache = None

    def task_dir(self, task) -> Path:
        d = self.dir / task.name
        d.mkdir(exist_ok=True)
        return d

    def data(self):
        """``(source, target)`` sample lists read back from the run's VOL3 files."""
        if self._data is None:
            src_m, tgt_m = self.dir / "source.csv", self.dir / "target.csv"
            if not (src_m.exists() and tgt_m.exists()):
                source, target = P.make_datasets(self.cfg)
                write_manifest(write_set(source, self.dir / "source", "source"), src_m)
                write_manifest(write_set(target, self.dir / "target", "target"), tgt_m)
                log.info("wrote %d source and %d target phantoms", len(source), len(target))
            self._data = tuple(
                [(load_volume(e.path), e.label, e.subject_id) for e in load_manifest(m, prov)]
                for m, prov in ((src_m, "source"), (tgt_m, "target")))
        return self._data

    def stack(self):
        if self._stack is None:
            path = self.dir / "stack.caes"
            if not path.exists():
                source, _ = self.data()
                stack, shapes, logs = P.pretrain(self.cfg, [v for v, _, _ in source])
                save_stack(stack, path)
                with open(self.dir / "pretrain.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("layer", "epoch", "reconstruction_error", "output_shape"))
                    for li, (errs, shape) in enumerate(zip(logs, shapes)):
                        for ep, e in enumerate(errs):
                            w.writerow((li, ep, repr(float(e)), "x".join(map(str, shape))))
                log.info("pretrained stack, representation shapes %s", shapes)
            self._stack = load_stack(path)
        return self._stack

    def cache(self):
        if self._cache is None:
            _, target = self.data()
            self._cache = P.FeatureCache([np.asarray(v, dtype=np.float64) for v, _, _ in target])
        return self._cache

    def task_samples(self, task):
        _, target = self.data()
        idx, y = P.task_subset(task, [lab for _, lab, _ in target])
        return idx, y

    def initial_network(self, task):
        path = self.task_dir(task) / "init.dsa1"
        if not path.exists():
            save_network(P.transfer(self.cfg, self.stack(), task.n_classes), path)
        return load_network(path)

    def trained_network(self, task):
        d = self.task_dir(task)
        path = d / "network.dsa1"
        if not path.exists():
            net = self.initial_network(task)
            idx, y = self.task_samples(task)
            if self.cfg.network.freeze_conv:
                feats = self.cache().features(net)[idx]
                hist = P.fit(self.cfg, net, None, y, features=feats)
            else:
                _, target = self.data()
                hist = P.fit(self.cfg, net, [np.asarray(target[i][0], dtype=np.float64)
                                                 for i in idx], y)
            save_network(net, path)
            with open(d / "finetune.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("epoch", "loss", "accuracy"))
                for ep, rec in enumerate(hist):
                    w.writerow((ep, repr(rec.loss), repr(rec.accuracy)))
        return load_network(path)

    def crossval(self, task):
        """Run cross-validation and write ``metrics.csv`` and ``oof.csv``."""
        d = self.task_dir(task)
        source, target = self.data()
        result = P.crossval_task(self.cfg, task, self.stack(), target, self.cache(), source)
        write_metrics_csv(result, d / "metrics.csv")
        idx, _ = self.task_samples(task)
        with open(d / "oof.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "truth", "fold"] + [f"p_{n}" for n in task.class_names])
            fold_of = np.empty(len(idx), dtype=np.int64)
            for f, members in enumerate(result.plan.folds):
                fold_of[members] = f
            for j, i in enumerate(idx):
                w.writerow([target[i][2], int(result.truths[j]), int(fold_of[j])]
                           + [repr(float(p)) for p in result.probs[j]])
        return result

    def oof(self, task):
        """Out-of-fold ``(truths, probs)``, computing them when absent."""
        path = self.task_dir(task) / "oof.csv"
        if not path.exists():
            self.crossval(task)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        truths = np.array([int(r[1]) for r in rows])
        probs = np.array([[float(x) for x in r[3:]] for r in rows])
        return truths, probs

    def roc(self, task):
        """Write ``roc.csv`` and ``roc.svg``; returns the AUC of each plotted series."""
        d = self.task_dir(task)
        truths, probs = self.oof(task)
        classes = [0] if task.is_binary else list(range(task.n_classes))
        series, aucs = [], {}
        for c in classes:
            pts = roc_curve(probs[:, c], truths == c)
            auc = trapezoid_auc(pts)
            name = task.class_names[c]
            aucs[name] = auc
            series.append((f"{name} (AUC {auc:.3f})", [(x, y) for x, y, _ in pts]))
            suffix = "" if task.is_binary else f"_{name}"
            write_roc_csv(pts, d / f"roc{suffix}.csv")
        emit_svg(series, "roc", d / "roc.svg", title=f"ROC, task {task.name}")
        return aucs

    def embed(self, task):
        d = self.task_dir(task)
        net = self.trained_network(task)
        idx, y = self.task_samples(task)
        feats = self.cache().features(net)[idx]
        hidden = net.head_forward(feats).features
        em = self.cfg.embed
        res = tsne_embed(hidden, em.perplexity, em.iterations,
                         seed=P.derive_seed(self.cfg.seed, P._EMBED),
                         learning_rate=em.learning_rate, exaggeration=em.exaggeration,
                         exaggeration_iters=em.exaggeration_iters)
        names = [task.class_names[c] for c in y]
        write_embedding_csv(res.embedding, names, d / "embedding.csv")
        series = [(n, [tuple(p) for p, c in zip(res.embedding, y) if c == k])
                  for k, n in enumerate(task.class_names)]
        emit_svg([s for s in series if s[1]], "scatter", d / "embedding.svg",
                 title=f"t-SNE of learned features, task {task.name}")
        return res


# -- commands -----------------------------------------------------------------------

def _summary_row(task, report):
    return [task.name] + ["NA" if getattr(report, m) is None else repr(float(getattr(report, m)))
                          for m in METRIC_NAMES]


def run_command(cmd: str, run: Run) -> str:
    cfg = run.cfg
    task = get_task(cfg.task)
    d = run.dir
    if cmd == "gen-phantom":
        source, target = run.data()
        return f"source={len(source)} target={len(target)}"
    if cmd == "pretrain":
        stack = run.stack()
        return f"layers={len(stack)} stack={d / 'stack.caes'}"
    if cmd == "transfer":
        run.initial_network(task)
        return f"network={run.task_dir(task) / 'init.dsa1'}"
    if cmd == "finetune":
        net = run.trained_network(task)
        idx, y = run.task_samples(task)
        probs = net.head_forward(run.cache().features(net)[idx]).probs
        rep = classification_report(y, probs, task.n_classes)
        return f"train_ACC={rep.ACC!r} network={run.task_dir(task) / 'network.dsa1'}"
    if cmd == "crossval":
        res = run.crossval(task)
        return f"task={task.name} ACC={res.mean.ACC!r} std={res.std.ACC!r}"
    if cmd == "roc":
        aucs = run.roc(task)
        return " ".join(f"AUC[{k}]={v!r}" for k, v in aucs.items())
    if cmd == "embed":
        res = run.embed(task)
        return f"points={len(res.embedding)} kl={res.kl[-1][1]!r}"
    if cmd == "eval":
        rows = []
        for name in TASKS:
            t = TASKS[name]
            res = run.crossval(t)
            rows.append(_summary_row(t, res.mean))
            if t.is_binary:
                run.roc(t)
            log.info("%s: ACC %.4f", name, res.mean.ACC)
        with open(d / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("task",) + METRIC_NAMES)
            w.writerows(rows)
        return f"tasks={len(rows)} summary={d / 'summary.csv'}"
    raise UsageError(f"unknown command {cmd!r}")


def _fail(code: int, kind: str, message: str) -> int:
    msg = " ".join(str(message).split()).replace('"', "'")
    print(f'dsa3d: status=error code={code} kind={kind} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
        if args.config:
            cfg = parse_config(args.config)
        else:
            cfg = parse_config_text(default_config_text(), "default.cfg")
        cfg = cfg.with_overrides(seed=args.seed, output_dir=args.out, task=args.task,
                                 threads=args.threads)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    except ConfigError as exc:
        return _fail(1, "config", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.run.threads):
            run = Run(cfg)
            summary = run_command(args.command, run)
    except (KeyboardInterrupt, MemoryError):
        raise
    except Exception as exc:  # every runtime failure becomes exit code 2
        return _fail(2, type(exc).__name__, exc)
    print(f"status=ok command={args.command} run_dir={run.dir} {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
