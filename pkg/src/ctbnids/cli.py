"""Command-line entry point: ``ctbnids <command> [options]``.

Exit status: 0 success, 2 bad input (files, config, arguments), 3 numerical
failure (impossible evidence, particle degeneracy).
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys

import numpy as np

from . import __version__, hids, modelio, nids, synth, traceio
from ._validation import substream
from .config import RunConfig
from .estimators import (ConnectionCountDetector, StideDetector, SyscallAnomalyDetector,
                         TrafficAnomalyDetector)
from .evaluation import confusion_matrix, label_windows, roc_auc
from .exceptions import InputError, NumericalError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

logger = logging.getLogger("ctbnids")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Bookkeeping for one command: config, inputs, outputs, manifest."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.inputs = []
        self.outputs = []

    @property
    def header(self):
        return (f"produced by ctbnids {__version__} command={self.command}",
                f"config_sha256={self.cfg.digest()} seed={self.cfg.seed}")

    def input(self, path):
        if path is None:
            return None
        if not os.path.isfile(path):
            raise InputError(f"input file not found: {path}")
        self.inputs.append(path)
        return path

    def write(self, path, text):
        if os.path.abspath(path) in {os.path.abspath(p) for p in self.inputs}:
            raise InputError(f"refusing to overwrite input file {path}")
        traceio.atomic_write(path, text)
        self.outputs.append(path)

    def manifest(self):
        if not self.outputs:
            return
        secs = [("manifest", [("command", self.command), ("version", __version__),
                              ("seed", str(self.cfg.seed)),
                              ("config_sha256", self.cfg.digest())])]
        secs += [(f"config {name}", entries) for name, entries in self.cfg.sections()]
        secs.append(("inputs", [(p, _sha256(p)) for p in self.inputs]))
        secs.append(("outputs", [(p, _sha256(p)) for p in self.outputs]))
        traceio.atomic_write(self.outputs[0] + ".manifest", modelio.dump_sections(secs))


# ------------------------------------------------------------------ helpers


def _load_model(run, path):
    net, meta = modelio.loads_model(traceio._read(run.input(path)))
    kind = meta.get("kind", "generic")
    if kind == "traffic":
        return nids.TrafficModel.from_ctbn(net, meta)
    if kind == "syscall":
        return hids.SyscallModel.from_ctbn(net, meta)
    raise InputError(f"{path}: model kind {kind!r} is not a detector model")


def _dump_model(run, model):
    return modelio.dumps_model(model.to_ctbn(), model.meta(), run.header)


def _slice(trace, start, end):
    if start is None and end is None:
        return trace
    return trace.slice(trace.start if start is None else start,
                       trace.end if end is None else end)


def _traffic_detector(cfg):
    n = cfg["nids"]
    return TrafficAnomalyDetector(
        n_global=n["n_global"], n_hidden=n["n_hidden"], n_ports=n["n_ports"],
        other_bucket=n["other_bucket"], n_iter=n["em_iterations"], n_particles=n["particles"],
        resample_every=n["resample_every"], window=n["window"], pseudo=n["pseudo"],
        random_state=cfg.seed)


def _syscall_detector(cfg, vocabulary=None):
    h = cfg["hids"]
    return SyscallAnomalyDetector(m=h["m"], vocabulary=vocabulary, max_iter=h["em_iterations"],
                                  tol=h["tolerance"], pseudo=h["pseudo"], random_state=cfg.seed)


def _generator_model(cfg):
    g = cfg["gen"]
    ports = [int(p) for p in str(g["ports"]).split(",") if p.strip()]
    return nids.build_traffic_model(
        ports, g["n_global"], g["n_hidden"], seed=substream(cfg.seed, "gen-model"),
        g_range=(g["g_rate_low"], g["g_rate_high"]), h_range=(g["h_rate_low"], g["h_rate_high"]),
        toggle_range=(g["toggle_rate_low"], g["toggle_rate_high"]))


def _normal_only(traces):
    labelled = [t for t in traces if t.label != "unknown"]
    if not labelled:
        return traces
    normal = [t for t in traces if t.label == "normal"]
    if not normal:
        raise InputError("no process is labelled normal")
    return normal


# ----------------------------------------------------------------- commands


def cmd_gen_traffic(run, args):
    cfg = run.cfg
    model = _load_model(run, args.model) if args.model else _generator_model(cfg)
    duration = args.duration if args.duration is not None else cfg["gen"]["duration"]
    trace = synth.gen_traffic(model, duration, seed=substream(cfg.seed, "gen-traffic"),
                              start=args.start)
    run.write(args.out, traceio.dumps_traffic(trace, run.header))
    if args.save_model:
        run.write(args.save_model, _dump_model(run, model))
    logger.info("generated %d events", len(trace))


def cmd_gen_syscalls(run, args):
    cfg, g = run.cfg, run.cfg["gen"]
    if args.model:
        model = _load_model(run, args.model)
    else:
        model = hids.build_syscall_model(m=g["m"], seed=substream(cfg.seed, "gen-syscall-model"))
    n = args.n_processes or g["n_processes"]
    n_bad = int(round(n * args.anomalous_fraction))
    traces = synth.gen_syscalls(model, n - n_bad, g["mean_horizon"], cfg["hids"]["resolution"],
                                seed=substream(cfg.seed, "gen-syscalls"), label="normal",
                                prefix="n") if n - n_bad else []
    if n_bad:
        bad = synth.permuted_model(model, seed=substream(cfg.seed, "gen-permutation"))
        traces += synth.gen_syscalls(bad, n_bad, g["mean_horizon"], cfg["hids"]["resolution"],
                                     seed=substream(cfg.seed, "gen-anomalous"), label="attack",
                                     prefix="a")
    run.write(args.out, traceio.dumps_syscalls(traces, run.header))
    if args.labels_out:
        run.write(args.labels_out, traceio.dumps_labels(traces, run.header))
    if args.save_model:
        run.write(args.save_model, _dump_model(run, model))


def cmd_inject(run, args):
    cfg, inj = run.cfg, run.cfg["inject"]
    trace = traceio.read_traffic(run.input(args.trace))
    spec = synth.InjectionSpec(
        inj["alpha"], inj["beta"],
        synth.AnomalyTemplate(inj["template"], inj["template_rate"], inj["template_port"]),
        seed=substream(cfg.seed, "inject"))
    target = _slice(trace, args.start, args.end)
    if args.mix_with:
        other = traceio.read_traffic(run.input(args.mix_with))
        merged, gt = synth.mix_hosts(target, other, spec)
    else:
        merged, gt = synth.inject_anomaly(target, spec)
    if target is not trace:
        outside = (trace.times < target.start) | (trace.times >= target.end)
        rest = nids.TrafficTrace(trace.times[outside], trace.ports[outside],
                                 trace.kinds[outside], trace.start, trace.end,
                                 require_balanced=False)
        merged = nids.TrafficTrace.concatenate([rest, merged], trace.start, trace.end)
    run.write(args.out, traceio.dumps_traffic(merged, run.header))
    run.write(args.truth_out, traceio.dumps_truth(gt, run.header))


def cmd_train_nids(run, args):
    trace = _slice(traceio.read_traffic(run.input(args.trace)), args.start, args.end)
    det = _traffic_detector(run.cfg).fit(trace)
    run.write(args.out, _dump_model(run, det.model_))
    for i, ll in enumerate(det.log_likelihoods_):
        logger.info("iteration %d log-likelihood estimate %.4f", i, ll)


def cmd_score_nids(run, args):
    model = _load_model(run, args.model)
    if not isinstance(model, nids.TrafficModel):
        raise InputError(f"{args.model} is not a traffic model")
    trace = _slice(traceio.read_traffic(run.input(args.trace)), args.start, args.end)
    det = _traffic_detector(run.cfg)
    det.model_ = model
    run.write(args.out, traceio.dumps_window_scores(det.score_windows(trace), run.header))


def cmd_train_hids(run, args):
    labels = traceio.read_labels(run.input(args.labels)) if args.labels else None
    traces = _normal_only(traceio.read_syscalls(run.input(args.trace), labels))
    det = _syscall_detector(run.cfg).fit(traces)
    run.write(args.out, _dump_model(run, det.model_))


def cmd_score_hids(run, args):
    model = _load_model(run, args.model)
    if not isinstance(model, hids.SyscallModel):
        raise InputError(f"{args.model} is not a system-call model")
    labels = traceio.read_labels(run.input(args.labels)) if args.labels else None
    traces = traceio.read_syscalls(run.input(args.trace), labels)
    scores = hids.score_processes(model, traces)
    run.write(args.out, traceio.dumps_process_scores(scores, run.header))


def cmd_baseline(run, args):
    if args.kind == "connections":
        trace = _slice(traceio.read_traffic(run.input(args.trace)), args.start, args.end)
        det = ConnectionCountDetector(run.cfg["nids"]["window"]).fit()
        run.write(args.out, traceio.dumps_window_scores(
            det.score_windows(trace), run.header, traceio.COUNT_SCORE_HEADER))
        return
    if not args.train:
        raise InputError("stide needs --train")
    train_labels = traceio.read_labels(run.input(args.train_labels)) if args.train_labels else None
    train = _normal_only(traceio.read_syscalls(run.input(args.train), train_labels))
    test = traceio.read_syscalls(run.input(args.trace))
    h = run.cfg["hids"]
    det = StideDetector(h["stide_k"], h["stide_h"]).fit(train)
    scores = det.decision_function(test)
    rows = [(t.process_id, t.n_calls, int(s)) for t, s in zip(test, scores)]
    run.write(args.out, traceio.dumps_stide_scores(rows, run.header))


def cmd_eval_roc(run, args):
    text = traceio._read(run.input(args.scores))
    if args.truth:
        gt = traceio.read_truth(run.input(args.truth))
        starts, ends, counts, scores = traceio.loads_window_scores(text, args.scores)
        windows = [nids.WindowScore(a, b - a, s, int(c)) for a, b, c, s in
                   zip(starts, ends, counts, scores)]
        labels, _ = label_windows(gt, windows)
        header_line = next(line for line in text.splitlines() if line and not line.startswith("#"))
        column = header_line.split(",")[-1]
    elif args.labels:
        lab = traceio.read_labels(run.input(args.labels))
        fields, ids, cols = traceio.loads_process_table(text, args.scores)
        column = args.column or fields[-1]
        if column not in fields[1:]:
            raise InputError(f"{args.scores}: no column {column!r}")
        scores = cols[:, fields.index(column) - 1]
        missing = [i for i in ids if i not in lab]
        if missing:
            raise InputError(f"no label for process {missing[0]}")
        labels = np.array([0 if lab[i] == "normal" else 1 for i in ids])
    else:
        raise InputError("eval-roc needs --truth (window scores) or --labels (process scores)")
    polarity = args.polarity
    if polarity == "auto":
        polarity = "low" if "log_likelihood" in column else "high"
    res = roc_auc(scores, labels, polarity)
    run.write(args.out, traceio._comments(run.header + (f"auc={res.auc!r}", f"polarity={polarity}",
                                                        f"positives={int(labels.sum())}",
                                                        f"negatives={int((1 - labels).sum())}"))
              + res.table())
    if args.svg:
        run.write(args.svg, res.to_svg())
    print(f"AUC {res.auc:.6f}")


def cmd_host_id(run, args):
    if len(args.models) != len(args.traces):
        raise InputError("give one trace per model (trace i belongs to host i)")
    models = [_load_model(run, m) for m in args.models]
    segment = args.segment or run.cfg["hostid"]["segment"]
    det = _traffic_detector(run.cfg)
    rows, owners = [], []
    for host, path in enumerate(args.traces):
        trace = traceio.read_traffic(run.input(path))
        per_model = []
        for model in models:
            det.model_ = model
            det.window = segment
            per_model.append(det.score_windows(trace))
        for k, w in enumerate(per_model[0]):
            if w.skipped:
                continue
            rows.append([pm[k].log_likelihood for pm in per_model])
            owners.append(host)
    C = confusion_matrix(np.array(rows), owners)
    lines = ["host," + ",".join(f"model_{j}" for j in range(len(models)))]
    lines += [f"{i}," + ",".join(repr(float(x)) for x in row) for i, row in enumerate(C)]
    run.write(args.out, traceio._comments(run.header) + "\n".join(lines) + "\n")


def cmd_model(run, args):
    net, meta = modelio.loads_model(traceio._read(run.input(args.input)))
    run.write(args.out, modelio.dumps_model(net, meta, run.header))


# ------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="ctbnids", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set run.seed=N")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def span(sp):
        sp.add_argument("--start", type=float, help="ignore events before this time")
        sp.add_argument("--end", type=float, help="ignore events at or after this time")

    sp = add("gen-traffic", cmd_gen_traffic, "sample a synthetic traffic trace")
    sp.add_argument("--model", help="generator model file (default: random from the seed)")
    sp.add_argument("--duration", type=float)
    sp.add_argument("--start", type=float, default=0.0)
    sp.add_argument("--save-model")
    sp.add_argument("--out", required=True)

    sp = add("gen-syscalls", cmd_gen_syscalls, "sample synthetic system-call traces")
    sp.add_argument("--model")
    sp.add_argument("--n-processes", type=int)
    sp.add_argument("--anomalous-fraction", type=float, default=0.0)
    sp.add_argument("--labels-out")
    sp.add_argument("--save-model")
    sp.add_argument("--out", required=True)

    sp = add("inject", cmd_inject, "inject an attack template or another host's traffic")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--mix-with", help="replay this host's traffic instead of a template")
    sp.add_argument("--start", type=float, help="restrict the injection to [start, end)")
    sp.add_argument("--end", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth-out", required=True)

    sp = add("train-nids", cmd_train_nids, "train the traffic model")
    sp.add_argument("--trace", required=True)
    span(sp)
    sp.add_argument("--out", required=True)

    sp = add("score-nids", cmd_score_nids, "score traffic windows")
    sp.add_argument("--model", required=True)
    sp.add_argument("--trace", required=True)
    span(sp)
    sp.add_argument("--out", required=True)

    sp = add("train-hids", cmd_train_hids, "train the system-call model")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--labels", help="if given, train on processes labelled normal only")
    sp.add_argument("--out", required=True)

    sp = add("score-hids", cmd_score_hids, "score processes")
    sp.add_argument("--model", required=True)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)

    sp = add("baseline", cmd_baseline, "connection-count or stide baseline scores")
    sp.add_argument("--kind", choices=("connections", "stide"), required=True)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--train", help="training system-call traces (stide)")
    sp.add_argument("--train-labels")
    span(sp)
    sp.add_argument("--out", required=True)

    sp = add("eval-roc", cmd_eval_roc, "ROC table and AUC of a score file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--truth", help="ground-truth intervals (window scores)")
    sp.add_argument("--labels", help="process labels (process scores)")
    sp.add_argument("--column", help="score column of a process table")
    sp.add_argument("--polarity", choices=("auto", "low", "high"), default="auto")
    sp.add_argument("--svg")
    sp.add_argument("--out", required=True)

    sp = add("host-id", cmd_host_id, "host-identification confusion matrix")
    sp.add_argument("--models", nargs="+", required=True)
    sp.add_argument("--traces", nargs="+", required=True)
    sp.add_argument("--segment", type=float)
    sp.add_argument("--out", required=True)

    sp = add("model", cmd_model, "load a model file and save it again")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    return p


def _config(args):
    cfg = RunConfig.from_text(traceio._read(args.config)) if args.config else RunConfig()
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return cfg.apply_overrides(overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args.command, _config(args))
        if args.config:
            run.input(args.config)
        args.func(run, args)
        run.manifest()
    except InputError as exc:
        print(f"ctbnids: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"ctbnids: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
