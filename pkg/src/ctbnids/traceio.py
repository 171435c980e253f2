"""Text formats for traces, labels, scores and ground truth.

Every writer emits optional ``#`` comment lines first; every reader skips
them.  Floats are written with ``repr`` so files round-trip exactly.
Malformed lines raise :class:`InputError` naming the file and line.
"""
from __future__ import annotations

import os
import tempfile
from collections import OrderedDict

import numpy as np

from .exceptions import InputError
from .hids import DEFAULT_RESOLUTION, ProcessTrace
from .nids import KINDS, TrafficTrace
from .synth import GroundTruth

TRAFFIC_HEADER = "timestamp_seconds,port,kind"
NIDS_SCORE_HEADER = "window_start,window_end,event_count,log_likelihood"
COUNT_SCORE_HEADER = "window_start,window_end,event_count,connection_opens"
HIDS_SCORE_HEADER = "process_id,n_calls,log_likelihood,per_event_log_likelihood"
STIDE_SCORE_HEADER = "process_id,n_calls,mismatch_score"
SYSCALL_COLUMNS = "process_id,tick_timestamp_seconds,seq_index,call_name"
LABEL_HEADER = "process_id,label"
TRUTH_HEADER = "start,end"


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _comments(header):
    return "".join(f"# {h}\n" for h in header)


def _lines(text, path):
    """(lineno, line) for non-empty, non-comment lines; plus comment bodies."""
    body, comments = [], []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        body.append((i, line))
    return body, comments


def _read(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


def _fail(path, lineno, msg):
    raise InputError(f"{path}:{lineno}: {msg}")


def _float(path, lineno, text, what):
    try:
        v = float(text)
    except ValueError:
        _fail(path, lineno, f"bad {what} {text!r}")
    if not np.isfinite(v):
        _fail(path, lineno, f"non-finite {what}")
    return v


# ----------------------------------------------------------------- traffic


def dumps_traffic(trace, header=()):
    out = [_comments(header), f"# span_seconds={trace.start!r},{trace.end!r}\n",
           TRAFFIC_HEADER + "\n"]
    out.extend(f"{t!r},{p},{KINDS[k]}\n"
               for t, p, k in zip(trace.times.tolist(), trace.ports.tolist(), trace.kinds.tolist()))
    return "".join(out)


def loads_traffic(text, path="<traffic>"):
    body, comments = _lines(text, path)
    if not body or body[0][1].replace(" ", "") != TRAFFIC_HEADER:
        raise InputError(f"{path}: missing header line {TRAFFIC_HEADER!r}")
    start = end = None
    for c in comments:
        if c.startswith("span_seconds="):
            a, b = c.split("=", 1)[1].split(",")
            start, end = float(a), float(b)
    kind_index = {k: i for i, k in enumerate(KINDS)}
    times, ports, kinds = [], [], []
    prev = -np.inf
    for lineno, line in body[1:]:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            _fail(path, lineno, "expected timestamp_seconds,port,kind")
        t = _float(path, lineno, parts[0], "timestamp")
        if t < prev:
            _fail(path, lineno, "timestamps must be non-decreasing")
        prev = t
        try:
            port = int(parts[1])
        except ValueError:
            _fail(path, lineno, f"bad port {parts[1]!r}")
        if parts[2] not in kind_index:
            _fail(path, lineno, f"unknown event kind {parts[2]!r}")
        times.append(t)
        ports.append(port)
        kinds.append(kind_index[parts[2]])
    if start is None:
        start = 0.0 if not times else min(0.0, times[0])
        end = times[-1] if times else 0.0
    return TrafficTrace(np.array(times), np.array(ports, dtype=int), np.array(kinds, dtype=int),
                        start, end, require_balanced=False)


def read_traffic(path):
    return loads_traffic(_read(path), path)


# ---------------------------------------------------------------- syscalls


def dumps_syscalls(traces, header=()):
    traces = list(traces)
    res = {t.resolution for t in traces} or {DEFAULT_RESOLUTION}
    if len(res) > 1:
        raise InputError("all processes in one file must share a clock resolution")
    out = [_comments(header), f"resolution_seconds={res.pop()!r}\n"]
    for tr in traces:
        for tick, batch in zip(tr.ticks.tolist(), tr.calls):
            out.extend(f"{tr.process_id},{tick!r},{i},{c}\n" for i, c in enumerate(batch))
    return "".join(out)


def loads_syscalls(text, path="<syscalls>", labels=None):
    body, _ = _lines(text, path)
    if not body or not body[0][1].startswith("resolution_seconds="):
        raise InputError(f"{path}: first line must be resolution_seconds=<seconds>")
    res = _float(path, body[0][0], body[0][1].split("=", 1)[1], "resolution")
    if res <= 0:
        _fail(path, body[0][0], "resolution must be positive")
    rows = body[1:]
    if rows and rows[0][1].replace(" ", "") == SYSCALL_COLUMNS:
        rows = rows[1:]
    procs = OrderedDict()
    for lineno, line in rows:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            _fail(path, lineno, "expected process_id,tick_timestamp_seconds,seq_index,call_name")
        pid, tick = parts[0], _float(path, lineno, parts[1], "tick timestamp")
        try:
            seq = int(parts[2])
        except ValueError:
            _fail(path, lineno, f"bad seq_index {parts[2]!r}")
        if not parts[3]:
            _fail(path, lineno, "empty call name")
        procs.setdefault(pid, []).append((tick, seq, parts[3], lineno))
    out = []
    labels = labels or {}
    for pid, rows in procs.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        ticks, batches = [], []
        for tick, seq, call, lineno in rows:
            if ticks and ticks[-1] == tick:
                if seq == batches[-1][-1][0]:
                    _fail(path, lineno, f"duplicate seq_index {seq} in one tick")
                batches[-1].append((seq, call))
            else:
                ticks.append(tick)
                batches.append([(seq, call)])
        calls = tuple(tuple(c for _, c in b) for b in batches)
        try:
            out.append(ProcessTrace(pid, np.array(ticks), calls, res, labels.get(pid, "unknown")))
        except InputError as exc:
            raise InputError(f"{path}: {exc}") from exc
    return out


def read_syscalls(path, labels=None):
    return loads_syscalls(_read(path), path, labels)


def dumps_labels(traces, header=()):
    return _comments(header) + LABEL_HEADER + "\n" + "".join(
        f"{t.process_id},{t.label}\n" for t in traces)


def loads_labels(text, path="<labels>"):
    body, _ = _lines(text, path)
    if body and body[0][1].replace(" ", "") == LABEL_HEADER:
        body = body[1:]
    labels = {}
    for lineno, line in body:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            _fail(path, lineno, "expected process_id,label")
        labels[parts[0]] = parts[1]
    return labels


def read_labels(path):
    return loads_labels(_read(path), path)


# ------------------------------------------------------------ ground truth


def dumps_truth(gt, header=()):
    return _comments(header) + TRUTH_HEADER + "\n" + "".join(
        f"{a!r},{b!r}\n" for a, b in gt.intervals)


def loads_truth(text, path="<truth>"):
    body, _ = _lines(text, path)
    if body and body[0][1].replace(" ", "") == TRUTH_HEADER:
        body = body[1:]
    iv = []
    for lineno, line in body:
        parts = line.split(",")
        if len(parts) != 2:
            _fail(path, lineno, "expected start,end")
        iv.append((_float(path, lineno, parts[0], "start"), _float(path, lineno, parts[1], "end")))
    try:
        return GroundTruth(tuple(iv))
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def read_truth(path):
    return loads_truth(_read(path), path)


# ------------------------------------------------------------------ scores


def dumps_window_scores(windows, header=(), column_header=NIDS_SCORE_HEADER):
    """Windows without events are omitted."""
    out = [_comments(header), column_header + "\n"]
    out.extend(f"{w.start!r},{w.end!r},{w.n_events},{float(w.log_likelihood)!r}\n"
               for w in windows if not w.skipped)
    return "".join(out)


def loads_window_scores(text, path="<scores>"):
    """Returns (starts, ends, counts, scores) arrays."""
    body, _ = _lines(text, path)
    if not body:
        raise InputError(f"{path}: empty score file")
    rows = []
    for lineno, line in body[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            _fail(path, lineno, "expected 4 comma-separated fields")
        try:
            rows.append((float(parts[0]), float(parts[1]), int(parts[2]), float(parts[3])))
        except ValueError:
            _fail(path, lineno, "non-numeric field")
    arr = list(zip(*rows)) if rows else [[], [], [], []]
    return (np.array(arr[0]), np.array(arr[1]), np.array(arr[2], dtype=int), np.array(arr[3]))


def dumps_process_scores(scores, header=()):
    out = [_comments(header), HIDS_SCORE_HEADER + "\n"]
    out.extend(f"{s.process_id},{s.n_calls},{float(s.log_likelihood)!r},"
               f"{float(s.per_event_log_likelihood)!r}\n" for s in scores)
    return "".join(out)


def dumps_stide_scores(rows, header=()):
    out = [_comments(header), STIDE_SCORE_HEADER + "\n"]
    out.extend(f"{pid},{n},{score}\n" for pid, n, score in rows)
    return "".join(out)


def loads_process_table(text, path="<scores>"):
    """Generic ``process_id,...`` table: returns (header fields, ids, float columns)."""
    body, _ = _lines(text, path)
    if not body:
        raise InputError(f"{path}: empty score file")
    fields = [f.strip() for f in body[0][1].split(",")]
    ids, cols = [], []
    for lineno, line in body[1:]:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(fields):
            _fail(path, lineno, f"expected {len(fields)} fields")
        ids.append(parts[0])
        try:
            cols.append([float(x) for x in parts[1:]])
        except ValueError:
            _fail(path, lineno, "non-numeric field")
    return fields, ids, np.array(cols).reshape(len(ids), len(fields) - 1)
