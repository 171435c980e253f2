"""Plain-text persistence for CTBN models and section/key=value documents.

Model document layout::

    # any comment lines
    [meta]
    kind = generic
    [variables]
    G = 4
    PKT_IN_80 = 2 toggle
    [edges]
    G -> H_80
    [cim H_80]
    parents = G
    u0 = -1.5 0.5 1.0 | 0.2 -0.2 0.0 | ...
    [initial G]
    p = 0.25 0.25 0.25 0.25

Matrix rows are separated by ``|``; floats use ``repr`` so a load/save
round trip reproduces the file byte for byte.
"""
from __future__ import annotations

import numpy as np

from .ctbn import Cim, CtbnModel
from .exceptions import InputError


def parse_sections(text):
    """Ordered ``[(section, [(key, value)])]``; keys without ``=`` map to None."""
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = (line[1:-1].strip(), [])
            sections.append(current)
            continue
        if current is None:
            raise InputError(f"line {lineno}: entry outside any section")
        if "=" in line and "->" not in line:
            key, value = line.split("=", 1)
            current[1].append((key.strip(), value.strip()))
        else:
            current[1].append((line, None))
    return sections


def dump_sections(sections, header=()):
    lines = [f"# {h}" for h in header]
    for name, entries in sections:
        lines.append(f"[{name}]")
        for key, value in entries:
            lines.append(key if value is None else f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _fmt_vec(v):
    return " ".join(repr(float(x)) for x in v)


def _fmt_mat(m):
    return " | ".join(_fmt_vec(r) for r in m)


def _parse_mat(text, n):
    rows = [r.split() for r in text.split("|")]
    m = np.array([[float(x) for x in r] for r in rows])
    if m.shape != (n, n):
        raise InputError(f"expected a {n}x{n} matrix, got shape {m.shape}")
    return m


def model_to_sections(model, meta=None):
    meta = dict(meta or {"kind": "generic"})
    secs = [("meta", [(k, str(v)) for k, v in meta.items()])]
    var_entries = []
    for name in model.names:
        size = str(model.sizes[name])
        if model.cims[name].toggle:
            size += " toggle"
        var_entries.append((name, size))
    secs.append(("variables", var_entries))
    secs.append(("edges", [(f"{p} -> {c}", None) for p, c in model.edges]))
    for name in model.names:
        cim = model.cims[name]
        entries = [("parents", ", ".join(cim.parents))]
        entries += [(f"u{u}", _fmt_mat(m)) for u, m in enumerate(cim.matrices)]
        secs.append((f"cim {name}", entries))
    for name in model.names:
        if name in model.initial:
            secs.append((f"initial {name}", [("p", _fmt_vec(model.initial[name]))]))
    return secs


def model_from_sections(sections):
    """Inverse of :func:`model_to_sections`; returns ``(model, meta)``."""
    meta, sizes, toggles, edges, cim_rows, initial, parents = {}, {}, set(), [], {}, {}, {}
    for name, entries in sections:
        if name == "meta":
            meta = {k: v for k, v in entries}
        elif name == "variables":
            for key, value in entries:
                parts = (value or "").split()
                if not parts:
                    raise InputError(f"variable {key} lacks a size")
                sizes[key] = int(parts[0])
                if len(parts) > 1 and parts[1] == "toggle":
                    toggles.add(key)
        elif name == "edges":
            for key, _ in entries:
                p, c = (s.strip() for s in key.split("->"))
                edges.append((p, c))
        elif name.startswith("cim "):
            var = name[4:].strip()
            d = dict(entries)
            parents[var] = tuple(p.strip() for p in (d.pop("parents", "") or "").split(",") if p.strip())
            cim_rows[var] = [d[k] for k in sorted(d, key=lambda k: int(k[1:]))]
        elif name.startswith("initial "):
            initial[name[8:].strip()] = np.array([float(x) for x in dict(entries)["p"].split()])
        else:
            raise InputError(f"unknown section [{name}]")
    cims = {}
    for var, size in sizes.items():
        if var not in cim_rows:
            raise InputError(f"variable {var} has no CIM section")
        pars = parents.get(var, ())
        for p in pars:
            if (p, var) not in edges:
                raise InputError(f"edge {p} -> {var} missing from [edges]")
        mats = np.stack([_parse_mat(r, size) for r in cim_rows[var]])
        cims[var] = Cim(var, pars, tuple(sizes[p] for p in pars), mats, var in toggles)
    declared = {(p, c) for c in sizes for p in parents.get(c, ())}
    if set(edges) != declared:
        raise InputError("[edges] disagrees with CIM parent lists")
    return CtbnModel(sizes, cims, initial), meta


def dumps_model(model, meta=None, header=()):
    return dump_sections(model_to_sections(model, meta), header)


def loads_model(text):
    return model_from_sections(parse_sections(text))
