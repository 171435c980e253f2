"""Run configuration: sectioned ``key = value`` text with typed defaults.

Example::

    [run]
    seed = 7
    [nids]
    particles = 100
    window = 50.0

Unknown sections or keys are rejected; values are converted to the type of
the default.  ``canonical()`` renders every field in a fixed order, and its
SHA-256 is the config hash stamped on outputs.
"""
from __future__ import annotations

import copy
import hashlib

from .exceptions import InputError
from .modelio import dump_sections, parse_sections

DEFAULTS = {
    "run": {"seed": 0},
    "nids": {
        "n_global": 4, "n_hidden": 8, "n_ports": 9, "other_bucket": True,
        "particles": 100, "window": 50.0, "resample_every": 50.0,
        "em_iterations": 10, "pseudo": 1e-3,
    },
    "hids": {
        "m": 2, "resolution": 0.01, "em_iterations": 50, "tolerance": 1e-6,
        "pseudo": 1e-3, "stide_k": 5, "stide_h": 50,
    },
    "inject": {
        "alpha": 0.02, "beta": 0.01, "template": "FLOOD", "template_rate": 1000.0,
        "template_port": 80,
    },
    "gen": {
        "ports": "22,25,80,443", "n_global": 4, "n_hidden": 8, "duration": 7200.0,
        "g_rate_low": 0.002, "g_rate_high": 0.01, "h_rate_low": 0.02, "h_rate_high": 0.5,
        "toggle_rate_low": 0.1, "toggle_rate_high": 1.0,
        "n_processes": 40, "mean_horizon": 5.0, "m": 2,
    },
    "hostid": {"segment": 15.0},
}

# fields that may be zero; every other numeric field must be positive
_NONNEGATIVE = {("run", "seed")}


def _convert(section, key, default, raw):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InputError(f"config {section}.{key}: cannot parse {raw!r}") from None
    return raw.strip()


class RunConfig:
    """Typed view over the sections of :data:`DEFAULTS`."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, entries in (values or {}).items():
            for key, val in entries.items():
                self.set(section, key, val)
        self.validate()

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise InputError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise InputError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str):
            value = _convert(section, key, default, value)
        self.values[section][key] = value

    def get(self, section, key):
        return self.values[section][key]

    def __getitem__(self, item):
        return self.values[item]

    def validate(self):
        for section, entries in self.values.items():
            for key, val in entries.items():
                if isinstance(val, bool) or isinstance(val, str):
                    continue
                if (section, key) in _NONNEGATIVE:
                    if val < 0:
                        raise InputError(f"config {section}.{key} must be nonnegative")
                elif not val > 0:
                    raise InputError(f"config {section}.{key} must be positive")
        inj = self.values["inject"]
        if inj["alpha"] > 1 or inj["beta"] > 1:
            raise InputError("inject.alpha and inject.beta must not exceed 1")
        if self.values["hids"]["stide_h"] < self.values["hids"]["stide_k"]:
            raise InputError("hids.stide_h must be at least hids.stide_k")

    @classmethod
    def from_text(cls, text):
        vals = {}
        for section, entries in parse_sections(text):
            for key, value in entries:
                if value is None:
                    raise InputError(f"config [{section}]: line {key!r} is not key = value")
                vals.setdefault(section, {})[key] = value
        return cls(vals)

    def apply_overrides(self, assignments):
        """Apply ``section.key=value`` strings (command-line ``--set``)."""
        for item in assignments or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise InputError(f"override {item!r} must look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            self.set(section, key.strip(), value.strip())
        self.validate()
        return self

    def sections(self):
        out = []
        for section in DEFAULTS:
            entries = []
            for key in DEFAULTS[section]:
                v = self.values[section][key]
                entries.append((key, repr(v) if isinstance(v, float) else str(v).lower()
                                if isinstance(v, bool) else str(v)))
            out.append((section, entries))
        return out

    def canonical(self):
        return dump_sections(self.sections())

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def seed(self):
        return self.values["run"]["seed"]
