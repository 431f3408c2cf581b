"""Run configuration: sectioned ``key = value`` text with a fixed schema.

Every key has a type and a default.  Unknown sections or keys are
rejected with the offending name, and the fully resolved configuration
(defaults included) is what gets hashed and recorded in the manifest.
"""

import configparser
import hashlib
import math

from .errors import ConfigError


def _floats(text):
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _points(text):
    """``"0.25, 0.5"`` (1-d) or ``"0.2 0.3; 0.7 0.7"`` (2-d)."""
    if ";" in text or " " in text.strip().replace(", ", ","):
        rows = [tuple(float(v) for v in chunk.replace(",", " ").split())
                for chunk in text.split(";") if chunk.strip()]
        return tuple(rows)
    return tuple((v,) for v in _floats(text))


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _show(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(" ".join(repr(float(c)) for c in row) for row in value)
        return ", ".join(_show(v) for v in value)
    return str(value)


# section -> key -> (parser, default, allowed values or None)
SCHEMA = {
    "run": {
        "seed": (int, 0, None),
    },
    "mesh": {
        "kind": (str, "interval", ("interval", "square", "file")),
        "elements": (int, 40, None),
        "path": (str, "", None),
    },
    "load": {
        "kind": (str, "constant", ("constant", "nodal", "point")),
        "value": (_floats, (1.0,), None),
        "path": (str, "", None),
        "points": (_points, (), None),
    },
    "field": {
        "n": (int, 1, None),
        "lower": (float, 1.0, None),
        "eps": (float, 0.1, None),
    },
    "apm": {
        "family": (str, "iso-lognormal-matern", ("iso-lognormal-matern", "square-sfg")),
        "mean": (float, 0.0, None),
        "std": (float, 0.3, None),
        "dispersion": (float, 0.3, None),
        "corr_length": (float, 0.2, None),
        "smoothness": (float, 1.5, None),
        "free": (_names, ("mean", "std"), None),
        "n_model": (int, 400, None),
        "method": (str, "gaussian", ("gaussian", "kde")),
        "maxiter": (int, 400, None),
    },
    "truth": {
        "mean": (float, 0.3, None),
        "std": (float, 0.5, None),
        "dispersion": (float, 0.4, None),
        "corr_length": (float, 0.2, None),
        "smoothness": (float, 1.5, None),
    },
    "observe": {
        "points": (_points, ((0.25,), (0.5,), (0.75,)), None),
        "noise_std": (float, 1e-4, None),
        "n_exp": (int, 50, None),
    },
    "kl": {
        "m": (int, 1, None),
        "count": (int, 2000, None),
    },
    "chaos": {
        "n_germ": (int, 1, None),
        "degree": (int, 3, None),
        "n_terms": (_opt_int, None, None),
    },
    "map": {
        "degree": (int, 4, None),
        "degree_z": (_opt_int, None, None),
        "points": (int, 6, None),
        "z_scale": (float, 0.5, None),
        "validation": (int, 50, None),
    },
    "lowrank": {
        "enabled": (_bool, True, None),
        "r_max": (int, 10, None),
        "tol": (float, 1e-6, None),
        "max_sweeps": (int, 100, None),
    },
    "identify": {
        "n_model": (int, 1000, None),
        "method": (str, "gaussian", ("gaussian", "kde")),
        "bandwidth_scale": (float, 1.0, None),
        "prior_scale": (float, 0.5, None),
        "chains": (int, 3, None),
        "iterations": (int, 3000, None),
        "burn": (int, 1000, None),
        "audit_count": (int, 10, None),
        "restarts": (int, 0, None),
        "restart_count": (int, 2000, None),
    },
}

_POSITIVE = {
    ("mesh", "elements"), ("field", "n"), ("field", "lower"), ("field", "eps"),
    ("apm", "n_model"), ("apm", "maxiter"), ("observe", "n_exp"), ("kl", "m"),
    ("kl", "count"), ("chaos", "n_germ"), ("map", "points"), ("map", "z_scale"),
    ("map", "validation"), ("lowrank", "r_max"), ("lowrank", "tol"),
    ("lowrank", "max_sweeps"), ("identify", "n_model"), ("identify", "bandwidth_scale"),
    ("identify", "prior_scale"), ("identify", "chains"), ("identify", "iterations"),
    ("identify", "audit_count"), ("identify", "restart_count"),
}


class RunConfig:
    """Resolved configuration; ``cfg["section"]["key"]`` or ``cfg.get(...)``."""

    def __init__(self, values, source=""):
        self.values = values
        self.source = source

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def with_seed(self, seed):
        values = {s: dict(v) for s, v in self.values.items()}
        values["run"]["seed"] = int(seed)
        return RunConfig(values, self.source)

    @property
    def seed(self):
        return self.values["run"]["seed"]

    def to_text(self):
        """Canonical text of every key, defaults included."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_show(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def section_digest(self, *sections):
        text = "\n".join(f"{s}.{k}={_show(v)}" for s in sections
                         for k, v in self.values[s].items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def defaults():
    return RunConfig({s: {k: spec[1] for k, spec in keys.items()}
                      for s, keys in SCHEMA.items()})


def parse(text, source="<string>"):
    """Validate ``text`` against :data:`SCHEMA`.

    Raises
    ------
    ConfigError
        Naming the section and key for unknown entries, unparsable values
        or values outside their allowed set.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="\0")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            conv, _, allowed = SCHEMA[section][key]
            try:
                value = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None
            if allowed is not None and value not in allowed:
                raise ConfigError(f"{source}: {section}.{key} must be one of {allowed}, "
                                  f"got {value!r}")
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"{source}: {section}.{key} must be finite")
            cfg.values[section][key] = value
    _check(cfg, source)
    cfg.source = source
    return cfg


def _check(cfg, source):
    for section, key in _POSITIVE:
        if cfg.get(section, key) <= 0:
            raise ConfigError(f"{source}: {section}.{key} must be positive")
    if cfg.get("identify", "burn") >= cfg.get("identify", "iterations"):
        raise ConfigError(f"{source}: identify.burn must be below identify.iterations")
    if cfg.get("mesh", "kind") == "file" and not cfg.get("mesh", "path"):
        raise ConfigError(f"{source}: mesh.kind = file needs mesh.path")
    if cfg.get("load", "kind") == "nodal" and not cfg.get("load", "path"):
        raise ConfigError(f"{source}: load.kind = nodal needs load.path")
    if cfg.get("load", "kind") == "point" and \
            len(cfg.get("load", "points")) != len(cfg.get("load", "value")):
        raise ConfigError(f"{source}: load.points and load.value differ in length")
    if not cfg.get("observe", "points"):
        raise ConfigError(f"{source}: observe.points is empty")


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, str(path))
