"""Plain-text ``key=value`` run configuration.

Every tunable of the pipeline has a dotted key (``slic.step``, ``net.depth``,
...). Files may contain blank lines and ``#`` comments; unknown keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable

from superpix.errors import InputError

log = logging.getLogger(__name__)


class UnknownKey(InputError):
    pass


class BadValue(InputError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# key -> (default, parser)
SCHEMA: dict[str, tuple[Any, Callable[[str], Any]]] = {
    "seed": (0, int),
    "threads": (1, int),
    "slic.step": (16, int),
    "slic.compactness": (10.0, float),
    "slic.iterations": (5, int),
    "slic.alpha": ((1.0, 1.0, 1.0), _floats),
    "slic.beta": ((1.0,), _floats),
    "slic.min_component_frac": (0.25, float),
    "slic.perturb_seeds": (False, _bool),
    "segment.mode": ("slic", str),
    "scattering.J": (2, int),
    "scattering.L": (8, int),
    "scattering.mask": ("", str),
    "scattering.channels": ("L", str),
    "net.kind": ("regression_distance", str),
    "net.depth": (3, int),
    "net.Q": (7, int),
    "train.epochs": (10, int),
    "train.lr": (1e-3, float),
    "train.batch_size": (256, int),
    "train.val_frac": (0.1, float),
    "labels.method": ("gt_corrected", str),
    "labels.X": (1, int),
    "labels.warmup_iterations": (2, int),
    "labels.mistakes_only": (False, _bool),
    "labels.use_edges": (True, _bool),
    "eval.tol": (2, int),
}


class Config(dict):
    """Resolved configuration: defaults, then file values, then overrides."""

    @classmethod
    def defaults(cls) -> "Config":
        return cls({k: d for k, (d, _) in SCHEMA.items()})

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise UnknownKey(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key][1](value)
            except ValueError as e:
                raise BadValue(f"{key}: {e}") from None
        self[key] = value

    def update_text(self, text: str, source: str = "<text>") -> None:
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadValue(f"{source}:{n}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            self.set(k, v)

    @classmethod
    def load(cls, path=None, overrides: dict[str, Any] | None = None) -> "Config":
        cfg = cls.defaults()
        if path is not None:
            cfg.update_text(Path(path).read_text(), str(path))
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k}={_fmt(self[k])}\n" for k in sorted(self))

    def log_resolved(self) -> None:
        for k in sorted(self):
            log.info("config %s=%s", k, _fmt(self[k]))
