"""Run configuration: INI file + flag overrides over embedded defaults.

Precedence is defaults < config file < ``--set section.key=value`` flags.
Unknown sections or keys are rejected, and every field is range-checked
here, before any compute starts. The resolved configuration has a stable
hash that goes into each run's manifest.
"""

from __future__ import annotations

import configparser
import hashlib
import math

import numpy as np

from .errors import ValidationError
from .losses import TERMS

_UNIFORM = "uniform"


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _ge1(x):
    return x >= 1


def _fraction(x):
    return 0 < x <= 1


_DEF_THRESHOLDS = ",".join(f"{t:g}" for t in np.linspace(0.0, 0.1, 21))

# (default, parser, validator, description)
SCHEMA = {
    "run": {
        "seed": (7, int, _non_negative, "root seed; all randomness derives from it"),
    },
    "pair": {
        "kind": ("icosphere", str,
                 lambda v: v in ("icosphere", "bent-cylinder", "noisy-copy"),
                 "generator kind"),
        "subdivisions": (2, int, _non_negative, "icosphere subdivision count"),
        "bend_angle": (0.6, float, lambda v: abs(v) < 2 * math.pi,
                       "cylinder bend angle (radians)"),
        "rings": (16, int, lambda v: v >= 2, "cylinder rings"),
        "segments": (10, int, lambda v: v >= 3, "cylinder segments"),
        "source": ("", str, lambda v: True, "source path for noisy-copy"),
        "jitter_fraction": (0.005, float, _non_negative,
                            "jitter stddev as a fraction of the bbox diagonal"),
        "rotate": (True, None, None, "apply a random rotation"),
        "max_rotation_deg": (30.0, None, None,
                             "rotation cap in degrees, or 'uniform'"),
        "scale_min": (1.0, float, _positive, "per-axis scale lower bound"),
        "scale_max": (1.0, float, _positive, "per-axis scale upper bound"),
        "translate_range": (0.0, float, _non_negative, "uniform translation range"),
    },
    "paths": {
        "source": ("", str, lambda v: True, "source shape file"),
        "target": ("", str, lambda v: True, "target shape file"),
        "gt": ("", str, lambda v: True, "ground-truth vertex map"),
        "corr": ("", str, lambda v: True, "input CORR file"),
        "pred": ("", str, lambda v: True, "predicted map or CORR for eval"),
        "net": ("", str, lambda v: True, "DNET parameter blob"),
    },
    "graph": {
        "kind": ("auto", str, lambda v: v in ("auto", "mesh", "knn"),
                 "graph construction"),
        "knn_k": (10, int, _ge1, "k for kNN graphs"),
    },
    "initiator": {
        "widths": ("32,32,64", str, lambda v: True, "edge-conv output widths"),
        "epochs": (300, int, _ge1, "training epochs"),
        "lr": (1e-3, float, _positive, "learning rate"),
        "aug_rotate": (True, None, None, "rotate during training"),
        "aug_max_rotation_deg": (30.0, None, None,
                                 "training rotation cap, or 'uniform'"),
        "aug_scale_min": (0.8, float, _positive, "training scale lower bound"),
        "aug_scale_max": (1.25, float, _positive, "training scale upper bound"),
        "aug_jitter_fraction": (0.005, float, _non_negative, "training jitter"),
        "aug_translate": (0.0, float, _non_negative, "training translation range"),
    },
    "refine": {
        "iterations": (5, int, _ge1, "refinement iterations"),
        "inner_steps": (200, int, _ge1, "optimization steps per iteration"),
        "layers": (2, int, _ge1, "DGAT layers per block"),
        "k_neighbors": (8, int, _ge1, "fixed neighbor count K"),
        "fusion": ("mean", str, lambda v: v in ("mean", "max"), "fusion mode"),
        "anchor_fraction": (0.05, float, _fraction, "FPS anchor fraction"),
        "lr": (1e-2, float, _positive, "inner-step learning rate"),
        "dnn1_hidden": (32, int, _ge1, "dnn1 hidden width"),
        "dnn2_hidden": (16, int, _ge1, "dnn2 hidden width"),
        "layer_norm": (True, None, None, "layer norm after dnn1 hidden"),
        "freeze_anchors": (False, None, None, "keep the initial anchor sets"),
    },
    "losses": {
        "laplacian": (1.0, float, _non_negative, "smoothness weight"),
        "sparsity": (0.1, float, _non_negative, "L1 weight"),
        "anchor_scale": (1.0, float, _non_negative, "anchor term scale"),
        "denoise": (10.0, float, _non_negative, "previous-iterate tie weight"),
        "enabled": (",".join(TERMS), str, lambda v: True, "enabled terms"),
    },
    "eval": {
        "thresholds": (_DEF_THRESHOLDS, str, lambda v: True,
                       "curve thresholds (normalized error units)"),
    },
    "ablate": {
        "subsets": ("initiator;laplacian,sparsity,anchor,denoise;"
                    "laplacian,sparsity,denoise;laplacian,sparsity",
                    str, lambda v: True, "semicolon-separated loss subsets"),
        "seeds": ("0,1,2,3,4", str, lambda v: True, "seeds for the grid"),
    },
}


def _parse_bool(section, key, raw):
    if isinstance(raw, bool):
        return raw
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"{section}.{key}: expected a boolean, got {raw!r}")


def _parse_rotation_cap(section, key, raw):
    if isinstance(raw, (int, float)):
        value = float(raw)
    else:
        low = str(raw).strip().lower()
        if low == _UNIFORM:
            return None
        try:
            value = float(low)
        except ValueError:
            raise ValidationError(
                f"{section}.{key}: expected degrees or 'uniform', got {raw!r}"
            ) from None
    if not 0 < value <= 180.0:
        raise ValidationError(f"{section}.{key}: degrees must lie in (0, 180]")
    return math.radians(value)


class RunConfig:
    """Validated, resolved configuration for one CLI run."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def canonical(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                v = self.values[section][key]
                if v is None:
                    v = _UNIFORM
                lines.append(f"{section}.{key}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    # -- derived collection parsers ------------------------------------

    def widths(self) -> tuple:
        return _parse_int_list("initiator", "widths", self.get("initiator", "widths"))

    def enabled_terms(self) -> frozenset:
        return parse_terms(self.get("losses", "enabled"))

    def thresholds(self) -> list:
        out = _parse_float_list("eval", "thresholds", self.get("eval", "thresholds"))
        if any(b < a for a, b in zip(out, out[1:])):
            raise ValidationError("eval.thresholds must be sorted ascending")
        return out

    def ablate_subsets(self) -> list:
        subsets = []
        for chunk in str(self.get("ablate", "subsets")).split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if chunk == "initiator":
                subsets.append("initiator")
            else:
                subsets.append(parse_terms(chunk))
        if not subsets:
            raise ValidationError("ablate.subsets is empty")
        return subsets

    def ablate_seeds(self) -> list:
        return _parse_int_list("ablate", "seeds", self.get("ablate", "seeds"))


def _parse_int_list(section, key, raw):
    try:
        out = [int(tok) for tok in str(raw).split(",") if tok.strip()]
    except ValueError:
        raise ValidationError(f"{section}.{key}: expected comma-separated "
                              f"integers, got {raw!r}") from None
    if not out:
        raise ValidationError(f"{section}.{key} is empty")
    return out


def _parse_float_list(section, key, raw):
    try:
        out = [float(tok) for tok in str(raw).split(",") if tok.strip()]
    except ValueError:
        raise ValidationError(f"{section}.{key}: expected comma-separated "
                              f"floats, got {raw!r}") from None
    if not out:
        raise ValidationError(f"{section}.{key} is empty")
    return out


def parse_terms(raw) -> frozenset:
    terms = frozenset(tok.strip() for tok in str(raw).split(",") if tok.strip())
    unknown = terms - set(TERMS)
    if unknown:
        raise ValidationError(f"unknown loss terms: {sorted(unknown)} "
                              f"(known: {', '.join(TERMS)})")
    if not terms:
        raise ValidationError("empty loss-term set")
    return terms


def _coerce(section, key, raw):
    default, parser, validator, _ = SCHEMA[section][key]
    if key.endswith("rotation_deg"):
        return _parse_rotation_cap(section, key, raw)
    if isinstance(default, bool):
        return _parse_bool(section, key, raw)
    try:
        value = parser(raw) if parser else raw
    except (TypeError, ValueError):
        raise ValidationError(f"{section}.{key}: cannot parse {raw!r} "
                              f"as {parser.__name__}") from None
    if validator and not validator(value):
        raise ValidationError(f"{section}.{key}: value {value!r} out of range")
    return value


def load_config(path=None, overrides=None) -> RunConfig:
    """Resolve defaults, an optional INI file, then ``section.key=value``
    override strings; reject unknown keys; validate everything."""
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (default, _, _, _) in keys.items():
            if key.endswith("rotation_deg") or key == "max_rotation_deg":
                values[section][key] = math.radians(default)
            else:
                values[section][key] = default

    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ValidationError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ValidationError(f"unknown config key {section}.{key}")
                values[section][key] = _coerce(section, key, raw)

    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override must look like section.key=value, "
                                  f"got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValidationError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw)

    cfg = RunConfig(values)
    # cross-field checks
    if cfg.get("pair", "scale_max") < cfg.get("pair", "scale_min"):
        raise ValidationError("pair.scale_max must be >= pair.scale_min")
    if cfg.get("initiator", "aug_scale_max") < cfg.get("initiator", "aug_scale_min"):
        raise ValidationError("initiator.aug_scale_max must be >= aug_scale_min")
    cfg.widths()
    cfg.enabled_terms()
    cfg.thresholds()
    cfg.ablate_subsets()
    cfg.ablate_seeds()
    return cfg
