"""Flat key=value config files with fixed sections and strict key checking.

The parser is deliberately hand-rolled: rejecting an unknown key has to name
the offending key and its line number, which configparser does not track.
"""

import copy
from dataclasses import dataclass

from .errors import ConfigError

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"
_INTS, _FLOATS, _STRS = "ints", "floats", "strs"

# section -> key -> (type, default)
SCHEMA = {
    "data": {
        "num_classes": (_INT, 10),
        "image_size": (_INT, 64),
        "train": (_INT, 3000),
        "val": (_INT, 500),
        "test": (_INT, 1000),
        "objects_min": (_INT, 1),
        "objects_max": (_INT, 4),
        "occlusion_prob": (_FLOAT, 0.3),
        "longtail_ratio": (_FLOAT, 1.0),  # 1.0 = uniform marginals
    },
    "teacher": {
        "epochs": (_INT, 8),
        "lr": (_FLOAT, 0.02),
        "batch_size": (_INT, 16),
        "momentum": (_FLOAT, 0.9),
        "weight_decay": (_FLOAT, 0.0005),
        "channels": (_INTS, (16, 32, 64)),
        "fc_width": (_INT, 128),
        "roi_out": (_INT, 7),
        "top_n": (_INT, 64),
        "input_scales": (_INTS, (64,)),
    },
    "student": {
        "channels": (_INTS, (16, 32, 64)),
        "fc_width": (_INT, 128),
    },
    "distill": {
        "lambda": (_FLOAT, 1.0),
        "nms_thresh": (_FLOAT, 0.4),
        "top_after_nms": (_INT, 32),
        "distill_layers": (_STRS, ("conv3",)),
        "stage1_lr": (_FLOAT, 1e-5),
        "stage1_epochs": (_INT, 100),
        "stage1_stop_window": (_INT, 5),
        "stage1_rel_tol": (_FLOAT, 1e-4),
        "stage2_lr": (_FLOAT, 1e-4),
        "stage2_epochs": (_INT, 12),
        "plateau_epochs": (_INT, 3),
        "plateau_min_delta": (_FLOAT, 1e-4),
        "lr_decay": (_FLOAT, 0.1),
        "batch_size": (_INT, 16),
        "momentum": (_FLOAT, 0.9),
        "weight_decay": (_FLOAT, 0.0005),
        "cache_teacher": (_BOOL, True),
        "require_stage1": (_BOOL, True),
    },
    "eval": {
        "top_k": (_INT, 3),
        "batch_size": (_INT, 64),
        "ablate_seeds": (_INT, 3),
        "latency_images": (_INT, 500),
    },
}


@dataclass
class Config:
    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]


def default_config() -> Config:
    return Config(values={s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
                          for s, keys in SCHEMA.items()})


def _convert(raw: str, kind: str, key: str, lineno: int):
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == _INTS:
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        if kind == _FLOATS:
            return tuple(float(v.strip()) for v in raw.split(",") if v.strip())
        if kind == _STRS:
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: cannot parse {key!r} as {kind}: {raw!r}") from exc


def parse_config(text: str) -> Config:
    cfg = default_config()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{section}]")
        kind, _ = SCHEMA[section][key]
        cfg.values[section][key] = _convert(raw, kind, key, lineno)
    return cfg


def load_config(path: str) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dump_config(cfg: Config) -> str:
    lines = []
    for section, keys in cfg.values.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
