"""INI run configuration.  Every key has a type and a default; unknown
sections or keys are rejected so typos fail loudly."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

DATA_ROOT_ENV = "CTMAF_DATA_ROOT"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_range(s: str):
    if s.strip().lower() in ("", "none"):
        return None
    v = _floats(s)
    if len(v) != 2 or v[0] > v[1]:
        raise ValueError(f"expected 'low high', got {s!r}")
    return v


SCHEMA = {
    "run": {
        "preset": (str, "paper"),
        "seed": (int, 0),
        "manifest": (str, "manifest.csv"),
        "out_dir": (str, "runs"),
    },
    "data": {
        "train": (int, 140),
        "val": (int, 20),
        "test": (int, 40),
        "classes": (_ints, tuple(range(35))),
        "len_s": (float, 3.0),
        "test_len_s": (_opt_float, None),
        "ser_min": (float, -25.0),
        "ser_max": (float, 0.0),
        "rir_taps": (int, 4096),
        "rt60_min": (float, 0.05),
        "rt60_max": (float, 0.3),
        "noise_snr_db": (_opt_float, None),
        "write_audio": (_bool, False),
    },
    "filter": {
        "K": (int, 1024),
        "B": (int, 4),
        "constrained_grad": (_bool, False),
    },
    "optimizer": {
        "hidden": (int, 48),
        "layers": (int, 2),
        "group_size": (int, 5),
        "group_hop": (int, 2),
    },
    "kws": {
        "width": (int, 128),
        "bottleneck": (int, 112),
        "kernel": (int, 5),
        "batch_size": (int, 128),
        "lr": (float, 1e-3),
        "epochs": (int, 50),
        "noise_snr": (_opt_range, (0.0, 40.0)),
    },
    "train": {
        "lam": (float, 0.5),
        "batch_size": (int, 16),
        "lr": (float, 2e-4),
        "beta1": (float, 0.99),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "clip_norm": (float, 10.0),
        "lr_patience": (int, 10),
        "stop_patience": (int, 30),
        "max_epochs": (int, 100),
        "L_min": (int, 8),
        "L_max": (int, 32),
        "kws_lr": (float, 1e-4),
        "kws_beta1": (float, 0.9),
        "joint_lr": (float, 1e-4),
        "joint_stop_patience": (int, 50),
    },
    "kalman": {
        "A": (float, 0.999),
        "q": (float, 1e-3),
        "smoothing": (float, 0.99),
        "grid_A": (_floats, (0.95, 0.99, 0.999)),
        "grid_q": (_floats, (1e-4, 1e-3, 1e-2)),
        "grid_smoothing": (_floats, (0.9, 0.99)),
    },
    "eval": {
        "fold": (str, "test"),
        "cancellers": (lambda s: tuple(s.replace(",", " ").split()), ("no-echo", "no-aec", "diag-kf", "meta", "ct-meta")),
        "trials": (int, 10000),
    },
}

# overrides applied before the file's own values
PRESETS = {
    "paper": {},
    "toy": {
        "data": {"train": 140, "val": 20, "test": 40, "classes": (0, 1), "len_s": 1.0,
                 "ser_min": -10.0, "ser_max": 0.0, "rir_taps": 64, "rt60_min": 0.002, "rt60_max": 0.01},
        "filter": {"K": 64, "B": 2},
        "optimizer": {"hidden": 8},
        "kws": {"width": 32, "bottleneck": 16, "batch_size": 32, "epochs": 30},
        "train": {"max_epochs": 20, "lr": 1e-3, "joint_lr": 1e-3, "kws_lr": 1e-4},
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict
    source: str | None = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def snapshot(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
                for s, d in self.values.items()}

    def to_ini(self) -> str:
        lines = []
        for s, d in self.values.items():
            lines.append(f"[{s}]")
            for k, v in d.items():
                if isinstance(v, tuple):
                    v = " ".join(str(x) for x in v)
                lines.append(f"{k} = {'none' if v is None else v}")
            lines.append("")
        return "\n".join(lines)

    def path(self, key: str, section: str = "run") -> Path:
        """Resolve a path value against the data root (env var, else cwd)."""
        p = Path(self.values[section][key])
        if p.is_absolute():
            return p
        return Path(os.environ.get(DATA_ROOT_ENV, ".")) / p


def _defaults(preset: str) -> dict:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for s, over in PRESETS[preset].items():
        values[s].update(over)
    values["run"]["preset"] = preset
    return values


def parse_config(text: str = "", source: str | None = None, preset: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}".splitlines()[0]) from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown config key {key!r} in [{section}]")
    chosen = preset or (parser["run"].get("preset") if parser.has_section("run") else None) or "paper"
    values = _defaults(chosen)
    for section in parser.sections():
        for key, raw in parser[section].items():
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigurationError(f"[{section}] {key}: {exc}") from exc
    _check(values)
    return RunConfig(values, source)


def load_config(path, preset: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path), preset)


def _check(v: dict) -> None:
    d = v["data"]
    if d["train"] < 0 or d["val"] < 0 or d["test"] < 0:
        raise ConfigurationError("scene counts must be non-negative")
    if d["ser_min"] > d["ser_max"]:
        raise ConfigurationError("ser_min exceeds ser_max")
    if len(set(d["classes"])) < 2:
        raise ConfigurationError("need at least two distinct classes")
    t = v["train"]
    if not 0.0 <= t["lam"] <= 1.0:
        raise ConfigurationError("lam must lie in [0, 1]")
    if not 1 <= t["L_min"] <= t["L_max"]:
        raise ConfigurationError("need 1 <= L_min <= L_max")
    if v["eval"]["fold"] not in ("train", "val", "test"):
        raise ConfigurationError(f"unknown fold {v['eval']['fold']!r}")
