"""Flat-key run configuration: ``section.key = value`` lines, JSON values.

Every command echoes its full effective configuration (defaults included) as
metadata; reparsing the echo reproduces the configuration exactly.
"""

import json
import os

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "out": "",  # empty -> TOPTD_OUT environment variable or ./runs
    "mdp.vocab_size": 8,
    "mdp.horizon": 3,
    "mdp.n_prompts": 4,
    "mdp.reward_law": "uniform",
    "mdp.reward_scale": 1.0,
    "mdp.gamma": 0.99,
    "iql.alpha": 0.1,
    "iql.p": 0.8,
    "iql.learning_rate": 1e-3,
    "iql.batch_size": 64,
    "iql.epochs": 100,
    "iql.q_min": -10.0,
    "iql.exact_mode": False,
    "iql.projected_sampling": True,
    "distill.n_per_prompt": 8,
    "distill.val_fraction": 0.2,
    "distill.lm_weight": 0.0,
    "distill.step_halving": False,
    "ablate.p_list": [0.5, 0.8, 1.0],
    "verify.n_instances": 5,
    "verify.p_list": [0.5, 0.8, 0.95],
    "verify.tol": 1e-6,
    "verify.contraction_trials": 100,
    "verify.strict": True,
    "corpus.path": "",  # empty -> bundled corpus
    "corpus.n": 3,
    "corpus.delta": 0.1,
    "corpus.horizon": 3,
    "corpus.prompts": ["the "],
    "corpus.n_sequences": 20,
}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return value
    raise ConfigError(f"unsupported default type for {key}")


class RunConfig:
    """Validated flat-key configuration with default filling."""

    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self._values[key] = _coerce(key, value)

    def __getitem__(self, key):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values[key]

    def as_dict(self):
        return dict(self._values)

    def out_dir(self):
        out = self._values["out"]
        if out:
            return out
        return os.environ.get("TOPTD_OUT", "runs")

    def emit(self):
        lines = []
        for key in sorted(self._values):
            lines.append(f"{key} = {json.dumps(self._values[key])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, payload = line.partition("=")
            try:
                value = json.loads(payload.strip())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: invalid value for {key.strip()!r}: {exc}")
            values[key.strip()] = value
        return cls(values)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="ascii") as fh:
            return cls.parse(fh.read())

    def write(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.emit())
