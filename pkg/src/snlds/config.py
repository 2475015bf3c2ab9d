"""Declarative run configuration.

A run is described by an INI file with four sections.  Every key has a typed
default listed in ``SCHEMA``; unknown sections or keys are rejected so a typo
never silently falls back to a default.  Command-line overrides use the same
``section.key=value`` spelling.

    [model]
    K = 3
    transition_family = gru

    [train]
    steps = 10000
    beta_initial = 1000
    beta_start_step = 3000

    [data]
    generator = bouncing_ball
    n = 1000

    [eval]
    tolerances = 0, 5
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from snlds.errors import ConfigurationError
from snlds.model import ModelConfig
from snlds.training import AnnealSchedule, LearningRate, TrainConfig


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("()[]")
    return tuple(int(part) for part in text.split(",") if part.strip())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "default") else float(text)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "model": {
        "K": Key(int, 3, "number of discrete states"),
        "H": Key(int, 4, "continuous latent width"),
        "D": Key(int, 1, "observation width"),
        "transition_family": Key(str, "mlp", "linear | mlp | gru"),
        "discrete_input": Key(str, "prev_observation", "prev_observation | none"),
        "transition_residual": Key(_bool, True, "f_z(z) = z + g(z)"),
        "transition_hidden": Key(_ints, (32, 32), "hidden widths of the transition MLP"),
        "gru_units": Key(int, 4, "hidden units of the gru transition family"),
        "emission_hidden": Key(_ints, (32,), "hidden widths of the emission MLP; empty = linear"),
        "discrete_hidden": Key(_ints, (16,), "hidden widths of the discrete transition net"),
        "encoder_units": Key(int, 16, "bidirectional GRU units per direction"),
        "causal_units": Key(int, 16, "causal posterior GRU units"),
        "inference": Key(str, "collapsed", "collapsed | gumbel"),
    },
    "train": {
        "steps": Key(int, 10000, "optimizer steps"),
        "batch_size": Key(int, 32, "sequences per minibatch"),
        "lr": Key(float, 1e-3, "peak learning rate"),
        "lr_warmup_steps": Key(int, 0, "linear warm-up length"),
        "lr_warmup_init": Key(float, 1e-5, "learning rate at step 0 of the warm-up"),
        "lr_decay": Key(str, "constant", "constant | cosine"),
        "lr_decay_steps": Key(int, 0, "cosine decay length after warm-up"),
        "lr_min": Key(float, 1e-5, "cosine decay floor"),
        "beta_initial": Key(float, 0.0, "cross-entropy regularizer weight"),
        "beta_decay_rate": Key(float, 1.0, "multiplicative decay per beta_decay_steps"),
        "beta_decay_steps": Key(int, 1, "steps per decay factor"),
        "beta_start_step": Key(int, 0, "step at which beta starts decaying"),
        "beta_floor": Key(float, 0.0, "lower bound of beta"),
        "tau_initial": Key(float, 1.0, "transition temperature"),
        "tau_decay_rate": Key(float, 1.0, "multiplicative decay per tau_decay_steps"),
        "tau_decay_steps": Key(int, 1, "steps per decay factor"),
        "tau_start_step": Key(int, 0, "step at which tau starts decaying"),
        "tau_floor": Key(float, 1.0, "lower bound of tau"),
        "gumbel_tau_initial": Key(float, 1.0, "relaxation temperature (gumbel inference)"),
        "gumbel_tau_decay_rate": Key(float, 0.9, "relaxation temperature decay"),
        "gumbel_tau_decay_steps": Key(int, 500, "steps per relaxation decay factor"),
        "gumbel_tau_floor": Key(float, 0.5, "lowest relaxation temperature"),
        "clip_norm": Key(float, 5.0, "global gradient-norm clip"),
        "num_samples": Key(int, 1, "latent samples per sequence"),
        "entropy": Key(str, "analytic", "analytic | sample"),
        "log_every": Key(int, 500, "metrics cadence in steps"),
        "checkpoint_every": Key(int, 0, "checkpoint cadence; 0 = log_every"),
        "precision": Key(str, "float32", "float32 | float64"),
    },
    "data": {
        "generator": Key(str, "bouncing_ball", "bouncing_ball | dubins; ignored when path is set"),
        "path": Key(str, "", "training dataset file"),
        "n": Key(int, 1000, "generated training sequences"),
        "T": Key(int, 100, "generated sequence length"),
        "eval_path": Key(str, "", "held-out dataset file"),
        "eval_n": Key(int, 200, "generated held-out sequences; 0 disables evaluation"),
        "eval_seed_offset": Key(int, 100000, "held-out data uses seed + offset"),
        "standardize": Key(_bool, True, "shift and scale observations by training-set statistics"),
        "noise_std": Key(_opt_float, None, "observation noise; empty = generator default"),
        "wall": Key(float, 10.0, "bouncing ball: wall position"),
        "max_speed": Key(float, 0.5, "bouncing ball: speed bound"),
        "speed_min": Key(float, 0.1, "dubins: lowest speed"),
        "speed_max": Key(float, 0.5, "dubins: highest speed"),
        "turn_freq_min": Key(float, 0.1, "dubins: lowest turn rate / 2 pi"),
        "turn_freq_max": Key(float, 0.15, "dubins: highest turn rate / 2 pi"),
        "mean_duration": Key(float, 25.0, "dubins: mean regime duration"),
    },
    "eval": {
        "align_mode": Key(str, "permutation", "permutation | greedy | merging"),
        "tolerances": Key(_ints, (0, 5), "switching-point tolerances"),
        "tau": Key(float, 1.0, "transition temperature used for decoding"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {
        section: {name: key.default for name, key in keys.items()}
        for section, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, section: str, name: str, text: str) -> None:
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        if name not in SCHEMA[section]:
            raise ConfigurationError(f"unknown key {name!r} in section [{section}]")
        try:
            self.values[section][name] = SCHEMA[section][name].parse(text)
        except ValueError as exc:
            raise ConfigurationError(f"{section}.{name}: {exc}") from None

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for name in keys:
                lines.append(f"{name} = {_fmt(self.values[section][name])}")
            lines.append("")
        return "\n".join(lines)

    # -- builders ----------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        m = dict(self.values["model"])
        m.pop("inference")
        return ModelConfig(**m)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.values["train"]
        lr = LearningRate(t["lr"], t["lr_warmup_steps"], t["lr_warmup_init"], t["lr_decay"],
                          t["lr_decay_steps"], t["lr_min"])

        def schedule(prefix):
            return AnnealSchedule(t[f"{prefix}_initial"], t[f"{prefix}_decay_rate"],
                                  t[f"{prefix}_decay_steps"], t[f"{prefix}_start_step"],
                                  t[f"{prefix}_floor"])

        gumbel = AnnealSchedule(t["gumbel_tau_initial"], t["gumbel_tau_decay_rate"],
                                t["gumbel_tau_decay_steps"], 0, t["gumbel_tau_floor"])
        e = self.values["eval"]
        tolerances = e["tolerances"] or (0,)
        return TrainConfig(
            steps=t["steps"], batch_size=t["batch_size"], learning_rate=lr,
            beta=schedule("beta"), tau=schedule("tau"), gumbel_tau=gumbel,
            clip_norm=t["clip_norm"], seed=seed, num_samples=t["num_samples"],
            entropy=t["entropy"], log_every=t["log_every"],
            checkpoint_every=t["checkpoint_every"], switch_tolerance=tolerances[0],
            align_mode=e["align_mode"], precision=t["precision"])

    def generator_params(self) -> dict:
        d = self.values["data"]
        if d["generator"] == "bouncing_ball":
            params = {"wall": d["wall"], "max_speed": d["max_speed"]}
        elif d["generator"] == "dubins":
            params = {"speed_range": (d["speed_min"], d["speed_max"]),
                      "turn_freq_range": (d["turn_freq_min"], d["turn_freq_max"]),
                      "mean_duration": d["mean_duration"]}
        else:
            raise ConfigurationError(f"unknown generator {d['generator']!r}")
        if d["noise_std"] is not None:
            params["noise_std"] = d["noise_std"]
        return params

    def validate(self) -> None:
        """Build every derived object once so bad values fail before any work starts."""
        self.model_config()
        self.train_config(seed=0)
        if self.values["model"]["inference"] not in ("collapsed", "gumbel"):
            raise ConfigurationError("model.inference must be 'collapsed' or 'gumbel'")
        if self.values["eval"]["align_mode"] not in ("permutation", "greedy", "merging"):
            raise ConfigurationError(f"unknown alignment mode {self.values['eval']['align_mode']!r}")
        if any(tol < 0 for tol in self.values["eval"]["tolerances"]):
            raise ConfigurationError("tolerances must be non-negative")
        if not self.values["data"]["path"]:
            self.generator_params()


def parse_override(text: str) -> tuple[str, str, str]:
    """Split ``section.key=value``."""
    target, sep, value = text.partition("=")
    section, dot, name = target.strip().partition(".")
    if not sep or not dot:
        raise ConfigurationError(f"override must look like section.key=value, got {text!r}")
    return section, name, value.strip()


def load_run_config(text: str | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the INI ``text`` (if any), then ``section.key=value`` overrides."""
    rc = RunConfig()
    if text is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep K, H, D, T upper-case
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        for section in parser.sections():
            for name, value in parser.items(section):
                rc.set(section, name, value)
    for item in overrides:
        rc.set(*parse_override(item))
    rc.validate()
    return rc
