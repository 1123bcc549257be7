"""Experiment configuration files.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored. Lists are comma separated. Unknown keys are errors. See ``SCHEMA``
for the keys, their types and defaults; ``problem`` and ``method`` are required.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

PROBLEMS = ("lamb_oseen", "barenblatt", "ou")
METHODS = ("einn", "drvn", "oracle")


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_or_none(text):
    return None if text.strip().lower() in ("", "none", "default") else float(text)


# key -> (parser, default, help); default None for required keys
SCHEMA = {
    "problem": (str, None, "lamb_oseen | barenblatt | ou"),
    "method": (str, None, "einn | drvn | oracle"),
    "seed": (int, 0, "master seed"),
    "out_dir": (str, "", "output directory (default runs/<problem>_<method>)"),
    # problem
    "T": (float, 1.0, "final time"),
    "nu": (_float_or_none, None, "diffusion coefficient (reference default when unset)"),
    "t0": (_float_or_none, None, "reference time shift (reference default when unset)"),
    "clamp_eps": (_float_or_none, None, "kernel clamp radius (kernel default when unset)"),
    # training
    "iterations": (int, 5000, "optimizer steps"),
    "minibatch": (int, 16, "probe trajectories per step"),
    "batch_N": (int, 256, "convolution particles per step (DRVN: ensemble size)"),
    "steps": (int, 20, "time grid steps for training"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "adam_beta1": (float, 0.9, ""),
    "adam_beta2": (float, 0.999, ""),
    "adam_eps": (float, 1e-8, ""),
    "hidden": (_int_list, (20,) * 7, "hidden layer widths"),
    "checkpoint_every": (int, 500, "iterations between checkpoints"),
    "checkpoint_at": (_int_list, (), "extra checkpoint iterations"),
    # evaluation
    "eval_points": (int, 11, "evaluation times, uniform on [0, T]"),
    "eval_steps": (int, 20, "time grid steps for evaluation ensembles"),
    "eval_batch_N": (int, 16384, "particles for the Q(t) estimate"),
    "domain_box": (_float_or_none, None, "half-width of the evaluation cube (problem default when unset)"),
    "grid_per_axis": (int, 0, "evaluation grid size (problem default when 0)"),
    "kl_count": (int, 2048, "trajectories for the KL estimate"),
    "r_probes": (int, 64, "probe trajectories for R(f) at each checkpoint (fixed batch)"),
    "r_batch_N": (int, 1024, "convolution particles for R(f) at each checkpoint"),
    "energy_count": (int, 2048, "samples per side for the modulated energy (Coulomb only; 0 disables)"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    method: str
    seed: int = 0
    out_dir: str = ""
    T: float = 1.0
    nu: float = None
    t0: float = None
    clamp_eps: float = None
    iterations: int = 5000
    minibatch: int = 16
    batch_N: int = 256
    steps: int = 20
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple = (20,) * 7
    checkpoint_every: int = 500
    checkpoint_at: tuple = ()
    eval_points: int = 11
    eval_steps: int = 20
    eval_batch_N: int = 16384
    domain_box: float = None
    grid_per_axis: int = 0
    kl_count: int = 2048
    r_probes: int = 64
    r_batch_N: int = 1024
    energy_count: int = 2048

    def __post_init__(self):
        validate(self)

    @property
    def output_dir(self):
        return self.out_dir or f"runs/{self.problem}_{self.method}"

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ExperimentConfig(**d)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate(cfg):
    if cfg.problem not in PROBLEMS:
        raise ConfigError("problem", f"must be one of {', '.join(PROBLEMS)}")
    if cfg.method not in METHODS:
        raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
    for name in ("minibatch", "batch_N", "steps", "checkpoint_every", "eval_steps", "eval_batch_N", "kl_count",
                 "r_probes", "r_batch_N"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, "must be >= 1")
    if any(i < 1 for i in cfg.checkpoint_at):
        raise ConfigError("checkpoint_at", "iterations must be >= 1")
    if cfg.iterations < 0:
        raise ConfigError("iterations", "must be >= 0")
    if cfg.method == "drvn" and cfg.batch_N < 2:
        raise ConfigError("batch_N", "DRVN needs at least two particles")
    if cfg.method == "drvn" and cfg.T / cfg.steps > 0.05:
        raise ConfigError("steps", "DRVN needs an SDE step <= 0.05")
    if cfg.energy_count not in (0,) and cfg.energy_count < 2:
        raise ConfigError("energy_count", "must be 0 or >= 2")
    if cfg.eval_points < 1:
        raise ConfigError("eval_points", "must be >= 1")
    if cfg.eval_points > 1 and cfg.eval_steps % (cfg.eval_points - 1):
        raise ConfigError("eval_steps", "must be a multiple of eval_points - 1 so evaluation times are grid nodes")
    if not (0 < cfg.adam_beta1 < 1):
        raise ConfigError("adam_beta1", "must lie in (0, 1)")
    if not (0 < cfg.adam_beta2 < 1):
        raise ConfigError("adam_beta2", "must lie in (0, 1)")
    if not cfg.T > 0:
        raise ConfigError("T", "must be positive")
    if not cfg.hidden or min(cfg.hidden) < 1:
        raise ConfigError("hidden", "needs at least one positive width")
    if cfg.nu is not None and cfg.nu < 0:
        raise ConfigError("nu", "must be >= 0")


def parse(text):
    """Parse config text into an :class:`ExperimentConfig`; raises :class:`ConfigError`."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given twice")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ValueError:
            raise ConfigError(key, f"cannot parse {val!r}") from None
    for key, (_, default, _) in SCHEMA.items():
        if default is None and key in ("problem", "method") and key not in values:
            raise ConfigError(key, "required field is missing")
    return ExperimentConfig(**values)


def load(path):
    with open(path) as fh:
        return parse(fh.read())
