"""Stochastic optimisation of the self-consistency loss."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .adjoint import gradient
from .dynamics import PropagationError, initial_state, integrate_forward, sample_probes
from .net import NetParams, _atomic_write, init_params, mlp_arch, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    minibatch: int = 16
    batch_N: int = 1024
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 100
    seed: int = 0
    hidden: tuple = (20,) * 7
    checkpoint_every: int = 500
    checkpoint_at: tuple = ()  # extra checkpoint iterations

    def __post_init__(self):
        for name in ("minibatch", "batch_N", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "checkpoint_at", tuple(int(i) for i in self.checkpoint_at))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(opt, params, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; a non-finite gradient skips the step."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.theta.shape or opt.m.shape != grad.shape:
        raise ValueError("gradient, moments and parameters must have the same length")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient at optimizer step %d; update skipped", opt.step + 1)
        return OptimizerState(opt.m, opt.v, opt.step, opt.skipped + 1), params
    step = opt.step + 1
    m = beta1 * opt.m + (1.0 - beta1) * grad
    v = beta2 * opt.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimizerState(m, v, step, opt.skipped), params.replace(theta)


def loss_and_grad(params, spec, cfg, step_index):
    """Minibatch-mean trajectory loss and its adjoint gradient.

    Probes and the shared convolution batch are drawn from seeds derived from
    ``(cfg.seed, step_index)``. Returns ``(loss, grad, clamp_events)``.
    """
    probes = sample_probes(spec, cfg.minibatch, cfg.seed, stream=step_index)
    s0 = initial_state(spec, probes, cfg.batch_N, cfg.seed, scores=spec.needs_scores, stream=step_index)
    try:
        traj = integrate_forward(params, spec, s0, cfg.steps)
    except PropagationError as exc:
        raise TrainingError(f"iteration {step_index}: {exc}") from exc
    grad = gradient(params, spec, traj)
    if not np.isfinite(traj.loss):
        raise TrainingError(f"iteration {step_index}: non-finite loss")
    return traj.loss, grad, traj.clamp_events


@dataclass
class ExperimentReport:
    config: dict = field(default_factory=dict)
    method: str = "einn"
    problem: str = ""
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    clamp_events: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)  # one dict per checkpoint
    checkpoints: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    skipped_steps: int = 0
    summary: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def write(self, path):
        _atomic_write(path, self.to_json())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def write_training_log(report, path):
    rows = ["iteration,loss,grad_norm,wall_ms,clamp_events"]
    for i, row in enumerate(zip(report.loss, report.grad_norm, report.wall_ms, report.clamp_events)):
        rows.append("%d,%r,%r,%r,%d" % (i, *row))
    _atomic_write(path, "\n".join(rows) + "\n")


def versions():
    import jax

    from . import __version__

    return {"einn": __version__, "jax": jax.__version__, "numpy": np.__version__}


def train(
    spec,
    cfg,
    params: Optional[NetParams] = None,
    out_dir=None,
    evaluate: Optional[Callable] = None,
    eval_every: int = 0,
    step_fn: Optional[Callable] = None,
    method: str = "einn",
):
    """Adam on ``step_fn(params, spec, cfg, i) -> (loss, grad, clamp_events)``.

    ``evaluate(params, iteration)`` is called at every checkpoint (and every
    ``eval_every`` iterations when set); its dicts are kept in the report.
    """
    step_fn = step_fn or loss_and_grad
    if params is None:
        params = init_params(mlp_arch(spec.d, cfg.hidden), cfg.seed)
    report = ExperimentReport(
        config=dict(asdict(cfg), hidden=list(cfg.hidden), checkpoint_at=list(cfg.checkpoint_at)), method=method, problem=spec.reference.name,
        seeds={"train": cfg.seed}, versions=versions(),
    )
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    def checkpoint(it):
        if ckpt_dir is not None:
            path = os.path.join(ckpt_dir, f"{method}_{it:06d}.ckpt")
            save_checkpoint(params, path)
            report.checkpoints.append(os.path.relpath(path, out_dir))
        if evaluate is not None:
            ev = dict(evaluate(params, it))
            ev["iteration"] = it
            ev["train_loss"] = _smoothed(report.loss, it)
            report.evaluations.append(ev)

    opt = OptimizerState.zeros(params.theta.size)
    start = time.perf_counter()
    checkpoint(0)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        loss, grad, n_clamp = step_fn(params, spec, cfg, it)
        opt, params = adam_step(opt, params, grad, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        report.loss.append(float(loss))
        report.grad_norm.append(float(np.linalg.norm(grad)))
        report.wall_ms.append(1e3 * (time.perf_counter() - t0))
        report.clamp_events.append(int(n_clamp))
        done = it + 1
        if (done % cfg.checkpoint_every == 0 or done == cfg.iterations or done in cfg.checkpoint_at
                or (eval_every and done % eval_every == 0)):
            checkpoint(done)
        if done % 100 == 0:
            log.info("%s iteration %d loss %.4e", method, done, np.mean(report.loss[-100:]))
    report.skipped_steps = opt.skipped
    report.wall_clock_s = time.perf_counter() - start
    return params, report


def _smoothed(losses, it, window=100):
    """Mean of the last ``window`` recorded losses before iteration ``it``."""
    if it == 0 or not losses:
        return None
    chunk = losses[max(0, it - window) : it]
    return float(np.mean(chunk))


def smoothed_curve(losses, window=100):
    x = np.asarray(losses, dtype=np.float64)
    if x.size < window:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window
