"""Command line harness: ``einn run <config>``, ``einn compare <reports>``, ``einn gradcheck``."""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .drvn import drift_field, drvn_step_fn
from .dynamics import make_problem
from .kernels import COULOMB, ZERO
from .metrics import (
    KL_ESCAPE_PENALTY, error_curve, field_error_curve, kl_curve, modulated_energy, self_consistency,
    time_averaged_error,
)
from .net import AnalyticField, _atomic_write, save_checkpoint
from .training import ExperimentReport, TrainConfig, train, versions, write_training_log

log = logging.getLogger("einn")


def build_problem(cfg):
    kw = {k: getattr(cfg, k) for k in ("nu", "t0") if getattr(cfg, k) is not None}
    try:
        return make_problem(cfg.problem, T=cfg.T, clamp_eps=cfg.clamp_eps, **kw)
    except TypeError as exc:
        bad = next((k for k in kw if k in str(exc)), "problem")
        raise cfgmod.ConfigError(bad, f"not a parameter of {cfg.problem}") from None
    except ValueError as exc:
        raise cfgmod.ConfigError("problem", str(exc)) from None


def train_config(cfg):
    return TrainConfig(
        iterations=cfg.iterations, minibatch=cfg.minibatch, batch_N=cfg.batch_N, lr=cfg.lr,
        adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2, adam_eps=cfg.adam_eps,
        steps=cfg.steps, seed=cfg.seed, hidden=cfg.hidden, checkpoint_every=cfg.checkpoint_every,
        checkpoint_at=cfg.checkpoint_at,
    )


def eval_times(cfg):
    return np.linspace(0.0, cfg.T, cfg.eval_points)


def evaluate(params, spec, cfg, method):
    """Q(t), KL(t), modulated energy and escape counts at the evaluation times, plus R(f)."""
    times = eval_times(cfg)
    box, grid = cfg.domain_box, cfg.grid_per_axis or None
    curve = kl = None
    if spec.kernel.kind == ZERO:
        pass  # K * rho vanishes, so Q is undefined
    elif method == "drvn":
        # the drift network is itself the model's convolution field
        curve = field_error_curve(drift_field(params), spec, times, box, grid)
    else:
        curve = error_curve(params, spec, times, box, grid, cfg.eval_batch_N, cfg.seed, cfg.eval_steps)
    R = None
    if method != "drvn":
        kl = kl_curve(params, spec, times, cfg.kl_count, cfg.seed, cfg.eval_steps, keep_particles=True)
        R = self_consistency(params, spec, cfg.r_probes, cfg.r_batch_N, cfg.seed, cfg.steps)
    energy = [None] * len(times)
    if kl is not None and cfg.energy_count and spec.kernel.kind == COULOMB:
        energy = []
        for t, x in zip(times, kl.particles):
            a = x[: cfg.energy_count]
            energy.append(modulated_energy(a, spec.reference, t, cfg.energy_count, cfg.seed))
    out = {
        "times": times.tolist(),
        "Q": None if curve is None else curve.values.tolist(),
        "KL": None if kl is None else kl.values.tolist(),
        "escaped": None if kl is None else kl.escaped.tolist(),
        "F": energy,
        "time_averaged_Q": None if curve is None else time_averaged_error(curve),
        "final_Q": None if curve is None else float(curve.values[-1]),
        "sup_KL": None if kl is None else float(np.max(kl.values)),
        "skipped_nodes": None if curve is None else curve.skipped,
        "R": R,
    }
    log.info("evaluation: time-averaged Q %s, final Q %s", _short(out["time_averaged_Q"]), _short(out["final_Q"]))
    return out


def _short(v):
    return "n/a" if v is None else f"{v:.4f}"


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics(report, path):
    rows = ["checkpoint,t,Q,KL,F,escaped_count"]
    for ev in report.evaluations:
        n = len(ev["times"])
        q = ev["Q"] or [None] * n
        kl = ev["KL"] or [None] * n
        esc = ev["escaped"] or [None] * n
        for i in range(n):
            rows.append(",".join([str(ev["iteration"]), _fmt(ev["times"][i]), _fmt(q[i]), _fmt(kl[i]),
                                  _fmt(ev["F"][i]), "" if esc[i] is None else str(int(esc[i]))]))
    _atomic_write(path, "\n".join(rows) + "\n")


def _save_svg(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    _atomic_write(path, buf.getvalue())


def write_plots(report, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    if report.loss:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(report.loss, lw=0.5, alpha=0.5, label="loss")
        w = min(100, len(report.loss))
        sm = np.convolve(report.loss, np.ones(w) / w, mode="valid")
        ax.semilogy(np.arange(w - 1, len(report.loss)), sm, label=f"mean of {w}")
        ax.set_xlabel("iteration")
        ax.legend()
        fig.tight_layout()
        files["loss_plot"] = "loss.svg"
        _save_svg(fig, os.path.join(out_dir, "loss.svg"))
        plt.close(fig)
    for key, name, ylabel in (("Q", "q.svg", "Q(t)"), ("KL", "kl.svg", "KL(t)")):
        evs = [ev for ev in report.evaluations if ev.get(key) is not None]
        if not evs:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for ev in evs:
            ax.plot(ev["times"], ev[key], label=f"it {ev['iteration']}")
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=6)
        fig.tight_layout()
        files[key + "_plot"] = name
        _save_svg(fig, os.path.join(out_dir, name))
        plt.close(fig)
    return files


def run_experiment(cfg):
    """Run one configured experiment; returns the report (also written to disk)."""
    spec = build_problem(cfg)
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "config.txt"), cfg.to_text())
    start = time.perf_counter()

    def ev(params, it):
        return evaluate(params, spec, cfg, cfg.method)

    if cfg.method == "oracle":
        oracle = AnalyticField(spec.reference.velocity_fn(), spec.d, name=f"{cfg.problem} velocity")
        report = ExperimentReport(config={}, method="oracle", problem=cfg.problem,
                                  seeds={"train": cfg.seed}, versions=versions())
        e = ev(oracle, 0)
        e["iteration"] = 0
        report.evaluations.append(e)
    else:
        tcfg = train_config(cfg)
        step_fn = drvn_step_fn if cfg.method == "drvn" else None
        params, report = train(spec, tcfg, out_dir=out_dir, evaluate=ev, step_fn=step_fn, method=cfg.method)
        save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
        report.checkpoints.append("final.ckpt")
    report.config = cfg.as_dict()
    report.config["hidden"] = list(cfg.hidden)
    report.config["checkpoint_at"] = list(cfg.checkpoint_at)
    report.seeds = {"train": cfg.seed, "evaluation": cfg.seed}
    report.wall_clock_s = time.perf_counter() - start
    last = report.evaluations[-1]
    report.summary = {
        "time_averaged_Q": last["time_averaged_Q"], "final_Q": last["final_Q"], "sup_KL": last["sup_KL"],
        "initial_smoothed_loss": float(np.mean(report.loss[:100])) if report.loss else None,
        "final_smoothed_loss": float(np.mean(report.loss[-100:])) if report.loss else None,
        "kl_escape_penalty": KL_ESCAPE_PENALTY,
        "escaped_total": sum(sum(e["escaped"] or []) for e in report.evaluations),
    }
    files = {"config": "config.txt", "metrics": "metrics.csv"}
    write_metrics(report, os.path.join(out_dir, "metrics.csv"))
    if report.loss:
        write_training_log(report, os.path.join(out_dir, "training_log.csv"))
        files["training_log"] = "training_log.csv"
    files.update(write_plots(report, out_dir))
    report.files = files
    report.write(os.path.join(out_dir, "report.json"))
    return report


def config_from_report(report):
    """Re-parse the configuration echoed in a report."""
    d = dict(report.config)
    d["hidden"] = tuple(d["hidden"])
    d["checkpoint_at"] = tuple(d.get("checkpoint_at", ()))
    return cfgmod.ExperimentConfig(**d)


def compare(paths, out_path=None):
    """Side-by-side time-averaged and final-time Q; returns the table text."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two reports")
    reports = [ExperimentReport.read(p) for p in paths]
    problems = {r.problem for r in reports}
    if len(problems) != 1:
        raise ValueError(f"reports are for different problems: {sorted(problems)}")
    rows = ["report,method,problem,iterations,time_averaged_Q,final_Q"]
    for p, r in zip(paths, reports):
        rows.append(f"{p},{r.method},{r.problem},{len(r.loss)},{_fmt(r.summary['time_averaged_Q'])},{_fmt(r.summary['final_Q'])}")
    text = "\n".join(rows) + "\n"
    if out_path:
        _atomic_write(out_path, text)
    return text


def main(argv=None):
    ap = argparse.ArgumentParser(prog="einn", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir")
    c = sub.add_parser("compare", help="tabulate Q for two or more reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="write the table here as well")
    g = sub.add_parser("gradcheck", help="adjoint gradient vs finite differences")
    g.add_argument("--per-family", type=int, default=7)
    g.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.cmd == "run":
        try:
            cfg = cfgmod.load(args.config)
            over = {}
            if args.seed is not None:
                over["seed"] = args.seed
            if args.out_dir is not None:
                over["out_dir"] = args.out_dir
            cfg = cfg.replace(**over) if over else cfg
            build_problem(cfg)
        except cfgmod.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"cannot read config: {exc}", file=sys.stderr)
            return 2
        try:
            report = run_experiment(cfg)
        except Exception as exc:  # runtime failure: report and exit 1
            log.debug("run failed", exc_info=True)
            print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        s = report.summary
        print(f"{cfg.method} on {cfg.problem}: time-averaged Q {_short(s['time_averaged_Q'])}, "
              f"final Q {_short(s['final_Q'])}; report in {os.path.join(cfg.output_dir, 'report.json')}")
        return 0
    if args.cmd == "compare":
        try:
            print(compare(args.reports, args.out), end="")
        except (ValueError, OSError, KeyError) as exc:
            print(f"compare failed: {exc}", file=sys.stderr)
            return 1
        return 0
    if args.cmd == "gradcheck":
        from .gradcheck import TOLERANCE, run_suite

        bench, results, _ = run_suite(args.per_family, args.seed)
        ok = abs(bench - 1.0) <= 1e-6 and all(r.max_rel_error <= TOLERANCE for r in results)
        return 0 if ok else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
