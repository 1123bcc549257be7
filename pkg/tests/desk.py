"""Cached desk runs for the acceptance suite.

A run is redone whenever the package source or its config changes; otherwise
the report on disk is reused. ``python tests/desk.py`` fills the cache.
"""

import glob
import hashlib
import os
import sys

from einn import config as cfgmod
from einn.cli import run_experiment
from einn.training import ExperimentReport

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE = os.environ.get("EINN_ACCEPTANCE_DIR", os.path.join(ROOT, "runs", "acceptance"))
DESK = ("lamb_oseen_einn", "lamb_oseen_drvn", "barenblatt_einn")


def source_digest(cfg_text):
    h = hashlib.sha256(cfg_text.encode())
    for path in sorted(glob.glob(os.path.join(ROOT, "src", "einn", "*.py"))):
        with open(path, "rb") as fh:
            h.update(os.path.basename(path).encode() + fh.read())
    return h.hexdigest()


def desk_run(name):
    """Report for ``configs/<name>.cfg``, running it if the cache is stale."""
    cfg = cfgmod.load(os.path.join(ROOT, "configs", name + ".cfg"))
    cfg = cfg.replace(out_dir=os.path.join(CACHE, name))
    digest = source_digest(cfg.to_text())
    stamp = os.path.join(cfg.output_dir, "digest.txt")
    report_path = os.path.join(cfg.output_dir, "report.json")
    if os.path.exists(stamp) and os.path.exists(report_path):
        with open(stamp) as fh:
            if fh.read().strip() == digest:
                return ExperimentReport.read(report_path), cfg
    report = run_experiment(cfg)
    with open(stamp, "w") as fh:
        fh.write(digest + "\n")
    return report, cfg


if __name__ == "__main__":
    import logging

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in sys.argv[1:] or DESK:
        report, _ = desk_run(name)
        print(name, report.summary, flush=True)
