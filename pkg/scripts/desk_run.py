"""End-to-end desk-scale experiment: pre-train a small model on the synthetic
prior, export a few synthetic datasets as a CSV suite, then evaluate the
checkpoint on seeded 80-20 splits.

    python3 scripts/desk_run.py --outdir results/desk --steps 400
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import dataclasses

from priorfit.cli import main as cli_main
from priorfit.config import load_run_config, dump_run_config
from priorfit.data_io import export_csv
from priorfit.prior import generate_dataset, sample_generator


def run(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = load_run_config(args.config)
    steps_budget = args.steps * cfg.train.datasets_per_step
    cfg = dataclasses.replace(
        cfg, train=dataclasses.replace(cfg.train, total_datasets=steps_budget))
    cfg_path = outdir / "run.yaml"
    dump_run_config(cfg, cfg_path)

    rc = cli_main(["pretrain", "--config", str(cfg_path),
                   "--outdir", str(outdir / "run")])
    if rc != 0:
        return rc

    suite = outdir / "suite"
    suite.mkdir(exist_ok=True)
    for i in range(args.suite_size):
        g = sample_generator(cfg.space, 10_000 + i)
        ds = generate_dataset(g, 200, seed=i)
        export_csv(ds, suite / f"synthetic_{i}.csv")

    return cli_main(["evaluate",
                     "--checkpoint", str(outdir / "run" / "checkpoint.npz"),
                     "--suite", str(suite), "--splits", str(args.splits),
                     "--output", str(outdir / "evaluation.ndjson")])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(Path(__file__).resolve()
                                                .parents[1] / "configs" / "desk.yaml"))
    parser.add_argument("--outdir", default="results/desk")
    parser.add_argument("--steps", type=int, default=400)
    parser.add_argument("--suite-size", type=int, default=6)
    parser.add_argument("--splits", type=int, default=5)
    sys.exit(run(parser.parse_args()))
