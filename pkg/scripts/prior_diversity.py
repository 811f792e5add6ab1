"""Compare the data distribution of ordinary generators against adversarial
agents driven by a (fresh or checkpointed) model.

    python3 scripts/prior_diversity.py --datasets 500 --checkpoint run/checkpoint.npz
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from priorfit.cli import main as cli_main


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(Path(__file__).resolve()
                                                .parents[1] / "configs" / "desk.yaml"))
    parser.add_argument("--datasets", type=int, default=500)
    parser.add_argument("--rows", type=int, default=50)
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--output", default="results/prior-analysis")
    args = parser.parse_args()
    argv = ["analyze-prior", "--config", args.config,
            "--datasets", str(args.datasets), "--rows", str(args.rows),
            "--output", args.output]
    if args.checkpoint:
        argv += ["--checkpoint", args.checkpoint]
    sys.exit(cli_main(argv))
