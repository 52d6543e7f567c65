"""Train the three TTC agents with the shipped config and store the weights.

    python scripts/train_ttc.py --out artifacts/ttc [--episodes N] [--seed S]
"""

import argparse
import sys
from pathlib import Path

from fdi_workbench.cli import main

ROOT = Path(__file__).resolve().parents[1]


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "ttc.toml"))
    p.add_argument("--out", default=str(ROOT / "artifacts" / "ttc"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    return p.parse_args()


if __name__ == "__main__":
    a = parse()
    argv = ["train", "--config", a.config, "--out", a.out]
    if a.episodes is not None:
        argv += ["--episodes", str(a.episodes)]
    if a.seed is not None:
        argv += ["--seed", str(a.seed)]
    if a.resume:
        argv.append("--resume")
    sys.exit(main(argv))
