"""Evaluate stored TTC agents on every scenario and summarize the paired comparison.

    python scripts/evaluate_ttc.py --weights artifacts/ttc --out runs/eval_ttc
"""

import argparse
import json
import sys
from pathlib import Path

from fdi_workbench.cli import main

ROOT = Path(__file__).resolve().parents[1]


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "ttc.toml"))
    p.add_argument("--weights", default=str(ROOT / "artifacts" / "ttc"))
    p.add_argument("--out", default=str(ROOT / "runs" / "eval_ttc"))
    p.add_argument("--seeds", type=int, default=100)
    return p.parse_args()


if __name__ == "__main__":
    a = parse()
    code = main(["evaluate", "--config", a.config, "--weights", a.weights, "--out", a.out,
                 "--seeds", str(a.seeds)])
    if code:
        sys.exit(code)
    code = main(["report", "--traces", str(Path(a.out) / "traces")])
    report = json.loads((Path(a.out) / "report.json").read_text())
    print(json.dumps(report.get("paired", {}), indent=2))
    sys.exit(code)
