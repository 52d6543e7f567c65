"""Invariance margin of 0.3 * X_S and sampled violations across noise levels.

    python scripts/region_study.py
"""

import numpy as np

from fdi_workbench.lti import ttc_model
from fdi_workbench.region import Box, is_invariant, monte_carlo_violations, synthesize_region

X_S = Box([-25.0, -30.0], [25.0, 30.0])


def main():
    print("noise_var  depth  margin_0.3  mc_violations_0.3")
    for var in (1e-6, 1e-4, 1e-2, 1e-1, 1.0):
        model = ttc_model(sigma_w=np.eye(2) * var, sigma_v=[[var]])
        region = X_S.scale(0.3)
        cert = is_invariant(model, region, 50, 3.0)
        try:
            depth = f"{synthesize_region(model, X_S, 50, 0.1, 3.0).depth:.1f}"
        except Exception as exc:  # report and keep sweeping
            depth = type(exc).__name__
        mc = monte_carlo_violations(model, region, 50, 3.0, 10_000, seed=0)
        print(f"{var:9.0e}  {depth:>5}  {cert.worst_margin:10.4f}  {mc:17d}")


if __name__ == "__main__":
    main()
