"""Solve Poiseuille flow in the straight channel and print the nodal error.

Run from the repository root: ``python3 demos/poiseuille.py``.
"""
from pathlib import Path

import numpy as np

from flowassim import experiments as ex
from flowassim.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    cfg = load_config(CONFIGS / "poiseuille.toml")
    truth = ex.run_ground_truth(cfg)
    space = truth.space
    exact = space.interpolate_velocity(lambda x, y: (1 - 4 * y ** 2, 0 * x))
    x = space.mesh.vertices[:, 0]
    slope = np.polyfit(x, truth.state.P, 1)[0]
    print(f"{space.n_state} unknowns, {truth.newton_iterations} Newton iterations")
    print(f"max nodal velocity error {np.abs(truth.state.U - exact).max():.2e}")
    print(f"pressure slope {slope:.8f} (exact {-8 * cfg.nu})")


if __name__ == "__main__":
    main()
