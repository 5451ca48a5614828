"""Time-averaged states from a product initial state and from a Gibbs state.

Runs the ``des-diagnostic`` experiment twice and prints the checks.
Run with ``python3 demos/time_average.py``.
"""
from pathlib import Path

from anharmonic import lab

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "des-diagnostic.json"


def main():
    for initial in ("product", "gibbs"):
        cfg = lab.ExperimentConfig.from_file(CONFIG)
        cfg.out = None
        cfg.params["initial"] = initial
        manifest = lab.run(cfg, write=False)
        print(f"initial state: {initial}")
        for c in manifest.checks:
            print(f"  {'PASS' if c.passed else 'FAIL'}  {c.name}: {c.measured:.4g} (threshold {c.threshold:.4g})")


if __name__ == "__main__":
    main()
