"""Run an experiment config and print a per-variant summary table.

    python3 scripts/run_ablation.py scripts/configs/default_experiment.json --out runs/default
"""

import argparse
import time

from ovdkit.harness import load_experiment_config, run_experiment

COLS = ("recall_base", "recall_novel", "recall_all", "acc")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", help="directory for report.json / report.csv")
    a = ap.parse_args()

    cfg = load_experiment_config(a.config)
    t0 = time.perf_counter()
    rep = run_experiment(cfg, a.out)
    elapsed = time.perf_counter() - t0

    print(f"{'variant':<18}{'alpha':>6}{'W':>6}" + "".join(f"{c:>14}" for c in COLS))
    for name, s in rep["summary"].items():
        cells = "".join(
            f"{'-':>14}" if s[f'{c}_mean'] is None else f"{s[f'{c}_mean']:>8.3f}+-{s[f'{c}_std']:.2f}"
            for c in COLS)
        print(f"{name:<18}{s['alpha']:>6.2f}{s['W']:>6.2f}{cells}")
    print(f"{cfg.ensemble.n_scenes} scenes in {elapsed:.1f}s")


if __name__ == "__main__":
    main()
