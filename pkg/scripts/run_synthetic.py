"""End-to-end run on the synthetic taxonomy at desk scale.

    python3 scripts/run_synthetic.py --out runs/synthetic --seed 7
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from ememndt.evaluation import evaluate, utilization_report, utilization_text
from ememndt.memory import bank_stats
from ememndt.pipeline import desk_scale_config, load_config, run_pipeline, save_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (default: the desk-scale setting)")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="runs/synthetic")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")

    cfg = load_config(args.config) if args.config else desk_scale_config(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    res = run_pipeline(cfg, out)

    print("tree-based model")
    print(res.report.to_text())
    print("base classifier")
    print(res.base_report.to_text())
    rows, total = bank_stats(res.model.banks)
    print(f"memory banks (eta={cfg.eta}): total {total}")
    for r in rows:
        cos = "-" if r.mean_pairwise_cosine is None else f"{r.mean_pairwise_cosine:.3f}"
        print(f"  {r.label:<22} K={r.K:<3} mean pairwise cosine {cos}")

    # usage counts come from a pass over the test split
    model = res.model
    model.banks.reset_usage()
    evaluate(model, res.encoder, res.test, cfg.policy, track_usage=True)
    print()
    print(utilization_text(utilization_report(model)))
    print("timings (s):", json.dumps({k: round(v, 2) for k, v in res.timings.items()}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
