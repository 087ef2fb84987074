"""Bank size and macro metrics as the admission threshold eta varies.

    python3 scripts/sweep_eta.py --etas 0.3,0.7,0.8,0.9,0.95,1.0
"""

import argparse
import logging
import sys

from ememndt.evaluation import eta_table_text, sweep_eta
from ememndt.pipeline import desk_scale_config, fit_encoder, grow_tree, make_data


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--etas", default="0.3,0.7,0.8,0.9,0.95,1.0")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)

    cfg = desk_scale_config(args.seed)
    _, train, test = make_data(cfg)
    encoder = fit_encoder(train, cfg)
    tree = grow_tree(train.taxonomy, cfg)
    etas = [float(e) for e in args.etas.split(",")]
    rows = sweep_eta(train, test, encoder, tree, etas, cfg.ndt, cfg.policy, cfg.rho)
    print(f"{len(train)} training instances")
    print(eta_table_text(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
