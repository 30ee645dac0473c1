"""Top-k agreement of the criticality ranking across batch sizes.

Pretrains the desk CNN with PGD-AT (or loads a checkpoint), then repeats the
criticality computation on fresh random batches.

Usage: python3 scripts/stability_probe.py [--checkpoint model.cltf] [--epochs 30]
           [--batch-sizes 10,30,50,100] [--trials 50] [--k 1]
"""

import argparse
import logging

from clat.criticality import stability_probe
from clat.data import load_checkpoint
from clat.experiments import DeskSetup
from clat.trainer import run_clat


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int, default=30, help="PGD-AT epochs when no checkpoint is given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-sizes", default="10,30,50,100")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--k", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = DeskSetup()
    train, test = setup.datasets()
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint).net
    else:
        net = setup.network(args.seed)
        run_clat(net, train, setup.train_config(args.seed), stop_at=args.epochs)
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    result = stability_probe(net, test.images, test.labels, sizes, args.trials, args.k,
                             cfg=setup.attack, seed=args.seed)
    print(result.summary())


if __name__ == "__main__":
    main()
