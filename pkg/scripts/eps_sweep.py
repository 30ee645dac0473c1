"""Robust accuracy of the AT-50 and fine-tuned networks over a range of budgets.

Trains one paired run (shared PGD-AT prefix, then each arm) and evaluates every
arm with PGD-10 and FGSM at each epsilon.

Usage: python3 scripts/eps_sweep.py [--seed 0] [--eps 0,0.025,0.05,0.1,0.15,0.2] [--lam 1.0]
"""

import argparse
import dataclasses
import logging

from clat.attacks import AttackConfig
from clat.experiments import DeskSetup, paired_run
from clat.trainer import evaluate


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", default="0,0.025,0.05,0.1,0.15,0.2")
    p.add_argument("--lam", type=float, default=DeskSetup.lam)
    p.add_argument("--arms", default="at,clat")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("clat.trainer").setLevel(logging.WARNING)
    setup = dataclasses.replace(DeskSetup(), lam=args.lam)
    _, test = setup.datasets()
    result = paired_run(setup, args.seed, tuple(args.arms.split(",")), keep_networks=True)
    print("arm,attack,epsilon,clean_acc,adv_acc")
    for name, arm in result.arms.items():
        for eps in (float(e) for e in args.eps.split(",")):
            for method in ("pgd", "fgsm"):
                cfg = AttackConfig(epsilon=eps, alpha=max(eps / 4, 1e-6), steps=10)
                clean, adv = evaluate(arm.net, test, cfg, seed=[args.seed, 1], method=method)
                print(f"{name},{method},{eps},{clean:.4f},{adv:.4f}", flush=True)


if __name__ == "__main__":
    main()
