"""Paired desk-scale runs: PGD-AT 50 vs. PGD-AT 30 + 20 epochs of critical-layer fine-tuning.

Usage: python3 scripts/desk_efficacy.py [--seeds 0,1,2,3,4] [--lam 0.3] [--ce-on-adversarial] [--out results.json]
"""

import argparse
import dataclasses
import json
import logging

from clat.experiments import DeskSetup, efficacy_summary, paired_run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--arms", default="at,clat,fixed")
    p.add_argument("--out")
    p.add_argument("--ce-on-adversarial", action="store_true", help="CE term on the attacked input")
    for f in dataclasses.fields(DeskSetup):
        if isinstance(f.default, (int, float)) and not isinstance(f.default, bool):
            p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("clat.trainer").setLevel(logging.WARNING)
    setup = DeskSetup(**{f.name: getattr(args, f.name) for f in dataclasses.fields(DeskSetup)
                         if hasattr(args, f.name)})
    results = []
    for seed in (int(s) for s in args.seeds.split(",")):
        r = paired_run(setup, seed, tuple(args.arms.split(",")))
        print(r.row(), flush=True)
        results.append(r)
    summary = efficacy_summary(results)
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"setup": dataclasses.asdict(setup), "summary": summary,
                       "runs": [{"seed": r.seed, "prefix": [r.prefix.clean_acc, r.prefix.adv_acc],
                                 **{n: {"clean": a.clean_acc, "adv": a.adv_acc, "sets": a.critical_sets}
                                    for n, a in r.arms.items()}} for r in results]}, fh, indent=2)


if __name__ == "__main__":
    main()
