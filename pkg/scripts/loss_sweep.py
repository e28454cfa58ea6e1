#!/usr/bin/env python3
"""Goodput and delivery integrity of a two-subflow transfer as random loss grows.

    python scripts/loss_sweep.py --trials 5 --rates 0 0.01 0.02 0.05
"""

import argparse
import statistics

from mptcpsim.scenario import builtin, run_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.01, 0.02, 0.05])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--bytes", type=int, default=500_000)
    ap.add_argument("--mode", default="mptcp", choices=["mptcp", "tcp"])
    args = ap.parse_args()

    print(f"{'loss':>6} {'goodput kb/s':>13} {'retx':>6} {'timeouts':>9} {'intact':>7}")
    for rate in args.rates:
        goodputs, retx, tos, intact = [], [], [], 0
        for seed in range(args.trials):
            cfg = builtin("fig1b")
            cfg.mode, cfg.seed, cfg.sim_duration = args.mode, seed, 600.0
            for link in cfg.links:
                link.loss_rate = rate
            cfg.transfers[0].duration, cfg.transfers[0].bytes = None, args.bytes
            t = run_scenario(cfg).summary["transfers"][0]
            if t["completed"]:
                goodputs.append(t["bytes_delivered"] * 8 / t["completion_time"] / 1e3)
            retx.append(t["retransmissions"])
            tos.append(t["timeouts"])
            intact += t["completed"] and t["integrity_ok"]
        gp = statistics.mean(goodputs) if goodputs else float("nan")
        print(f"{rate:6.3f} {gp:13.1f} {statistics.mean(retx):6.1f} {statistics.mean(tos):9.1f} "
              f"{intact:>3}/{args.trials}")


if __name__ == "__main__":
    main()
