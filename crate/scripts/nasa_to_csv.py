#!/usr/bin/env python3
"""Convert the NASA Ames battery aging files (B0005.mat, B0006.mat, B0007.mat)
into the CSV layout read by `soh`: telemetry.csv, labels.csv and stages.csv.

Only discharge cycles are kept, numbered 1, 2, ... in file order. Each battery
is truncated to --max-cycles discharges so that the three-stage table
(1-30, 31-106, 107-167) covers every exported cycle.

    python3 scripts/nasa_to_csv.py --mat-dir ~/nasa --out data/nasa
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
from scipy.io import loadmat

STAGES = [(1, 1, 30), (2, 31, 106), (3, 107, 167)]


def discharges(path):
    name = path.stem
    cycles = loadmat(path, squeeze_me=True, struct_as_record=False)[name].cycle
    for c in cycles:
        if str(c.type).strip() == "discharge":
            yield c.data


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mat-dir", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--batteries", nargs="+", default=["B0005", "B0006", "B0007"])
    ap.add_argument("--max-cycles", type=int, default=167)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    with open(args.out / "telemetry.csv", "w", newline="") as tf, open(args.out / "labels.csv", "w", newline="") as lf:
        tele = csv.writer(tf)
        labels = csv.writer(lf)
        tele.writerow(["battery_id", "cycle_index", "time_s", "voltage_v", "current_a", "temperature_c"])
        labels.writerow(["battery_id", "cycle_index", "capacity_ah"])
        for battery in args.batteries:
            count = 0
            for data in discharges(args.mat_dir / f"{battery}.mat"):
                if count == args.max_cycles:
                    break
                count += 1
                t = np.atleast_1d(data.Time).astype(float)
                v = np.atleast_1d(data.Voltage_measured).astype(float)
                i = np.atleast_1d(data.Current_measured).astype(float)
                temp = np.atleast_1d(data.Temperature_measured).astype(float)
                # a handful of records repeat a timestamp; keep the first
                keep = np.concatenate([[True], np.diff(t) > 0])
                dropped = int((~keep).sum())
                if dropped:
                    print(f"{battery} cycle {count}: dropped {dropped} non-increasing samples", file=sys.stderr)
                for row in zip(t[keep], v[keep], i[keep], temp[keep]):
                    tele.writerow([battery, count, *(repr(float(x)) for x in row)])
                labels.writerow([battery, count, repr(float(np.atleast_1d(data.Capacity)[0]))])
            if count < args.max_cycles:
                sys.exit(f"{battery}: only {count} discharge cycles, expected {args.max_cycles}")
            print(f"{battery}: {count} discharge cycles", file=sys.stderr)

    with open(args.out / "stages.csv", "w", newline="") as sf:
        w = csv.writer(sf)
        w.writerow(["battery_id", "stage_id", "first_cycle", "last_cycle"])
        for battery in args.batteries:
            for stage, first, last in STAGES:
                w.writerow([battery, stage, first, last])


if __name__ == "__main__":
    main()
