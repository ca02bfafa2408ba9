"""Short desk runs over several dilation sets; prints loss ratio and held-out PSNR gain.

    python3 scripts/dia_ablation.py --out runs/ablation --epochs 60
"""

import argparse
import json
from pathlib import Path

from threadpoolctl import threadpool_limits

from desk_experiment import run

DIA_SETS = ["0+1+2+3+4", "2+3+4", "1+2", "0", "3"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--skip-mode", default="literal")
    ap.add_argument("--dia-sets", nargs="+", default=DIA_SETS)
    a = ap.parse_args()
    results = {}
    print(f"{'dia_set':<12} {'loss ratio':>10} {'PSNR gain dB':>12}")
    with threadpool_limits(limits=1):
        for dias in a.dia_sets:
            s = run(a.out / dias.replace("+", "_"), epochs=a.epochs, dia_set=dias, skip_mode=a.skip_mode)
            results[dias] = s
            print(f"{dias:<12} {s['loss_ratio']:>10.4f} {s['psnr_gain_db']:>12.2f}", flush=True)
    (a.out / "ablation.json").write_text(json.dumps(results, indent=1) + "\n")


if __name__ == "__main__":
    main()
