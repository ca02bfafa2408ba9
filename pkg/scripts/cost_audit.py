"""Parameter and FLOP tables for several dilation sets and input sizes.

    python3 scripts/cost_audit.py
    python3 scripts/cost_audit.py --sizes 180x180 600x400 --json runs/cost.json
"""

import argparse
import json
from pathlib import Path

from lienet.dsconv import dilated_flop_count, dilated_param_count, dsconv_flop_count, dsconv_param_count
from lienet.network import NetworkConfig, config_param_count, net_flop_report

DIA_SETS = ["0+1+2+3+4", "2+3+4", "1+2", "0", "3"]


def size_arg(text):
    h, w = text.lower().split("x")
    return int(h), int(w)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=size_arg, nargs="+", default=[(180, 180), (600, 400)])
    ap.add_argument("--json", type=Path)
    a = ap.parse_args()

    rows = []
    print(f"{'dia_set':<12} {'tie':<12} {'params':>6} " + " ".join(f"{f'{h}x{w} MFLOPs':>16}" for h, w in a.sizes))
    for dias in DIA_SETS:
        for tie in ("mirror_tied", "untied"):
            cfg = NetworkConfig(tuple(int(d) for d in dias.split("+")), tie_mode=tie)
            flops = [net_flop_report(cfg, h, w) for h, w in a.sizes]
            rows.append({"dia_set": dias, "tie_mode": tie, "params": config_param_count(cfg),
                         "flops": {f"{h}x{w}": f["grand_total"] for (h, w), f in zip(a.sizes, flops)},
                         "kernel_flops": {f"{h}x{w}": f["kernel_total"] for (h, w), f in zip(a.sizes, flops)}})
            print(f"{dias:<12} {tie:<12} {rows[-1]['params']:>6} "
                  + " ".join(f"{f['grand_total'] / 1e6:>16.3f}" for f in flops))

    C = 256
    p = dsconv_param_count(C) / dilated_param_count(C)
    f = dsconv_flop_count(C, 1, 1)["total"] / dilated_flop_count(C, 1, 1)
    print(f"\nC={C}: params 1/{1 / p:.2f}, FLOPs 1/{1 / f:.2f} relative to a dense 3x3 dilated conv")
    if a.json:
        a.json.parent.mkdir(parents=True, exist_ok=True)
        a.json.write_text(json.dumps({"networks": rows, "c256": {"param_ratio": p, "flop_ratio": f}}, indent=1) + "\n")


if __name__ == "__main__":
    main()
