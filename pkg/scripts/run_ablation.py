"""Generate a synthetic flow file and run the variant ablation on it.

    python3 scripts/run_ablation.py --out-dir runs/ablation [--runs 10] [--epochs 20]

Thin wrapper over ``mscmhmst synth`` and ``mscmhmst ablate``.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from mscmhmst.cli import main as cli
from mscmhmst.model import VARIANTS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--variants", default=",".join(v for v in VARIANTS if v != "MSCMHMST"))
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--days", type=int, default=7)
    ap.add_argument("--sensors", type=int, default=2)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, cfg = out / "flows.csv", out / "ablation.cfg"
    cli(["synth", "--out", str(data), "--sensors", str(args.sensors), "--days", str(args.days)])
    cfg.write_text(f"epochs = {args.epochs}\n")
    raise SystemExit(cli(["-v", "ablate", "--config", str(cfg), "--data", str(data),
                          "--variants", args.variants, "--runs", str(args.runs),
                          "--out-dir", str(out), "--jobs", str(args.jobs)]))


if __name__ == "__main__":
    main()
