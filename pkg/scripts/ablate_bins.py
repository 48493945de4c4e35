"""Fixed vs adaptive bins on a bimodal synthetic set at several N (reduced-width model)."""
import argparse
from pathlib import Path

from heightformer.ablation import format_table, run_bin_ablation
from heightformer.config import apply_overrides
from heightformer.plots import save_ablation_png
from heightformer.presets import ablation_config

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--n", default="8,32")
parser.add_argument("--steps", type=int, default=600)
parser.add_argument("--seeds", default="0,1,2")
parser.add_argument("--out", default="runs/ablation")
parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
args = parser.parse_args()

cfg = apply_overrides(ablation_config(steps=args.steps), dict(kv.split("=", 1) for kv in args.overrides))
rows = run_bin_ablation(cfg, [int(v) for v in args.n.split(",")], args.out, seeds=[int(v) for v in args.seeds.split(",")])
save_ablation_png(Path(args.out) / "ablation.png", rows)
print(format_table(rows))
