"""Trainable-parameter breakdown of the full-width model at several bin counts."""
import argparse

from heightformer.config import DecoderConfig, EncoderConfig
from heightformer.model import HeightFormer, count_parameters

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--n", default="1,8,32,64")
parser.add_argument("--depth", type=int, default=2)
args = parser.parse_args()

for n in (int(v) for v in args.n.split(",")):
    total, parts = count_parameters(HeightFormer(EncoderConfig(n_bins=n), DecoderConfig(n_bins=n)), args.depth)
    print(f"N={n}: {total:,} parameters")
    for name, count in parts.items():
        print(f"  {name:<40}{count:>14,}")
