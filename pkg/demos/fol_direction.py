"""Train the same seed with and without the fairness-oriented loss and compare race metrics.

    python3 demos/fol_direction.py [seed] [steps]
"""

import sys

from fairmoe.data import SynthSpec, from_pairs, split, synthesize
from fairmoe.metrics import format_table
from fairmoe.train import TrainConfig, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400

spec = SynthSpec(n=2000, seed=seed, bias_strength=0.9, label_signal_strength=0.25)
tr, va, te = split(from_pairs(synthesize(spec), spec), [0.7, 0.1, 0.2], seed=0)

reports = []
for lam in (0.0, 1.0):
    cfg = TrainConfig(steps=steps, n_f=8, lambda_dist=1.0, lambda_fol=lam, seed=seed, eval_every=steps // 6)
    _, rep = evaluate(train(cfg, tr, va).best, te, attributes=["race"])
    print(f"lambda_fol={lam}: auc {rep[0].auc:.3f} dpd {rep[0].dpd:.3f} eod {rep[0].eod:.3f}")
    reports += rep
print(format_table(reports, title="race: without FOL (first row) vs with FOL"))
