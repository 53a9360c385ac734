"""Synthesize a small biased dataset, train Fair-MoE briefly and print the metric table.

    python3 demos/quickstart.py [steps]
"""

import sys

from fairmoe.data import SynthSpec, from_pairs, split, synthesize
from fairmoe.metrics import format_table
from fairmoe.train import TrainConfig, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60

spec = SynthSpec(n=400, seed=0, bias_strength=0.9)
tr, va, te = split(from_pairs(synthesize(spec), spec), [0.7, 0.1, 0.2], seed=0)

cfg = TrainConfig(steps=steps, n_f=8, eval_every=max(steps // 4, 1), seed=0)


def show(rec):
    if rec["step"] % 10 == 0:
        print(f"step {rec['step']:4d}  contrastive {rec['contrastive']:.4f}  total {rec['total']:.4f}")


res = train(cfg, tr, va, on_step=show)

_, reports = evaluate(res.best, te, attributes=["race", "gender", "ethnicity", "language"])
print(format_table(reports, title=f"Fair-MoE after {steps} steps (best validation checkpoint)"))
