"""Train rk2-learn and Euler models on the copy task and report held-out accuracy.

    python scripts/copy_task.py --seeds 0,1,2 --steps 2000
"""

import argparse
import math

from rkblocks.data import gen_copy_task
from rkblocks.model import ModelConfig
from rkblocks.optim import OptimConfig
from rkblocks.train import run_one


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--schemes", default="rk2-learn,euler")
    ap.add_argument("--length", type=int, default=10)
    args = ap.parse_args()

    optim = OptimConfig(max_lr=0.003, warmup_steps=400, label_smoothing=0.0, batch_tokens=1024,
                        total_steps=args.steps, log_every=500, valid_every=500, early_stop_patience=100)
    print("scheme,seed,accuracy,valid_nll")
    for seed in (int(s) for s in args.seeds.split(",")):
        corpus = gen_copy_task(16, args.length, 8000, seed)
        for scheme in args.schemes.split(","):
            cfg = ModelConfig(depth=2, d_model=32, n_heads=4, dropout=0.0, scheme=scheme, vocab_size=16,
                              max_seq_len=2 * args.length + 3, seed=seed)
            run = run_one(cfg, optim, corpus)
            print(f"{scheme},{seed},{run.accuracy:.4f},{math.log(run.valid_ppl):.4f}", flush=True)


if __name__ == "__main__":
    main()
