"""Per-block gradient norms of matched Euler and RK2 stacks during training.

Prints the trace and a paired check over the first half of training: at how
many logged steps the RK model's mean block gradient norm exceeds the Euler
model's under the same seed and initialization. This is a trend report, not a
pass/fail test.

    python scripts/gradnorm_trace.py --depth 6 --steps 300
"""

import argparse

from rkblocks.data import gen_copy_task
from rkblocks.model import ModelConfig, build_model
from rkblocks.optim import OptimConfig
from rkblocks.train import train


def mean_norm(rec):
    return sum(rec.grad_norms) / len(rec.grad_norms)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rk", default="rk2", help="scheme compared against euler")
    args = ap.parse_args()

    corpus = gen_copy_task(16, 6, 2000, args.seed)
    optim = OptimConfig(max_lr=0.002, warmup_steps=100, batch_tokens=512, total_steps=args.steps,
                        log_every=max(1, args.steps // 10), valid_every=args.steps)
    traces = {}
    for scheme in ("euler", args.rk):
        model = build_model(ModelConfig(depth=args.depth, d_model=32, n_heads=4, dropout=0.0, scheme=scheme,
                                        vocab_size=16, max_seq_len=16, seed=args.seed))
        traces[scheme] = train(model, corpus, optim, validate=False)

    print("step,scheme," + ",".join(f"block_{i}" for i in range(args.depth)))
    for scheme, recs in traces.items():
        for r in recs:
            print(f"{r.step},{scheme}," + ",".join(f"{g:.4g}" for g in r.grad_norms))
    pairs = [(eu, rk) for eu, rk in zip(traces["euler"], traces[args.rk]) if eu.step <= args.steps // 2]
    wins = sum(mean_norm(rk) > mean_norm(eu) for eu, rk in pairs)
    print(f"soft: {args.rk} block gradient norm > euler at {wins}/{len(pairs)} early logged steps")


if __name__ == "__main__":
    main()
