"""Validation perplexity of 1- and 2-block character LMs on the built-in Milton corpus.

    python scripts/truncation_study.py --steps 800 --seeds 0,1,2
"""

import argparse

from rkblocks.config import load_config, make_corpus
from rkblocks.train import TRUNCATION_SCHEMES, truncation_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--schemes", default=",".join(s.value for s in TRUNCATION_SCHEMES))
    ap.add_argument("--corpus", default="paradise-lost", help="built-in name or text file")
    args = ap.parse_args()

    exp = load_config(None, {"task": "char", "corpus": args.corpus, "max_seq_len": 64, "d_model": 32,
                             "n_heads": 4, "dropout": 0.0, "max_lr": 0.003, "warmup_steps": 200,
                             "label_smoothing": 0.0, "batch_tokens": 1024, "total_steps": args.steps,
                             "log_every": 400, "valid_every": 400})
    corpus = make_corpus(exp)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = truncation_study(args.schemes.split(","), [1, 2], corpus, exp.model, exp.optim, seeds)
    print("depth,scheme,seed,params,valid_ppl")
    for r in runs:
        print(f"{r.depth},{r.scheme},{r.seed},{r.params},{r.valid_ppl:.4f}")


if __name__ == "__main__":
    main()
