"""Accuracy of the full method across the entropy/cross-entropy weight lambda.

    python scripts/sweep_lambda.py --seeds 0 1 --start 0.1 --stop 1.9 --step 0.1
"""

import argparse

from streamtta import harness
from streamtta.synth_data import GeneratorSpec, generate_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    parser.add_argument("--start", type=float, default=0.1)
    parser.add_argument("--stop", type=float, default=1.9)
    parser.add_argument("--step", type=float, default=0.1)
    parser.add_argument("--out", help="aggregate CSV path")
    args = parser.parse_args()

    lambdas = harness.lambda_grid(args.start, args.stop, args.step)
    records = []
    for seed in args.seeds:
        corpus = generate_corpus(GeneratorSpec(seed=seed))
        records.extend(harness.run_lambda_sweep(corpus, lambdas, harness.TrainConfig(seed=seed), seed=seed))
    for name, acc in harness.mean_accuracy(records).items():
        print(f"{name:<12} {100 * acc:6.2f}")
    if args.out:
        print(harness.write_aggregate_csv(records, args.out))


if __name__ == "__main__":
    main()
