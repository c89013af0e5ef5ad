"""Accuracy of the full method as the BN and/or loss update granularity grows.

``--components`` picks which updates are batched; the other stays per trial.

    python scripts/run_batch_sensitivity.py --batch-sizes 1 2 4 6 8 --components loss bn
"""

import argparse

from streamtta import harness
from streamtta.synth_data import GeneratorSpec, generate_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 2, 4, 8])
    parser.add_argument("--components", nargs="+", choices=["loss", "bn"], default=["loss", "bn"])
    parser.add_argument("--out", help="aggregate CSV path")
    args = parser.parse_args()

    records = []
    for seed in args.seeds:
        corpus = generate_corpus(GeneratorSpec(seed=seed))
        tcfg = harness.TrainConfig(seed=seed)
        records.extend(harness.run_batch_grid(corpus, args.batch_sizes, tcfg, components=args.components, seed=seed))

    means = harness.mean_accuracy(records)
    for name, acc in means.items():
        print(f"{name:<10} {100 * acc:6.2f}")
    print(f"spread     {100 * (max(means.values()) - min(means.values())):6.2f} points")
    if args.out:
        print(harness.write_aggregate_csv(records, args.out))


if __name__ == "__main__":
    main()
