"""Component ablation on the standard synthetic corpus.

Trains one LOSO decoder per fold and alignment variant, streams every preset
over each held-out subject, and prints mean accuracy per preset.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out results/ablation.csv
"""

import argparse
import time

from streamtta import harness
from streamtta.adaptation import AdaptConfig
from streamtta.synth_data import GeneratorSpec, generate_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--presets", nargs="+", default=list(harness.PRESET_NAMES))
    parser.add_argument("--eta", type=float, default=AdaptConfig.eta)
    parser.add_argument("--epochs", type=int, default=harness.TrainConfig.epochs)
    parser.add_argument("--out", help="aggregate CSV path")
    args = parser.parse_args()

    start = time.perf_counter()
    records = []
    for seed in args.seeds:
        corpus = generate_corpus(GeneratorSpec(seed=seed))
        tcfg = harness.TrainConfig(epochs=args.epochs, seed=seed)
        recs = harness.run_ablation_grid(corpus, args.presets, tcfg, AdaptConfig(eta=args.eta), seed)
        records.extend(recs)
        print(f"seed {seed}: " + ", ".join(f"{k} {100 * v:.2f}" for k, v in harness.mean_accuracy(recs).items()))

    print(f"\nmean over {len(args.seeds)} seeds ({time.perf_counter() - start:.0f}s)")
    for preset, acc in harness.mean_accuracy(records).items():
        print(f"  {preset:<10} {100 * acc:6.2f}")
    if args.out:
        print(harness.write_aggregate_csv(records, args.out))


if __name__ == "__main__":
    main()
