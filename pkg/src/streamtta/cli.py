"""Command-line driver: generate | train | adapt | ablate | sweep-lambda.

Runs are described by an INI config file; command-line flags override it.
Exit codes: 0 success, 2 configuration error, 3 I/O error.

Presets (``--preset``), as (EA, BN update, loss update):
  baseline (off, off, off)   ea_only (on, off, off)   bn_only (off, on, off)
  loss_only (off, off, on)   ea_bn (on, on, off)      ea_loss (on, off, on)
  bn_loss (off, on, on)      full (on, on, on)
  adabn (off, on, off)       tent (off, on, on) with lambda=0 and BN-affine-only updates
"""

import argparse
import configparser
import dataclasses
import sys
from pathlib import Path

from . import harness
from .adaptation import AdaptConfig
from .checkpoint import load_session, save_session
from .errors import FormatError
from .synth_data import MANIFEST_NAME, GeneratorSpec, generate_corpus, read_corpus, write_corpus

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class ConfigError(Exception):
    pass


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "paths": {"corpus_dir": str, "checkpoint_dir": str, "metrics_dir": str},
    "generate": {
        "n_subjects": int, "n_trials_per_subject": int, "channels": int, "samples": int,
        "classes": int, "subject_shift_strength": float, "class_separation": float,
        "noise_level": float, "seed": int,
    },
    "train": {
        "epochs": int, "batch_size": int, "lr": float, "momentum": float, "hidden": int,
        "eps": float, "held_out": _ints,
    },
    "adapt": {
        "preset": str, "eta": float, "alpha": float, "omega": float, "lambda": float,
        "eps": float, "update_mask": str, "bn_forward_mode": str, "loss_batch": int,
        "bn_batch": int, "enable_ea": _bool, "enable_bn_update": _bool,
        "enable_loss_update": _bool,
    },
    "sweep": {"lambda_start": float, "lambda_stop": float, "lambda_step": float},
    "run": {"seeds": _ints},
}

DEFAULT_PATHS = {"corpus_dir": "corpus", "checkpoint_dir": "checkpoints", "metrics_dir": "metrics"}


@dataclasses.dataclass
class RunConfig:
    command: str
    raw: configparser.ConfigParser
    paths: dict
    generator: GeneratorSpec
    train: harness.TrainConfig
    held_out: list
    adapt: AdaptConfig
    preset: str
    seeds: list
    lambdas: list


def _parse_section(parser, section):
    out = {}
    if not parser.has_section(section):
        return out
    for key, text in parser.items(section):
        try:
            out[key] = SCHEMA[section][key](text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return out


def load_run_config(args):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if args.config:
        try:
            with open(args.config) as fh:
                parser.read_file(fh)
        except OSError:
            raise
        except configparser.Error as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - set(SCHEMA[section])
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    # flags win over the file; write them back so the echo replays exactly
    def put(section, key, value):
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = str(value)

    if args.seed:
        if args.command == "generate":
            if len(args.seed) != 1:
                raise ConfigError("generate takes a single --seed")
            put("generate", "seed", args.seed[0])
        else:
            put("run", "seeds", ", ".join(str(s) for s in args.seed))
    if getattr(args, "preset", None):
        put("adapt", "preset", args.preset)
    if getattr(args, "lambda_", None) is not None:
        put("adapt", "lambda", args.lambda_)
    if getattr(args, "eta", None) is not None:
        put("adapt", "eta", args.eta)
    if args.out:
        key = {"generate": "corpus_dir", "train": "checkpoint_dir"}.get(args.command, "metrics_dir")
        put("paths", key, args.out)

    paths = {**DEFAULT_PATHS, **_parse_section(parser, "paths")}
    gen = _parse_section(parser, "generate")
    train = _parse_section(parser, "train")
    held_out = train.pop("held_out", None)
    adapt = _parse_section(parser, "adapt")
    preset = adapt.pop("preset", "full")
    if "lambda" in adapt:
        adapt["lambda_"] = adapt.pop("lambda")
    seeds = _parse_section(parser, "run").get("seeds", [0])
    sweep = _parse_section(parser, "sweep")
    if preset not in harness.PRESET_NAMES:
        raise ConfigError(f"[adapt] preset: unknown preset {preset!r}")
    if not seeds:
        raise ConfigError("[run] seeds: seed list is empty")
    try:
        generator = GeneratorSpec(**gen)
        tcfg = harness.TrainConfig(**train)
        # the preset decides the component flags; explicit keys refine it
        flag_keys = {"enable_ea", "enable_bn_update", "enable_loss_update"}
        base = harness.apply_preset(preset, AdaptConfig(**{k: v for k, v in adapt.items() if k not in flag_keys}))
        acfg = base.replace(**{k: v for k, v in adapt.items() if k in flag_keys})
        lambdas = harness.lambda_grid(
            sweep.get("lambda_start", 0.1), sweep.get("lambda_stop", 1.9), sweep.get("lambda_step", 0.1)
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(args.command, parser, paths, generator, tcfg, held_out, acfg, preset, seeds, lambdas)


def write_echo(run, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{run.command}.config.ini"
    with open(path, "w") as fh:
        run.raw.write(fh)
    return path


def _manifest(run):
    path = Path(run.paths["corpus_dir"]) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"corpus manifest not found: {path}")
    return path


def _held_out(run, corpus):
    ids = [s.subject_id for s in corpus]
    chosen = run.held_out if run.held_out is not None else ids
    missing = set(chosen) - set(ids)
    if missing:
        raise ConfigError(f"[train] held_out: unknown subject(s) {sorted(missing)}")
    return chosen


def checkpoint_name(subject, seed, aligned):
    return f"fold-s{subject:03d}-seed{seed}-{'ea' if aligned else 'raw'}.ckpt"


def cmd_generate(run):
    corpus = generate_corpus(run.generator)
    manifest = write_corpus(corpus, run.paths["corpus_dir"], run.generator)
    write_echo(run, run.paths["corpus_dir"])
    print(manifest)
    return manifest


def cmd_train(run):
    corpus = read_corpus(_manifest(run))
    out_dir = Path(run.paths["checkpoint_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in run.seeds:
        tcfg = dataclasses.replace(run.train, seed=seed)
        for subject in _held_out(run, corpus):
            split = harness.loso_split(corpus, subject)
            for aligned in (True, False):
                trained = harness.train_offline(split, corpus, tcfg, use_ea=aligned, omega=run.adapt.omega)
                path = save_session(out_dir / checkpoint_name(subject, seed, aligned), trained, run.adapt)
                paths.append(path)
                print(f"{path}\ta_val={trained.a_val!r}")
    write_echo(run, out_dir)
    return paths


def cmd_adapt(run):
    corpus = read_corpus(_manifest(run))
    by_id = {s.subject_id: s for s in corpus}
    out_dir = Path(run.paths["metrics_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in run.seeds:
        for subject in _held_out(run, corpus):
            ckpt = Path(run.paths["checkpoint_dir"]) / checkpoint_name(subject, seed, run.adapt.enable_ea)
            if not ckpt.is_file():
                raise FileNotFoundError(f"checkpoint not found: {ckpt} (run `train` first)")
            trained, _ = load_session(ckpt)
            record = harness.run_online_session(trained, by_id[subject], run.adapt)
            record.preset, record.seed = run.preset, seed
            path = harness.write_session_csv(record, out_dir / f"{run.preset}-s{subject:03d}-seed{seed}.csv")
            print(path)
            records.append(record)
    aggregate = harness.write_aggregate_csv(records, out_dir / f"{run.preset}-aggregate.csv")
    write_echo(run, out_dir)
    print(aggregate)
    return aggregate


def _run_grid_command(run, grid_fn, name):
    corpus = read_corpus(_manifest(run))
    out_dir = Path(run.paths["metrics_dir"])
    session_dir = out_dir / f"{name}-sessions"
    session_dir.mkdir(parents=True, exist_ok=True)
    held = set(_held_out(run, corpus))
    records = []
    for seed in run.seeds:
        tcfg = dataclasses.replace(run.train, seed=seed)
        for record in grid_fn(corpus, tcfg, seed):
            if record.subject in held:
                records.append(record)
    for r in records:
        label = r.preset.replace("=", "")
        harness.write_session_csv(r, session_dir / f"{label}-s{r.subject:03d}-seed{r.seed}.csv")
    aggregate = harness.write_aggregate_csv(records, out_dir / f"{name}.csv")
    write_echo(run, out_dir)
    for preset, acc in harness.mean_accuracy(records).items():
        print(f"{preset}\t{acc:.4f}")
    print(aggregate)
    return aggregate


def cmd_ablate(run):
    return _run_grid_command(
        run,
        lambda corpus, tcfg, seed: harness.run_ablation_grid(corpus, harness.PRESET_NAMES, tcfg, run.adapt, seed),
        "ablation",
    )


def cmd_sweep_lambda(run):
    return _run_grid_command(
        run,
        lambda corpus, tcfg, seed: harness.run_lambda_sweep(corpus, run.lambdas, tcfg, run.adapt, seed),
        "lambda_sweep",
    )


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="streamtta", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
        p.add_argument("--out", help="output directory")
        if name in ("adapt", "ablate", "sweep-lambda"):
            p.add_argument("--preset", help="adaptation preset")
            p.add_argument("--lambda", dest="lambda_", type=float, help="entropy/CE extrapolation weight")
            p.add_argument("--eta", type=float, help="online learning rate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = load_run_config(args)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
