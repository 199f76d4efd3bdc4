"""Command-line entry point: ``selfobf <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 ``report --check`` failure.
"""

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import tomli
from threadpoolctl import threadpool_limits

from . import harness
from .dataset import DatasetManifest, generate_corpus, poison_dataset, split_view
from .exceptions import ConfigError, SelfObfError, StageError
from .metrics import evaluate
from .srnet import SuperResolutionNet, load_checkpoint, save_checkpoint
from .trigger import TriggerRegistry

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("selfobf")


def _load_config(args):
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg):
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_gen_corpus(args):
    cfg = _load_config(args)
    if args.out:
        m = generate_corpus(cfg.scene, cfg.n_train, cfg.n_val, cfg.scale, args.out)
    else:
        m = harness.ensure_corpus(cfg, args.cache_dir or Path(cfg.output_dir) / "cache")
    print(m.root / "manifest.json")


def cmd_poison(args):
    cfg = _load_config(args)
    if cfg.poison is None:
        raise ConfigError("config has no [poison] section")
    out = _out(args, cfg)
    m = poison_dataset(DatasetManifest.load_file(args.manifest), cfg.poison, TriggerRegistry(),
                       out / f"poison-{cfg.hash()}")
    path = out / f"manifest-{cfg.hash()}.json"
    m.save(path)
    print(path)


def cmd_train(args):
    cfg = _load_config(args)
    x, y = DatasetManifest.load_file(args.manifest).arrays("train")
    with threadpool_limits(1) if args.deterministic else nullcontext():
        est = cfg.estimator().fit(x, y)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"model-{cfg.hash()}.srck"
    save_checkpoint(est.model_, path)
    print(path)


def cmd_eval(args):
    cfg = _load_config(args)
    corpus = DatasetManifest.load_file(args.manifest)
    model = load_checkpoint(args.model)
    est = SuperResolutionNet.from_model(model)
    t = cfg.target_class
    trigger = None
    if args.triggers and cfg.poison is not None and cfg.eval["triggered"]:
        shape = corpus.load(corpus.pairs[0]).x_lr.shape
        trigger = TriggerRegistry.load(args.triggers).pattern(t, shape)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    for split in cfg.splits:
        pairs = split_view(corpus, split)
        evaluate(est, pairs, label="clean").to_csv(out / f"clean-{split}-{h}.csv")
        if t is not None:
            target_pairs = [p for p in pairs if t in p.masks]
            rep = evaluate(est, target_pairs, trigger=trigger,
                           obfuscation=cfg.poison.obfuscation if trigger else None,
                           target_class=t, label=cfg.label())
            rep.to_csv(out / f"report-{split}-{h}.csv")
        print(out / f"report-{split}-{h}.csv")


def cmd_run(args):
    cfg = _load_config(args)
    res = harness.run_experiment(cfg, _out(args, cfg), args.cache_dir, args.deterministic)
    print(res.run_dir)


def cmd_grid(args):
    try:
        raw = tomli.loads(Path(args.config).read_text())
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {args.config}: {exc}") from exc
    configs = harness.expand_grid(raw)
    if args.seed is not None:
        configs = [c.with_seed(args.seed) for c in configs]
    out = Path(args.out) if args.out else Path(configs[0].output_dir)
    for run_dir in harness.run_grid(configs, out, args.cache_dir, args.deterministic, args.jobs):
        print(run_dir)


def cmd_report(args):
    columns, table = harness.comparison_table(args.runs)
    if args.out:
        harness.write_table(columns, table, args.out)
    else:
        for row in table:
            print(row["config"], {k: row.get(k) for k in columns[1:]})
    if args.check:
        results = harness.check_runs(args.runs)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        if not all(ok for _, ok, _ in results):
            return EXIT_CHECK
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="selfobf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True, help="experiment TOML file")
            p.add_argument("--seed", type=int, help="override the training and poisoning seeds")
            p.add_argument("--deterministic", action="store_true",
                           help="single-threaded numerics for bit-identical artifacts")
            p.add_argument("--cache-dir", help="corpus cache (default <out>/cache)")
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-corpus", cmd_gen_corpus, "render the synthetic corpus")
    add("poison", cmd_poison, "poison a corpus").add_argument("--manifest", required=True)
    add("train", cmd_train, "train a model on a manifest").add_argument("--manifest", required=True)
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--manifest", required=True, help="clean corpus manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--triggers", help="trigger registry JSON for triggered evaluation")
    add("run", cmd_run, "run one experiment end to end")
    add("grid", cmd_grid, "run every point of a [grid] table").add_argument(
        "--jobs", type=int, default=1)
    p = add("report", cmd_report, "merge run directories into a comparison table", config=False)
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--check", action="store_true", help="exit 4 if a directional check fails")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except SelfObfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
