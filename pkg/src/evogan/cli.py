"""Command-line front end.

Subcommands: gen-data (synthetic dataset bundle), search (warm-up plus the
two evolution stages), train-eval (final GAN, synthesis, classifiers,
metrics), export-arch (genome JSON to DOT + report).  Exit codes: 0 success,
1 runtime/numeric failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import evolution, report, zsl
from .errors import FormatError, NumericError, ParameterError
from .genome import (
    Genome,
    SearchSpace,
    discriminator_space,
    export_arch,
    fixed_clswgan_discriminator,
    fixed_clswgan_generator,
    genome_from_json,
    genome_hash,
    genome_to_json,
    generator_space,
    load_genome,
    save_genome,
)
from .numerics import DROPOUT_RATE_DEFAULT, LEAKY_SLOPE_DEFAULT, OptimHyper, make_rng
from .supernet import init_supernet, load_stores, save_stores
from .wgan import CriticConfig

THREADS_ENV = "EVOGAN_NUM_THREADS"


# ---------------------------------------------------------------------------
# run configuration


_CONFIG_DEFAULTS = {
    "seed": 0,
    "out_dir": "run_out",
    "batch_size": 64,
    "dataset": {
        "path": None,
        "synthetic": {
            "seen": 12, "unseen": 4, "attr_dim": 16, "feature_dim": 32,
            "samples_per_class": 200, "noise_sigma": 0.1, "seed": 0,
        },
    },
    "search": {
        "population_size": 8, "rounds": 10, "epochs_per_round": 1,
        "eval_batches": 8, "lambda_g": 0.1, "lambda_d": 1.5,
        "warmup_epochs": 5, "d_complexity_sign": "paper",
    },
    "critic": {"n_critic": 5, "gp_weight": 10.0},
    "optim": {"learning_rate": 1e-4, "beta1": 0.5, "beta2": 0.999, "epsilon": 1e-8},
    "final_optim": {"learning_rate": 5e-4, "beta1": 0.5, "beta2": 0.999,
                    "epsilon": 1e-8},
    "synth": {"per_class": 300, "cls_loss_weight": 0.01, "final_train_epochs": 100,
              "classifier_epochs": 25, "classifier_lr": 1e-3},
    "node_dims": {"generator": None, "discriminator": None, "noise_dim": None},
    "ops": {"leaky_slope": LEAKY_SLOPE_DEFAULT, "dropout_rate": DROPOUT_RATE_DEFAULT},
}


def _merge_section(defaults: dict, given: dict, path: str) -> dict:
    merged = {}
    for key, default in defaults.items():
        if key in given:
            value = given[key]
            if isinstance(default, dict) and default:
                if not isinstance(value, dict):
                    raise ParameterError(f"config section {path}{key} must be a table")
                merged[key] = _merge_section(default, value, f"{path}{key}.")
            else:
                merged[key] = value
        else:
            merged[key] = json.loads(json.dumps(default))  # deep copy
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ParameterError(f"unknown config key(s) under {path or 'top level'}: "
                             f"{', '.join(unknown)}")
    return merged


class RunConfig:
    """Effective run configuration: file values merged over defaults."""

    def __init__(self, data: dict | None = None):
        self.data = _merge_section(_CONFIG_DEFAULTS, data or {}, "")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise FormatError("config root must be a JSON object")
        return cls(raw)

    def override(self, seed=None, out_dir=None) -> "RunConfig":
        if seed is not None:
            self.data["seed"] = int(seed)
        if out_dir is not None:
            self.data["out_dir"] = str(out_dir)
        return self

    # -- derived objects ---------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def critic_config(self) -> CriticConfig:
        return CriticConfig(**self.data["critic"])

    def optim_hyper(self) -> OptimHyper:
        return OptimHyper(**self.data["optim"])

    def final_optim_hyper(self) -> OptimHyper:
        return OptimHyper(**self.data["final_optim"])

    def search_config(self) -> evolution.SearchConfig:
        s = self.data["search"]
        return evolution.SearchConfig(
            population_size=s["population_size"], rounds=s["rounds"],
            epochs_per_round=s["epochs_per_round"], eval_batches=s["eval_batches"],
            lambda_g=s["lambda_g"], lambda_d=s["lambda_d"],
            warmup_epochs=s["warmup_epochs"],
            d_complexity_sign=s["d_complexity_sign"], seed=self.seed,
            batch_size=int(self.data["batch_size"]),
            critic=self.critic_config(), optim=self.optim_hyper(),
        )

    def synth_config(self) -> zsl.SynthConfig:
        return zsl.SynthConfig(**self.data["synth"])

    def load_data(self) -> zsl.ZslDataset:
        ds_cfg = self.data["dataset"]
        if ds_cfg.get("path"):
            return zsl.load_dataset(ds_cfg["path"])
        return zsl.gen_synthetic(zsl.SyntheticSpec(**ds_cfg["synthetic"]))

    def spaces(self, ds: zsl.ZslDataset) -> tuple[SearchSpace, SearchSpace]:
        nd = self.data["node_dims"]
        ops = self.data["ops"]
        noise_dim = nd.get("noise_dim") or ds.attr_dim
        g_dims = tuple(nd["generator"]) if nd.get("generator") else None
        d_dims = tuple(nd["discriminator"]) if nd.get("discriminator") else None
        kw = {"leaky_slope": ops["leaky_slope"], "dropout_rate": ops["dropout_rate"]}
        return (
            generator_space(ds.attr_dim, noise_dim, ds.feature_dim, g_dims, **kw),
            discriminator_space(ds.attr_dim, ds.feature_dim, d_dims, **kw),
        )

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec = zsl.SyntheticSpec(seen=args.seen, unseen=args.unseen,
                             attr_dim=args.attr_dim, feature_dim=args.feature_dim,
                             samples_per_class=args.per_class,
                             noise_sigma=args.noise_sigma, seed=args.seed)
    ds = zsl.gen_synthetic(spec)
    zsl.save_dataset(ds, args.out)
    print(f"wrote bundle: {args.out} ({ds.n_samples} samples, "
          f"{len(ds.seen_classes)}/{len(ds.unseen_classes)} seen/unseen classes)")
    return 0


_STAGES = ("all", "warmup", "generator", "discriminator")


def cmd_search(args) -> int:
    cfg = (RunConfig.from_file(args.config) if args.config else RunConfig())
    cfg.override(seed=args.seed, out_dir=args.out)
    out = cfg.out_dir
    cfg.echo(out)
    (out / "figures").mkdir(exist_ok=True)

    ds = cfg.load_data()
    g_space, d_space = cfg.spaces(ds)
    scfg = cfg.search_config()
    batcher = ds.train_batcher()
    stage = args.stage

    if stage in ("all", "warmup"):
        rng = make_rng(cfg.seed, "stores")
        g_store = init_supernet(g_space, rng)
        d_store = init_supernet(d_space, rng)
        with report.CsvStepLog(out / "warmup.csv") as log:
            evolution.warmup(g_store, d_store, batcher, scfg.warmup_epochs, scfg,
                             logger=log)
        save_stores(out / "warmup.npz", {"generator": g_store,
                                         "discriminator": d_store})
        print(f"warm-up done ({scfg.warmup_epochs} epochs) -> {out / 'warmup.npz'}")
        if stage == "warmup":
            return 0
        unseen_reads = ds.access_log["test_unseen"]
        assert unseen_reads == 0, "unseen features touched during warm-up"

    if stage in ("all", "generator"):
        stores = load_stores(out / "warmup.npz")
        g_store, d_store = stores["generator"], stores["discriminator"]
        d_bar = fixed_clswgan_discriminator(d_space)
        with report.CsvStepLog(out / "train_generator.csv") as log:
            res = evolution.search_generator(scfg, batcher, g_store, d_store,
                                             d_bar, logger=log)
        _write_stage(out, res, g_space)
        save_stores(out / "supernet.npz", {"generator": g_store,
                                           "discriminator": d_store})
        print(f"generator search done: best {genome_hash(res.best)} "
              f"({res.wall_clock_s:.1f}s)")
        if stage == "generator":
            return 0

    if stage in ("all", "discriminator"):
        stores = load_stores(out / "supernet.npz")
        g_store, d_store = stores["generator"], stores["discriminator"]
        g_star, _ = load_genome(out / "genome_generator.json")
        with report.CsvStepLog(out / "train_discriminator.csv") as log:
            res = evolution.search_discriminator(scfg, batcher, g_store, d_store,
                                                 g_star, logger=log)
        _write_stage(out, res, d_space)
        save_stores(out / "supernet.npz", {"generator": g_store,
                                           "discriminator": d_store})
        print(f"discriminator search done: best {genome_hash(res.best)} "
              f"({res.wall_clock_s:.1f}s)")

    unseen_reads = ds.access_log["test_unseen"]
    assert unseen_reads == 0, "unseen features touched during search"
    return 0


def _write_stage(out: Path, res: evolution.StageResult, space: SearchSpace) -> None:
    arch = export_arch(res.best, space)
    payload = {
        "role": res.role,
        "best_genome": genome_to_json(res.best, space),
        "best_hash": genome_hash(res.best),
        "trajectory": res.trajectory,
        "wall_clock_s": res.wall_clock_s,
        "arch_report": {
            "active_edge_count": arch.active_edge_count,
            "fan_in": arch.fan_in,
            "parameter_count": arch.parameter_count,
        },
    }
    with open(out / f"search_{res.role}.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / f"rounds_{res.role}.json", "w") as fh:
        json.dump(res.rounds_log, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / f"arch_{res.role}.dot", "w") as fh:
        fh.write(arch.dot)
    save_genome(out / f"genome_{res.role}.json", res.best, space)
    report.save_trajectory_figure(res.trajectory, res.role,
                                  out / "figures" / f"fitness_{res.role}.png")
    report.save_training_figure(out / f"train_{res.role}.csv",
                                out / "figures" / f"training_{res.role}.png")


def cmd_train_eval(args) -> int:
    cfg = (RunConfig.from_file(args.config) if args.config else RunConfig())
    cfg.override(seed=args.seed, out_dir=args.out)
    out = cfg.out_dir
    cfg.echo(out)
    (out / "figures").mkdir(exist_ok=True)

    ds = cfg.load_data()
    g_space, d_space = cfg.spaces(ds)
    if args.baseline:
        g_genome = fixed_clswgan_generator(g_space)
        d_genome = fixed_clswgan_discriminator(d_space)
    else:
        if not args.genomes:
            raise ParameterError("need --genomes DIR (search output) or --baseline")
        gdir = Path(args.genomes)
        g_genome, g_space = load_genome(gdir / "genome_generator.json")
        d_genome, d_space = load_genome(gdir / "genome_discriminator.json")

    init_stores = None
    if args.reuse_supernet_weights:
        if not args.genomes:
            raise ParameterError("--reuse-supernet-weights needs --genomes DIR")
        stores = load_stores(Path(args.genomes) / "supernet.npz")
        init_stores = (stores["generator"], stores["discriminator"])

    scfg = cfg.synth_config()
    with report.CsvStepLog(out / "train_final.csv") as log:
        g_net, _d_net = zsl.train_final_gan(
            g_genome, d_genome, ds, scfg, cfg.critic_config(),
            cfg.final_optim_hyper(), g_space, d_space,
            batch_size=int(cfg.data["batch_size"]), seed=cfg.seed,
            init_stores=init_stores, logger=log)

    unseen_reads = ds.access_log["test_unseen"]
    assert unseen_reads == 0, "unseen features touched before evaluation"

    metrics = zsl.zero_shot_metrics(ds, g_net, scfg, seed=cfg.seed).to_json()
    if args.oracle:
        metrics["oracle_czsl"] = zsl.oracle_czsl_accuracy(
            ds, epochs=scfg.classifier_epochs, lr=scfg.classifier_lr, seed=cfg.seed)

    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = report.metrics_table(metrics)
    (out / "metrics.txt").write_text(table)
    report.save_metrics_figure(metrics, out / "figures" / "metrics.png")
    report.save_training_figure(out / "train_final.csv",
                                out / "figures" / "final_training.png")
    print(table, end="")
    return 0


def cmd_export_arch(args) -> int:
    genome, space = load_genome(args.genome)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arch = export_arch(genome, space)
    dot_path = out / f"arch_{space.role}.dot"
    dot_path.write_text(arch.dot)
    with open(out / f"arch_{space.role}.json", "w") as fh:
        json.dump(arch.to_json(space), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {dot_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _limit_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(value))
    except (ImportError, ValueError):
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evogan",
        description="Evolutionary architecture search for conditional "
                    "feature-generating GANs with zero-shot evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset bundle")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--seen", type=int, default=12)
    p.add_argument("--unseen", type=int, default=4)
    p.add_argument("--attr-dim", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("search", help="warm-up + two-stage architecture search")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--stage", choices=_STAGES, default="all",
                   help="run one stage (resuming from earlier checkpoints)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train-eval",
                       help="final GAN training, synthesis, and ZSL metrics")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--genomes", help="search output directory with genome JSONs")
    p.add_argument("--baseline", action="store_true",
                   help="use the stock generator/critic pair")
    p.add_argument("--oracle", action="store_true",
                   help="also report the supervised upper-bound accuracy")
    p.add_argument("--reuse-supernet-weights", action="store_true",
                   help="start the final GAN from the search checkpoint instead "
                        "of a fresh initialization")
    p.set_defaults(func=cmd_train_eval)

    p = sub.add_parser("export-arch", help="genome JSON -> DOT + report JSON")
    p.add_argument("--genome", required=True, help="genome JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_arch)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ParameterError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
