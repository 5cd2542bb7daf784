"""Command-line entry point.

    spade train|eval|bench|ablate|sweep --config <path> [--set k=v ...]
          --out <dir> [--seed <n>]

Config files are UTF-8 key=value INI with [model], [task], [train] and
[bench] sections; every key can be overridden on the command line with
``--set section.key=value``. Exit codes: 0 success, 2 config error,
3 numeric failure, 4 resource failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import bench as B
from . import ssm as S
from .model import ModelConfig, build_model, load_checkpoint
from .tasks import TaskSpec, make_task
from .training import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_RESOURCE = 4


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    variants: str = "full,window,spade_window"
    lengths: str = "512,1024,2048"
    windows: str = "4,8,16"
    placements: str = "bottom-1,all,top-1"
    seeds: str = "0,1,2"
    reps: int = 5
    warmup: int = 2

    def variant_list(self):
        return [v.strip() for v in self.variants.split(",") if v.strip()]

    def length_list(self):
        return [int(x) for x in self.lengths.split(",") if x.strip()]

    def window_list(self):
        return [int(x) for x in self.windows.split(",") if x.strip()]

    def placement_list(self):
        return [p.strip() for p in self.placements.split(",") if p.strip()]

    def seed_list(self):
        return [int(x) for x in self.seeds.split(",") if x.strip()]


@dataclass
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_SECTIONS = {"model": ModelConfig, "task": TaskSpec, "train": TrainConfig,
             "bench": BenchConfig}


def _coerce(cls, key: str, raw: str):
    ftypes = {f.name: f.type for f in fields(cls)}
    if key not in ftypes:
        raise ConfigError(f"unknown key {key!r} in section [{cls.__name__}]")
    ann = str(ftypes[key])
    if "bool" in ann:
        if raw not in ("true", "false", "True", "False", "0", "1"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw in ("true", "True", "1")
    if "int" in ann and "str" not in ann:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if "float" in ann:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if raw == "" or raw == "None":
        return None if "None" in ann else raw
    return raw


def load_run_config(path: str | None, overrides=()) -> RunConfig:
    values = {name: {} for name in _SECTIONS}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                values[section][key] = _coerce(_SECTIONS[section], key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        values[section][key] = _coerce(_SECTIONS[section], key, raw)
    if "vocab_size" not in values["model"]:
        if values["task"].get("kind") == "char_lm":
            values["model"]["vocab_size"] = 256
        elif "vocab_size" in values["task"]:
            values["model"]["vocab_size"] = values["task"]["vocab_size"]
        else:
            raise ConfigError("model.vocab_size is required")
    task_defaults = {"kind": "long_range_recall", "length": 256, "vocab_size": 33}
    task_kwargs = {**task_defaults, **values["task"]}
    try:
        return RunConfig(model=ModelConfig(**values["model"]),
                         task=TaskSpec(**task_kwargs),
                         train=TrainConfig(**values["train"]),
                         bench=BenchConfig(**values["bench"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def dump_run_config(rc: RunConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    for name, obj in (("model", rc.model), ("task", rc.task),
                      ("train", rc.train), ("bench", rc.bench)):
        parser[name] = {k: ("" if v is None else str(v))
                        for k, v in asdict(obj).items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _cmd_train(rc: RunConfig, out: str, seed: int | None) -> int:
    tc = rc.train if seed is None else replace(rc.train, seed=seed)
    model = build_model(rc.model, tc.seed)
    task = make_task(rc.task)
    os.makedirs(out, exist_ok=True)
    records = train(model, task, tc, out_dir=out, checkpoint_every=max(1, tc.eval_interval))
    last = records[-1]
    print(f"final step {last.step}: train_loss={last.train_loss:.4f} "
          f"eval_loss={last.eval_loss:.4f} eval_metric={last.eval_metric:.4f}")
    return EXIT_OK


def _cmd_eval(rc: RunConfig, out: str, args) -> int:
    ckpt = args.checkpoint or os.path.join(out, "checkpoint.spade")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    task = make_task(rc.task)
    loss, metric = evaluate(model, task, rc.train.eval_samples)
    print(f"eval_loss={loss:.6f} {task.metric}={metric:.6f}")
    return EXIT_OK


def _cmd_bench(rc: RunConfig, out: str, seed: int | None) -> int:
    bc = rc.bench
    m = rc.model
    rows, exponents = B.bench_scaling(
        bc.variant_list(), bc.length_list(), d=m.d, depth=m.depth,
        n_heads=m.n_heads, d_s=m.d_s, window_w=m.window_w, chunk_c=m.chunk_c,
        vocab=m.vocab_size, reps=bc.reps, warmup=bc.warmup,
        seed=seed or 0, out_dir=out)
    for r in rows:
        status = "FAILED" if r.failed else f"{r.seconds:.4f}s  peak={r.peak_bytes}"
        print(f"{r.variant:>14} L={r.length:<6} {status}")
    print("exponents:", exponents)
    return EXIT_OK


def _cmd_ablate(rc: RunConfig, out: str, seed: int | None) -> int:
    seeds = rc.bench.seed_list() if seed is None else [seed]
    results = B.ablate_placement(rc.model, rc.task, rc.train,
                                 placements=rc.bench.placement_list(),
                                 seeds=seeds, out_dir=out)
    for row in results:
        print(f"{row['placement']:>10}: {row['metric_mean']:.4f}  {row['metrics']}")
    return EXIT_OK


def _cmd_sweep(rc: RunConfig, out: str, seed: int | None) -> int:
    seeds = rc.bench.seed_list() if seed is None else [seed]
    grid = B.sweep_window_length(rc.model, rc.task, rc.train,
                                 rc.bench.window_list(), rc.bench.length_list(),
                                 seeds=seeds, out_dir=out)
    for (w, L), val in sorted(grid.items()):
        print(f"window={w:<5} L={L:<6} metric={val:.4f}")
    return EXIT_OK


def _cmd_dump_kernel(rc: RunConfig, out: str, seed: int | None) -> int:
    m = S.hippo_init(rc.model.d_s, rc.model.d, seed or 0)
    K = S.ssm_kernel(m, rc.task.length).data
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "kernel.csv")
    S.dump_kernel_csv(S.SSMKernel(K_bar=np.asarray(K, dtype=np.float64),
                                  length=rc.task.length), path)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spade",
        description="Hybrid SSM + local-attention sequence model: training, "
                    "evaluation and scaling benchmarks.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, helptext in (
            ("train", "train a model on the configured task"),
            ("eval", "evaluate a checkpoint on the configured task"),
            ("bench", "length-scaling benchmark across model variants"),
            ("ablate", "global-layer placement ablation"),
            ("sweep", "window-size x sequence-length sweep"),
            ("dump-kernel", "write the SSM convolution kernel as CSV")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override a config value")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if name == "eval":
            sp.add_argument("--checkpoint", default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = load_run_config(args.config, args.set)
        if args.subcommand == "train":
            return _cmd_train(rc, args.out, args.seed)
        if args.subcommand == "eval":
            return _cmd_eval(rc, args.out, args)
        if args.subcommand == "bench":
            return _cmd_bench(rc, args.out, args.seed)
        if args.subcommand == "ablate":
            return _cmd_ablate(rc, args.out, args.seed)
        if args.subcommand == "sweep":
            return _cmd_sweep(rc, args.out, args.seed)
        if args.subcommand == "dump-kernel":
            return _cmd_dump_kernel(rc, args.out, args.seed)
        raise ConfigError(f"unknown subcommand {args.subcommand}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, S.NumericalError, S.StabilityError,
            FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MemoryError as exc:
        print(f"resource failure: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
