"""Command-line entry point.

Subcommands: train, eval, compare, routing-report, reconstruct.  Runs are
described by a flat key=value configuration (file via --config, overridden
by flags); every run writes its fully resolved configuration next to its
outputs so any result can be reproduced by feeding that file back in.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from dataclasses import dataclass, fields

from .analysis import (
    fmt,
    init_sensitivity_study,
    reconstruction_grid,
    run_comparison,
    train_run,
    write_csv,
    write_metrics,
    write_study,
)
from .data import Dataset, load_idx, synthetic_dataset
from .network import ArchConfig, TrainConfig, load_model, save_checkpoint, evaluate
from .routing import RoutingConfig

VARIANT_NAMES = ("alg1", "alg2", "alg3", "alg4")
DATASET_NAMES = ("mnist", "fmnist", "kmnist", "synthetic")
ARCH_NAMES = ("default", "compact")
OUT_DIR_ENV = "GCAPS_OUT_DIR"


class ConfigError(ValueError):
    """Bad key, value, or flag combination; maps to exit code 1."""


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(","))


def _parse_names(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _format_plain(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> parser; formatting is uniform (_format_plain)
_SCHEMA = {
    "arch": str, "routing": str, "iterations": int, "configs": _parse_names,
    "lr0": float, "decay": float, "beta1": float, "beta2": float,
    "eps": float, "batch_size": int, "epochs": int, "seed": int,
    "seeds": _parse_ints, "dataset": str, "data_dir": str, "out_dir": str,
    "train_limit": int, "test_limit": int, "augment": _parse_bool,
    "trials": int, "run_id": str, "split": str, "index": int,
    "fixed_timer": _parse_bool,
}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of every subcommand, as one flat namespace."""

    arch: str = "default"
    routing: str = "alg1"
    iterations: int = 3
    configs: tuple[str, ...] = VARIANT_NAMES
    lr0: float = 0.001
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset: str = "synthetic"
    data_dir: str = "data"
    out_dir: str = "runs"
    train_limit: int = 0        # 0 = the whole split
    test_limit: int = 0
    augment: bool = True
    trials: int = 100
    run_id: str = ""            # empty = derive from routing and seed
    split: str = "test"
    index: int = 0
    fixed_timer: bool = False   # count epochs instead of wall time, for
                                # byte-reproducible metrics CSVs

    def __post_init__(self):
        if self.arch not in ARCH_NAMES:
            raise ConfigError(f"arch must be one of {ARCH_NAMES}, got {self.arch!r}")
        if self.routing not in VARIANT_NAMES:
            raise ConfigError(
                f"routing must be one of {VARIANT_NAMES}, got {self.routing!r}")
        for name in self.configs:
            if name not in VARIANT_NAMES:
                raise ConfigError(f"configs entry {name!r} is not one"
                                  f" of {VARIANT_NAMES}")
        if not self.configs:
            raise ConfigError("configs must list at least one variant")
        if self.dataset not in DATASET_NAMES:
            raise ConfigError(
                f"dataset must be one of {DATASET_NAMES}, got {self.dataset!r}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.lr0 > 0 or not 0 < self.decay <= 1:
            raise ConfigError("lr0 must be positive and decay in (0, 1]")
        if self.trials < 10:
            raise ConfigError(f"trials must be >= 10, got {self.trials}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ConfigError("train_limit and test_limit must be >= 0")
        if self.index < 0:
            raise ConfigError("index must be >= 0")

    def resolved_text(self) -> str:
        """Flat key=value dump; parsing it back reproduces this config."""
        lines = ["# resolved run configuration"]
        lines += [f"{f.name}={_format_plain(getattr(self, f.name))}"
                  for f in fields(self)]
        return "\n".join(lines) + "\n"

    def arch_config(self) -> ArchConfig:
        return ArchConfig.compact() if self.arch == "compact" else ArchConfig()

    def routing_config(self, name: str | None = None) -> RoutingConfig:
        return RoutingConfig.from_name(name or self.routing,
                                       iterations=self.iterations)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, decay=self.decay, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed if seed is None else seed)

    def timer(self):
        if not self.fixed_timer:
            return time.perf_counter
        counter = itertools.count()
        return lambda: float(next(counter))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """key=value lines to a dict; blank lines and # comments are skipped."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value,"
                              f" got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: dict[str, str]) -> RunConfig:
    """Typed RunConfig from raw string pairs; unknown keys are an error."""
    values = {}
    for key, raw in pairs.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            values[key] = _SCHEMA[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def _resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set]:
    """Merge defaults < config file < environment out-dir < flags."""
    pairs: dict[str, str] = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        pairs.update(parse_config_text(text, source=args.config))
    env_out = os.environ.get(OUT_DIR_ENV)
    if env_out:
        pairs["out_dir"] = env_out
    for key in _SCHEMA:
        raw = getattr(args, key, None)
        if raw is not None:
            pairs[key] = raw
    return config_from_pairs(pairs), set(pairs)


def _write_resolved(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"config-{name}.txt")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(cfg.resolved_text())
    os.replace(tmp, path)
    return path


_IDX_FILES = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
              "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}


def _find_idx_pair(data_dir: str, dataset: str, split: str) -> tuple[str, str]:
    base = os.path.join(data_dir, dataset)
    img_name, lab_name = _IDX_FILES[split]
    for suffix in ("", ".gz"):
        img = os.path.join(base, img_name + suffix)
        lab = os.path.join(base, lab_name + suffix)
        if os.path.exists(img) and os.path.exists(lab):
            return img, lab
    raise FileNotFoundError(
        f"no {split} files for dataset {dataset!r} under {base}:"
        f" expected {img_name}[.gz] and {lab_name}[.gz]")


def load_split(cfg: RunConfig, split: str) -> Dataset:
    """One split of the configured dataset, already subset to its limit."""
    limit = cfg.train_limit if split == "train" else cfg.test_limit
    if cfg.dataset == "synthetic":
        n = limit or (256 if split == "train" else 128)
        # distinct noise per split, same root seed
        return synthetic_dataset(seed=cfg.seed + (0 if split == "train" else 1),
                                 n=n, split=split)
    img, lab = _find_idx_pair(cfg.data_dir, cfg.dataset, split)
    ds = load_idx(img, lab, name=cfg.dataset, split=split)
    return ds.subset(limit or None)


def _default_run_id(cfg: RunConfig) -> str:
    return cfg.run_id or f"{cfg.routing}-s{cfg.seed}"


def cmd_train(cfg: RunConfig, provided: set, args) -> int:
    run_id = _default_run_id(cfg)
    train_ds = load_split(cfg, "train")
    test_ds = load_split(cfg, "test")
    model, records = train_run(train_ds, test_ds, cfg.arch_config(),
                               cfg.routing_config(), cfg.train_config(),
                               run_id, timer=cfg.timer(), augment=cfg.augment)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, f"metrics-{run_id}.csv")
    write_metrics(metrics_path, records)
    ckpt_path = os.path.join(cfg.out_dir, f"model-{run_id}.ckpt")
    save_checkpoint(ckpt_path, model, extra={"run_id": run_id,
                                             "dataset": cfg.dataset})
    config_path = _write_resolved(cfg, run_id)
    final = [r for r in records if r.split == "test"][-1]
    print(f"run {run_id}: {cfg.epochs} epochs on {cfg.dataset}"
          f" ({len(train_ds)} train / {len(test_ds)} test)")
    print(f"final test accuracy {fmt(final.accuracy)}")
    print(f"final test loss {fmt(final.loss)}")
    for path in (metrics_path, ckpt_path, config_path):
        print(f"wrote {path}")
    return 0


def cmd_eval(cfg: RunConfig, provided: set, args) -> int:
    expected_arch = cfg.arch_config() if "arch" in provided else None
    expected_routing = (cfg.routing_config()
                        if {"routing", "iterations"} & provided else None)
    model, manifest = load_model(args.checkpoint, arch=expected_arch,
                                 routing=expected_routing)
    ds = load_split(cfg, cfg.split)
    accuracy, loss, confusion = evaluate(model, ds.images, ds.labels,
                                         batch_size=cfg.batch_size)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    run_id = cfg.run_id or f"eval-{stem}"
    os.makedirs(cfg.out_dir, exist_ok=True)
    confusion_path = os.path.join(cfg.out_dir, f"confusion-{run_id}.csv")
    header = "true," + ",".join(f"pred_{k}" for k in range(confusion.shape[1]))
    write_csv(confusion_path, header,
              [(k, *confusion[k].tolist()) for k in range(confusion.shape[0])])
    config_path = _write_resolved(cfg, run_id)
    print(f"eval {args.checkpoint} on {cfg.dataset}/{cfg.split}"
          f" ({len(ds)} examples)")
    print(f"accuracy {fmt(accuracy)}")
    print(f"loss {fmt(loss)}")
    for path in (confusion_path, config_path):
        print(f"wrote {path}")
    return 0


def cmd_compare(cfg: RunConfig, provided: set, args) -> int:
    names = tuple(dict.fromkeys(cfg.configs))    # dedupe, keep order
    if len(names) < 2:
        raise ConfigError(f"compare needs at least 2 distinct routing"
                          f" configurations, got {list(cfg.configs)}")
    train_ds = load_split(cfg, "train")
    test_ds = load_split(cfg, "test")
    report = run_comparison(train_ds, test_ds,
                            [cfg.routing_config(n) for n in names],
                            cfg.train_config(), cfg.seeds, cfg.out_dir,
                            arch=cfg.arch_config(), timer=cfg.timer(),
                            augment=cfg.augment)
    config_path = _write_resolved(cfg, "compare")
    print(f"compared {len(names)} configurations x {len(cfg.seeds)} seeds"
          f" on {cfg.dataset}")
    for res in report.results:
        mean = res.mean_accuracy
        shown = fmt(mean) if mean is not None else "diverged"
        print(f"{res.config_name} ({res.config_label}): mean test"
              f" accuracy {shown}")
    print(f"wrote {os.path.join(cfg.out_dir, 'report.csv')}")
    print(f"wrote {config_path}")
    return 0


def cmd_routing_report(cfg: RunConfig, provided: set, args) -> int:
    spec = cfg.arch_config().layer_spec()
    configs = [cfg.routing_config(n) for n in VARIANT_NAMES]
    rows, summary = init_sensitivity_study(spec, configs, cfg.trials, cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report_path = os.path.join(cfg.out_dir, "routing-report.csv")
    write_study(report_path, rows)
    config_path = _write_resolved(cfg, "routing-report")
    print(f"routing report: {cfg.trials} trials on"
          f" {spec.num_lower}x{spec.num_upper} capsules")
    for name in VARIANT_NAMES:
        print(f"{name}: mean |dc| per iteration {fmt(summary[name])}")
    fraction = summary.get("fraction_alg1_faster_than_alg2")
    if fraction is not None:
        print(f"fraction of trials with alg1 coupling changing faster"
              f" than alg2: {fmt(fraction)}")
    print(f"wrote {report_path}")
    print(f"wrote {config_path}")
    return 0


def cmd_reconstruct(cfg: RunConfig, provided: set, args) -> int:
    model, manifest = load_model(args.checkpoint)
    ds = load_split(cfg, cfg.split)
    if cfg.index >= len(ds):
        raise IndexError(f"index {cfg.index} out of range for"
                         f" {len(ds)}-example {cfg.split} split")
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    run_id = cfg.run_id or f"recon-{stem}"
    os.makedirs(cfg.out_dir, exist_ok=True)
    grid_path = os.path.join(cfg.out_dir, f"{run_id}-i{cfg.index}.pgm")
    panels = reconstruction_grid(model, ds.images[cfg.index],
                                 int(ds.labels[cfg.index]), path=grid_path)
    config_path = _write_resolved(cfg, run_id)
    print(f"reconstructed {cfg.dataset}/{cfg.split} example {cfg.index}"
          f" (label {int(ds.labels[cfg.index])}) into {panels.shape[0]} panels")
    print(f"wrote {grid_path}")
    print(f"wrote {config_path}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise ConfigError(message)


def _add_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="key=value run configuration file")
    for key in _SCHEMA:
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, metavar="VALUE",
                            help=f"override the {key} configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcaps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{train,eval,compare,routing-report,reconstruct}")
    specs = [
        ("train", cmd_train, "train one model; writes checkpoint,"
                             " metrics CSV, resolved config", ()),
        ("eval", cmd_eval, "evaluate a checkpoint; prints accuracy and loss,"
                           " writes confusion CSV", ("checkpoint",)),
        ("compare", cmd_compare, "train every configured routing variant"
                                 " across the seed list", ()),
        ("routing-report", cmd_routing_report,
         "coupling rate-of-change study across all four variants", ()),
        ("reconstruct", cmd_reconstruct,
         "decode per-type reconstructions of one example into a PGM grid",
         ("checkpoint",)),
    ]
    for name, handler, help_text, positionals in specs:
        p = sub.add_parser(name, help=help_text, description=help_text)
        for positional in positionals:
            p.add_argument(positional)
        _add_flags(p)
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:        # --help and friends, keep in-process safe
        return int(exc.code or 0)
    try:
        cfg, provided = _resolve_config(args)
        return args.handler(cfg, provided, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
