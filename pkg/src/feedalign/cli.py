"""Command-line experiment runner.

Subcommands: ``train``, ``checkgrad``, ``align``, ``memreport``. Settings are
resolved as preset < config file < command-line flags, and the effective
configuration is echoed into the output directory.

Exit codes: 0 success, 2 usage/configuration, 3 data, 4 numeric check failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import diagnostics as G
from . import presets as P
from . import trainer as tr
from .errors import ConfigError, DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STRATEGY_ALIASES = {"cdfa": "dfa", "cbdfa": "bdfa"}
GRADCHECK_TOL = 1e-5


@dataclass
class RunConfig:
    preset: str = "mlp-moons"
    layers: list = field(default_factory=list)
    input_shape: tuple = ()
    classes: int = 0
    dataset: str = ""
    data: str = ""
    samples: int = 500
    noise: float = 0.1
    train_subset: int = 0
    test_subset: int = 0
    strategy: str = "bp"
    feedback_init: str = "random"
    feedback_scheme: str = "random_he"
    feedback_refresh: bool = False
    precision: str = "float32"
    lr_regime: str = ""
    lr: float = 0.01
    batch: int = 100
    epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 0
    augment: bool = False
    seed: int = 0
    out: str = "out"
    timing: bool = False
    align_every: int = 10

    def spec(self) -> tr.NetworkSpec:
        return tr.NetworkSpec(self.layers, self.input_shape, self.classes, self.strategy,
                              self.feedback_init, self.feedback_scheme, self.feedback_refresh,
                              self.precision)

    def hyper(self) -> tr.Hyperparams:
        return tr.Hyperparams(self.lr, self.batch, self.momentum, self.weight_decay, self.epochs,
                              self.seed, self.lr_decay_factor, self.lr_decay_every)

    def echo(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    default = _FIELDS[key].default
    if key == "layers":
        return [s.strip() for s in raw.split(",") if s.strip()] if isinstance(raw, str) else list(raw)
    if key == "input_shape":
        return tuple(int(s) for s in raw.split(",")) if isinstance(raw, str) else tuple(raw)
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(args) -> RunConfig:
    file_vals = read_config_file(args.config) if args.config else {}
    flag_vals = {k: v for k, v in vars(args).items() if k in _FIELDS and v is not None}
    preset = flag_vals.get("preset") or file_vals.get("preset") or RunConfig.preset
    vals = {}
    if preset:
        p = P.get_preset(preset)
        vals.update({k: v for k, v in p.items() if k in _FIELDS and k != "hyper"})
        vals.update(p["hyper"])
    vals["preset"] = preset
    regime = flag_vals.get("lr_regime") or file_vals.get("lr_regime")
    if regime:
        if regime not in P.LR_REGIMES:
            raise ConfigError(f"unknown lr regime {regime!r}; choose from {', '.join(P.LR_REGIMES)}")
        vals.update(P.LR_REGIMES[regime])
    for source in (file_vals, flag_vals):
        vals.update({k: _coerce(k, v) for k, v in source.items()})
    cfg = RunConfig(**vals)
    cfg.strategy = STRATEGY_ALIASES.get(cfg.strategy, cfg.strategy)
    if not cfg.layers:
        raise ConfigError("no network layers given (use a preset or 'layers = ...' in a config file)")
    return cfg


# -- data -----------------------------------------------------------------------------

def load_data(cfg: RunConfig):
    """``(train, test)`` datasets for the configured source; test may be None."""
    dt = tr.T.DTYPES[cfg.precision]
    if cfg.dataset == "moons":
        train = D.two_moons(cfg.samples, cfg.noise, cfg.seed)
        test = D.two_moons(cfg.samples, cfg.noise, cfg.seed + 10_000)
    elif cfg.dataset == "random-images":
        train = D.random_images(cfg.samples, cfg.classes, cfg.input_shape, cfg.seed)
        test = None
    elif cfg.dataset in ("cifar10", "cifar100"):
        if cfg.dataset == "cifar10":
            path = D.cifar10_dir(cfg.data or None)
            if path is None:
                raise DataError("CIFAR-10 binaries not found; pass --data DIR or set FEEDALIGN_CIFAR10")
            train, test = D.load_cifar10(path, "train"), D.load_cifar10(path, "test")
        else:
            if not cfg.data:
                raise DataError("CIFAR-100 needs --data DIR")
            train, test = D.load_cifar100(cfg.data, "train"), D.load_cifar100(cfg.data, "test")
        if cfg.train_subset:
            train = train.subset(np.arange(min(cfg.train_subset, len(train))))
        if cfg.test_subset:
            test = test.subset(np.arange(min(cfg.test_subset, len(test))))
        mean, std = D.channel_stats(train)
        train, test = D.standardize(train, mean, std), D.standardize(test, mean, std)
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if tuple(train.sample_shape) != tuple(cfg.input_shape):
        raise ConfigError(f"data samples are {train.sample_shape}, network expects {cfg.input_shape}")
    return train.astype(dt), None if test is None else test.astype(dt)


def _out_dir(cfg):
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    (out / "config.echo").write_text(cfg.echo())
    return out


# -- subcommands ----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    net = tr.Network(cfg.spec(), cfg.seed)
    hyper = cfg.hyper()
    train, test = load_data(cfg)
    out = _out_dir(cfg)
    policy = D.AugmentPolicy(enabled=cfg.augment)
    state, rows = tr.fit(net, train, hyper, test, policy=policy, timing=cfg.timing)
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    ckpt.save(net, out / "checkpoint.bin", state)
    final = tr.evaluate(net, test if test is not None else train)
    which = "test" if test is not None else "train"
    print(f"final {which} top1 {100 * final['top1']:.2f}% top5 {100 * final['top5']:.2f}%")
    return EXIT_OK


def cmd_checkgrad(cfg: RunConfig, fault=None) -> int:
    cfg.precision = "float64"
    net = tr.Network(cfg.spec(), cfg.seed)
    train, _ = load_data(cfg)
    n = min(len(train), 4)
    rows = G.gradcheck(net, train.x[:n], train.y[:n], fault=fault)
    out = _out_dir(cfg)
    (out / "gradcheck.csv").write_text(G.rows_to_csv([(k, "relative_error", f"{e:.3e}") for k, e in rows]))
    worst_key, worst = max(rows, key=lambda r: r[1])
    if worst > GRADCHECK_TOL:
        print(f"gradient check FAILED: {worst_key} relative error {worst:.3e} > {GRADCHECK_TOL:g}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradient check passed: worst {worst_key} relative error {worst:.3e}")
    return EXIT_OK


def cmd_align(cfg: RunConfig) -> int:
    if cfg.align_every < 1:
        raise ConfigError("align_every must be >= 1")
    net = tr.Network(cfg.spec(), cfg.seed)
    train, test = load_data(cfg)
    out = _out_dir(cfg)
    lines = ["step,layer,cosine,zero_norm"]

    def log(step, x, y):
        if step % cfg.align_every == 0:
            for key, cos, zero in G.alignment_report(net, x, y, rng_seed=step):
                lines.append(f"{step},{key},{cos:.6f},{int(zero)}")

    policy = D.AugmentPolicy(enabled=cfg.augment)
    state, rows = tr.fit(net, train, cfg.hyper(), test, policy=policy, timing=cfg.timing, on_step=log)
    (out / "alignment.csv").write_text("\n".join(lines) + "\n")
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(lines) - 1} alignment rows")
    return EXIT_OK


def cmd_memreport(cfg: RunConfig) -> int:
    net = tr.Network(cfg.spec(), cfg.seed)
    rows = G.memory_report(net)
    out = _out_dir(cfg)
    text = G.rows_to_csv(rows)
    (out / "memreport.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "checkgrad": cmd_checkgrad, "align": cmd_align, "memreport": cmd_memreport}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--preset", help=f"one of: {', '.join(P.PRESETS)}")
    a("--config", help="key = value config file (flags override it)")
    a("--strategy", choices=list(tr.STRATEGIES) + list(STRATEGY_ALIASES))
    a("--feedback-init", dest="feedback_init", choices=tr.FEEDBACK_INITS)
    a("--feedback-scheme", dest="feedback_scheme", choices=("random_he", "random_uniform"))
    a("--feedback-refresh", dest="feedback_refresh", action="store_const", const=True,
      help="rebuild product feedback from current weights each epoch (off by default)")
    a("--lr", type=float)
    a("--lr-regime", dest="lr_regime", choices=tuple(P.LR_REGIMES))
    a("--batch", type=int)
    a("--epochs", type=int)
    a("--momentum", type=float)
    a("--weight-decay", dest="weight_decay", type=float)
    a("--augment", action="store_const", const=True)
    a("--seed", type=int)
    a("--out")
    a("--data", help="dataset directory (CIFAR binaries)")
    a("--train-subset", dest="train_subset", type=int)
    a("--test-subset", dest="test_subset", type=int)
    a("--timing", action="store_const", const=True, help="record wall-clock ms in metrics.csv")
    a("--align-every", dest="align_every", type=int)
    parser = argparse.ArgumentParser(prog="feedalign", description="Train and verify feedback-alignment networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "checkgrad":
            p.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if args.command == "checkgrad":
            return cmd_checkgrad(cfg, fault=args.inject_fault)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
