"""Command-line entry point: ``mbf {train,eval,verify-theory,gen-data}``.

Exit codes: 0 success, 1 internal error (including training divergence),
2 data or config error, 3 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytics
from .data import (DataError, DomainDataset, gen_synthetic, load_domain, load_labeled,
                   log1p_features, make_folds, num_classes, save_domain, save_labeled)
from .model import (ArchConfig, CheckpointFormatError, CheckpointMismatchError, ConfigError,
                    init_model, load_checkpoint, save_checkpoint)
from .trainer import TrainConfig, TrainingDivergedError, evaluate, train

EXIT_OK, EXIT_INTERNAL, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3

log = logging.getLogger("mbf")


class UsageError(Exception):
    """Bad config or data; maps to exit code 2."""


@dataclass
class RunConfig:
    # training
    alpha: float = 0.5
    beta: float = 1.0
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    epochs: int = 20
    seed: int = 0
    eval_every: int = 1
    iterations_per_epoch: int | None = None
    momentum: float = 0.9
    # architecture
    feature_dim: int = 5000
    hidden_dims: list = field(default_factory=lambda: [1000, 500])
    shared_dim: int = 128
    private_dim: int = 64
    dropout: float = 0.4
    num_classes: int | None = None
    # data and evaluation
    domains: list = field(default_factory=list)  # [{"name", "path", optional "test_path"}]
    folds: int = 5
    trials: int = 1
    log1p: bool = False
    out: str = "runs/latest"
    # synthetic data (gen-data)
    num_domains: int = 4
    labeled_per_domain: int = 2000
    unlabeled_per_domain: int = 2000
    test_per_domain: int = 0
    domain_shift: float = 1.0
    signal_strength: float = 1.0

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(alpha=self.alpha, beta=self.beta, batch_size=self.batch_size,
                               learning_rate=self.learning_rate, optimizer=self.optimizer,
                               epochs=self.epochs, rng_seed=self.seed if seed is None else seed,
                               eval_every=self.eval_every,
                               iterations_per_epoch=self.iterations_per_epoch,
                               momentum=self.momentum)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def arch(self) -> ArchConfig:
        arch = ArchConfig(input_dim=self.feature_dim, hidden_dims=list(self.hidden_dims),
                          shared_dim=self.shared_dim, private_dim=self.private_dim,
                          dropout=self.dropout)
        try:
            arch.shared_spec()
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        return arch


# flag name -> RunConfig field
_OVERRIDES = {"alpha": "alpha", "beta": "beta", "batch_size": "batch_size", "seed": "seed",
              "epochs": "epochs", "out": "out", "learning_rate": "learning_rate"}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def load_datasets(cfg: RunConfig) -> list[DomainDataset]:
    if len(cfg.domains) < 2:
        raise UsageError("config must list at least two domains")
    out = []
    for entry in cfg.domains:
        if not isinstance(entry, dict) or "path" not in entry:
            raise UsageError(f"domain entries need a 'path': {entry!r}")
        extra = set(entry) - {"name", "path", "test_path"}
        if extra:
            raise UsageError(f"unknown domain keys: {', '.join(sorted(extra))}")
        path = Path(entry["path"])
        if not path.is_file():
            raise UsageError(f"data file not found: {path}")
        ds = load_domain(path, cfg.feature_dim, entry.get("name"))
        if entry.get("test_path"):
            test_path = Path(entry["test_path"])
            if not test_path.is_file():
                raise UsageError(f"data file not found: {test_path}")
            ds.test = load_labeled(test_path, cfg.feature_dim)
        if cfg.log1p:
            ds = log1p_features(ds)
        out.append(ds)
    if cfg.num_classes is not None:
        for ds in out:
            ds.num_classes = cfg.num_classes
    return out


def fold_views(cfg: RunConfig, datasets: list[DomainDataset]):
    """Per-fold (train, validation, test) views; k=1 trains on everything and needs test files."""
    if cfg.folds == 1:
        for ds in datasets:
            if ds.test is None:
                raise UsageError(f"folds=1 needs a test_path for domain {ds.name!r}")
            if ds.validation is None:
                ds.validation = ds.test
        return make_folds(datasets, 1, cfg.seed), [datasets]
    plan = make_folds(datasets, cfg.folds, cfg.seed)
    return plan, [plan.split(datasets, f) for f in range(cfg.folds)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig) -> int:
    if cfg.trials < 1 or cfg.folds < 1:
        raise UsageError("trials and folds must be >= 1")
    datasets = load_datasets(cfg)
    arch = cfg.arch()
    K = num_classes(datasets)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _, views = fold_views(cfg, datasets)

    names = [ds.name for ds in datasets]
    # acc[trial][fold] -> per-domain test accuracies
    acc = np.zeros((cfg.trials, len(views), len(datasets)))
    with open(out / "runs.tsv", "w") as runs:
        runs.write("trial\tfold\t" + "\t".join(names) + "\tAVG\n")
        for t in range(cfg.trials):
            tcfg = cfg.train_config(seed=cfg.seed + t)
            for f, view in enumerate(views):
                tag = f"trial{t}_fold{f}"
                t0 = time.perf_counter()
                model = init_model(arch, len(view), K, tcfg.rng_seed)
                with open(out / f"{tag}.log", "w") as lf:
                    try:
                        result = train(view, tcfg, arch, log_file=lf, model=model)
                    except TrainingDivergedError as exc:
                        model.load_state_dict(exc.snapshot["state_dict"])
                        save_checkpoint(model, out / f"{tag}.diverged.ckpt")
                        print(f"error: {exc}; snapshot saved to {out / (tag + '.diverged.ckpt')}",
                              file=sys.stderr)
                        return EXIT_INTERNAL
                    if result.best_accuracies is not None:
                        lf.write("best\t" + "\t".join(["-"] * 4)
                                 + "".join(f"\t{a:.6f}" for a in result.best_accuracies)
                                 + f"\t{np.mean(result.best_accuracies):.6f}\n")
                save_checkpoint(result.model, out / f"{tag}.ckpt")
                acc[t, f] = evaluate(result.model, view, "test")
                runs.write(f"{t}\t{f}\t" + "\t".join(f"{a:.6f}" for a in acc[t, f])
                           + f"\t{acc[t, f].mean():.6f}\n")
                log.info("%s test mean %.4f (%.1fs)", tag, acc[t, f].mean(), time.perf_counter() - t0)

    table = summarize(acc, names)
    (out / "results.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def summarize(acc: np.ndarray, names: list[str]) -> str:
    """``domain  mean_acc  std_acc`` in percent with two decimals, final row AVG.

    Accuracies are averaged over folds first, then over trials; the spread is
    across trials when there are several, otherwise across folds.
    """
    per_run = np.concatenate([acc, acc.mean(axis=2, keepdims=True)], axis=2) * 100.0
    per_trial = per_run.mean(axis=1)
    spread = per_trial if per_trial.shape[0] > 1 else per_run[0]
    lines = ["domain\tmean_acc\tstd_acc"]
    for i, name in enumerate([*names, "AVG"]):
        lines.append(f"{name}\t{per_trial[:, i].mean():.2f}\t{spread[:, i].std():.2f}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, checkpoint, split: str = "test", fold: int = 0) -> int:
    datasets = load_datasets(cfg)
    arch = cfg.arch()
    _, views = fold_views(cfg, datasets)
    if not 0 <= fold < len(views):
        raise UsageError(f"fold {fold} out of range [0, {len(views)})")
    view = views[fold]
    model = init_model(arch, len(view), num_classes(datasets), cfg.seed)
    try:
        load_checkpoint(model, checkpoint)
    except CheckpointMismatchError as exc:
        print(f"error: checkpoint mismatch at {exc.name}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {checkpoint}") from None
    except CheckpointFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    accs = evaluate(model, view, split)
    lines = ["domain\taccuracy"]
    lines += [f"{ds.name}\t{a:.6f}" for ds, a in zip(view, accs)]
    lines.append(f"AVG\t{np.mean(accs):.6f}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_verify_theory(trials: int = 10000, k_list=(2, 3, 5, 10), seed: int = 0) -> int:
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    ok = True
    for K in k_list:
        if K < 2:
            raise UsageError("every K must be >= 2")
        report = analytics.verify_opposite_monotonicity(trials, K, seed)
        print(f"K={K}", file=sys.stderr)
        print(report.line())
        ok &= report.passed
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_gen_data(cfg: RunConfig) -> int:
    K = cfg.num_classes or 2
    try:
        datasets = gen_synthetic(cfg.num_domains, K, cfg.feature_dim, cfg.labeled_per_domain,
                                 cfg.unlabeled_per_domain, cfg.domain_shift, cfg.seed,
                                 test_per_domain=cfg.test_per_domain,
                                 signal_strength=cfg.signal_strength)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        entry = {"name": ds.name, "path": str(out / f"{ds.name}.txt")}
        save_domain(ds, entry["path"])
        if ds.test is not None:
            entry["test_path"] = str(out / f"{ds.name}.test.txt")
            save_labeled(ds.test, entry["test_path"])
        entries.append(entry)
    manifest = {
        "generator": "gen_synthetic",
        "params": {"num_domains": cfg.num_domains, "num_classes": K, "feature_dim": cfg.feature_dim,
                   "labeled_per_domain": cfg.labeled_per_domain,
                   "unlabeled_per_domain": cfg.unlabeled_per_domain,
                   "test_per_domain": cfg.test_per_domain, "domain_shift": cfg.domain_shift,
                   "signal_strength": cfg.signal_strength, "seed": cfg.seed},
        "domains": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(entries)} domains to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _k_list(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out")

    p = sub.add_parser("train", help="cross-validated training run")
    common(p)
    p.add_argument("--trials", type=int, help="independent random restarts")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("validation", "test"), default="test")
    p.add_argument("--fold", type=int, default=0)

    p = sub.add_parser("verify-theory", help="check opposite monotonicity of Frobenius norm and entropy")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--k", type=_k_list, default=[2, 3, 5, 10])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="write a synthetic multi-domain corpus")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify-theory":
            return cmd_verify_theory(args.trials, args.k, args.seed)
        cfg = resolve_config(args)
        if args.command == "train":
            if args.trials is not None:
                cfg.trials = args.trials
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split, args.fold)
        return cmd_gen_data(cfg)
    except (UsageError, DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
