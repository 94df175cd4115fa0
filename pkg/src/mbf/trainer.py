"""Alternating minimax training.

Each iteration samples one labeled and one unlabeled mini-batch per domain,
then

1. takes one step on the extractors and classifier, descending
   ``L_c - alpha * L_adv - beta * L_bf`` (the extractors work against the
   discriminator, and the batch Frobenius term is maximized), and
2. takes one step on the discriminator, descending its domain NLL ``L_adv``.

Reported ``combined`` values are ``L_c + alpha * L_adv - beta * L_bf``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, DomainDataset, LabeledSplit, num_classes
from .losses import (LossBreakdown, adversarial_loss, batch_frobenius_loss,
                     classification_loss, combined_objective)
from .model import ArchConfig, MdtcModel, init_model
from .tensor import Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adam")


class TrainingDivergedError(FloatingPointError):
    """A loss went non-finite; ``snapshot`` holds the parameters and losses at that point."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 1.0
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    epochs: int = 20
    rng_seed: int = 0
    eval_every: int = 1
    iterations_per_epoch: int | None = None  # default: ceil(largest labeled pool / batch_size)
    momentum: float = 0.9
    debug: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Momentum(Sgd):
    def __init__(self, params, lr: float, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is not None:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v


class Adam(Sgd):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: list[Tensor], cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(params, cfg.learning_rate)
    if cfg.optimizer == "momentum":
        return Momentum(params, cfg.learning_rate, cfg.momentum)
    return Adam(params, cfg.learning_rate)


# ---------------------------------------------------------------------------
# batching


class _Cursor:
    """Walks a shuffled permutation of ``n`` indices, reshuffling when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, size: int) -> np.ndarray:
        out = []
        while size > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + size]
            self.pos += chunk.size
            size -= chunk.size
            out.append(chunk)
        return np.concatenate(out)


class BatchSampler:
    def __init__(self, datasets: list[DomainDataset], rng: np.random.Generator):
        for ds in datasets:
            if len(ds.labeled) == 0:
                raise DataError(f"domain {ds.name!r} has no labeled samples")
            if ds.unlabeled.shape[0] == 0:
                raise DataError(f"domain {ds.name!r} has no unlabeled samples")
        self.datasets = datasets
        self.labeled = [_Cursor(len(ds.labeled), rng) for ds in datasets]
        self.unlabeled = [_Cursor(ds.unlabeled.shape[0], rng) for ds in datasets]

    def sample(self, B: int):
        labeled, unlabeled = [], []
        for ds, cl, cu in zip(self.datasets, self.labeled, self.unlabeled):
            idx = cl.take(B)
            labeled.append((ds.labeled.x[idx].toarray(), ds.labeled.y[idx]))
            unlabeled.append(ds.unlabeled[cu.take(B)].toarray())
        return labeled, unlabeled


def sample_batches(datasets: list[DomainDataset], B: int, rng: np.random.Generator,
                   sampler: BatchSampler | None = None):
    """One labeled ``(x, y)`` batch and one unlabeled ``x`` batch per domain.

    Pass a persistent ``sampler`` to draw without replacement across calls;
    without one, a fresh sampler (one shuffled pass) is used.
    """
    sampler = sampler or BatchSampler(datasets, rng)
    return sampler.sample(B)


# ---------------------------------------------------------------------------
# steps


@dataclass
class TrainState:
    model: MdtcModel
    feature_opt: object
    disc_opt: object
    sampler: BatchSampler | None
    rng: np.random.Generator
    iteration: int = 0


def init_state(model: MdtcModel, datasets: list[DomainDataset] | None, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.rng_seed)
    sampler = BatchSampler(datasets, rng) if datasets is not None else None
    return TrainState(model, make_optimizer(model.feature_parameters(), cfg),
                      make_optimizer(model.discriminator_parameters(), cfg), sampler, rng)


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _assert_unchanged(before: list[np.ndarray], params: list[Tensor], what: str) -> None:
    for a, p in zip(before, params):
        if not np.array_equal(a, p.data):
            raise AssertionError(f"{what} parameters changed during the other player's step")


def _diverged(state: TrainState, where: str, values: dict) -> TrainingDivergedError:
    snap = {"iteration": state.iteration, "where": where, "losses": values,
            "state_dict": state.model.state_dict()}
    return TrainingDivergedError(f"non-finite loss in {where} at iteration {state.iteration}: {values}", snap)


def feature_objective(model: MdtcModel, labeled, unlabeled, alpha: float, beta: float,
                      rng=None, training: bool = False, with_adv: bool = False):
    """Build the main-step objective graph.

    Returns ``(objective, l_c, l_adv, l_bf)`` where ``objective`` is the tensor
    the extractors and classifier descend and the others are domain-summed
    1x1 tensors. ``l_adv`` is None when ``alpha == 0`` unless ``with_adv``.
    """
    l_c, l_adv, l_bf = [], [], []
    for d, ((xl, yl), xu) in enumerate(zip(labeled, unlabeled)):
        n_l = xl.shape[0]
        x = Tensor(np.concatenate([xl, xu], axis=0))
        fs, fd = model.extract(x, d, rng, training)
        logp = model.classify_features(fs, fd)
        l_c.append(classification_loss(T.slice_rows(logp, 0, n_l), yl))
        l_bf.append(batch_frobenius_loss(T.slice_rows(logp, n_l, logp.rows)))
        if alpha > 0 or with_adv:
            dom = model.discriminate_features(fs)
            l_adv.append(adversarial_loss(dom, np.full(x.rows, d)))
    total_c = _sum(l_c)
    total_bf = _sum(l_bf)
    total_adv = _sum(l_adv) if l_adv else None
    objective = total_c
    if alpha > 0:
        objective = objective - alpha * total_adv
    if beta > 0:
        objective = objective - beta * total_bf
    return objective, total_c, total_adv, total_bf


def literal_objective(model: MdtcModel, labeled, unlabeled, alpha: float, beta: float) -> Tensor:
    """``L_c + alpha * L_adv - beta * L_bf`` as a differentiable 1x1 tensor (no dropout)."""
    _, l_c, l_adv, l_bf = feature_objective(model, labeled, unlabeled, alpha, beta, with_adv=True)
    return l_c + alpha * l_adv - beta * l_bf


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def main_step(state: TrainState, labeled, unlabeled, cfg: TrainConfig) -> LossBreakdown:
    """One update of the extractors and classifier; the discriminator is left untouched."""
    model = state.model
    disc = model.discriminator_parameters()
    before = _snapshot(disc) if cfg.debug else None
    model.zero_grad()
    objective, l_c, l_adv, l_bf = feature_objective(model, labeled, unlabeled, cfg.alpha, cfg.beta,
                                                    state.rng, training=True)
    if l_adv is None:
        # alpha == 0: the discriminator takes no part; report its loss for logging only
        l_adv_value = discriminator_nll_on_batches(model, labeled, unlabeled) * model.M
    else:
        l_adv_value = l_adv.item()
    values = {"l_c": l_c.item(), "l_adv": l_adv_value, "l_bf": l_bf.item()}
    if not all(math.isfinite(v) for v in values.values()):
        raise _diverged(state, "main_step", values)
    objective.backward()
    state.feature_opt.step()
    for p in disc:
        p.zero_grad()
    if before is not None:
        _assert_unchanged(before, disc, "discriminator")
    return combined_objective(values["l_c"], values["l_adv"], values["l_bf"], cfg.alpha, cfg.beta)


def discriminator_step(state: TrainState, labeled, unlabeled, cfg: TrainConfig) -> float:
    """One update of the discriminator on the shared features of every batch.

    Returns the domain NLL averaged over domains (``L_adv / M``), which is
    ``log M`` for a discriminator that cannot tell domains apart.
    """
    model = state.model
    feats = model.feature_parameters()
    before = _snapshot(feats) if cfg.debug else None
    model.zero_grad()
    terms = []
    for d, ((xl, _), xu) in enumerate(zip(labeled, unlabeled)):
        x = Tensor(np.concatenate([xl, xu], axis=0))
        fs = model.extract(x, d, state.rng, training=True)[0].detach()
        terms.append(adversarial_loss(model.discriminate_features(fs), np.full(x.rows, d)))
    total = _sum(terms)
    value = total.item()
    if not math.isfinite(value):
        raise _diverged(state, "discriminator_step", {"l_adv": value})
    total.backward()
    state.disc_opt.step()
    if before is not None:
        _assert_unchanged(before, feats, "feature/classifier")
    return value / model.M


def train_iteration(state: TrainState, cfg: TrainConfig) -> tuple[LossBreakdown, float]:
    labeled, unlabeled = state.sampler.sample(cfg.batch_size)
    breakdown = main_step(state, labeled, unlabeled, cfg)
    l_d = discriminator_step(state, labeled, unlabeled, cfg)
    state.iteration += 1
    return breakdown, l_d


# ---------------------------------------------------------------------------
# evaluation


def _chunks(n: int, size: int = 512):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


def predict_log_proba(model: MdtcModel, x, domain: int) -> np.ndarray:
    """Class log-probabilities for a (sparse or dense) feature matrix, evaluation mode."""
    out = []
    for lo, hi in _chunks(x.shape[0]):
        chunk = x[lo:hi]
        chunk = chunk.toarray() if hasattr(chunk, "toarray") else np.asarray(chunk, dtype=np.float64)
        fs, fd = model.extract(Tensor(chunk), domain)
        out.append(model.classify_features(fs, fd).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.K))


def accuracy(model: MdtcModel, split: LabeledSplit, domain: int) -> float:
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    pred = predict_log_proba(model, split.x, domain).argmax(axis=1)  # ties go to the first class
    return float(np.mean(pred == split.y))


def evaluate(model: MdtcModel, datasets: list[DomainDataset], split: str = "validation") -> list[float]:
    """Per-domain accuracy on ``split`` ("validation" or "test")."""
    accs = []
    for d, ds in enumerate(datasets):
        s = ds.split(split)
        if s is None or len(s) == 0:
            raise DataError(f"domain {ds.name!r} has no {split} split")
        accs.append(accuracy(model, s, d))
    return accs


def mean_max_probability(model: MdtcModel, datasets: list[DomainDataset]) -> float:
    """Average over domains of the mean top-class probability on unlabeled data."""
    vals = []
    for d, ds in enumerate(datasets):
        probs = np.exp(predict_log_proba(model, ds.unlabeled, d))
        vals.append(float(probs.max(axis=1).mean()))
    return float(np.mean(vals))


def discriminator_nll_on_batches(model: MdtcModel, labeled, unlabeled) -> float:
    vals = []
    for d, ((xl, _), xu) in enumerate(zip(labeled, unlabeled)):
        x = Tensor(np.concatenate([xl, xu], axis=0))
        fs, _ = model.extract(x, d)
        logd = model.discriminate_features(fs.detach())
        vals.append(-float(logd.data[:, d].mean()))
    return float(np.mean(vals))


def discriminator_nll(model: MdtcModel, datasets: list[DomainDataset]) -> float:
    """Domain NLL of the discriminator on all training samples, averaged over domains."""
    vals = []
    for d, ds in enumerate(datasets):
        total, count = 0.0, 0
        for pool in (ds.labeled.x, ds.unlabeled):
            for lo, hi in _chunks(pool.shape[0]):
                fs = model.shared(Tensor(pool[lo:hi].toarray()))
                logd = model.discriminate_features(fs.detach()).data
                total += -logd[:, d].sum()
                count += hi - lo
        vals.append(total / count)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochReport:
    epoch: int
    l_c: float
    l_adv: float
    l_bf: float
    combined: float
    l_d: float
    accuracies: list[float] | None = None
    seconds: float = 0.0

    @property
    def mean_accuracy(self) -> float | None:
        return None if self.accuracies is None else float(np.mean(self.accuracies))


def format_log_line(r: EpochReport, num_domains: int) -> str:
    """``epoch l_c l_adv l_bf combined acc_d1..acc_dM acc_mean``, tab-separated."""
    cells = [str(r.epoch)] + [f"{v:.6f}" for v in (r.l_c, r.l_adv, r.l_bf, r.combined)]
    if r.accuracies is None:
        cells += ["-"] * (num_domains + 1)
    else:
        cells += [f"{a:.6f}" for a in r.accuracies] + [f"{r.mean_accuracy:.6f}"]
    return "\t".join(cells)


def log_header(num_domains: int) -> str:
    return "\t".join(["epoch", "l_c", "l_adv", "l_bf", "combined"]
                     + [f"acc_d{i + 1}" for i in range(num_domains)] + ["acc_mean"])


@dataclass
class TrainResult:
    model: MdtcModel
    reports: list[EpochReport] = field(default_factory=list)
    best_epoch: int | None = None
    best_accuracies: list[float] | None = None


def train(datasets: list[DomainDataset], cfg: TrainConfig, arch: ArchConfig | None = None,
          log_file=None, model: MdtcModel | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of alternating updates.

    When every domain has a validation split, the parameters with the best
    mean validation accuracy are restored at the end. ``log_file`` (a text
    stream) receives the per-epoch TSV log.
    """
    if arch is None:
        arch = ArchConfig(input_dim=datasets[0].feature_dim)
    if model is None:
        model = init_model(arch, len(datasets), num_classes(datasets), cfg.rng_seed)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    state = init_state(model, datasets, cfg)
    has_val = all(ds.validation is not None and len(ds.validation) > 0 for ds in datasets)
    iters = cfg.iterations_per_epoch or math.ceil(max(len(ds.labeled) for ds in datasets)
                                                  / cfg.batch_size)
    if log_file is not None:
        log_file.write(log_header(model.M) + "\n")

    best_acc, best_state = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        for _ in range(iters):
            b, l_d = train_iteration(state, cfg)
            sums += (b.l_c, b.l_adv, b.l_bf, b.combined, l_d)
        means = sums / iters
        report = EpochReport(epoch, *means)
        if has_val and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report.accuracies = evaluate(model, datasets, "validation")
            if report.mean_accuracy > best_acc:
                best_acc, best_state = report.mean_accuracy, model.state_dict()
                result.best_epoch, result.best_accuracies = epoch, report.accuracies
        report.seconds = time.perf_counter() - t0
        result.reports.append(report)
        if log_file is not None:
            log_file.write(format_log_line(report, model.M) + "\n")
            log_file.flush()
        log.debug("epoch %d: %s", epoch, format_log_line(report, model.M))

    if best_state is not None:
        model.load_state_dict(best_state)
    return result
