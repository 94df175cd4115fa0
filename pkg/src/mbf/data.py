"""Multi-domain bag-of-words corpora: file I/O, synthetic generation, and folds.

File format (one domain per file, UTF-8, LF line endings)::

    <label> <idx>:<val> <idx>:<val> ...

``label`` is a 1-based class id for labeled samples and ``-1`` for unlabeled
ones. Indices are 0-based and strictly increasing within a line; values are
non-negative counts. In memory, labels are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

UNLABELED = -1


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class LabeledSplit:
    x: sp.csr_matrix
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> LabeledSplit:
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledSplit(self.x[idx], self.y[idx])


@dataclass
class DomainDataset:
    """One domain: labeled pool, unlabeled pool, and optional held-out splits."""

    name: str
    feature_dim: int
    labeled: LabeledSplit
    unlabeled: sp.csr_matrix
    validation: LabeledSplit | None = None
    test: LabeledSplit | None = None
    num_classes: int | None = field(default=None)

    def split(self, which: str) -> LabeledSplit | None:
        if which not in ("validation", "test"):
            raise ValueError(f"unknown split {which!r}")
        return getattr(self, which)


# ---------------------------------------------------------------------------
# file I/O


def parse_line(line: str, feature_dim: int, path="<string>", lineno: int = 1):
    tokens = line.split()
    if not tokens:
        raise ParseError(path, lineno, "empty line")
    try:
        label = int(tokens[0])
    except ValueError:
        raise ParseError(path, lineno, f"bad label {tokens[0]!r}") from None
    if label != UNLABELED and label < 1:
        raise ParseError(path, lineno, f"label must be >= 1 or -1, got {label}")
    idx, val = [], []
    prev = -1
    for tok in tokens[1:]:
        i_str, sep, v_str = tok.partition(":")
        if not sep:
            raise ParseError(path, lineno, f"expected idx:val, got {tok!r}")
        try:
            i, v = int(i_str), float(v_str)
        except ValueError:
            raise ParseError(path, lineno, f"expected idx:val, got {tok!r}") from None
        if i <= prev:
            raise ParseError(path, lineno, "feature indices must be strictly increasing")
        if i >= feature_dim:
            raise DataError(f"{path}:{lineno}: feature index {i} >= feature_dim {feature_dim}")
        if not np.isfinite(v) or v < 0:
            raise ParseError(path, lineno, f"feature values must be finite and >= 0, got {v_str}")
        idx.append(i)
        val.append(v)
        prev = i
    return label, idx, val


def _rows_to_csr(rows, feature_dim: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indices, data = [], []
    for r, (idx, val) in enumerate(rows):
        indices.extend(idx)
        data.extend(val)
        indptr[r + 1] = len(indices)
    return sp.csr_matrix((np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64),
                          indptr), shape=(len(rows), feature_dim))


def load_domain(path, feature_dim: int, name: str | None = None) -> DomainDataset:
    """Read one domain file into a dataset (labeled lines and ``-1`` lines)."""
    path = Path(path)
    labeled_rows, labels, unlabeled_rows = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            label, idx, val = parse_line(line, feature_dim, path, lineno)
            if label == UNLABELED:
                unlabeled_rows.append((idx, val))
            else:
                labeled_rows.append((idx, val))
                labels.append(label - 1)
    labeled = LabeledSplit(_rows_to_csr(labeled_rows, feature_dim), np.asarray(labels, dtype=np.intp))
    return DomainDataset(name or path.stem, feature_dim, labeled,
                         _rows_to_csr(unlabeled_rows, feature_dim))


def load_labeled(path, feature_dim: int) -> LabeledSplit:
    """Read a file holding only labeled lines (e.g. a held-out test set)."""
    ds = load_domain(path, feature_dim)
    if ds.unlabeled.shape[0]:
        raise DataError(f"{path}: held-out file contains unlabeled lines")
    return ds.labeled


def _format_value(v: float) -> str:
    # shortest text that parses back to the same float; counts print as integers
    return str(int(v)) if float(v).is_integer() and abs(v) < 2 ** 53 else repr(float(v))


def _format_row(label: int, row: sp.csr_matrix) -> str:
    parts = [str(label)]
    parts += [f"{i}:{_format_value(v)}" for i, v in zip(row.indices, row.data)]
    return " ".join(parts)


def format_samples(x: sp.csr_matrix, labels) -> list[str]:
    x = sp.csr_matrix(x)
    x.sort_indices()
    return [_format_row(int(lab), x[r]) for r, lab in enumerate(labels)]


def save_domain(ds: DomainDataset, path) -> None:
    """Write labeled lines first (1-based labels), then unlabeled lines."""
    lines = format_samples(ds.labeled.x, ds.labeled.y + 1)
    lines += format_samples(ds.unlabeled, [UNLABELED] * ds.unlabeled.shape[0])
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def save_labeled(split: LabeledSplit, path) -> None:
    lines = format_samples(split.x, split.y + 1)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def log1p_features(ds: DomainDataset) -> DomainDataset:
    """Optional log(1 + count) transform; raw counts are the default."""

    def tx(m):
        m = m.copy()
        m.data = np.log1p(m.data)
        return m

    def tx_split(s):
        return None if s is None else LabeledSplit(tx(s.x), s.y)

    return replace(ds, labeled=tx_split(ds.labeled), unlabeled=tx(ds.unlabeled),
                   validation=tx_split(ds.validation), test=tx_split(ds.test))


# ---------------------------------------------------------------------------
# cross-validation folds


@dataclass
class FoldPlan:
    fold_count: int
    assignments: list[np.ndarray]  # per domain: fold id of each labeled sample

    def fold_indices(self, domain: int, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[domain] == fold)

    def split(self, datasets: list[DomainDataset], test_fold: int) -> list[DomainDataset]:
        """Training/validation/test view of each domain for ``test_fold``.

        With k >= 3 the fold after the test fold is used for validation; with
        k == 2 the test fold doubles as validation; with k == 1 all labeled
        data trains and each domain's existing held-out splits are kept.
        """
        k = self.fold_count
        out = []
        for d, ds in enumerate(datasets):
            a = self.assignments[d]
            if k == 1:
                out.append(ds)
                continue
            val_fold = (test_fold + 1) % k if k >= 3 else test_fold
            train_idx = np.flatnonzero((a != test_fold) & (a != val_fold))
            test = ds.labeled.take(np.flatnonzero(a == test_fold))
            val = ds.labeled.take(np.flatnonzero(a == val_fold))
            out.append(replace(ds, labeled=ds.labeled.take(train_idx), validation=val, test=test))
        return out


def make_folds(datasets: list[DomainDataset], k: int, rng_seed: int = 0) -> FoldPlan:
    """Stratified, shuffled assignment of each domain's labeled samples to ``k`` folds."""
    if k < 1:
        raise DataError("fold count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    assignments = []
    for ds in datasets:
        n = len(ds.labeled)
        if n < k:
            raise DataError(f"domain {ds.name!r} has {n} labeled samples, fewer than k={k}")
        folds = np.empty(n, dtype=np.intp)
        offset = 0
        # deal each class round-robin, continuing where the previous class stopped,
        # so fold sizes differ by at most one overall and per class
        for cls in np.unique(ds.labeled.y):
            members = rng.permutation(np.flatnonzero(ds.labeled.y == cls))
            folds[members] = (offset + np.arange(members.size)) % k
            offset = (offset + members.size) % k
        assignments.append(folds)
    return FoldPlan(k, assignments)


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SyntheticProfile:
    """Rates used to draw synthetic counts (kept so tests can inspect them)."""

    background: np.ndarray        # (feature_dim,)
    class_rates: np.ndarray       # (K, feature_dim)
    domain_rates: np.ndarray      # (M, feature_dim), before scaling by domain_shift


def synthetic_profile(M: int, K: int, feature_dim: int, rng: np.random.Generator,
                      signal_features: int | None = None, signal_strength: float = 1.0
                      ) -> SyntheticProfile:
    """Per-class and per-domain rate profiles.

    Each class gets its own block of ``signal_features`` indicative features;
    each domain draws a sparse nuisance profile over all features.
    """
    if signal_features is None:
        signal_features = max(1, feature_dim // (4 * K))
    if signal_features * K > feature_dim:
        raise ValueError("not enough features for the class signal blocks")
    background = rng.gamma(2.0, 0.05, size=feature_dim)
    class_rates = np.zeros((K, feature_dim))
    perm = rng.permutation(feature_dim)
    for c in range(K):
        block = perm[c * signal_features:(c + 1) * signal_features]
        class_rates[c, block] = signal_strength * rng.gamma(2.0, 0.5, size=block.size)
    domain_rates = np.zeros((M, feature_dim))
    for d in range(M):
        active = rng.random(feature_dim) < 0.1
        domain_rates[d, active] = rng.gamma(2.0, 0.5, size=active.sum())
    return SyntheticProfile(background, class_rates, domain_rates)


def _draw(profile: SyntheticProfile, domain: int, labels: np.ndarray, domain_shift: float,
          rng: np.random.Generator) -> sp.csr_matrix:
    rates = (profile.background[None, :] + profile.class_rates[labels]
             + domain_shift * profile.domain_rates[domain][None, :])
    return sp.csr_matrix(rng.poisson(rates).astype(np.float64))


def gen_synthetic(M: int, K: int, feature_dim: int, labeled_per_domain: int,
                  unlabeled_per_domain: int, domain_shift: float, rng_seed: int = 0, *,
                  validation_per_domain: int = 0, test_per_domain: int = 0,
                  signal_features: int | None = None, signal_strength: float = 1.0
                  ) -> list[DomainDataset]:
    """Sparse count corpora with a domain-invariant class signal plus domain nuisance.

    Class profiles are shared across domains. Each domain adds its own nuisance
    profile, scaled by ``domain_shift`` and identical for every class, so a
    larger shift makes domains easier to tell apart without changing the class
    signal. Unlabeled samples come from the same class mixture, labels dropped.
    Labels are balanced (round-robin over classes, then shuffled).
    """
    for label, n in [("M", M), ("K", K), ("feature_dim", feature_dim),
                     ("labeled_per_domain", labeled_per_domain),
                     ("unlabeled_per_domain", unlabeled_per_domain)]:
        if n < 1:
            raise ValueError(f"{label} must be >= 1")
    if domain_shift < 0:
        raise ValueError("domain_shift must be >= 0")
    rng = np.random.default_rng(rng_seed)
    profile = synthetic_profile(M, K, feature_dim, rng, signal_features, signal_strength)

    def labels(n):
        return rng.permutation(np.arange(n) % K).astype(np.intp)

    def split(d, n):
        if n == 0:
            return None
        y = labels(n)
        return LabeledSplit(_draw(profile, d, y, domain_shift, rng), y)

    out = []
    for d in range(M):
        labeled = split(d, labeled_per_domain)
        unlabeled = _draw(profile, d, labels(unlabeled_per_domain), domain_shift, rng)
        out.append(DomainDataset(f"domain{d + 1}", feature_dim, labeled, unlabeled,
                                 validation=split(d, validation_per_domain),
                                 test=split(d, test_per_domain), num_classes=K))
    return out


def num_classes(datasets: list[DomainDataset]) -> int:
    declared = {ds.num_classes for ds in datasets if ds.num_classes is not None}
    seen = 0
    for ds in datasets:
        for s in (ds.labeled, ds.validation, ds.test):
            if s is not None and len(s):
                seen = max(seen, int(s.y.max()) + 1)
    return max([seen, *declared]) if declared else max(seen, 2)
