"""Shared-private multi-domain classifier.

Four parts: a shared feature extractor, one private extractor per domain, a
classifier over the concatenated [shared, private] features, and a domain
discriminator over the shared features. Extractors are rectifier MLPs; the
classifier and discriminator are MLPs with a single hidden layer as wide as
their input, ending in a log-softmax head.

Checkpoint format
-----------------
An ASCII header followed by raw little-endian float64 values::

    MBF-CHECKPOINT 1
    params <n>
    <name> <rows> <cols>        (n lines, in declaration order)
    end
    <binary payload: each parameter's values, row-major, same order>

Every header line ends with a single ``\\n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = "MBF-CHECKPOINT 1"


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


@dataclass
class MlpSpec:
    input_dim: int
    hidden_dims: list[int]
    output_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"MLP dimensions must be >= 1, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ArchConfig:
    """Layer sizes; defaults are the bag-of-words setup (5000 -> 1000 -> 500 -> 128/64)."""

    input_dim: int = 5000
    hidden_dims: list[int] = field(default_factory=lambda: [1000, 500])
    shared_dim: int = 128
    private_dim: int = 64
    dropout: float = 0.4

    def shared_spec(self) -> MlpSpec:
        return MlpSpec(self.input_dim, list(self.hidden_dims), self.shared_dim, self.dropout)

    def private_spec(self) -> MlpSpec:
        return MlpSpec(self.input_dim, list(self.hidden_dims), self.private_dim, self.dropout)


class Mlp:
    """Linear layers with rectifiers between them (and after the last one if ``final_relu``)."""

    def __init__(self, name: str, dims: list[int], rng: np.random.Generator, final_relu: bool):
        self.name = name
        self.dims = dims
        self.final_relu = final_relu
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            b = Tensor(np.zeros((1, fan_out)), requires_grad=True)
            self.layers.append((W, b))

    def named_parameters(self):
        for k, (W, b) in enumerate(self.layers):
            yield f"{self.name}.{k}.weight", W
            yield f"{self.name}.{k}.bias", b

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, W), b)
            if k < last or self.final_relu:
                h = T.relu(h)
        return h


def apply_dropout(features: Tensor, rate: float, rng: np.random.Generator | None,
                  training: bool) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return features
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(features.shape) >= rate) / (1.0 - rate)
    return T.mul(features, Tensor(keep))


@dataclass
class ForwardOutputs:
    class_log_probs: Tensor
    domain_log_probs: Tensor
    shared_features: Tensor
    private_features: Tensor


class MdtcModel:
    def __init__(self, arch: ArchConfig, num_domains: int, num_classes: int, rng_seed: int = 0):
        if num_domains < 2:
            raise ConfigError("need at least 2 domains")
        if num_classes < 2:
            raise ConfigError("need at least 2 classes")
        shared_spec, private_spec = arch.shared_spec(), arch.private_spec()
        self.arch = arch
        self.M = num_domains
        self.K = num_classes
        rng = np.random.default_rng(rng_seed)
        self.shared = Mlp("shared", [shared_spec.input_dim, *shared_spec.hidden_dims,
                                     shared_spec.output_dim], rng, final_relu=True)
        self.private = [
            Mlp(f"private{i}", [private_spec.input_dim, *private_spec.hidden_dims,
                                private_spec.output_dim], rng, final_relu=True)
            for i in range(num_domains)
        ]
        c_in = arch.shared_dim + arch.private_dim
        self.classifier = Mlp("classifier", [c_in, c_in, num_classes], rng, final_relu=False)
        d_in = arch.shared_dim
        self.discriminator = Mlp("discriminator", [d_in, d_in, num_domains], rng, final_relu=False)

    @property
    def classifier_input_dim(self) -> int:
        return self.classifier.dims[0]

    @property
    def discriminator_input_dim(self) -> int:
        return self.discriminator.dims[0]

    # parameters -------------------------------------------------------------

    def named_parameters(self):
        yield from self.shared.named_parameters()
        for p in self.private:
            yield from p.named_parameters()
        yield from self.classifier.named_parameters()
        yield from self.discriminator.named_parameters()

    def feature_parameters(self) -> list[Tensor]:
        """Parameters of the extractors and the classifier (the main-step set)."""
        params = [p for _, p in self.shared.named_parameters()]
        for m in self.private:
            params += [p for _, p in m.named_parameters()]
        params += [p for _, p in self.classifier.named_parameters()]
        return params

    def discriminator_parameters(self) -> list[Tensor]:
        return [p for _, p in self.discriminator.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            value = state[name]
            if value.shape != p.shape:
                raise CheckpointMismatchError(
                    name, f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # forward ----------------------------------------------------------------

    def extract(self, x: Tensor, domain: int, rng=None, training: bool = False):
        """Shared and private features of ``x`` for domain ``domain`` (0-based)."""
        if not 0 <= domain < self.M:
            raise IndexError(f"domain index {domain} out of range [0, {self.M})")
        rate = self.arch.dropout
        fs = apply_dropout(self.shared(x), rate, rng, training)
        fd = apply_dropout(self.private[domain](x), rate, rng, training)
        return fs, fd

    def classify_features(self, fs: Tensor, fd: Tensor) -> Tensor:
        return T.log_softmax(self.classifier(T.concat_cols(fs, fd)))

    def discriminate_features(self, fs: Tensor) -> Tensor:
        return T.log_softmax(self.discriminator(fs))

    def forward(self, x: Tensor, domain: int, rng=None, training: bool = False) -> ForwardOutputs:
        fs, fd = self.extract(x, domain, rng, training)
        return ForwardOutputs(self.classify_features(fs, fd), self.discriminate_features(fs), fs, fd)


def init_model(arch: ArchConfig, num_domains: int, num_classes: int, rng_seed: int = 0) -> MdtcModel:
    return MdtcModel(arch, num_domains, num_classes, rng_seed)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def forward_classify(model: MdtcModel, x, domain: int, rng=None, training: bool = False) -> Tensor:
    """log P(y | x, domain) as a B x K tensor."""
    x = _as_input(x)
    fs, fd = model.extract(x, domain, rng, training)
    return model.classify_features(fs, fd)


def forward_discriminate(model: MdtcModel, x, rng=None, training: bool = False) -> Tensor:
    """log P(domain | shared features of x) as a B x M tensor."""
    x = _as_input(x)
    fs = apply_dropout(model.shared(x), model.arch.dropout, rng, training)
    return model.discriminate_features(fs)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MdtcModel, path) -> None:
    params = list(model.named_parameters())
    header = [CHECKPOINT_MAGIC, f"params {len(params)}"]
    header += [f"{name} {p.rows} {p.cols}" for name, p in params]
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into an ordered name -> array mapping."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    try:
        header = [ln.decode("ascii") for ln in lines[:2]]
        if header[0] != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        tag, count = header[1].split()
        if tag != "params":
            raise CheckpointFormatError(f"{path}: expected 'params <n>'")
        entries = []
        for ln in lines[2:2 + int(count)]:
            name, rows, cols = ln.decode("ascii").split()
            entries.append((name, int(rows), int(cols)))
        if len(entries) != int(count) or lines[2 + int(count)] != b"end":
            raise CheckpointFormatError(f"{path}: header not terminated")
    except (IndexError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: malformed header") from exc
    pos = sum(len(ln) + 1 for ln in lines[:3 + int(count)])

    state = {}
    for name, rows, cols in entries:
        nbytes = rows * cols * 8
        if pos + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated payload at {name}")
        state[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes after payload")
    return state


def load_checkpoint(model: MdtcModel, path) -> None:
    """Load parameters into ``model``; raise CheckpointMismatchError on the first disagreement."""
    state = read_checkpoint(path)
    expected = list(model.named_parameters())
    names = list(state)
    for k, (name, p) in enumerate(expected):
        if k >= len(names) or names[k] != name:
            raise CheckpointMismatchError(name, f"parameter {name}: missing from checkpoint")
        if state[name].shape != p.shape:
            raise CheckpointMismatchError(
                name, f"parameter {name}: model has shape {p.shape}, checkpoint has {state[name].shape}")
    if len(names) > len(expected):
        extra = names[len(expected)]
        raise CheckpointMismatchError(extra, f"parameter {extra}: not present in model")
    model.load_state_dict(state)
