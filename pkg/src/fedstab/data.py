"""Federated datasets with exactly known label-skew heterogeneity.

Each client ``i`` draws labels from the mixture

    pi_i = (1 - rho) * Uniform(C) + rho * Uniform(pair_i)

and features from a class-conditional Gaussian around a unit-sphere mean,
projected into the unit ball. The feature law given the label is the same on
every client, so the total variation between a client distribution and the
weighted global mixture equals the total variation of the label marginals and
can be computed in closed form.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedstab.seeding import as_generator

GLOBAL = "global"


class SpecError(ValueError):
    """Invalid data-generation spec."""


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


def project_to_ball(x: np.ndarray) -> np.ndarray:
    """Scale rows with Euclidean norm above one back onto the unit sphere."""
    x = np.array(x, dtype=np.float64)
    if x.ndim == 1:
        nrm = np.linalg.norm(x)
        return x / nrm if nrm > 1.0 else x
    nrm = np.linalg.norm(x, axis=1)
    over = nrm > 1.0
    if np.any(over):
        x[over] /= nrm[over, None]
    return x


@dataclass(frozen=True, eq=False)
class Sample:
    features: np.ndarray
    label: int
    target: np.ndarray | None = None

    def __post_init__(self):
        x = project_to_ball(np.atleast_1d(np.asarray(self.features, dtype=np.float64)))
        if not np.all(np.isfinite(x)):
            raise ValueError("sample features must be finite")
        if int(self.label) < 0:
            raise ValueError("label must be non-negative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", int(self.label))
        if self.target is not None:
            object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=np.float64)))

    def same_as(self, other: "Sample") -> bool:
        if self.label != other.label or not np.array_equal(self.features, other.features):
            return False
        if self.target is None or other.target is None:
            return self.target is None and other.target is None
        return np.array_equal(self.target, other.target)


@dataclass(eq=False)
class ClientDataset:
    """Ordered samples of one client, stored as arrays.

    Order is part of the identity: position ``j`` is what a neighbor
    perturbation and a sampling tape refer to.
    """

    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.features = project_to_ball(np.atleast_2d(np.asarray(self.features, dtype=np.float64)))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.targets is not None:
            t = np.asarray(self.targets, dtype=np.float64)
            self.targets = t.reshape(len(t), -1)
        if len(self.labels) < 1:
            raise ValueError("a client dataset needs at least one sample")
        if self.features.shape[0] != len(self.labels):
            raise ValueError("features and labels disagree on the sample count")
        if self.targets is not None and self.targets.shape[0] != len(self.labels):
            raise ValueError("targets and labels disagree on the sample count")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], client_id: int = 0) -> "ClientDataset":
        if not samples:
            raise ValueError("a client dataset needs at least one sample")
        targets = None
        if samples[0].target is not None:
            targets = np.stack([s.target for s in samples])
        return cls(
            np.stack([s.features for s in samples]),
            np.array([s.label for s in samples]),
            client_id,
            targets,
        )

    @property
    def n(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.n

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, j: int) -> Sample:
        t = None if self.targets is None else self.targets[j]
        return Sample(self.features[j], int(self.labels[j]), t)

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(j) for j in range(self.n)]

    def replace(self, j: int, z: Sample) -> "ClientDataset":
        if not 0 <= j < self.n:
            raise IndexError(f"sample index {j} out of range for client with {self.n} samples")
        feats = self.features.copy()
        labels = self.labels.copy()
        feats[j] = z.features
        labels[j] = z.label
        targets = None
        if self.targets is not None:
            if z.target is None:
                raise ValueError("replacement sample lacks a regression target")
            targets = self.targets.copy()
            targets[j] = z.target
        return ClientDataset(feats, labels, self.client_id, targets)

    def equals(self, other: "ClientDataset") -> bool:
        if not (np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)):
            return False
        if self.targets is None or other.targets is None:
            return self.targets is None and other.targets is None
        return np.array_equal(self.targets, other.targets)


def _balanced_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.int64)
    n = int(sizes.sum())
    p = sizes / n
    # complement keeps the weights summing to one exactly
    p[-1] = 1.0 - float(np.sum(p[:-1]))
    return p


@dataclass(eq=False)
class FederatedDataset:
    clients: list[ClientDataset]
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a federation needs at least one client")
        if self.weights is None:
            self.weights = _balanced_weights(self.sizes)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def m(self) -> int:
        return len(self.clients)

    @property
    def sizes(self) -> list[int]:
        return [c.n for c in self.clients]

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def pooled(self) -> ClientDataset:
        """All samples in client order, then position order."""
        targets = None
        if all(c.targets is not None for c in self.clients):
            targets = np.concatenate([c.targets for c in self.clients])
        return ClientDataset(
            np.concatenate([c.features for c in self.clients]),
            np.concatenate([c.labels for c in self.clients]),
            -1,
            targets,
        )

    def hamming(self, other: "FederatedDataset") -> int:
        """Number of (client, position) slots whose samples differ."""
        if self.sizes != other.sizes:
            raise ValueError("federations have different shapes")
        count = 0
        for a, b in zip(self.clients, other.clients):
            diff = np.any(a.features != b.features, axis=1) | (a.labels != b.labels)
            if a.targets is not None and b.targets is not None:
                diff |= np.any(a.targets != b.targets, axis=1)
            count += int(np.sum(diff))
        return count

    def equals(self, other: "FederatedDataset") -> bool:
        return (
            self.sizes == other.sizes
            and np.array_equal(self.weights, other.weights)
            and all(a.equals(b) for a, b in zip(self.clients, other.clients))
        )


@dataclass(frozen=True)
class DataGenSpec:
    num_classes: int
    feature_dim: int
    rho: float
    client_class_pairs: tuple[tuple[int, int], ...]
    class_means: tuple[tuple[float, ...], ...]
    noise_scale: float
    samples_per_client: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "client_class_pairs", tuple(tuple(int(c) for c in p) for p in self.client_class_pairs))
        object.__setattr__(self, "class_means", tuple(tuple(float(v) for v in mu) for mu in self.class_means))
        object.__setattr__(self, "samples_per_client", tuple(int(s) for s in self.samples_per_client))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "noise_scale", float(self.noise_scale))
        self.validate()

    def validate(self) -> None:
        C = self.num_classes
        if C < 2:
            raise SpecError(f"num_classes must be at least 2, got {C}")
        if not 0.0 <= self.rho <= 1.0:
            raise SpecError(f"rho must lie in [0, 1], got {self.rho}")
        if self.feature_dim < 1:
            raise SpecError("feature_dim must be positive")
        if self.noise_scale < 0 or not np.isfinite(self.noise_scale):
            raise SpecError("noise_scale must be finite and non-negative")
        if len(self.client_class_pairs) != len(self.samples_per_client):
            raise SpecError("one class pair and one sample count per client are required")
        if len(self.samples_per_client) < 1:
            raise SpecError("at least one client is required")
        if any(s < 1 for s in self.samples_per_client):
            raise SpecError("samples_per_client entries must be at least 1")
        for pair in self.client_class_pairs:
            if len(pair) != 2 or not all(0 <= c < C for c in pair):
                raise SpecError(f"class pair {pair} is not a pair of classes in [0, {C})")
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.shape != (C, self.feature_dim):
            raise SpecError(f"class_means must have shape ({C}, {self.feature_dim}), got {means.shape}")
        if not np.allclose(np.linalg.norm(means, axis=1), 1.0, atol=1e-9):
            raise SpecError("class means must lie on the unit sphere")
        for a in range(C):
            for b in range(a + 1, C):
                if np.array_equal(means[a], means[b]):
                    raise SpecError(f"class means {a} and {b} coincide")

    @property
    def num_clients(self) -> int:
        return len(self.samples_per_client)

    @property
    def means(self) -> np.ndarray:
        return np.asarray(self.class_means, dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return _balanced_weights(self.samples_per_client)

    def label_marginals(self) -> np.ndarray:
        return label_marginals(self.rho, self.client_class_pairs, self.num_classes)

    def global_marginal(self) -> np.ndarray:
        return self.weights @ self.label_marginals()

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "rho": self.rho,
            "client_class_pairs": [list(p) for p in self.client_class_pairs],
            "class_means": [list(mu) for mu in self.class_means],
            "noise_scale": self.noise_scale,
            "samples_per_client": list(self.samples_per_client),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataGenSpec":
        return cls(**d)

    def replace(self, **changes) -> "DataGenSpec":
        fields = dict(
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            rho=self.rho,
            client_class_pairs=self.client_class_pairs,
            class_means=self.class_means,
            noise_scale=self.noise_scale,
            samples_per_client=self.samples_per_client,
        )
        fields.update(changes)
        return DataGenSpec(**fields)

    @classmethod
    def synthetic(
        cls,
        num_clients: int = 10,
        num_classes: int = 10,
        feature_dim: int = 20,
        rho: float = 0.0,
        samples_per_client: int | Sequence[int] = 100,
        noise_scale: float = 0.5,
        means_seed: int = 0,
        pairs: Sequence[tuple[int, int]] | None = None,
    ) -> "DataGenSpec":
        """Random unit-sphere class means and the default pair design.

        Client ``i`` owns classes ``(2i mod C, 2i+1 mod C)``; with ``2m`` a
        multiple of ``C`` every class is owned equally often and the global
        label law stays uniform for every ``rho``.
        """
        if isinstance(samples_per_client, (int, np.integer)):
            samples_per_client = [int(samples_per_client)] * num_clients
        if pairs is None:
            pairs = default_pairs(num_clients, num_classes)
        gen = np.random.default_rng(means_seed)
        means = gen.standard_normal((num_classes, feature_dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        return cls(
            num_classes=num_classes,
            feature_dim=feature_dim,
            rho=rho,
            client_class_pairs=tuple(tuple(p) for p in pairs),
            class_means=tuple(tuple(row) for row in means),
            noise_scale=noise_scale,
            samples_per_client=tuple(samples_per_client),
        )


def default_pairs(num_clients: int, num_classes: int) -> list[tuple[int, int]]:
    return [((2 * i) % num_classes, (2 * i + 1) % num_classes) for i in range(num_clients)]


def label_marginals(rho: float, pairs: Sequence[Sequence[int]], num_classes: int) -> np.ndarray:
    pi = np.full((len(pairs), num_classes), (1.0 - rho) / num_classes)
    for i, (a, b) in enumerate(pairs):
        pi[i, a] += 0.5 * rho
        pi[i, b] += 0.5 * rho
    return pi


@dataclass(frozen=True, eq=False)
class HeterogeneityProfile:
    D: np.ndarray
    D_max: float
    D_tilde: float

    @classmethod
    def from_marginals(cls, pi: np.ndarray, weights: np.ndarray) -> "HeterogeneityProfile":
        pbar = weights @ pi
        D = 0.5 * np.sum(np.abs(pi - pbar[None, :]), axis=1)
        D = np.clip(D, 0.0, 1.0)
        return cls(D=D, D_max=float(np.max(D)), D_tilde=float(np.sum(weights * D**2)))

    def to_dict(self) -> dict:
        return {"D": [float(v) for v in self.D], "D_max": self.D_max, "D_tilde": self.D_tilde}


@dataclass(frozen=True)
class NeighborSpec:
    client_index: int
    sample_index: int
    replacement: Sample


def total_variation_labels(spec: DataGenSpec) -> HeterogeneityProfile:
    """Exact total variation of every client law to the weighted global mixture."""
    return HeterogeneityProfile.from_marginals(spec.label_marginals(), spec.weights)


def _child(seed, *key: int) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    else:
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.default_rng(ss)


def _draw_labels(pi: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(pi)
    cdf = cdf / cdf[-1]
    cdf[-1] = 1.0
    # side="right" never lands in a zero-mass class
    return np.searchsorted(cdf, gen.random(n), side="right").astype(np.int64)


def _draw_features(spec: DataGenSpec, labels: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    noise = gen.standard_normal((len(labels), spec.feature_dim))
    return project_to_ball(spec.means[labels] + spec.noise_scale * noise)


def _draw_client(spec: DataGenSpec, pi: np.ndarray, n: int, gen: np.random.Generator, client_id: int) -> ClientDataset:
    labels = _draw_labels(pi, n, gen)
    return ClientDataset(_draw_features(spec, labels, gen), labels, client_id)


def generate_federation(spec: DataGenSpec, seed) -> tuple[FederatedDataset, HeterogeneityProfile]:
    """Sample every client dataset; a pure function of ``(spec, seed)``."""
    pi = spec.label_marginals()
    clients = [
        _draw_client(spec, pi[i], n_i, _child(seed, i), i)
        for i, n_i in enumerate(spec.samples_per_client)
    ]
    return FederatedDataset(clients), total_variation_labels(spec)


def draw_oracle_set(spec: DataGenSpec, which, N: int, seed) -> ClientDataset:
    """I.i.d. draws from one client law ``P_i`` or from the mixture ``P``."""
    if N < 1:
        raise ValueError("oracle set size must be at least 1")
    gen = as_generator(seed) if isinstance(seed, np.random.Generator) else _child(seed)
    if which == GLOBAL:
        return _draw_client(spec, spec.global_marginal(), N, gen, -1)
    i = int(which)
    if not 0 <= i < spec.num_clients:
        raise IndexError(f"client {i} out of range")
    return _draw_client(spec, spec.label_marginals()[i], N, gen, i)


def draw_replacement(spec: DataGenSpec, client_index: int, seed) -> Sample:
    """One fresh sample from ``P_i``; the independent replacement of a neighbor."""
    return draw_oracle_set(spec, client_index, 1, seed).sample(0)


def make_neighbor(fed: FederatedDataset, nspec: NeighborSpec) -> FederatedDataset:
    i, j = nspec.client_index, nspec.sample_index
    if not 0 <= i < fed.m:
        raise IndexError(f"client index {i} out of range for {fed.m} clients")
    clients = list(fed.clients)
    clients[i] = clients[i].replace(j, nspec.replacement)
    return FederatedDataset(clients, fed.weights.copy())


# --- IDX (MNIST) ingestion -------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> tuple[np.ndarray, int]:
    path = str(path)
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError("file too short for the magic number", len(raw), path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw), path)
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise IdxFormatError(f"truncated payload: need {count} bytes", len(raw), path)
    if len(raw) > header + count:
        raise IdxFormatError("trailing bytes after payload", header + count, path)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return data, header


def load_idx(images_path, labels_path) -> ClientDataset:
    """Read an IDX image/label pair (the published MNIST format)."""
    images, _ = _read_idx(images_path, IDX_IMAGES, 3)
    labels, lab_header = _read_idx(labels_path, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}", 4, str(labels_path)
        )
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IdxFormatError(f"label {int(labels[bad[0]])} outside [0, 10)", lab_header + int(bad[0]), str(labels_path))
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return ClientDataset(project_to_ball(feats), labels.astype(np.int64), -1)


def federation_from_pool(
    pool: ClientDataset,
    rho: float,
    samples_per_client: Sequence[int],
    seed,
    pairs: Sequence[tuple[int, int]] | None = None,
    num_classes: int = 10,
) -> tuple[FederatedDataset, HeterogeneityProfile]:
    """Split a labelled pool (e.g. MNIST) with the same rho label mixture.

    Samples are taken without replacement from the pool; the profile is the
    label-marginal total variation of the design.
    """
    m = len(samples_per_client)
    if pairs is None:
        pairs = default_pairs(m, num_classes)
    pi = label_marginals(rho, pairs, num_classes)
    gen = _child(seed)
    by_class = [list(gen.permutation(np.flatnonzero(pool.labels == c))) for c in range(num_classes)]
    clients = []
    for i, n_i in enumerate(samples_per_client):
        labels = _draw_labels(pi[i], n_i, gen)
        idx = []
        for c in labels:
            if not by_class[c]:
                raise ValueError(f"pool exhausted for class {c}")
            idx.append(by_class[c].pop())
        idx = np.asarray(idx)
        clients.append(ClientDataset(pool.features[idx], pool.labels[idx], i))
    weights = _balanced_weights(samples_per_client)
    return FederatedDataset(clients), HeterogeneityProfile.from_marginals(pi, weights)
