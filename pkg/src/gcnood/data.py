"""Synthetic long-tailed datasets, head/tail bookkeeping and embedding file I/O.

Rows carry an integer role code: ``c >= 0`` is an in-distribution sample of
class ``c``, ``OE`` (-1) an auxiliary training outlier and ``TEST_OOD`` (-2) a
test-time outlier.  Class 0 is always the most frequent class.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidSpecError

OE = -1
TEST_OOD = -2

MAGIC = b"GEMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")

# Geometry of the synthetic benchmark, in units of the within-class std.
CLUSTER_STD = 1.0
SEPARATION = 10.0
DOMAIN_SHIFT = 15.0
OE_STD = 2.0
OE_OFFSET = 10.0
OOD_CLUSTERS = 5

# RNG stream ids; each sample family draws from its own stream so that
# changing one count never perturbs the others.
_S_GEOMETRY, _S_ID, _S_OE, _S_OOD, _S_ID_TEST, _S_HELDOUT, _S_PRETRAIN, _S_OE_GEOMETRY = range(8)


@dataclass(frozen=True)
class DatasetSpec:
    K: int = 10
    n_max: int = 500
    rho: float = 100.0
    dim: int = 32
    n_oe: int = 1000
    n_ood_test: int = 1000
    seed: int = 0
    n_test_per_class: int = 100

    def __post_init__(self):
        if self.K < 1 or self.n_max < 1 or self.dim < 1:
            raise InvalidSpecError("K, n_max and dim must be >= 1")
        if self.n_oe < 0 or self.n_ood_test < 0 or self.n_test_per_class < 0:
            raise InvalidSpecError("sample counts must be >= 0")
        # validates rho and the rounding
        make_longtailed_counts(self.K, self.n_max, self.rho)

    @property
    def counts(self):
        return make_longtailed_counts(self.K, self.n_max, self.rho)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    roles: np.ndarray
    spec: DatasetSpec | None = None

    def __post_init__(self):
        feats = np.asarray(self.features)
        roles = np.asarray(self.roles, dtype=np.int32)
        if feats.ndim != 2:
            raise FormatError("features must be a 2-D matrix")
        if feats.shape[0] != roles.shape[0]:
            raise FormatError(
                f"{feats.shape[0]} feature rows but {roles.shape[0]} roles"
            )
        if not np.all(np.isfinite(feats)):
            raise FormatError("features contain non-finite values")
        if np.any(roles < TEST_OOD):
            raise FormatError("unknown role code")
        if self.spec is not None and np.any(roles >= self.spec.K):
            raise FormatError(f"class label outside [0, {self.spec.K})")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "roles", roles)

    def __len__(self):
        return self.roles.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.roles, other.roles)
            and self.spec == other.spec
        )

    @property
    def id_mask(self):
        return self.roles >= 0

    @property
    def oe_mask(self):
        return self.roles == OE

    @property
    def ood_mask(self):
        return self.roles == TEST_OOD

    def subset(self, mask):
        return LabeledDataset(self.features[mask], self.roles[mask], self.spec)

    @staticmethod
    def concat(parts, spec=None):
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.roles for p in parts]),
            spec,
        )


def make_longtailed_counts(K, n_max, rho):
    """Per-class sample sizes decaying exponentially from ``n_max`` to ``n_max / rho``.

    ``counts[i] = round_half_up(n_max * rho ** (-i / (K - 1)))``.
    """
    if K < 1 or n_max < 1:
        raise InvalidSpecError("K and n_max must be >= 1")
    if not rho >= 1:
        raise InvalidSpecError(f"imbalance ratio must be >= 1, got {rho}")
    if K == 1:
        if rho != 1:
            raise InvalidSpecError("a single class requires rho = 1")
        return [int(n_max)]
    counts = [
        int(math.floor(n_max * rho ** (-i / (K - 1)) + 0.5)) for i in range(K)
    ]
    if min(counts) < 1:
        raise InvalidSpecError(f"rho={rho} too large for n_max={n_max}")
    return counts


def head_tail_split(K):
    """Head = the first ceil(K/2) classes, tail = the rest."""
    n_head = (K + 1) // 2
    return set(range(n_head)), set(range(n_head, K))


def _rng(seed, stream, *extra):
    return np.random.default_rng([int(seed) % 2**64, stream, *extra])


def _orthonormal(rng, n, dim, exclude=None):
    """``n`` random unit vectors, mutually orthonormal and orthogonal to the
    (orthonormal) rows of ``exclude`` whenever the dimension leaves room."""
    g = rng.standard_normal((n, dim))
    basis = np.zeros((0, dim)) if exclude is None else exclude
    if basis.shape[0] + n <= dim:
        q, _ = np.linalg.qr(np.concatenate([basis, g]).T)
        return q.T[basis.shape[0]:]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _class_directions(rng, n, dim):
    """Orthonormal directions when ``n <= dim``, random unit vectors otherwise.

    In one dimension unit vectors collide, so raw Gaussian offsets are used.
    """
    if dim == 1 and n > 1:
        return rng.standard_normal((n, 1))
    return _orthonormal(rng, n, dim)


def class_geometry(spec):
    """Domain centre and the K class means of the target distribution."""
    rng = _rng(spec.seed, _S_GEOMETRY)
    dirs = _class_directions(rng, spec.K, spec.dim)
    radius = SEPARATION * CLUSTER_STD / (_min_pairwise(dirs) if spec.K > 1 else 1.0)
    shift = rng.standard_normal(spec.dim)
    center = DOMAIN_SHIFT * shift / np.linalg.norm(shift)
    return center, dirs, center + radius * dirs, radius


def _ood_means(spec, ood_set):
    center, dirs, _, radius = class_geometry(spec)
    rng = _rng(spec.seed, _S_OOD, ood_set, 0)
    novel = _orthonormal(rng, OOD_CLUSTERS, spec.dim, exclude=dirs)
    return center + radius * novel


def _gaussian(rng, mean, std, n, dim):
    return mean + std * rng.standard_normal((n, dim))


def _id_rows(spec, counts, stream):
    _, _, means, _ = class_geometry(spec)
    rng = _rng(spec.seed, stream)
    feats = [_gaussian(rng, means[c], CLUSTER_STD, n, spec.dim) for c, n in enumerate(counts)]
    roles = [np.full(n, c, dtype=np.int32) for c, n in enumerate(counts)]
    return np.concatenate(feats), np.concatenate(roles)


def oe_mean(spec):
    """Centre of the OE background: the domain centre pushed ``OE_OFFSET``
    along a direction orthogonal to every class direction."""
    center, dirs, _, _ = class_geometry(spec)
    (u,) = _orthonormal(_rng(spec.seed, _S_OE_GEOMETRY), 1, spec.dim, exclude=dirs)
    return center + OE_OFFSET * u


def sample_oe(spec, n, stream=_S_OE):
    """Broad background outliers around :func:`oe_mean`."""
    rng = _rng(spec.seed, stream)
    return _gaussian(rng, oe_mean(spec), OE_STD, n, spec.dim).astype(np.float32)


def sample_heldout_oe(spec, n):
    """Fresh draws from the OE distribution, never seen in training."""
    return sample_oe(spec, n, stream=_S_HELDOUT)


def sample_test_ood(spec, n=None, ood_set=0):
    """Test outliers: novel clusters orthogonal to every ID class direction."""
    n = spec.n_ood_test if n is None else n
    means = _ood_means(spec, ood_set)
    rng = _rng(spec.seed, _S_OOD, ood_set, 1)
    which = rng.integers(0, OOD_CLUSTERS, size=n)
    noise = rng.standard_normal((n, spec.dim))
    return (means[which] + CLUSTER_STD * noise).astype(np.float32)


def sample_synthetic(spec):
    """Long-tailed ID rows, OE rows and TEST_OOD rows for ``spec``."""
    id_x, id_roles = _id_rows(spec, spec.counts, _S_ID)
    oe_x = sample_oe(spec, spec.n_oe)
    ood_x = sample_test_ood(spec)
    return LabeledDataset(
        np.concatenate([id_x.astype(np.float32), oe_x, ood_x]),
        np.concatenate([
            id_roles,
            np.full(spec.n_oe, OE, dtype=np.int32),
            np.full(spec.n_ood_test, TEST_OOD, dtype=np.int32),
        ]),
        spec,
    )


def sample_id_test(spec):
    """Balanced held-out ID test rows, ``n_test_per_class`` per class."""
    counts = [spec.n_test_per_class] * spec.K
    x, roles = _id_rows(spec, counts, _S_ID_TEST)
    return LabeledDataset(x.astype(np.float32), roles, spec)


def make_benchmark(spec, ood_set=0):
    """Split into a training set (ID + OE) and a test set (balanced ID + TEST_OOD)."""
    full = sample_synthetic(spec)
    train = full.subset(~full.ood_mask)
    ood = sample_test_ood(spec, ood_set=ood_set) if ood_set else full.features[full.ood_mask]
    id_test = sample_id_test(spec)
    test = LabeledDataset(
        np.concatenate([id_test.features, ood]),
        np.concatenate([id_test.roles, np.full(ood.shape[0], TEST_OOD, dtype=np.int32)]),
        spec,
    )
    return train, test


def sample_pretrain(dim, n_classes, n_per_class, seed):
    """Balanced stand-in for a large pre-training corpus.

    Cluster means are random directions around the origin, so this
    distribution differs in arrangement and location from the target domain.
    """
    rng = _rng(seed, _S_PRETRAIN)
    dirs = _class_directions(rng, n_classes, dim)
    min_dist = _min_pairwise(dirs) if n_classes > 1 else 1.0
    means = SEPARATION * CLUSTER_STD / min_dist * dirs
    x = np.concatenate([_gaussian(rng, m, CLUSTER_STD, n_per_class, dim) for m in means])
    y = np.repeat(np.arange(n_classes, dtype=np.int32), n_per_class)
    return x.astype(np.float32), y


def _min_pairwise(vectors):
    d = np.linalg.norm(vectors[:, None] - vectors[None], axis=-1)
    return d[~np.eye(len(vectors), dtype=bool)].min()


def write_embeddings(path, matrix, roles):
    matrix = np.asarray(matrix)
    roles = np.asarray(roles)
    if matrix.ndim != 2 or roles.shape != (matrix.shape[0],):
        raise FormatError("matrix must be 2-D with one role per row")
    payload = matrix.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise FormatError("matrix contains values not representable as finite float32")
    n_rows, n_cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0, n_rows, n_cols))
        fh.write(roles.astype("<i4").tobytes())
        fh.write(payload.tobytes())


def read_embeddings(path, spec=None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, _, n_rows, n_cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    expected = _HEADER.size + 4 * n_rows + 4 * n_rows * n_cols
    if len(raw) != expected:
        raise FormatError(f"expected {expected} bytes, file has {len(raw)}")
    roles = np.frombuffer(raw, "<i4", n_rows, _HEADER.size).astype(np.int32)
    values = np.frombuffer(raw, "<f4", n_rows * n_cols, _HEADER.size + 4 * n_rows)
    values = values.astype(np.float32).reshape(n_rows, n_cols)
    if not np.all(np.isfinite(values)):
        raise FormatError("payload contains non-finite values")
    return LabeledDataset(values, roles, spec)


def write_spec(path, spec):
    lines = [f"{k}={v}" for k, v in asdict(spec).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_spec(path):
    types = {f.name: f.type for f in fields(DatasetSpec)}
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise FormatError(f"unknown spec key {key!r}")
        values[key] = float(value) if types[key] == "float" else int(value)
    return DatasetSpec(**values)
