"""Parameter containers for the three model variants.

Random numbers come from NumPy's PCG64 bit generator. ``init_params`` feeds
``SeedSequence(seed)`` and spawns four independent child streams, in order:
user embeddings, item embeddings, user projections, item projections. Each
stream draws 53-bit doubles with ``Generator.random`` which are mapped
affinely onto the target interval. Drawing the streams separately keeps the
embedding values identical across variants for the same seed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DimensionScheme

VARIANTS = ("baseline", "zero_pad", "projected")
EMBEDDING_INIT_RANGE = 0.1

CHECKPOINT_MAGIC = b"MDALSCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class EmbeddingStore:
    """Variable-length vectors packed into one flat buffer."""

    dims: np.ndarray
    offsets: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dims(cls, dims, values=None) -> "EmbeddingStore":
        dims = np.ascontiguousarray(dims, dtype=np.int64)
        offsets = np.zeros(dims.size + 1, dtype=np.int64)
        np.cumsum(dims, out=offsets[1:])
        if values is None:
            values = np.zeros(int(offsets[-1]))
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (int(offsets[-1]),):
            raise ValueError("value buffer length does not match dims")
        return cls(dims, offsets, values)

    def __len__(self) -> int:
        return int(self.dims.shape[0])

    def vector(self, k: int) -> np.ndarray:
        return self.values[self.offsets[k] : self.offsets[k + 1]]

    def padded(self, d: int) -> np.ndarray:
        """Dense ``n x d`` table with zeros past each entity's own dimension."""
        out = np.zeros((len(self), d))
        for p in np.unique(self.dims):
            rows = np.flatnonzero(self.dims == p)
            out[rows, :p] = self.values[self.offsets[rows][:, None] + np.arange(p)]
        return out

    def group(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        """(entity indices, ``n_p x p`` values) for all entities of dimension ``p``."""
        rows = np.flatnonzero(self.dims == p)
        return rows, self.values[self.offsets[rows][:, None] + np.arange(p)]

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.dims.copy(), self.offsets.copy(), self.values.copy())


@dataclass
class ProjectionSet:
    """Trainable ``d x p`` matrices keyed by source dimension ``p < d``.

    The matrix for ``p == d`` is the identity and is never stored.
    """

    max_dim: int
    matrices: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for p, m in self.matrices.items():
            if not 1 <= p < self.max_dim or m.shape != (self.max_dim, p):
                raise ValueError(f"projection for p={p} has shape {m.shape}")

    def matrix(self, p: int) -> np.ndarray:
        if p == self.max_dim:
            return np.eye(self.max_dim)
        return self.matrices[p]

    def keys(self) -> list[int]:
        return sorted(self.matrices)

    def frobenius_sq(self) -> float:
        return float(sum(np.sum(self.matrices[p] ** 2) for p in self.keys()))

    def size(self) -> int:
        return sum(self.max_dim * p for p in self.matrices)

    def kernel_layout(self) -> tuple[np.ndarray, np.ndarray]:
        """(index by p into the flat buffer or -1, flat row-major buffer)."""
        index = np.full(self.max_dim + 1, -1, dtype=np.int64)
        chunks, pos = [], 0
        for p in self.keys():
            index[p] = pos
            chunks.append(self.matrices[p].reshape(-1))
            pos += self.max_dim * p
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return index, np.ascontiguousarray(flat)

    def copy(self) -> "ProjectionSet":
        return ProjectionSet(self.max_dim, {p: m.copy() for p, m in self.matrices.items()})


def no_projection(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Kernel layout meaning "truncate to the first p coordinates"."""
    return np.full(d + 1, -1, dtype=np.int64), np.zeros(0)


@dataclass
class ModelParams:
    variant: str
    max_dim: int
    allowed_dims: tuple[int, ...]
    user_embeddings: EmbeddingStore
    item_embeddings: EmbeddingStore
    user_projections: ProjectionSet | None = None
    item_projections: ProjectionSet | None = None

    def __post_init__(self):
        _check_variant(self.variant)
        if self.variant == "projected":
            if self.user_projections is None or self.item_projections is None:
                raise ValueError("projected variant needs both projection sets")
        elif self.user_projections is not None or self.item_projections is not None:
            raise ValueError(f"{self.variant} variant has no projections")

    @property
    def num_users(self) -> int:
        return len(self.user_embeddings)

    @property
    def num_items(self) -> int:
        return len(self.item_embeddings)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            self.max_dim,
            self.allowed_dims,
            self.user_embeddings.copy(),
            self.item_embeddings.copy(),
            None if self.user_projections is None else self.user_projections.copy(),
            None if self.item_projections is None else self.item_projections.copy(),
        )

    def projected_users(self) -> np.ndarray:
        return project_all(self.user_embeddings, self.user_projections, self.max_dim)

    def projected_items(self) -> np.ndarray:
        return project_all(self.item_embeddings, self.item_projections, self.max_dim)


def xavier_bound(d: int, p: int) -> float:
    return float(np.sqrt(6.0 / (d + p)))


def truncated_identity(d: int, p: int) -> np.ndarray:
    return np.eye(d, p)


def init_params(
    scheme: DimensionScheme,
    variant: str,
    seed: int,
    projection_init: str = "xavier",
) -> ModelParams:
    """Seeded random initialization.

    Embedding entries are uniform in [-0.1, 0.1]; trainable projections are
    Xavier-uniform with fan-in ``p`` and fan-out ``d`` (or truncated
    identities when ``projection_init == "truncated_identity"``).
    """
    _check_variant(variant)
    d = scheme.max_dim
    if variant == "baseline" and (
        np.any(scheme.user_dims != d) or np.any(scheme.item_dims != d)
    ):
        raise ValueError("baseline variant requires every dimension to equal d")
    streams = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(4)]
    stores = []
    for dims, rng in ((scheme.user_dims, streams[0]), (scheme.item_dims, streams[1])):
        total = int(np.sum(dims))
        values = (2.0 * rng.random(total) - 1.0) * EMBEDDING_INIT_RANGE
        stores.append(EmbeddingStore.from_dims(dims, values))
    projections = [None, None]
    if variant == "projected":
        for k, (dims, rng) in enumerate(((scheme.user_dims, streams[2]), (scheme.item_dims, streams[3]))):
            mats = {}
            for p in sorted(set(int(x) for x in np.unique(dims)) - {d}):
                if projection_init == "truncated_identity":
                    mats[p] = truncated_identity(d, p)
                elif projection_init == "xavier":
                    bound = xavier_bound(d, p)
                    mats[p] = (2.0 * rng.random((d, p)) - 1.0) * bound
                else:
                    raise ValueError(f"unknown projection_init {projection_init!r}")
            projections[k] = ProjectionSet(d, mats)
    return ModelParams(variant, d, scheme.allowed_dims, stores[0], stores[1], *projections)


def project_all(store: EmbeddingStore, projections: ProjectionSet | None, d: int) -> np.ndarray:
    """Dense ``n x d`` table of projected embeddings.

    Without projections this is the zero-padded table. Entities whose
    dimension is ``d`` pass through unchanged.
    """
    if projections is None:
        return store.padded(d)
    out = np.zeros((len(store), d))
    for p in np.unique(store.dims):
        p = int(p)
        rows, vals = store.group(p)
        out[rows] = vals if p == d else vals @ projections.matrix(p).T
    return out


def predict_pairs(params: ModelParams, users, items) -> np.ndarray:
    """Scores for many (user, item) pairs at once."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    xu = params.projected_users()
    yi = params.projected_items()
    return np.einsum("ij,ij->i", xu[users], yi[items])


def predict(params: ModelParams, user: int, item: int) -> float:
    x = params.user_embeddings.vector(user)
    y = params.item_embeddings.vector(item)
    if params.variant == "projected":
        xb = x if x.size == params.max_dim else params.user_projections.matrix(x.size) @ x
        yb = y if y.size == params.max_dim else params.item_projections.matrix(y.size) @ y
        return float(xb @ yb)
    k = min(x.size, y.size)
    return float(x[:k] @ y[:k])


def count_parameters(params: ModelParams) -> int:
    """Embedding entries plus the entries of every trainable projection matrix."""
    total = int(params.user_embeddings.dims.sum() + params.item_embeddings.dims.sum())
    if params.variant == "projected":
        total += params.user_projections.size() + params.item_projections.size()
    return total


# --------------------------------------------------------------------------
# checkpoints (little-endian)


def dumps_checkpoint(params: ModelParams) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IBI", CHECKPOINT_VERSION, VARIANTS.index(params.variant), params.max_dim))
    out.write(struct.pack("<I", len(params.allowed_dims)))
    out.write(np.asarray(params.allowed_dims, dtype="<u4").tobytes())
    out.write(struct.pack("<QQ", params.num_users, params.num_items))
    for store in (params.user_embeddings, params.item_embeddings):
        out.write(store.dims.astype("<u4").tobytes())
    for store in (params.user_embeddings, params.item_embeddings):
        out.write(store.values.astype("<f8").tobytes())
    for proj in (params.user_projections, params.item_projections):
        keys = [] if proj is None else proj.keys()
        out.write(struct.pack("<I", len(keys)))
        for p in keys:
            out.write(struct.pack("<I", p))
            out.write(proj.matrices[p].astype("<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def loads_checkpoint(blob: bytes) -> ModelParams:
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not an mdals checkpoint")
    version, code, d = r.unpack("<IBI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if code >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {code}")
    (n_allowed,) = r.unpack("<I")
    allowed = tuple(int(a) for a in r.array("<u4", n_allowed))
    nu, ni = r.unpack("<QQ")
    udims = r.array("<u4", nu).astype(np.int64)
    idims = r.array("<u4", ni).astype(np.int64)
    uvals = r.array("<f8", int(udims.sum()))
    ivals = r.array("<f8", int(idims.sum()))
    projections = []
    for _ in range(2):
        (count,) = r.unpack("<I")
        mats = {}
        for _ in range(count):
            (p,) = r.unpack("<I")
            mats[int(p)] = r.array("<f8", d * p).reshape(d, p)
        projections.append(ProjectionSet(d, mats))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    variant = VARIANTS[code]
    if variant != "projected":
        if any(p.matrices for p in projections):
            raise CheckpointError(f"{variant} checkpoint carries projection matrices")
        projections = [None, None]
    try:
        return ModelParams(
            variant,
            d,
            allowed,
            EmbeddingStore.from_dims(udims, uvals),
            EmbeddingStore.from_dims(idims, ivals),
            *projections,
        )
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            return loads_checkpoint(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
