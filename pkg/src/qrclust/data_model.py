"""Clustered regression data: containers, CSV ingestion, validation.

A dataset is an ordered collection of cluster blocks.  Each block holds the
response vector ``y``, the fixed-effects design ``X`` (first column all
ones) and the random-effects design ``Z`` for one cluster.  ``Z``'s columns
are, by construction of the loaders, a subset of ``X``'s columns: the model
family only allows random effects on covariates that also enter the fixed
part.  Arrays are float64, C-contiguous and marked read-only so datasets
can be shared freely across fits and bootstrap replicates.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DataError,
    EmptyInputError,
    ParseError,
    SchemaError,
)

__all__ = [
    "ClusterBlock",
    "ClusteredDataset",
    "ColumnSchema",
    "DatasetDiagnostics",
    "load_csv",
    "write_csv",
    "validate",
]

INTERCEPT = "intercept"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV columns to model roles.

    ``random`` names the columns that get a random effect; it may contain
    the literal ``"intercept"`` and/or names from ``fixed``.
    """

    response: str
    cluster_id: str
    fixed: tuple[str, ...]
    random: tuple[str, ...] = (INTERCEPT,)

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        if len(set(self.fixed)) != len(self.fixed):
            raise SchemaError("duplicate names in fixed covariates")
        if not self.random:
            raise SchemaError("at least one random-effect column is required")
        if len(set(self.random)) != len(self.random):
            raise SchemaError("duplicate names in random covariates")
        allowed = {INTERCEPT, *self.fixed}
        for name in self.random:
            if name not in allowed:
                raise SchemaError(
                    f"random-effect column {name!r} is neither 'intercept' "
                    f"nor a fixed covariate"
                )


class ClusterBlock:
    """Data for a single cluster.

    Invariants checked on construction: equal row counts, at least one
    observation, all values finite, X's first column identically one, and
    1 <= q <= p.
    """

    __slots__ = ("cluster_id", "y", "X", "Z")

    def __init__(self, cluster_id: str, y, X, Z):
        y = _freeze(np.atleast_1d(y))
        X = _freeze(np.atleast_2d(X))
        Z = _freeze(np.atleast_2d(Z))
        if y.ndim != 1 or X.ndim != 2 or Z.ndim != 2:
            raise DataError(f"cluster {cluster_id!r}: y must be 1-D, X and Z 2-D")
        n = y.shape[0]
        if n < 1:
            raise DataError(f"cluster {cluster_id!r} has no observations")
        if X.shape[0] != n or Z.shape[0] != n:
            raise DataError(f"cluster {cluster_id!r}: row counts disagree")
        if not (np.isfinite(y).all() and np.isfinite(X).all() and np.isfinite(Z).all()):
            raise DataError(f"cluster {cluster_id!r} contains non-finite values")
        if not np.all(X[:, 0] == 1.0):
            raise DataError(
                f"cluster {cluster_id!r}: first column of X must be all ones"
            )
        p, q = X.shape[1], Z.shape[1]
        if not 1 <= q <= p:
            raise DataError(f"cluster {cluster_id!r}: need 1 <= q <= p, got q={q} p={p}")
        self.cluster_id = str(cluster_id)
        self.y = y
        self.X = X
        self.Z = Z

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def __repr__(self):
        return f"ClusterBlock(id={self.cluster_id!r}, n={self.n})"


class ClusteredDataset:
    """Ordered, immutable collection of cluster blocks.

    Also exposes the row-stacked arrays (``y``, ``X``, ``Z``) together with
    ``starts`` offsets, which is the layout the numeric kernels work on.
    """

    __slots__ = (
        "blocks",
        "ids",
        "y",
        "X",
        "Z",
        "starts",
        "cluster_index",
        "response_name",
        "cluster_name",
        "fixed_names",
        "random_names",
    )

    def __init__(
        self,
        blocks,
        *,
        response_name: str = "y",
        cluster_name: str = "cluster",
        fixed_names: tuple[str, ...] | None = None,
        random_names: tuple[str, ...] | None = None,
    ):
        blocks = tuple(blocks)
        if len(blocks) < 2:
            raise DataError("a clustered dataset needs at least two clusters")
        ids = tuple(b.cluster_id for b in blocks)
        if len(set(ids)) != len(ids):
            raise DataError("cluster ids must be unique")
        p = blocks[0].X.shape[1]
        q = blocks[0].Z.shape[1]
        for b in blocks:
            if b.X.shape[1] != p or b.Z.shape[1] != q:
                raise DataError("all clusters must share the same p and q")
        self.blocks = blocks
        self.ids = ids
        self.y = _freeze(np.concatenate([b.y for b in blocks]))
        self.X = _freeze(np.vstack([b.X for b in blocks]))
        self.Z = _freeze(np.vstack([b.Z for b in blocks]))
        sizes = np.array([b.n for b in blocks], dtype=np.int64)
        starts = np.zeros(len(blocks) + 1, dtype=np.int64)
        np.cumsum(sizes, out=starts[1:])
        starts.setflags(write=False)
        self.starts = starts
        idx = np.repeat(np.arange(len(blocks), dtype=np.int64), sizes)
        idx.setflags(write=False)
        self.cluster_index = idx
        if fixed_names is None:
            fixed_names = tuple(f"v{k}" for k in range(1, p))
        if len(fixed_names) != p - 1:
            raise DataError("fixed_names must name the non-intercept columns of X")
        if random_names is None:
            random_names = tuple(INTERCEPT if k == 0 else f"z{k}" for k in range(q))
        if len(random_names) != q:
            raise DataError("random_names must have length q")
        self.response_name = response_name
        self.cluster_name = cluster_name
        self.fixed_names = tuple(fixed_names)
        self.random_names = tuple(random_names)

    @property
    def n_clusters(self) -> int:
        return len(self.blocks)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(self.starts)

    @property
    def coef_names(self) -> tuple[str, ...]:
        return (INTERCEPT,) + self.fixed_names

    def with_response(self, y_new: np.ndarray) -> "ClusteredDataset":
        """Same design, new response (used by residual bootstrap schemes)."""
        y_new = np.asarray(y_new, dtype=np.float64)
        if y_new.shape != self.y.shape:
            raise DataError("replacement response has the wrong length")
        blocks = [
            ClusterBlock(
                b.cluster_id,
                y_new[self.starts[i] : self.starts[i + 1]],
                b.X,
                b.Z,
            )
            for i, b in enumerate(self.blocks)
        ]
        return ClusteredDataset(
            blocks,
            response_name=self.response_name,
            cluster_name=self.cluster_name,
            fixed_names=self.fixed_names,
            random_names=self.random_names,
        )

    def take_clusters(self, indices, *, relabel: bool = False) -> "ClusteredDataset":
        """New dataset from the given cluster positions (repeats allowed).

        With ``relabel`` the picked blocks get fresh sequential ids, which
        makes drawing the same cluster twice legal.
        """
        picked = []
        for j, i in enumerate(indices):
            b = self.blocks[int(i)]
            if relabel:
                b = ClusterBlock(f"c{j}", b.y, b.X, b.Z)
            picked.append(b)
        return ClusteredDataset(
            picked,
            response_name=self.response_name,
            cluster_name=self.cluster_name,
            fixed_names=self.fixed_names,
            random_names=self.random_names,
        )

    def __repr__(self):
        return (
            f"ClusteredDataset(N={self.n_clusters}, n_obs={self.n_obs}, "
            f"p={self.p}, q={self.q})"
        )


@dataclass(frozen=True)
class DatasetDiagnostics:
    n_clusters: int
    n_obs: int
    n_min: int
    n_median: float
    n_max: int
    p: int
    q: int
    x_rank: int
    rank_deficient: bool
    n_singletons: int


def load_csv(path, schema: ColumnSchema) -> ClusteredDataset:
    """Read a CSV file into a ClusteredDataset.

    Clusters are formed in order of first appearance of their id; rows keep
    file order within a cluster.  An intercept column is prepended to X
    always, and to Z when the schema asks for a random intercept.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        col_pos: dict[str, int] = {}
        for i, name in enumerate(header):
            col_pos.setdefault(name, i)
        needed = [schema.cluster_id, schema.response, *schema.fixed]
        missing = [c for c in needed if c not in col_pos]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing} (header: {header})")

        order: list[str] = []
        rows_by_id: dict[str, list[list[float]]] = {}
        n_fields = len(header)
        for row_idx, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != n_fields:
                raise ParseError(
                    f"{path}: row {row_idx} has {len(row)} fields, expected {n_fields}"
                )
            cid = row[col_pos[schema.cluster_id]].strip()
            values = []
            for name in (schema.response, *schema.fixed):
                cell = row[col_pos[name]]
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_idx}, column {name!r}: "
                        f"cannot parse {cell!r} as a number"
                    ) from None
            if cid not in rows_by_id:
                order.append(cid)
                rows_by_id[cid] = []
            rows_by_id[cid].append(values)

    if not order:
        raise EmptyInputError(f"{path}: no data rows")

    fixed = schema.fixed
    blocks = []
    for cid in order:
        arr = np.asarray(rows_by_id[cid], dtype=np.float64)
        y = arr[:, 0]
        n = arr.shape[0]
        X = np.hstack([np.ones((n, 1)), arr[:, 1:]])
        z_cols = []
        for name in schema.random:
            if name == INTERCEPT:
                z_cols.append(np.ones(n))
            else:
                z_cols.append(arr[:, 1 + fixed.index(name)])
        Z = np.column_stack(z_cols)
        blocks.append(ClusterBlock(cid, y, X, Z))

    return ClusteredDataset(
        blocks,
        response_name=schema.response,
        cluster_name=schema.cluster_id,
        fixed_names=fixed,
        random_names=schema.random,
    )


def write_csv(dataset: ClusteredDataset, path) -> None:
    """Write a dataset back to CSV.

    Floats are rendered with 17 significant digits, which round-trips
    float64 exactly: load_csv(write_csv(d)) reproduces d bit for bit.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [dataset.cluster_name, dataset.response_name, *dataset.fixed_names]
        )
        for b in dataset.blocks:
            for j in range(b.n):
                cells = [b.cluster_id, format(b.y[j], ".17g")]
                cells += [format(v, ".17g") for v in b.X[j, 1:]]
                writer.writerow(cells)


def validate(dataset: ClusteredDataset) -> DatasetDiagnostics:
    """Structural diagnostics; rank deficiency is reported, not raised."""
    sizes = dataset.cluster_sizes
    X = dataset.X
    # rank via column-pivoted QR
    R = scipy.linalg.qr(X, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    return DatasetDiagnostics(
        n_clusters=dataset.n_clusters,
        n_obs=dataset.n_obs,
        n_min=int(sizes.min()),
        n_median=float(statistics.median(sizes.tolist())),
        n_max=int(sizes.max()),
        p=dataset.p,
        q=dataset.q,
        x_rank=rank,
        rank_deficient=rank < dataset.p,
        n_singletons=int((sizes == 1).sum()),
    )
