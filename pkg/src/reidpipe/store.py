"""Data model and bit-exact file I/O for embedding bundles and distance matrices.

A bundle directory holds three files:

    meta.json       {"n": <int>, "dim": <int>, "dtype": "f32le", "layout": "row-major"}
    embeddings.bin  n*dim little-endian float32, row-major, no header
    labels.csv      index,pid,camid,domain,split,camstyle

A distance bundle holds:

    dist.meta.json  {"rows": R, "cols": C, "dtype": "f32le"}
    dist.bin        R*C little-endian float32, row-major
    dist.ids.json   {"row_ids": [...], "col_ids": [...]}

The synthetic generator used by the desk-scale tests lives here as well; it
draws everything from the portable SplitMix64 stream so fixtures are bitwise
reproducible for a given seed.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64

DOMAINS = ("source", "target")
SPLITS = ("train", "query", "gallery", "val")
SPLIT_PLANS = ("eval", "train")

_DTYPE_TAG = "f32le"
_SELF_SYMMETRY_TOL = 1e-5


class BundleError(ValueError):
    """Raised for invalid, inconsistent or unreadable bundle data."""


@dataclass(frozen=True)
class SampleMeta:
    """Per-row metadata for one embedding."""

    index: int
    pid: int
    camid: int
    domain: str
    split: str
    camstyle: bool = False


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the seeded synthetic embedding generator.

    `intra_sigma` and `camera_offset` are both per-coordinate scales: the
    camera bias vector for camera c is a fixed random unit direction scaled
    to norm camera_offset*sqrt(dim), so its per-coordinate magnitude is
    comparable with the per-coordinate noise sigma.
    """

    n_ids: int
    samples_per_id: int
    dim: int = 512
    n_cameras: int = 1
    intra_sigma: float = 0.0
    camera_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_ids < 1 or self.samples_per_id < 1:
            raise ValueError("n_ids and samples_per_id must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")
        if self.intra_sigma < 0 or self.camera_offset < 0:
            raise ValueError("noise scales must be >= 0")


class EmbeddingSet:
    """Immutable n x d float32 feature matrix plus per-row metadata."""

    def __init__(self, features: np.ndarray, meta):
        features = np.ascontiguousarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise BundleError("features must be a 2-D array")
        meta = tuple(meta)
        if len(meta) != features.shape[0]:
            raise BundleError(
                "inconsistent bundle: %d meta rows for %d feature rows"
                % (len(meta), features.shape[0])
            )
        if features.shape[1] < 1:
            raise BundleError("feature dimension must be >= 1")
        for m in meta:
            if m.camid < 0:
                raise BundleError("invalid camera id %d at index %d" % (m.camid, m.index))
            if m.domain not in DOMAINS:
                raise BundleError("unknown domain %r" % (m.domain,))
            if m.split not in SPLITS:
                raise BundleError("unknown split %r" % (m.split,))
            if m.pid < 0 and (m.pid != -1 or m.domain != "target"):
                raise BundleError(
                    "pid %d at index %d: only pid=-1 on target rows is allowed" % (m.pid, m.index)
                )
        indices = [m.index for m in meta]
        if len(set(indices)) != len(indices):
            raise BundleError("duplicate sample index in metadata")
        features.setflags(write=False)
        self.features = features
        self.meta = meta
        self.indices = np.asarray(indices, dtype=np.int64)
        self.pids = np.asarray([m.pid for m in meta], dtype=np.int64)
        self.camids = np.asarray([m.camid for m in meta], dtype=np.int64)
        self.domains = np.asarray([m.domain for m in meta])
        self.splits = np.asarray([m.split for m in meta])
        self.camstyle = np.asarray([m.camstyle for m in meta], dtype=bool)
        for arr in (self.indices, self.pids, self.camids, self.domains, self.splits, self.camstyle):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "EmbeddingSet":
        """New set containing the given rows, order preserved."""
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingSet(self.features[rows], [self.meta[int(r)] for r in rows])

    def with_features(self, features: np.ndarray) -> "EmbeddingSet":
        """Same metadata, replaced feature matrix (must keep the shape)."""
        features = np.asarray(features)
        if features.shape != self.features.shape:
            raise BundleError("replacement features must keep shape %r" % (self.features.shape,))
        return EmbeddingSet(features, self.meta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.features.shape == other.features.shape
            and bool(np.all(self.features == other.features))
        )


class DistanceMatrix:
    """rows x cols matrix of pairwise distances with row/col sample ids.

    Entries are finite float32 >= 0. When row_ids equal col_ids the matrix
    is a self-distance matrix and must have a zero diagonal and be symmetric
    within 1e-5.
    """

    def __init__(self, values: np.ndarray, row_ids, col_ids):
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise BundleError("distance values must be 2-D")
        row_ids = np.asarray(row_ids, dtype=np.int64)
        col_ids = np.asarray(col_ids, dtype=np.int64)
        if row_ids.shape != (values.shape[0],) or col_ids.shape != (values.shape[1],):
            raise BundleError("row/col id lengths do not match the value shape")
        if not np.all(np.isfinite(values)):
            raise BundleError("distance matrix contains non-finite entries")
        if values.size and values.min() < 0:
            raise BundleError("distance matrix contains negative entries")
        if self._ids_equal(row_ids, col_ids):
            if values.size and np.any(np.diagonal(values) != 0):
                raise BundleError("self-distance matrix must have a zero diagonal")
            if values.size and not np.allclose(values, values.T, rtol=0.0, atol=_SELF_SYMMETRY_TOL):
                raise BundleError("self-distance matrix must be symmetric within 1e-5")
        values.setflags(write=False)
        row_ids.setflags(write=False)
        col_ids.setflags(write=False)
        self.values = values
        self.row_ids = row_ids
        self.col_ids = col_ids

    @staticmethod
    def _ids_equal(a: np.ndarray, b: np.ndarray) -> bool:
        return a.shape == b.shape and bool(np.all(a == b))

    @property
    def is_self(self) -> bool:
        return self._ids_equal(self.row_ids, self.col_ids)

    @property
    def shape(self):
        return self.values.shape


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise BundleError("missing file: %s" % path)
    return path


def save_bundle(es: EmbeddingSet, path: str) -> None:
    """Write meta.json, embeddings.bin and labels.csv for `es` under `path`."""
    os.makedirs(path, exist_ok=True)
    meta = {"n": es.n, "dim": es.dim, "dtype": _DTYPE_TAG, "layout": "row-major"}
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    with open(os.path.join(path, "embeddings.bin"), "wb") as f:
        f.write(np.ascontiguousarray(es.features, dtype="<f4").tobytes())
    with open(os.path.join(path, "labels.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["index", "pid", "camid", "domain", "split", "camstyle"])
        for m in es.meta:
            w.writerow([m.index, m.pid, m.camid, m.domain, m.split, int(m.camstyle)])


def load_bundle(path: str) -> EmbeddingSet:
    """Read a bundle directory back into an EmbeddingSet.

    Rejects missing files, byte-length mismatches between meta.json and
    embeddings.bin, malformed CSV rows and unknown dtypes.
    """
    with open(_require_file(os.path.join(path, "meta.json")), encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("n", "dim", "dtype"):
        if key not in meta:
            raise BundleError("meta.json missing key %r" % key)
    if meta["dtype"] != _DTYPE_TAG:
        raise BundleError("unknown dtype %r (expected %r)" % (meta["dtype"], _DTYPE_TAG))
    if meta.get("layout", "row-major") != "row-major":
        raise BundleError("unknown layout %r" % (meta["layout"],))
    n, dim = int(meta["n"]), int(meta["dim"])
    if n < 0 or dim < 1:
        raise BundleError("invalid meta.json dimensions n=%d dim=%d" % (n, dim))

    with open(_require_file(os.path.join(path, "embeddings.bin")), "rb") as f:
        blob = f.read()
    expected = n * dim * 4
    if len(blob) != expected:
        raise BundleError(
            "embeddings.bin is %d bytes, expected %d (n=%d, dim=%d)" % (len(blob), expected, n, dim)
        )
    features = np.frombuffer(blob, dtype="<f4").reshape(n, dim).copy()

    rows = []
    with open(_require_file(os.path.join(path, "labels.csv")), newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["index", "pid", "camid", "domain", "split", "camstyle"]:
            raise BundleError("labels.csv has unexpected header %r" % (header,))
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise BundleError("labels.csv line %d: expected 6 fields, got %d" % (lineno, len(row)))
            try:
                index, pid, camid = int(row[0]), int(row[1]), int(row[2])
                camstyle = int(row[5])
            except ValueError as exc:
                raise BundleError("labels.csv line %d: %s" % (lineno, exc)) from exc
            if camid < 0:
                raise BundleError("invalid camera id %d (labels.csv line %d)" % (camid, lineno))
            if camstyle not in (0, 1):
                raise BundleError("labels.csv line %d: camstyle must be 0 or 1" % lineno)
            rows.append(SampleMeta(index, pid, camid, row[3], row[4], bool(camstyle)))
    if len(rows) != n:
        raise BundleError("inconsistent bundle: labels.csv has %d rows, meta.json says %d" % (len(rows), n))
    return EmbeddingSet(features, rows)


def save_distance(dm: DistanceMatrix, path: str) -> None:
    """Write dist.meta.json, dist.bin and dist.ids.json under `path`."""
    os.makedirs(path, exist_ok=True)
    meta = {"rows": int(dm.shape[0]), "cols": int(dm.shape[1]), "dtype": _DTYPE_TAG}
    with open(os.path.join(path, "dist.meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    with open(os.path.join(path, "dist.bin"), "wb") as f:
        f.write(np.ascontiguousarray(dm.values, dtype="<f4").tobytes())
    ids = {"row_ids": [int(i) for i in dm.row_ids], "col_ids": [int(i) for i in dm.col_ids]}
    with open(os.path.join(path, "dist.ids.json"), "w", encoding="utf-8") as f:
        json.dump(ids, f)
        f.write("\n")


def load_distance(path: str) -> DistanceMatrix:
    """Read a distance bundle directory back into a DistanceMatrix."""
    with open(_require_file(os.path.join(path, "dist.meta.json")), encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("dtype") != _DTYPE_TAG:
        raise BundleError("unknown dtype %r (expected %r)" % (meta.get("dtype"), _DTYPE_TAG))
    rows, cols = int(meta["rows"]), int(meta["cols"])
    with open(_require_file(os.path.join(path, "dist.bin")), "rb") as f:
        blob = f.read()
    if len(blob) != rows * cols * 4:
        raise BundleError("dist.bin is %d bytes, expected %d" % (len(blob), rows * cols * 4))
    values = np.frombuffer(blob, dtype="<f4").reshape(rows, cols).copy()
    with open(_require_file(os.path.join(path, "dist.ids.json")), encoding="utf-8") as f:
        ids = json.load(f)
    return DistanceMatrix(values, ids["row_ids"], ids["col_ids"])


def generate_synthetic(cfg: SynthConfig, domain: str = "target", split_plan: str = "eval") -> EmbeddingSet:
    """Build a seeded synthetic embedding set.

    Row for sample j of identity p:

        center(p) + camera_bias(j mod n_cameras) + intra_sigma * noise

    with identity centers drawn per coordinate from the unit Gaussian,
    camera biases as fixed random unit directions scaled to norm
    camera_offset*sqrt(dim), and per-coordinate Gaussian noise. Draw order
    from the SplitMix64(seed) stream is: centers (n_ids*dim), camera
    directions (n_cameras*dim), then noise (n*dim), so output is bitwise
    deterministic for a given config.

    split_plan "eval" marks sample 0 of each identity as query and the rest
    as gallery; "train" marks every row as train.
    """
    if domain not in DOMAINS:
        raise ValueError("unknown domain %r" % (domain,))
    if split_plan not in SPLIT_PLANS:
        raise ValueError("unknown split plan %r" % (split_plan,))
    rng = SplitMix64(cfg.seed)
    centers = rng.gaussians(cfg.n_ids * cfg.dim).reshape(cfg.n_ids, cfg.dim)
    cam_dirs = rng.gaussians(cfg.n_cameras * cfg.dim).reshape(cfg.n_cameras, cfg.dim)
    norms = np.linalg.norm(cam_dirs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    cam_bias = cam_dirs / norms * (cfg.camera_offset * np.sqrt(cfg.dim))
    n = cfg.n_ids * cfg.samples_per_id
    noise = rng.gaussians(n * cfg.dim).reshape(n, cfg.dim) * cfg.intra_sigma

    pids = np.repeat(np.arange(cfg.n_ids), cfg.samples_per_id)
    sample_pos = np.tile(np.arange(cfg.samples_per_id), cfg.n_ids)
    camids = sample_pos % cfg.n_cameras
    features = centers[pids] + cam_bias[camids] + noise

    meta = []
    for i in range(n):
        if split_plan == "train":
            split = "train"
        else:
            split = "query" if sample_pos[i] == 0 else "gallery"
        meta.append(SampleMeta(i, int(pids[i]), int(camids[i]), domain, split, False))
    return EmbeddingSet(features.astype(np.float32), meta)


def select_split(es: EmbeddingSet, split: str) -> EmbeddingSet:
    """Rows of `es` whose split matches, order preserved."""
    if split not in SPLITS:
        raise ValueError("unknown split %r" % (split,))
    return es.take(np.nonzero(es.splits == split)[0])
