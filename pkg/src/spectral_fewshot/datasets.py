"""Dataset containers, raw-format converters, class splits and SBM graphs.

Container layout (all integers little-endian), file ``<name>.graph``::

    offset  size              field
    0       8                 magic  b"FSLGRAPH"
    8       4   uint32        format version (1)
    12      4   uint32        flags; bit 0 set -> features stored as CSR
    16      8   uint64        num_nodes  (n)
    24      8   uint64        num_edges  (E)
    32      8   uint64        feature_dim (d)
    40      16E int64         edge list, E rows of (u, v) with u < v
    ...     dense:  4nd float32  row-major feature matrix
            CSR:    8 uint64 nnz, 8(n+1) int64 indptr,
                    4nnz int32 indices, 4nnz float32 values
    ...     4n  int32         labels

A JSON sidecar ``<name>.json`` records the name, the four counts and the
SHA-256 of the ``.graph`` file.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import Graph, edge_homophily

MAGIC = b"FSLGRAPH"
VERSION = 1
FLAG_CSR = 1
HEADER = struct.Struct("<8sIIQQQ")

DATA_ENV_VAR = "SPECTRAL_FEWSHOT_DATA"
BUNDLED_ROOT = Path(__file__).parent / "data"

# (train, val, test) class counts per dataset
SPLIT_SIZES = {
    "cora": (3, 2, 2),
    "citeseer": (2, 2, 2),
    "amazon-computer": (4, 3, 3),
    "coauthor-cs": (5, 5, 5),
    "dblp": (77, 30, 30),
    "corafull": (40, 15, 15),
    "ogbn-arxiv": (20, 10, 10),
}

# nodes, undirected edges, feature dim, classes
KNOWN_STATS = {
    "cora": (2708, 5278, 1433, 7),
    "citeseer": (3327, 4552, 3703, 6),
    "amazon-computer": (13381, 245778, 767, 10),
    "coauthor-cs": (18333, 81894, 6805, 15),
    "dblp": (40672, 144135, 7202, 137),
    "corafull": (19793, 65311, 8710, 70),
    "ogbn-arxiv": (169343, 1166243, 128, 40),
}


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: corrupt container at byte {offset}: {message}")


def default_root() -> Path:
    env = os.environ.get(DATA_ENV_VAR)
    return Path(env) if env else BUNDLED_ROOT


# -- container IO -------------------------------------------------------------


def write_container(graph: Graph, root, sparse_features: Optional[bool] = None) -> Path:
    """Write ``graph`` as ``<root>/<name>.graph`` plus its JSON sidecar."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if sparse_features is None:
        sparse_features = sp.issparse(graph.features)
    labels = graph.labels if graph.labels is not None else np.zeros(graph.num_nodes, np.int64)

    buf = io.BytesIO()
    flags = FLAG_CSR if sparse_features else 0
    buf.write(HEADER.pack(MAGIC, VERSION, flags, graph.num_nodes, graph.num_edges, graph.feature_dim))
    buf.write(np.ascontiguousarray(graph.edges, dtype="<i8").tobytes())
    if sparse_features:
        x = sp.csr_matrix(graph.features, dtype=np.float32)
        x.sort_indices()
        buf.write(struct.pack("<Q", x.nnz))
        buf.write(x.indptr.astype("<i8").tobytes())
        buf.write(x.indices.astype("<i4").tobytes())
        buf.write(x.data.astype("<f4").tobytes())
    else:
        buf.write(np.ascontiguousarray(graph.dense_features(np.float32), dtype="<f4").tobytes())
    buf.write(labels.astype("<i4").tobytes())

    payload = buf.getvalue()
    path = root / f"{graph.name}.graph"
    path.write_bytes(payload)
    sidecar = {
        "name": graph.name,
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "feature_dim": graph.feature_dim,
        "num_classes": graph.num_classes,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    (root / f"{graph.name}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


class _Reader:
    def __init__(self, path: Path, data: bytes):
        self.path, self.data, self.pos = path, data, 0

    def take(self, nbytes: int, what: str) -> bytes:
        if nbytes < 0 or self.pos + nbytes > len(self.data):
            raise DatasetFormatError(
                self.path, self.pos, f"truncated while reading {what} ({nbytes} bytes needed)"
            )
        chunk = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()


def read_container(path, name: Optional[str] = None) -> Graph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    r = _Reader(path, path.read_bytes())
    magic, version, flags, n, num_edges, d = HEADER.unpack(r.take(HEADER.size, "header"))
    if magic != MAGIC:
        raise DatasetFormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(path, 8, f"unsupported version {version}")
    edges = r.array("<i8", 2 * num_edges, "edge list").reshape(-1, 2)
    if flags & FLAG_CSR:
        (nnz,) = struct.unpack("<Q", r.take(8, "nnz"))
        indptr_at = r.pos
        indptr = r.array("<i8", n + 1, "CSR indptr")
        if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
            raise DatasetFormatError(path, indptr_at, "inconsistent CSR indptr")
        indices_at = r.pos
        indices = r.array("<i4", nnz, "CSR indices")
        if nnz and (indices.min() < 0 or indices.max() >= d):
            raise DatasetFormatError(path, indices_at, "CSR column index out of range")
        values = r.array("<f4", nnz, "CSR values")
        features = sp.csr_matrix((values, indices, indptr), shape=(n, d))
    else:
        features = r.array("<f4", n * d, "dense features").reshape(n, d)
    labels_at = r.pos
    labels = r.array("<i4", n, "labels").astype(np.int64)
    if r.pos != len(r.data):
        raise DatasetFormatError(path, r.pos, f"{len(r.data) - r.pos} trailing bytes")
    if n and labels.min() < 0:
        raise DatasetFormatError(path, labels_at, "negative label")
    if num_edges and (edges.min() < 0 or edges.max() >= n):
        raise DatasetFormatError(path, HEADER.size, "edge endpoint out of range")
    return Graph(num_nodes=int(n), edges=edges, features=features, labels=labels,
                 name=name or path.stem)


def load_dataset(name: str, root=None, verify: bool = True) -> Graph:
    """Load ``<root>/<name>.graph``; checks the sidecar and known statistics."""
    root = Path(root) if root is not None else default_root()
    key = name.lower()
    path = root / f"{key}.graph"
    sidecar_path = root / f"{key}.json"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing dataset sidecar: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if verify:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if digest != meta.get("sha256"):
            raise DatasetFormatError(path, 0, "checksum does not match sidecar")
    graph = read_container(path, name=key)
    for field_name, value in (("num_nodes", graph.num_nodes), ("num_edges", graph.num_edges),
                              ("feature_dim", graph.feature_dim)):
        if meta.get(field_name) != value:
            raise DatasetError(f"{sidecar_path}: {field_name}={meta.get(field_name)} but file has {value}")
    return graph


# -- raw-format converters ----------------------------------------------------


def convert_linqs(content_path, cites_path, name: str) -> Graph:
    """Convert the LINQS ``.content`` / ``.cites`` pair (e.g. Cora).

    Nodes keep the order of the content file; class names are sorted.
    Citations referencing unknown papers are dropped.
    """
    ids, rows, label_names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            rows.append(np.asarray(parts[1:-1], dtype=np.float32))
            label_names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(label_names))
    labels = np.asarray([classes.index(c) for c in label_names], dtype=np.int64)
    features = sp.csr_matrix(np.vstack(rows))
    pairs = []
    with open(cites_path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a in index and b in index:
                pairs.append((index[a], index[b]))
    return Graph.from_edge_list(len(ids), pairs, features, labels, name=name)


class _PlanetoidUnpickler(pickle.Unpickler):
    _allowed = {
        ("collections", "defaultdict"),
        ("builtins", "list"),
        ("builtins", "dict"),
        ("builtins", "set"),
        ("builtins", "int"),
        ("copy_reg", "_reconstructor"),
        ("copyreg", "_reconstructor"),
        ("builtins", "object"),
        ("__builtin__", "object"),
        ("__builtin__", "list"),
    }

    def find_class(self, module, name):
        if module.startswith("numpy") or module.startswith("scipy.sparse"):
            return super().find_class(module, name)
        if (module, name) in self._allowed:
            return super().find_class(module, name)
        raise pickle.UnpicklingError(f"refusing to load {module}.{name}")


def _load_planetoid_object(path: Path):
    with open(path, "rb") as fh:
        return _PlanetoidUnpickler(fh, encoding="latin1").load()


def convert_planetoid(raw_dir, name: str) -> Graph:
    """Convert the Planetoid ``ind.<name>.*`` files.

    Test indices that are missing from the raw split (CiteSeer has 15) get
    all-zero feature rows and label 0, the usual convention for this data.
    """
    raw_dir = Path(raw_dir)
    parts = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        path = raw_dir / f"ind.{name}.{key}"
        if not path.exists():
            raise FileNotFoundError(f"missing raw file: {path}")
        parts[key] = _load_planetoid_object(path)
    index_path = raw_dir / f"ind.{name}.test.index"
    if not index_path.exists():
        raise FileNotFoundError(f"missing raw file: {index_path}")
    test_idx = np.loadtxt(index_path, dtype=np.int64)
    sorted_test = np.sort(test_idx)

    allx = sp.csr_matrix(parts["allx"])
    tx = sp.csr_matrix(parts["tx"])
    ally = np.asarray(parts["ally"])
    ty = np.asarray(parts["ty"])
    full_range = np.arange(sorted_test.min(), sorted_test.max() + 1)
    if len(full_range) != len(sorted_test):
        tx_ext = sp.lil_matrix((len(full_range), tx.shape[1]), dtype=np.float32)
        tx_ext[sorted_test - sorted_test.min(), :] = tx
        tx = tx_ext.tocsr()
        ty_ext = np.zeros((len(full_range), ty.shape[1]))
        ty_ext[sorted_test - sorted_test.min(), :] = ty
        ty = ty_ext
    features = sp.vstack([allx, tx]).tolil()
    onehot = np.vstack([ally, ty])
    features[test_idx, :] = features[sorted_test, :]
    onehot[test_idx, :] = onehot[sorted_test, :]
    labels = onehot.argmax(axis=1).astype(np.int64)
    n = features.shape[0]
    pairs = [(u, v) for u, nbrs in parts["graph"].items() for v in nbrs if u < n and v < n]
    return Graph.from_edge_list(n, pairs, sp.csr_matrix(features, dtype=np.float32), labels, name=name)


def convert_raw(raw_dir, name: str) -> Graph:
    """Dispatch on whichever raw layout is present in ``raw_dir``."""
    raw_dir = Path(raw_dir)
    content = raw_dir / f"{name}.content"
    cites = raw_dir / f"{name}.cites"
    if content.exists() or cites.exists():
        for p in (content, cites):
            if not p.exists():
                raise FileNotFoundError(f"missing raw file: {p}")
        return convert_linqs(content, cites, name)
    return convert_planetoid(raw_dir, name)


# -- class splits -------------------------------------------------------------


@dataclass(frozen=True)
class ClassSplit:
    base_classes: frozenset
    val_classes: frozenset
    novel_classes: frozenset
    seed: Optional[int] = None

    def __post_init__(self):
        if (self.base_classes & self.val_classes or self.base_classes & self.novel_classes
                or self.val_classes & self.novel_classes):
            raise ValueError("class split partitions overlap")

    def classes_for(self, phase: str) -> frozenset:
        try:
            return {"train": self.base_classes, "val": self.val_classes,
                    "test": self.novel_classes}[phase]
        except KeyError:
            raise ValueError(f"unknown phase {phase!r}") from None


def class_split(name: str, num_classes: int, seed: int = 0, sizes=None) -> ClassSplit:
    """Seeded shuffle of class ids sliced into (train, val, test) sizes."""
    if sizes is None:
        try:
            sizes = SPLIT_SIZES[name.lower()]
        except KeyError:
            raise ValueError(f"no split sizes known for {name!r}; pass sizes=") from None
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0 or sum(sizes) > num_classes:
        raise ValueError(f"invalid split sizes {sizes} for {num_classes} classes")
    perm = np.random.default_rng(seed).permutation(num_classes)
    a, b, c = sizes
    return ClassSplit(
        base_classes=frozenset(int(i) for i in perm[:a]),
        val_classes=frozenset(int(i) for i in perm[a : a + b]),
        novel_classes=frozenset(int(i) for i in perm[a + b : a + b + c]),
        seed=seed,
    )


# -- synthetic graphs ---------------------------------------------------------


def _sample_pairs(rng, block_u, block_v, p, same_block):
    """Bernoulli(p) over all pairs between two node blocks (upper triangle if same)."""
    if p <= 0.0 or len(block_u) == 0 or len(block_v) == 0:
        return np.empty((0, 2), dtype=np.int64)
    if same_block:
        iu, iv = np.triu_indices(len(block_u), k=1)
    else:
        iu, iv = np.meshgrid(np.arange(len(block_u)), np.arange(len(block_v)), indexing="ij")
        iu, iv = iu.ravel(), iv.ravel()
    keep = rng.random(len(iu)) < p
    return np.stack([block_u[iu[keep]], block_v[iv[keep]]], axis=1)


def synth_sbm(num_nodes: int, num_classes: int, p_in: float, p_out: float,
              feature_dim: int, seed: int = 0, separation: float = 1.0,
              name: str = "sbm") -> Graph:
    """Stochastic block model with class-conditional Gaussian features.

    Node ``i`` belongs to class ``i % num_classes``. Features are the class
    mean (standard normal scaled by ``separation``) plus unit noise.
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_nodes < num_classes:
        raise ValueError("num_nodes must be >= num_classes")
    region = np.zeros(num_nodes, dtype=np.int64)
    return _block_graph(num_nodes, num_classes, np.array([[p_in, p_out]]), region,
                        feature_dim, seed, separation, name)


def synth_mixed_sbm(num_nodes: int, num_classes: int, p_in: float, p_out: float,
                    feature_dim: int, seed: int = 0, separation: float = 1.0,
                    name: str = "mixed_sbm") -> Graph:
    """Two-region SBM: the first half of the nodes uses (p_in, p_out), the
    second half the swapped pair, so homophilic and heterophilic
    neighbourhoods coexist. Edges between regions use ``p_out``.
    """
    if num_nodes < 2 * num_classes:
        raise ValueError("num_nodes must be >= 2 * num_classes")
    region = (np.arange(num_nodes) >= num_nodes // 2).astype(np.int64)
    probs = np.array([[p_in, p_out], [p_out, p_in]])
    return _block_graph(num_nodes, num_classes, probs, region, feature_dim, seed,
                        separation, name, cross_region_p=min(p_in, p_out))


def _block_graph(num_nodes, num_classes, probs, region, feature_dim, seed, separation,
                 name, cross_region_p=None):
    ss = np.random.SeedSequence(seed)
    edge_rng, feat_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    labels = np.arange(num_nodes) % num_classes
    groups = {}
    for r in np.unique(region):
        for c in range(num_classes):
            groups[(int(r), c)] = np.flatnonzero((region == r) & (labels == c))
    keys = sorted(groups)
    chunks = []
    for i, (ra, ca) in enumerate(keys):
        for rb, cb in keys[i:]:
            if ra == rb:
                p = probs[ra, 0] if ca == cb else probs[ra, 1]
            else:
                p = cross_region_p
            chunks.append(_sample_pairs(edge_rng, groups[(ra, ca)], groups[(rb, cb)], p,
                                        same_block=(ra, ca) == (rb, cb)))
    edges = np.concatenate(chunks) if chunks else np.empty((0, 2), np.int64)
    means = feat_rng.standard_normal((num_classes, feature_dim)) * separation
    features = means[labels] + feat_rng.standard_normal((num_nodes, feature_dim))
    return Graph.from_edge_list(num_nodes, edges, features.astype(np.float64), labels, name=name)


__all__ = [
    "ClassSplit", "DatasetError", "DatasetFormatError", "class_split", "convert_linqs",
    "convert_planetoid", "convert_raw", "default_root", "edge_homophily", "load_dataset",
    "read_container", "synth_mixed_sbm", "synth_sbm", "write_container",
]
