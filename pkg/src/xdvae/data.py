"""Rating ingestion, domain splitting, filtering and evaluation splits.

The pipeline turns raw rating logs into a pair of binary user-item matrices
with a shared user index (source domain dense, target domain sparse), then
derives the leave-one-out, cold-start and degradation splits used by the
evaluation protocols. Everything is seeded explicitly and deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import named_rng

BUNDLE_MAGIC = b"XDB1"
BUNDLE_VERSION = 1


class DataError(ValueError):
    """Malformed input data or an impossible pipeline request."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: int
    timestamp: int | None = None


@dataclass
class DomainMatrix:
    """Binary interactions for one domain; rows are sorted positive item indices."""

    domain: str                      # "source" or "target"
    user_index: list                 # shared across the paired matrices
    item_index: list
    rows: list                       # per user: int64 array of item positions
    row_ts: list | None = None       # optional timestamps aligned with rows

    @property
    def n_items(self):
        return len(self.item_index)

    @property
    def n_interactions(self):
        return int(sum(len(r) for r in self.rows))

    def sparsity(self):
        """Fraction of empty cells, 1 - interactions / (m * n)."""
        cells = len(self.user_index) * self.n_items
        return 1.0 - self.n_interactions / cells if cells else 1.0

    def to_dense(self, user_positions=None, rows=None):
        """Dense float64 matrix for the given user positions (default: all)."""
        rows = self.rows if rows is None else rows
        if user_positions is None:
            user_positions = range(len(rows))
        out = np.zeros((len(user_positions), self.n_items))
        for k, u in enumerate(user_positions):
            out[k, rows[u]] = 1.0
        return out


@dataclass
class DatasetBundle:
    source: DomainMatrix
    target: DomainMatrix
    aux_vectors: np.ndarray | None = None   # (m, d_aux) when present
    provenance: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.source.user_index)

    def validate(self):
        if self.source.user_index != self.target.user_index:
            raise DataError("source/target user indices differ")
        for mat in (self.source, self.target):
            for u, row in enumerate(mat.rows):
                if len(row) == 0 and mat.domain == "source":
                    raise DataError(f"user {mat.user_index[u]!r} has empty {mat.domain} row")
        if self.aux_vectors is not None and self.aux_vectors.shape[0] != self.m:
            raise DataError("aux_vectors row count != m")
        return self


@dataclass
class LeaveOneOutSplit:
    """Per user: one held-out target positive plus 99 frozen negatives."""

    held_out: np.ndarray     # (m,) item positions
    negatives: np.ndarray    # (m, 99)
    seed: int
    policy: str = "random"


@dataclass
class ColdStartSplit:
    train_users: np.ndarray
    test_users: np.ndarray
    fraction: float
    seed: int


def load_ratings(path, format="movielens-dat"):
    """Parse a rating log into Interactions, preserving input order.

    movielens-dat lines look like ``user::item::rating::timestamp``; csv files
    carry a ``user,item,rating,timestamp`` header and may leave the timestamp
    empty.
    """
    if format not in ("movielens-dat", "csv"):
        raise DataError(f"unknown ratings format {format!r}")
    interactions = []
    with open(path, "r", encoding="latin-1") as fh:
        lines = fh.read().splitlines()
    start = 0
    if format == "csv":
        if not lines:
            raise DataError(f"{path}: no interactions")
        header = [c.strip().lower() for c in lines[0].split(",")]
        if header[:3] != ["user", "item", "rating"]:
            raise DataError(f"{path}: expected 'user,item,rating,timestamp' header")
        start = 1
    sep = "::" if format == "movielens-dat" else ","
    for n, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) not in (3, 4):
            raise DataError(f"{path}:{n}: malformed line {line!r}")
        user, item, rating = parts[0].strip(), parts[1].strip(), parts[2].strip()
        ts = parts[3].strip() if len(parts) == 4 else ""
        try:
            rating = int(rating)
        except ValueError:
            raise DataError(f"{path}:{n}: bad rating {parts[2]!r}") from None
        if rating < 1 or rating > 5:
            raise DataError(f"{path}:{n}: rating {rating} outside 1..5")
        timestamp = None
        if ts:
            try:
                timestamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{n}: bad timestamp {parts[3]!r}") from None
        interactions.append(Interaction(user, item, rating, timestamp))
    if not interactions:
        raise DataError(f"{path}: no interactions")
    return interactions


def load_item_labels(path, format="movielens-dat"):
    """Item -> label set map from movies.dat (``id::title::g1|g2``) or ``item,labels`` csv."""
    labels = {}
    with open(path, "r", encoding="latin-1") as fh:
        lines = fh.read().splitlines()
    start = 0
    sep = "::" if format == "movielens-dat" else ","
    if format == "csv" and lines and lines[0].lower().startswith("item"):
        start = 1
    for n, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if format == "movielens-dat":
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: malformed line {line!r}")
            item, genre_field = parts[0].strip(), parts[2]
        else:
            if len(parts) != 2:
                raise DataError(f"{path}:{n}: malformed line {line!r}")
            item, genre_field = parts[0].strip(), parts[1]
        labels[item] = {g.strip() for g in genre_field.split("|") if g.strip()}
    if not labels:
        raise DataError(f"{path}: no items")
    return labels


def split_domains(interactions, item_labels, source_labels, target_labels):
    """Route interactions to (source, target) lists by item label.

    An item belongs to the source domain iff its labels touch source_labels
    and not target_labels, and vice versa; items touching both or neither are
    dropped together with their interactions.
    """
    source_labels = set(source_labels)
    target_labels = set(target_labels)
    unknown = sorted({x.item for x in interactions if x.item not in item_labels})
    if unknown:
        shown = ", ".join(unknown[:10])
        more = f" (+{len(unknown) - 10} more)" if len(unknown) > 10 else ""
        raise DataError(f"items without a label entry: {shown}{more}")
    route = {}
    for item, labels in item_labels.items():
        in_s = bool(labels & source_labels)
        in_t = bool(labels & target_labels)
        if in_s and not in_t:
            route[item] = "source"
        elif in_t and not in_s:
            route[item] = "target"
        # both or neither: dropped
    source = [x for x in interactions if route.get(x.item) == "source"]
    target = [x for x in interactions if route.get(x.item) == "target"]
    return source, target


def binarize_and_filter(source, target, threshold=4, min_target_positives=2):
    """Build the shared-user DatasetBundle of binary positives.

    Ratings >= threshold become positives. A user survives only with at least
    one source positive and min_target_positives target positives (so one
    target item can be held out while the training row stays nonempty). Items
    without any surviving positive are dropped from the index.
    """
    if not source or not target:
        raise DataError("empty source or target interaction list")

    def positives(interactions):
        by_user = {}
        for x in interactions:
            if x.rating >= threshold:
                by_user.setdefault(x.user, {})[x.item] = x.timestamp
        return by_user

    pos_s = positives(source)
    pos_t = positives(target)
    users = sorted(
        u
        for u in pos_s
        if u in pos_t and len(pos_s[u]) >= 1 and len(pos_t[u]) >= min_target_positives
    )
    if not users:
        raise DataError("no users survive the shared-domain filter")

    def build(domain, pos):
        items = sorted({item for u in users for item in pos[u]})
        item_pos = {item: k for k, item in enumerate(items)}
        rows, row_ts = [], []
        has_ts = False
        for u in users:
            entries = sorted((item_pos[item], ts) for item, ts in pos[u].items())
            rows.append(np.array([e[0] for e in entries], dtype=np.int64))
            ts = np.array(
                [e[1] if e[1] is not None else -1 for e in entries], dtype=np.int64
            )
            row_ts.append(ts)
            has_ts = has_ts or any(e[1] is not None for e in entries)
        return DomainMatrix(domain, users, items, rows, row_ts if has_ts else None)

    bundle = DatasetBundle(
        source=build("source", pos_s),
        target=build("target", pos_t),
        provenance={
            "threshold": threshold,
            "min_target_positives": min_target_positives,
        },
    )
    return bundle.validate()


def sample_negatives(positives, n_items, k, rng):
    """k distinct items drawn uniformly from those the user never interacted with."""
    positives = np.asarray(positives, dtype=np.int64)
    pool = np.setdiff1d(np.arange(n_items, dtype=np.int64), positives)
    if len(pool) < k:
        raise DataError(
            f"cannot sample {k} negatives from {len(pool)} non-interacted items"
        )
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=False)


def build_loo_split(bundle, seed, policy="random", n_negatives=99):
    """Hold one target positive per user out and freeze 99 negatives.

    policy "random" picks uniformly; "latest" picks the max-timestamp positive.
    Returns the split and a training copy of the bundle with the held-out
    entries removed from the target rows.
    """
    if policy not in ("random", "latest"):
        raise DataError(f"unknown hold-out policy {policy!r}")
    rng = named_rng(seed, "loo-split")
    m = bundle.m
    target = bundle.target
    held = np.empty(m, dtype=np.int64)
    negatives = np.empty((m, n_negatives), dtype=np.int64)
    train_rows, train_ts = [], []
    for u in range(m):
        row = target.rows[u]
        if len(row) < 2:
            raise DataError(
                f"user {target.user_index[u]!r} has {len(row)} target positives, need >= 2"
            )
        if policy == "latest":
            if target.row_ts is None:
                raise DataError("policy 'latest' requires timestamps")
            pick = int(np.argmax(target.row_ts[u]))
        else:
            pick = int(rng.integers(len(row)))
        held[u] = row[pick]
        negatives[u] = np.sort(sample_negatives(row, target.n_items, n_negatives, rng))
        keep = np.arange(len(row)) != pick
        train_rows.append(row[keep])
        if target.row_ts is not None:
            train_ts.append(target.row_ts[u][keep])
    split = LeaveOneOutSplit(held, negatives, seed=seed, policy=policy)
    training = DatasetBundle(
        source=bundle.source,
        target=DomainMatrix(
            "target",
            target.user_index,
            target.item_index,
            train_rows,
            train_ts if target.row_ts is not None else None,
        ),
        aux_vectors=bundle.aux_vectors,
        provenance=dict(bundle.provenance, loo_seed=seed, loo_policy=policy),
    )
    return split, training


def training_bundle(bundle, split):
    """Training view of a full bundle: target rows minus the held-out items."""
    target = bundle.target
    rows, row_ts = [], []
    for u in range(bundle.m):
        keep = target.rows[u] != split.held_out[u]
        rows.append(target.rows[u][keep])
        if target.row_ts is not None:
            row_ts.append(target.row_ts[u][keep])
    return DatasetBundle(
        source=bundle.source,
        target=DomainMatrix(
            "target", target.user_index, target.item_index, rows,
            row_ts if target.row_ts is not None else None,
        ),
        aux_vectors=bundle.aux_vectors,
        provenance=dict(bundle.provenance, loo_seed=split.seed, loo_policy=split.policy),
    )


def restrict_users(bundle, user_positions):
    """Bundle over a subset of users (keeps item indices unchanged)."""
    user_positions = np.asarray(user_positions, dtype=np.int64)
    users = [bundle.source.user_index[u] for u in user_positions]

    def cut(mat):
        return DomainMatrix(
            mat.domain,
            users,
            mat.item_index,
            [mat.rows[u] for u in user_positions],
            [mat.row_ts[u] for u in user_positions] if mat.row_ts is not None else None,
        )

    aux = bundle.aux_vectors[user_positions] if bundle.aux_vectors is not None else None
    return DatasetBundle(cut(bundle.source), cut(bundle.target), aux, dict(bundle.provenance))


def cold_start_split(bundle, fraction=0.1, seed=0):
    """Uniform user partition into train/test; test gets round(fraction * m) users."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    m = bundle.m
    n_test = int(fraction * m + 0.5)
    perm = named_rng(seed, "cold-split").permutation(m)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return ColdStartSplit(train, test, fraction, seed)


def degrade_target_rows(rows, fraction_kept, seed):
    """Keep ceil(fraction_kept * len) uniformly chosen positives per row."""
    if not 0.0 <= fraction_kept <= 1.0:
        raise DataError(f"fraction_kept must be in [0, 1], got {fraction_kept}")
    if fraction_kept == 1.0:
        return [row.copy() for row in rows]
    rng = named_rng(seed, f"degrade-{fraction_kept}")
    out = []
    for row in rows:
        keep = int(np.ceil(fraction_kept * len(row)))
        if keep == 0:
            out.append(np.empty(0, dtype=np.int64))
        else:
            out.append(np.sort(rng.choice(row, size=keep, replace=False)))
    return out


def load_aux_vectors(path, expected_dim=256):
    """Dense per-user auxiliary vectors from csv rows ``user,v1,...,vd``."""
    vectors = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 1 if lines and lines[0].split(",")[0].strip().lower() == "user" else 0
    for n, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(",")
        user = parts[0].strip()
        values = parts[1:]
        if len(values) != expected_dim:
            raise DataError(
                f"{path}:{n}: expected {expected_dim} values, got {len(values)}"
            )
        vec = np.array([float(v) for v in values])
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{n}: non-finite auxiliary value")
        vectors[user] = vec
    if not vectors:
        raise DataError(f"{path}: no auxiliary vectors")
    return vectors


def attach_aux(bundle, vectors, expected_dim=None):
    """Align user -> vector map with the bundle; absent users get zero vectors."""
    dim = expected_dim or len(next(iter(vectors.values())))
    out = np.zeros((bundle.m, dim))
    missing = []
    for u, user in enumerate(bundle.source.user_index):
        if user in vectors:
            vec = vectors[user]
            if len(vec) != dim:
                raise DataError(f"aux vector for user {user!r} has dim {len(vec)} != {dim}")
            out[u] = vec
        else:
            missing.append(user)
    bundle.aux_vectors = out
    bundle.provenance["aux_dim"] = dim
    bundle.provenance["aux_missing_users"] = len(missing)
    return bundle


# ---------------------------------------------------------------------------
# Bundle persistence: XDB1 = magic, u32 header length, canonical-JSON header,
# then the declared little-endian binary blobs back to back. Writing the same
# bundle twice yields byte-identical files.


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_rows(rows):
    lengths = [len(r) for r in rows]
    flat = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    return lengths, flat.astype("<i8")


def save_bundle(bundle, path, split=None):
    """Serialize a bundle (and optionally its leave-one-out split) to one file."""
    blobs = []
    header = {
        "version": BUNDLE_VERSION,
        "m": bundle.m,
        "user_index": list(bundle.source.user_index),
        "provenance": bundle.provenance,
        "domains": {},
        "split": None,
        "aux_dim": None,
        "blobs": [],
    }

    def add_blob(name, arr, dtype):
        arr = np.ascontiguousarray(arr, dtype=dtype)
        header["blobs"].append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    for mat in (bundle.source, bundle.target):
        lengths, flat = _pack_rows(mat.rows)
        header["domains"][mat.domain] = {
            "item_index": list(mat.item_index),
            "row_lengths": lengths,
            "has_ts": mat.row_ts is not None,
        }
        add_blob(f"{mat.domain}.rows", flat, "<i8")
        if mat.row_ts is not None:
            _, flat_ts = _pack_rows(mat.row_ts)
            add_blob(f"{mat.domain}.ts", flat_ts, "<i8")
    if split is not None:
        header["split"] = {
            "seed": split.seed,
            "policy": split.policy,
            "n_negatives": int(split.negatives.shape[1]),
        }
        add_blob("split.held_out", split.held_out, "<i8")
        add_blob("split.negatives", split.negatives, "<i8")
    if bundle.aux_vectors is not None:
        header["aux_dim"] = int(bundle.aux_vectors.shape[1])
        add_blob("aux", bundle.aux_vectors, "<f4")

    head = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def _unpack_rows(flat, lengths):
    rows, at = [], 0
    for n in lengths:
        rows.append(flat[at:at + n].astype(np.int64))
        at += n
    return rows


def load_bundle(path):
    """Inverse of save_bundle; returns (bundle, split-or-None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BUNDLE_MAGIC:
        raise DataError(f"{path}: not a bundle file (bad magic)")
    (head_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt header ({e})") from None
    if header.get("version") != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle version {header.get('version')}")
    at = 8 + head_len
    arrays = {}
    for entry in header["blobs"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(entry["dtype"]).itemsize
        if at + nbytes > len(raw):
            raise DataError(f"{path}: truncated file at blob {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw[at:at + nbytes], dtype=entry["dtype"]
        ).reshape(entry["shape"])
        at += nbytes
    if at != len(raw):
        raise DataError(f"{path}: trailing bytes after declared blobs")

    users = header["user_index"]

    def mat(domain):
        dom = header["domains"][domain]
        rows = _unpack_rows(arrays[f"{domain}.rows"], dom["row_lengths"])
        row_ts = None
        if dom["has_ts"]:
            row_ts = _unpack_rows(arrays[f"{domain}.ts"], dom["row_lengths"])
        return DomainMatrix(domain, users, dom["item_index"], rows, row_ts)

    bundle = DatasetBundle(
        source=mat("source"),
        target=mat("target"),
        provenance=header["provenance"],
    )
    if header["aux_dim"] is not None:
        bundle.aux_vectors = arrays["aux"].astype(np.float64)
    split = None
    if header["split"] is not None:
        split = LeaveOneOutSplit(
            held_out=arrays["split.held_out"].astype(np.int64),
            negatives=arrays["split.negatives"].astype(np.int64),
            seed=header["split"]["seed"],
            policy=header["split"]["policy"],
        )
    return bundle.validate(), split
