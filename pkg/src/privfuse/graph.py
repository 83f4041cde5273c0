"""Heterogeneous social graph model, JSON-Lines ingestion and label splits.

A graph holds two node kinds (users, posts) and two relations (user-user
friendship, user->post write). Users carry an attribute vector whose numeric
slots are min/max scaled into [-1, 1] at load time; categorical slots keep
their index together with the cardinality.

File format, one JSON object per line::

    {"kind": "user", "id": "u1", "attrs": {...}, "gender": 0, "occupation": 3, "interests": [1, 4]}
    {"kind": "post", "id": "p1", "author": "u1", "text": "some words"}
    {"kind": "friend", "a": "u1", "b": "u2"}

Attribute values are numbers (numeric slot), strings (screen names, hashed to
a numeric slot) or ``{"cat": index, "n": cardinality}`` (categorical slot).
Two optional records are also understood: ``{"kind": "schema", ...}`` pins
per-slot normalization bounds, and ``{"kind": "meta", ...}`` carries
provenance that is kept verbatim on ``HeteroGraph.meta``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import sparse

from .rng import substream

N_INTERESTS = 10
SIMHASH_KEY = b"privfuse-simhash-v1"


class GraphError(ValueError):
    """Base class for graph validation failures."""


class ParseError(GraphError):
    def __init__(self, path: str | Path, lineno: int, msg: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


class DanglingReferenceError(GraphError):
    pass


class SchemaMismatchError(GraphError):
    pass


# ---------------------------------------------------------------------------
# attributes


@dataclass(frozen=True)
class Slot:
    """One attribute slot. ``lo``/``hi`` are the raw bounds mapped onto [-1, 1]."""

    name: str
    kind: str  # "num" or "cat"
    cardinality: int = 0
    lo: float = -1.0
    hi: float = 1.0


@dataclass(frozen=True)
class AttributeVector:
    numeric: np.ndarray
    categorical: np.ndarray
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        num = np.asarray(self.numeric, dtype=float).reshape(-1)
        cat = np.asarray(self.categorical, dtype=np.int64).reshape(-1)
        if len(cat) != len(self.cardinalities):
            raise SchemaMismatchError("categorical slots and cardinalities differ in length")
        if not np.all(np.isfinite(num)):
            raise GraphError("numeric attribute slots must be finite")
        for idx, card in zip(cat, self.cardinalities):
            if card < 1 or not 0 <= idx < card:
                raise GraphError(f"categorical index {idx} outside cardinality {card}")
        object.__setattr__(self, "numeric", num)
        object.__setattr__(self, "categorical", cat)

    @property
    def n_slots(self) -> int:
        return len(self.numeric) + len(self.categorical)

    def check_unit_range(self) -> None:
        if np.any(np.abs(self.numeric) > 1.0):
            raise GraphError("numeric attribute slot outside [-1, 1]")


@dataclass(frozen=True)
class AttributeTable:
    """Per-user attributes stored column-wise; row ``i`` belongs to user ``i``."""

    schema: tuple[Slot, ...]
    numeric: np.ndarray  # (n_users, n_numeric) in [-1, 1]
    categorical: np.ndarray  # (n_users, n_categorical)

    @property
    def numeric_slots(self) -> list[Slot]:
        return [s for s in self.schema if s.kind == "num"]

    @property
    def categorical_slots(self) -> list[Slot]:
        return [s for s in self.schema if s.kind == "cat"]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(s.cardinality for s in self.categorical_slots)

    def row(self, i: int) -> AttributeVector:
        return AttributeVector(self.numeric[i], self.categorical[i], self.cardinalities)

    def one_hot(self) -> np.ndarray:
        """Numeric slots followed by one-hot blocks for categorical slots."""
        n = self.numeric.shape[0]
        blocks = [self.numeric]
        for col, card in enumerate(self.cardinalities):
            oh = np.zeros((n, card))
            oh[np.arange(n), self.categorical[:, col]] = 1.0
            blocks.append(oh)
        return np.hstack(blocks) if blocks else np.zeros((n, 0))


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class UserGraph:
    """Simple undirected graph over users ``0..n-1``; edges stored with i < j."""

    n: int
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            if e.min() < 0 or e.max() >= self.n:
                raise GraphError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise GraphError("self-loop in user graph")
            e = np.sort(e, axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise GraphError("duplicate undirected edge in user graph")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)
        if self.m > self.n * (self.n - 1) // 2:
            raise GraphError("more edges than a simple graph allows")

    @property
    def m(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


@dataclass(frozen=True)
class HeteroGraph:
    users: tuple[str, ...]
    posts: tuple[str, ...]
    friendship: np.ndarray  # (m, 2) user indices, i < j
    author: np.ndarray  # (n_posts,) user index of each post's author
    attrs: AttributeTable
    post_text: tuple[tuple[str, ...], ...]
    labels: tuple[tuple[int, ...] | None, ...]
    gender: np.ndarray  # -1 where absent
    occupation: np.ndarray  # -1 where absent
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ug = UserGraph(len(self.users), self.friendship)
        object.__setattr__(self, "friendship", ug.edges)
        author = np.asarray(self.author, dtype=np.int64).reshape(-1)
        for name in ("gender", "occupation"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        author.setflags(write=False)
        object.__setattr__(self, "author", author)
        self.validate()

    def validate(self) -> None:
        n, n_posts = len(self.users), len(self.posts)
        if len(set(self.users)) != n:
            raise GraphError("duplicate user id")
        if len(set(self.posts)) != n_posts:
            raise GraphError("duplicate post id")
        if len(self.author) != n_posts or len(self.post_text) != n_posts:
            raise GraphError("every post needs exactly one author and one text")
        if n_posts and (self.author.min() < 0 or self.author.max() >= n):
            raise DanglingReferenceError("post author outside user range")
        if self.attrs.numeric.shape[0] != n or self.attrs.categorical.shape[0] != n:
            raise SchemaMismatchError("attribute table row count differs from user count")
        if np.any(np.abs(self.attrs.numeric) > 1.0) or not np.all(np.isfinite(self.attrs.numeric)):
            raise GraphError("numeric attribute slots must lie in [-1, 1]")
        for col, card in enumerate(self.attrs.cardinalities):
            c = self.attrs.categorical[:, col]
            if len(c) and (c.min() < 0 or c.max() >= card):
                raise SchemaMismatchError(f"categorical slot {col} outside cardinality {card}")
        if len(self.labels) != n or len(self.gender) != n or len(self.occupation) != n:
            raise GraphError("per-user label arrays must match user count")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_posts(self) -> int:
        return len(self.posts)

    @property
    def write(self) -> np.ndarray:
        """Write edges as (user index, post index) rows."""
        return np.column_stack([self.author, np.arange(self.n_posts)])

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    def labeled_users(self) -> list[str]:
        return [u for u, lab in zip(self.users, self.labels) if lab is not None]

    def replace(self, **changes) -> "HeteroGraph":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return HeteroGraph(**kw)

    def to_records(self) -> list[dict]:
        """Canonical record list, as written by :func:`save_graph`."""
        recs: list[dict] = []
        if self.meta:
            recs.append({"kind": "meta", **self.meta})
        recs.append(
            {
                "kind": "schema",
                "normalized": True,
                "slots": [
                    {"name": s.name, "kind": "cat", "n": s.cardinality}
                    if s.kind == "cat"
                    else {"name": s.name, "kind": "num", "raw_lo": s.lo, "raw_hi": s.hi}
                    for s in self.attrs.schema
                ],
            }
        )
        num_slots = self.attrs.numeric_slots
        cat_slots = self.attrs.categorical_slots
        for i, uid in enumerate(self.users):
            attrs: dict[str, Any] = {}
            ni = ci = 0
            for s in self.attrs.schema:
                if s.kind == "num":
                    attrs[s.name] = float(self.attrs.numeric[i, ni])
                    ni += 1
                else:
                    attrs[s.name] = {"cat": int(self.attrs.categorical[i, ci]), "n": s.cardinality}
                    ci += 1
            assert ni == len(num_slots) and ci == len(cat_slots)
            lab = self.labels[i]
            recs.append(
                {
                    "kind": "user",
                    "id": uid,
                    "attrs": attrs,
                    "gender": None if self.gender[i] < 0 else int(self.gender[i]),
                    "occupation": None if self.occupation[i] < 0 else int(self.occupation[i]),
                    "interests": None if lab is None else list(lab),
                }
            )
        for j, pid in enumerate(self.posts):
            recs.append(
                {
                    "kind": "post",
                    "id": pid,
                    "author": self.users[self.author[j]],
                    "text": " ".join(self.post_text[j]),
                }
            )
        for a, b in self.friendship:
            recs.append({"kind": "friend", "a": self.users[a], "b": self.users[b]})
        return recs

    def content_digest(self) -> str:
        """sha256 over the canonical serialization, excluding ``meta``."""
        h = hashlib.sha256()
        for rec in self.to_records():
            if rec["kind"] == "meta":
                continue
            h.update(_dumps(rec).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


# ---------------------------------------------------------------------------
# screen-name hashing


def _trigrams(name: str) -> list[str]:
    if len(name) < 3:
        return [name]
    return [name[i : i + 3] for i in range(len(name) - 2)]


def simhash64(name: str) -> int:
    """64-bit SimHash of the character 3-grams of ``name``."""
    if not name:
        raise ValueError("cannot hash an empty screen name")
    acc = np.zeros(64, dtype=np.int64)
    bits = np.arange(64, dtype=np.uint64)
    for gram in _trigrams(name):
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=SIMHASH_KEY).digest()
        h = np.uint64(int.from_bytes(digest, "little"))
        set_bits = ((h >> bits) & np.uint64(1)).astype(bool)
        acc += np.where(set_bits, 1, -1)
    fp = 0
    for b in range(64):
        if acc[b] > 0:
            fp |= 1 << b
    return fp


def encode_screen_name(name: str) -> float:
    """Map a screen name to [-1, 1] via its unsigned 64-bit SimHash."""
    return simhash64(name) / float(2**64 - 1) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# loading / saving


def _dumps(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def _slot_value(path, lineno, key, value):
    """Return (kind, value, cardinality) for one raw attribute value."""
    if isinstance(value, bool) or value is None:
        raise SchemaMismatchError(f"{path}:{lineno}: attribute {key!r} has unsupported value {value!r}")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise SchemaMismatchError(f"{path}:{lineno}: attribute {key!r} is not finite")
        return "num", float(value), 0
    if isinstance(value, str):
        if not value:
            raise SchemaMismatchError(f"{path}:{lineno}: attribute {key!r} is an empty string")
        return "num", encode_screen_name(value), 0
    if isinstance(value, dict) and set(value) == {"cat", "n"}:
        idx, card = value["cat"], value["n"]
        if not (isinstance(idx, int) and isinstance(card, int)) or card < 1 or not 0 <= idx < card:
            raise SchemaMismatchError(f"{path}:{lineno}: bad categorical value for {key!r}: {value!r}")
        return "cat", idx, card
    raise SchemaMismatchError(f"{path}:{lineno}: attribute {key!r} has unsupported value {value!r}")


def _normalize(col: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if lo == -1.0 and hi == 1.0:
        return col.copy()
    if hi == lo:
        return np.zeros_like(col)
    return np.clip(2.0 * (col - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def parse_records(records: Iterable[tuple[int, dict]], path: str | Path = "<records>") -> HeteroGraph:
    """Build a validated graph from ``(lineno, record)`` pairs."""
    meta: dict = {}
    schema_rec: dict | None = None
    users: list[tuple[int, dict]] = []
    posts: list[tuple[int, dict]] = []
    friends: list[tuple[int, dict]] = []
    for lineno, rec in records:
        if not isinstance(rec, dict) or "kind" not in rec:
            raise ParseError(path, lineno, "record must be an object with a 'kind' field")
        kind = rec["kind"]
        if kind == "user":
            users.append((lineno, rec))
        elif kind == "post":
            posts.append((lineno, rec))
        elif kind == "friend":
            friends.append((lineno, rec))
        elif kind == "meta":
            meta.update({k: v for k, v in rec.items() if k != "kind"})
        elif kind == "schema":
            schema_rec = rec
        else:
            raise ParseError(path, lineno, f"unknown record kind {kind!r}")

    uidx: dict[str, int] = {}
    for lineno, rec in users:
        uid = rec.get("id")
        if not isinstance(uid, str) or not uid:
            raise ParseError(path, lineno, "user record needs a non-empty string id")
        if uid in uidx:
            raise ParseError(path, lineno, f"duplicate user id {uid!r}")
        uidx[uid] = len(uidx)

    # attribute schema from the first user; every other user must match it
    keys: list[str] | None = None
    kinds: dict[str, tuple[str, int]] = {}
    raw_rows: list[list[tuple[str, float, int]]] = []
    for lineno, rec in users:
        attrs = rec.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError(path, lineno, "attrs must be an object")
        if keys is None:
            keys = list(attrs)
        elif set(attrs) != set(keys):
            raise SchemaMismatchError(
                f"{path}:{lineno}: user {rec['id']!r} attribute keys {sorted(attrs)} differ from {sorted(keys)}"
            )
        row = []
        for k in keys:
            kind, val, card = _slot_value(path, lineno, k, attrs[k])
            if k in kinds and kinds[k] != (kind, card):
                raise SchemaMismatchError(
                    f"{path}:{lineno}: attribute {k!r} is {kind}/{card}, earlier users had {kinds[k][0]}/{kinds[k][1]}"
                )
            kinds[k] = (kind, card)
            row.append((kind, val, card))
        raw_rows.append(row)
    keys = keys or []

    pinned: dict[str, dict] = {}
    normalized = False
    if schema_rec is not None:
        normalized = bool(schema_rec.get("normalized", False))
        for s in schema_rec.get("slots", []):
            pinned[s["name"]] = s
        if keys and set(pinned) != set(keys):
            raise SchemaMismatchError(f"{path}: schema record slots {sorted(pinned)} differ from attrs {sorted(keys)}")

    n = len(users)
    num_keys = [k for k in keys if kinds[k][0] == "num"]
    cat_keys = [k for k in keys if kinds[k][0] == "cat"]
    num_raw = np.array([[v for (kd, v, _) in row if kd == "num"] for row in raw_rows], dtype=float).reshape(
        n, len(num_keys)
    )
    cat = np.array([[v for (kd, v, _) in row if kd == "cat"] for row in raw_rows], dtype=np.int64).reshape(
        n, len(cat_keys)
    )
    num = np.zeros_like(num_raw)
    slots: dict[str, Slot] = {}
    for c, k in enumerate(num_keys):
        col = num_raw[:, c]
        pin = pinned.get(k, {})
        if normalized:
            if np.any(np.abs(col) > 1.0):
                raise SchemaMismatchError(f"{path}: slot {k!r} is marked normalized but leaves [-1, 1]")
            num[:, c] = col
            slots[k] = Slot(k, "num", 0, float(pin.get("raw_lo", -1.0)), float(pin.get("raw_hi", 1.0)))
            continue
        lo = float(pin["lo"]) if "lo" in pin else (float(col.min()) if n else -1.0)
        hi = float(pin["hi"]) if "hi" in pin else (float(col.max()) if n else 1.0)
        if n and (col.min() < lo or col.max() > hi):
            raise SchemaMismatchError(f"{path}: slot {k!r} has values outside pinned bounds [{lo}, {hi}]")
        num[:, c] = _normalize(col, lo, hi)
        slots[k] = Slot(k, "num", 0, lo, hi)
    for k in cat_keys:
        card = kinds[k][1]
        if k in pinned and pinned[k].get("n", card) != card:
            raise SchemaMismatchError(f"{path}: slot {k!r} cardinality differs from schema record")
        slots[k] = Slot(k, "cat", card)
    schema = tuple(slots[k] for k in num_keys + cat_keys)
    table = AttributeTable(schema, num, cat)

    labels: list[tuple[int, ...] | None] = []
    gender = np.full(n, -1, dtype=np.int64)
    occupation = np.full(n, -1, dtype=np.int64)
    for i, (lineno, rec) in enumerate(users):
        g = rec.get("gender")
        if g is not None:
            if g not in (0, 1) or isinstance(g, bool):
                raise ParseError(path, lineno, f"gender must be 0, 1 or null, got {g!r}")
            gender[i] = g
        o = rec.get("occupation")
        if o is not None:
            if not isinstance(o, int) or isinstance(o, bool) or o < 0:
                raise ParseError(path, lineno, f"occupation must be a non-negative int or null, got {o!r}")
            occupation[i] = o
        ints = rec.get("interests")
        if ints is None:
            labels.append(None)
        else:
            if not isinstance(ints, list) or any(
                not isinstance(x, int) or isinstance(x, bool) or not 0 <= x < N_INTERESTS for x in ints
            ):
                raise ParseError(path, lineno, f"interests must be a list of ints in [0, {N_INTERESTS})")
            labels.append(tuple(sorted(set(ints))))

    post_ids: list[str] = []
    seen_posts: set[str] = set()
    author = np.zeros(len(posts), dtype=np.int64)
    texts: list[tuple[str, ...]] = []
    for j, (lineno, rec) in enumerate(posts):
        pid = rec.get("id")
        if not isinstance(pid, str) or not pid:
            raise ParseError(path, lineno, "post record needs a non-empty string id")
        if pid in seen_posts:
            raise ParseError(path, lineno, f"duplicate post id {pid!r}")
        seen_posts.add(pid)
        a = rec.get("author")
        if a not in uidx:
            raise DanglingReferenceError(f"{path}:{lineno}: post {pid!r} names missing author {a!r}")
        text = rec.get("text", "")
        if not isinstance(text, str):
            raise ParseError(path, lineno, "post text must be a string")
        post_ids.append(pid)
        author[j] = uidx[a]
        texts.append(tuple(text.split()))

    edges = np.zeros((len(friends), 2), dtype=np.int64)
    seen_edges: set[tuple[int, int]] = set()
    for e, (lineno, rec) in enumerate(friends):
        a, b = rec.get("a"), rec.get("b")
        for end in (a, b):
            if end not in uidx:
                raise DanglingReferenceError(f"{path}:{lineno}: friendship {a!r}-{b!r} names missing user {end!r}")
        i, j = uidx[a], uidx[b]
        if i == j:
            raise ParseError(path, lineno, f"self-loop on user {a!r}")
        key = (min(i, j), max(i, j))
        if key in seen_edges:
            raise ParseError(path, lineno, f"duplicate friendship {a!r}-{b!r}")
        seen_edges.add(key)
        edges[e] = key

    return HeteroGraph(
        users=tuple(uidx),
        posts=tuple(post_ids),
        friendship=edges,
        author=author,
        attrs=table,
        post_text=tuple(texts),
        labels=tuple(labels),
        gender=gender,
        occupation=occupation,
        meta=meta,
    )


def _iter_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None


def load_graph(path: str | Path) -> HeteroGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_records(_iter_jsonl(path), path)


def save_graph(g: HeteroGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in g.to_records():
            fh.write(_dumps(rec))
            fh.write("\n")


# ---------------------------------------------------------------------------
# derived views


def extract_user_graph(g: HeteroGraph) -> UserGraph:
    return UserGraph(g.n_users, g.friendship)


@dataclass(frozen=True)
class LabelSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    ratio: float
    seed: int


def split_ids(ids: Sequence[str], ratio: float, seed: int) -> LabelSplit:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    if len(ids) == 0:
        raise ValueError("no labeled users to split")
    n_train = int(math.floor(ratio * len(ids) + 0.5))
    perm = substream(seed, "split").permutation(len(ids))
    ids = list(ids)
    return LabelSplit(
        train=tuple(ids[k] for k in perm[:n_train]),
        test=tuple(ids[k] for k in perm[n_train:]),
        ratio=ratio,
        seed=seed,
    )


def split_labels(g: HeteroGraph, ratio: float, seed: int) -> LabelSplit:
    """Uniform random train/test split of the users that carry interest labels."""
    return split_ids(g.labeled_users(), ratio, seed)
