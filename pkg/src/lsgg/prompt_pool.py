"""Knowledge-keyed prompt memory: prompt token blocks, retrieval keys, and
bounded exemplar stores with reservoir eviction.

Retrieval is exact cosine search over the keys; the pool is small enough that
approximate indices would only add failure modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ioutil import pack_floats, unpack_floats
from .numerics import as_vector, cosine_to_rows, top_k_indices, random_unit_vector
from .rng import SeededRng

POOL_MAGIC = "LSGG-POOL"
POOL_VERSION = 1


@dataclass
class Exemplar:
    """A stored past instance: the four raw feature vectors plus its label.

    Features are kept raw (not tokenized) so rehearsal re-encodes them through
    the current token mapper and benefits from mapper updates.
    """

    f_c: np.ndarray
    f_s: np.ndarray
    f_o: np.ndarray
    f_r: np.ndarray
    predicate: int

    def equals(self, other) -> bool:
        return (
            self.predicate == other.predicate
            and np.array_equal(self.f_c, other.f_c)
            and np.array_equal(self.f_s, other.f_s)
            and np.array_equal(self.f_o, other.f_o)
            and np.array_equal(self.f_r, other.f_r)
        )


def make_exemplar(instance) -> Exemplar:
    return Exemplar(
        f_c=np.array(instance.f_c, dtype=float),
        f_s=np.array(instance.f_s, dtype=float),
        f_o=np.array(instance.f_o, dtype=float),
        f_r=np.array(instance.f_r, dtype=float),
        predicate=int(instance.predicate),
    )


@dataclass
class PromptEntry:
    v: np.ndarray  # (n_p, d_tok) learnable prompt tokens
    k: np.ndarray  # (d_c,) learnable retrieval key
    store: list = field(default_factory=list)
    seen_count: int = 0

    def equals(self, other) -> bool:
        return (
            np.array_equal(self.v, other.v)
            and np.array_equal(self.k, other.k)
            and self.seen_count == other.seen_count
            and len(self.store) == len(other.store)
            and all(a.equals(b) for a, b in zip(self.store, other.store))
        )


@dataclass
class PromptPool:
    entries: list
    n_e: int

    @property
    def n_t(self) -> int:
        return len(self.entries)

    @property
    def n_p(self) -> int:
        return self.entries[0].v.shape[0]

    @property
    def d_tok(self) -> int:
        return self.entries[0].v.shape[1]

    @property
    def d_c(self) -> int:
        return self.entries[0].k.shape[0]

    def key_matrix(self) -> np.ndarray:
        return np.stack([e.k for e in self.entries])

    def total_stored(self) -> int:
        return sum(len(e.store) for e in self.entries)

    def check_invariants(self) -> None:
        n_p, d_tok, d_c = self.n_p, self.d_tok, self.d_c
        for i, e in enumerate(self.entries):
            if e.v.shape != (n_p, d_tok):
                raise AssertionError(f"entry {i}: prompt block shape {e.v.shape} != {(n_p, d_tok)}")
            if e.k.shape != (d_c,):
                raise AssertionError(f"entry {i}: key shape {e.k.shape} != {(d_c,)}")
            if len(e.store) > self.n_e:
                raise AssertionError(f"entry {i}: store holds {len(e.store)} > capacity {self.n_e}")
            if len(e.store) > e.seen_count:
                raise AssertionError(f"entry {i}: store larger than seen_count")
        if self.total_stored() > self.n_t * self.n_e:
            raise AssertionError("total stored exemplars exceed pool capacity")

    def equals(self, other) -> bool:
        return (
            self.n_e == other.n_e
            and len(self.entries) == len(other.entries)
            and all(a.equals(b) for a, b in zip(self.entries, other.entries))
        )


def init_pool(n_t: int, n_p: int, d_tok: int, d_c: int, n_e: int, rng: SeededRng) -> PromptPool:
    """Fresh pool: unit-vector keys, Gaussian prompt tokens (scale 1/sqrt(d_tok))."""
    if min(n_t, n_p, d_tok, d_c, n_e) < 1:
        raise ValueError("all pool size parameters must be >= 1")
    scale = 1.0 / np.sqrt(d_tok)
    entries = []
    for _ in range(n_t):
        k = random_unit_vector(d_c, rng)
        v = scale * rng.normal((n_p, d_tok))
        entries.append(PromptEntry(v=v, k=k))
    return PromptPool(entries=entries, n_e=n_e)


def retrieve_topk_prompts(pool: PromptPool, f_c_query, K: int) -> list:
    """Top-K entries by key cosine, as (entry index, similarity), descending.

    Exactly equal computed similarities order by lower entry index first.
    Never mutates the pool.
    """
    if not 1 <= K <= pool.n_t:
        raise ValueError(f"K={K} outside [1, {pool.n_t}]")
    q = as_vector(f_c_query, "f_c query")
    keys = pool.key_matrix()
    idx = top_k_indices(q, keys, K)
    sims = cosine_to_rows(q, keys)
    return [(int(i), float(sims[i])) for i in idx]


def retrieve_exemplar(entry: PromptEntry, f_r_query):
    """Closest stored exemplar by relation-feature cosine; None if store empty.

    Exactly equal computed similarities keep the earliest-inserted exemplar.
    """
    if not entry.store:
        return None
    q = as_vector(f_r_query, "f_r query")
    sims = cosine_to_rows(q, np.stack([e.f_r for e in entry.store]))
    return entry.store[int(np.argmax(sims))]


def admit_exemplar(pool: PromptPool, instance, rng: SeededRng):
    """Offer an instance to the pool; returns the entry index if stored, else None.

    Routing: the entry whose key is cosine-nearest to f_c (ties to the lower
    index). Storage: append while under capacity, then uniform reservoir —
    item number N is kept with probability n_e/N, replacing a uniform slot.
    """
    entry_idx = top_k_indices(as_vector(instance.f_c, "f_c"), pool.key_matrix(), 1)[0]
    entry = pool.entries[entry_idx]
    entry.seen_count += 1
    ex = make_exemplar(instance)
    if len(entry.store) < pool.n_e:
        entry.store.append(ex)
        return entry_idx
    j = rng.randint(entry.seen_count)  # single draw decides both fate and slot
    if j < pool.n_e:
        entry.store[j] = ex
        return entry_idx
    return None


# -- serialization (LSGG-POOL 1) ----------------------------------------------
#
# Text container; float arrays as base64 of little-endian float64 bytes so the
# round-trip is bit-exact.


def serialize_pool(pool: PromptPool, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{POOL_MAGIC} {POOL_VERSION} {pool.n_t} {pool.n_p} {pool.d_tok} {pool.d_c} {pool.n_e}\n")
        for i, e in enumerate(pool.entries):
            fh.write(f"entry {i} {e.seen_count} {len(e.store)}\n")
            fh.write(f"k {pack_floats(e.k)}\n")
            fh.write(f"v {pack_floats(e.v)}\n")
            for ex in e.store:
                fh.write(
                    "ex {} {} {} {} {}\n".format(
                        ex.predicate,
                        pack_floats(ex.f_c),
                        pack_floats(ex.f_s),
                        pack_floats(ex.f_o),
                        pack_floats(ex.f_r),
                    )
                )


class PoolFormatError(ValueError):
    pass


def deserialize_pool(path) -> PromptPool:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise PoolFormatError("empty pool file")
    head = lines[0].split()
    if len(head) != 7 or head[0] != POOL_MAGIC:
        raise PoolFormatError(f"bad magic line {lines[0]!r}")
    if head[1] != str(POOL_VERSION):
        raise PoolFormatError(f"unsupported pool version {head[1]!r}")
    try:
        n_t, n_p, d_tok, d_c, n_e = (int(t) for t in head[2:])
    except ValueError:
        raise PoolFormatError("non-integer pool dimensions in header") from None

    pos = 1
    entries = []
    for i in range(n_t):
        if pos + 3 > len(lines):
            raise PoolFormatError(f"truncated file: entry {i} incomplete")
        etoks = lines[pos].split()
        if len(etoks) != 4 or etoks[0] != "entry" or etoks[1] != str(i):
            raise PoolFormatError(f"line {pos + 1}: expected 'entry {i} ...', got {lines[pos]!r}")
        seen_count, n_stored = int(etoks[2]), int(etoks[3])
        if n_stored > n_e:
            raise PoolFormatError(f"line {pos + 1}: entry {i} claims {n_stored} > capacity {n_e}")
        ktoks = lines[pos + 1].split()
        vtoks = lines[pos + 2].split()
        if len(ktoks) != 2 or ktoks[0] != "k" or len(vtoks) != 2 or vtoks[0] != "v":
            raise PoolFormatError(f"entry {i}: malformed key/prompt lines")
        k = unpack_floats(ktoks[1], (d_c,))
        v = unpack_floats(vtoks[1], (n_p, d_tok))
        pos += 3
        store = []
        for _ in range(n_stored):
            if pos >= len(lines):
                raise PoolFormatError(f"truncated file: entry {i} store incomplete")
            xtoks = lines[pos].split()
            if len(xtoks) != 6 or xtoks[0] != "ex":
                raise PoolFormatError(f"line {pos + 1}: malformed exemplar record")
            store.append(
                Exemplar(
                    f_c=unpack_floats(xtoks[2], -1),
                    f_s=unpack_floats(xtoks[3], -1),
                    f_o=unpack_floats(xtoks[4], -1),
                    f_r=unpack_floats(xtoks[5], -1),
                    predicate=int(xtoks[1]),
                )
            )
            pos += 1
        entries.append(PromptEntry(v=v, k=k, store=store, seen_count=seen_count))
    if pos != len(lines) and any(ln.strip() for ln in lines[pos:]):
        raise PoolFormatError(f"line {pos + 1}: trailing content after last entry")
    pool = PromptPool(entries=entries, n_e=n_e)
    pool.check_invariants()
    return pool


@dataclass
class ClassQuotaBuffer:
    """Flat rehearsal buffer with a per-class quota of capacity/M for the M
    predicates seen so far; an alternative admission policy for baselines
    that do not use the keyed pool.

    When a new class arrives the quota shrinks and over-quota classes drop
    random members; within a fixed quota each class runs its own reservoir.
    """

    capacity: int = 2000
    slots: dict = field(default_factory=dict)  # predicate -> list of Exemplar
    seen: dict = field(default_factory=dict)  # predicate -> admitted count

    def quota(self) -> int:
        m = len(self.slots)
        return max(1, self.capacity // m) if m else self.capacity

    def admit(self, instance, rng: SeededRng) -> bool:
        p = int(instance.predicate)
        is_new = p not in self.slots
        if is_new:
            self.slots[p] = []
            self.seen[p] = 0
            q = self.quota()
            for members in self.slots.values():
                while len(members) > q:
                    members.pop(rng.randint(len(members)))
        self.seen[p] += 1
        members = self.slots[p]
        q = self.quota()
        ex = make_exemplar(instance)
        if len(members) < q:
            members.append(ex)
            return True
        j = rng.randint(self.seen[p])
        if j < q:
            members[j] = ex
            return True
        return False

    def sample(self, n: int, rng: SeededRng) -> list:
        flat = [ex for p in sorted(self.slots) for ex in self.slots[p]]
        if not flat:
            return []
        return [flat[rng.randint(len(flat))] for _ in range(n)]
