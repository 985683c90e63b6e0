"""Review ingestion, synthetic generation, behavior sequences and splits.

Index 0 is reserved in the item, query, attribute and engagement
vocabularies. For queries it doubles as the unknown query, so a masked or
missing query looks exactly like padding to the model.
"""

from __future__ import annotations

import ast
import bisect
import gzip
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
UNKNOWN_QUERY = 0
N_ENGAGEMENT = 16  # 5 rating levels x 3 helpfulness terciles + padding

STOPWORDS = frozenset(
    "a an and are as at be by for from in into is it of on or the to with & amp"
    " other others misc miscellaneous general".split()
)

_TERM_RE = re.compile(r"[a-z0-9]+")


class MalformedInputError(ValueError):
    pass


@dataclass
class RawReview:
    user_id: str
    item_id: str
    rating: int
    helpful_up: int
    helpful_total: int
    timestamp: int
    category_path: list = field(default_factory=list)
    title: str | None = None
    text: str | None = None


@dataclass(frozen=True)
class Interaction:
    user: int
    query: int
    item: int
    engagement: int
    timestamp: int
    label: int = 1
    search: bool = True


@dataclass
class BehaviorSequence:
    user: int
    items: np.ndarray
    engagement_ids: np.ndarray
    queries: np.ndarray
    timestamps: np.ndarray
    mask: np.ndarray

    @property
    def search_positions(self):
        return np.flatnonzero(self.mask & (self.queries != UNKNOWN_QUERY))


@dataclass
class Split:
    train: list
    validation: list
    test: list


# ---------------------------------------------------------------------------
# raw review ingestion
# ---------------------------------------------------------------------------

def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _parse_line(line: str):
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # the 2014 metadata dumps are python literals rather than JSON
        return ast.literal_eval(line)


def load_metadata(path) -> dict:
    """Map item id -> (first category path, title) from a metadata dump."""
    meta = {}
    with _open_text(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = _parse_line(line)
            except (ValueError, SyntaxError):
                continue
            cats = rec.get("categories") or rec.get("category") or []
            if cats and isinstance(cats[0], str):
                cats = [cats]
            path0 = list(cats[0]) if cats else []
            meta[rec.get("asin")] = (path0, rec.get("title"))
    return meta


def load_reviews(path, meta_path=None, max_malformed: float = 0.01) -> list:
    """Parse a line-delimited review file (plain or gzip).

    Lines lacking a user, item, rating or timestamp are skipped and counted;
    more than ``max_malformed`` of them aborts the load.
    """
    meta = load_metadata(meta_path) if meta_path else {}
    reviews, bad, total = [], 0, 0
    with _open_text(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                rec = _parse_line(line)
                rating = int(round(float(rec["overall"])))
                if not 1 <= rating <= 5:
                    raise ValueError(rating)
                up, tot = rec.get("helpful", [0, 0]) or [0, 0]
                up, tot = int(up), int(tot)
                if up > tot:
                    up = tot
                if "categories" in rec or "category" in rec:
                    cats = rec.get("categories") or rec.get("category") or []
                    if cats and isinstance(cats[0], str):
                        cats = [cats]
                    cpath, title = (list(cats[0]) if cats else []), rec.get("title")
                else:
                    cpath, title = meta.get(rec["asin"], ([], None))
                reviews.append(RawReview(
                    user_id=str(rec["reviewerID"]), item_id=str(rec["asin"]), rating=rating,
                    helpful_up=up, helpful_total=tot, timestamp=int(rec["unixReviewTime"]),
                    category_path=cpath, title=title, text=rec.get("reviewText"),
                ))
            except (KeyError, TypeError, ValueError, SyntaxError):
                bad += 1
    load_reviews.last_skipped = bad
    if total and bad / total > max_malformed:
        raise MalformedInputError(f"{bad} of {total} lines malformed in {path}")
    if bad:
        log.warning("skipped %d malformed lines in %s", bad, path)
    return reviews


load_reviews.last_skipped = 0


def five_core_filter(reviews, k: int = 5) -> list:
    """Drop users and items with fewer than ``k`` reviews until nothing changes."""
    current = list(reviews)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


# ---------------------------------------------------------------------------
# queries and engagement
# ---------------------------------------------------------------------------

def query_terms(category_path) -> list:
    """Lowercased category terms without stopwords or repeats, order kept."""
    seen, terms = set(), []
    for part in category_path:
        for term in _TERM_RE.findall(str(part).lower()):
            if term in STOPWORDS or term in seen:
                continue
            seen.add(term)
            terms.append(term)
    return terms


def normalize_query(category_path) -> str:
    return " ".join(query_terms(category_path))


def extract_queries(reviews):
    """Return (query strings, per-review query index).

    ``strings[0]`` is the unknown query; items with an empty category path
    map to it.
    """
    strings = ["<unk>"]
    lookup = {}
    assigned = []
    for r in reviews:
        q = normalize_query(r.category_path)
        if not q:
            assigned.append(UNKNOWN_QUERY)
            continue
        if q not in lookup:
            lookup[q] = len(strings)
            strings.append(q)
        assigned.append(lookup[q])
    return strings, assigned


def helpfulness_tercile(up: int, total: int) -> int:
    ratio = up / max(total, 1)
    return min(int(ratio * 3), 2)


def bucket_engagement(review=None, *, rating=None, up=0, total=0) -> int:
    """Engagement id in 1..15 from rating (5 levels) and helpfulness (3 levels)."""
    if review is not None:
        rating, up, total = review.rating, review.helpful_up, review.helpful_total
    if rating is None:
        return PAD
    rating = int(rating)
    if not 1 <= rating <= 5:
        raise ValueError(f"rating out of range: {rating}")
    return (rating - 1) * 3 + helpfulness_tercile(up, total) + 1


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

_COLUMNS = ("user", "query", "item", "engagement", "timestamp", "search")


@dataclass
class Dataset:
    """Columnar interaction log plus vocabularies.

    Interactions are sorted by (user, timestamp). ``item_attr`` maps an item
    to its category bucket; ``item_terms`` and ``query_terms`` feed the
    relevance index.
    """

    name: str
    user_names: list
    item_names: list
    query_strings: list
    attr_names: list
    item_attr: np.ndarray
    item_terms: list
    query_term_lists: list
    user: np.ndarray
    query: np.ndarray
    item: np.ndarray
    engagement: np.ndarray
    timestamp: np.ndarray
    search: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return len(self.user_names)

    @property
    def n_items(self):
        return len(self.item_names) - 1

    @property
    def n_queries(self):
        return len(self.query_strings) - 1

    @property
    def n_attrs(self):
        return len(self.attr_names) - 1

    def __len__(self):
        return len(self.user)

    def interactions(self) -> list:
        return [
            Interaction(int(u), int(q), int(i), int(e), int(t), 1, bool(s))
            for u, q, i, e, t, s in zip(self.user, self.query, self.item,
                                        self.engagement, self.timestamp, self.search)
        ]

    def search_indices(self) -> np.ndarray:
        return np.flatnonzero(self.search)

    def stats(self) -> dict:
        return {
            "dataset": self.name,
            "users": self.n_users,
            "queries": self.n_queries,
            "items": self.n_items,
            "interactions": int(len(self)),
            "search_interactions": int(self.search.sum()),
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for col in _COLUMNS:
            np.save(d / f"{col}.npy", getattr(self, col))
        np.save(d / "item_attr.npy", self.item_attr)
        vocab = {
            "name": self.name,
            "user_names": self.user_names,
            "item_names": self.item_names,
            "query_strings": self.query_strings,
            "attr_names": self.attr_names,
            "item_terms": self.item_terms,
            "query_terms": self.query_term_lists,
            "meta": self.meta,
        }
        (d / "vocab.json").write_text(json.dumps(vocab, sort_keys=True, indent=1) + "\n")
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        vocab = json.loads((d / "vocab.json").read_text())
        cols = {c: np.load(d / f"{c}.npy") for c in _COLUMNS}
        return cls(
            name=vocab["name"], user_names=vocab["user_names"], item_names=vocab["item_names"],
            query_strings=vocab["query_strings"], attr_names=vocab["attr_names"],
            item_attr=np.load(d / "item_attr.npy"), item_terms=vocab["item_terms"],
            query_term_lists=vocab["query_terms"], meta=vocab.get("meta", {}), **cols,
        )


def write_stats(dataset: Dataset, path):
    s = dataset.stats()
    keys = list(s)
    Path(path).write_text("\t".join(keys) + "\n" + "\t".join(str(s[k]) for k in keys) + "\n")


def _sorted_columns(user, query, item, eng, ts, search):
    order = np.lexsort((np.arange(len(user)), ts, user))
    return [np.asarray(c)[order] for c in (user, query, item, eng, ts, search)]


def dataset_from_reviews(reviews, name: str = "amazon") -> Dataset:
    """Index reviews: every review is a search interaction whose query comes
    from the reviewed item's category path."""
    strings, qids = extract_queries(reviews)
    user_names = sorted({r.user_id for r in reviews})
    item_names = ["<pad>"] + sorted({r.item_id for r in reviews})
    uidx = {u: j for j, u in enumerate(user_names)}
    iidx = {it: j for j, it in enumerate(item_names)}

    item_path, item_title = {}, {}
    for r in reviews:
        item_path.setdefault(r.item_id, r.category_path)
        if r.title and r.item_id not in item_title:
            item_title[r.item_id] = r.title
    attr_names = ["<pad>"]
    attr_lookup = {}
    item_attr = np.zeros(len(item_names), dtype=np.int64)
    item_terms = [[]]
    for j, it in enumerate(item_names[1:], start=1):
        key = normalize_query(item_path.get(it, [])) or "<none>"
        if key not in attr_lookup:
            attr_lookup[key] = len(attr_names)
            attr_names.append(key)
        item_attr[j] = attr_lookup[key]
        terms = query_terms(item_path.get(it, []))
        if it in item_title:
            terms = terms + [t for t in _TERM_RE.findall(item_title[it].lower()) if t not in STOPWORDS]
        item_terms.append(terms)

    user, query, item, eng, ts = [], [], [], [], []
    for r, q in zip(reviews, qids):
        user.append(uidx[r.user_id])
        query.append(q)
        item.append(iidx[r.item_id])
        eng.append(bucket_engagement(r))
        ts.append(r.timestamp)
    cols = _sorted_columns(
        np.asarray(user, np.int64), np.asarray(query, np.int64), np.asarray(item, np.int64),
        np.asarray(eng, np.int64), np.asarray(ts, np.int64), np.ones(len(user), dtype=bool),
    )
    return Dataset(
        name=name, user_names=user_names, item_names=item_names, query_strings=strings,
        attr_names=attr_names, item_attr=item_attr, item_terms=item_terms,
        query_term_lists=[[]] + [s.split() for s in strings[1:]],
        user=cols[0], query=cols[1], item=cols[2], engagement=cols[3], timestamp=cols[4],
        search=cols[5],
    )


# ---------------------------------------------------------------------------
# sequences, splits, negatives
# ---------------------------------------------------------------------------

@dataclass
class SequenceTable:
    """Row ``j`` is the history visible to sample ``j``, left-padded."""

    user: np.ndarray
    items: np.ndarray
    engagement_ids: np.ndarray
    queries: np.ndarray
    timestamps: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.user)

    def __getitem__(self, j) -> BehaviorSequence:
        return BehaviorSequence(int(self.user[j]), self.items[j], self.engagement_ids[j],
                                self.queries[j], self.timestamps[j], self.mask[j])


def build_sequences(interactions, max_len: int = 10, samples=None) -> SequenceTable:
    """History strictly before each sample, truncated to the ``max_len`` most
    recent events and left-padded with index 0.

    ``interactions`` is the full behavior log (a list of ``Interaction`` or a
    ``Dataset``); ``samples`` selects which rows get a sequence (all by
    default).
    """
    if isinstance(interactions, Dataset):
        cols = (interactions.user, interactions.item, interactions.engagement,
                interactions.query, interactions.timestamp)
    else:
        cols = tuple(np.asarray([getattr(x, f) for x in interactions], dtype=np.int64)
                     for f in ("user", "item", "engagement", "query", "timestamp"))
    user, item, eng, query, ts = cols
    n = len(user)
    samples = np.arange(n) if samples is None else np.asarray(samples, dtype=np.int64)

    by_user = defaultdict(list)
    for j in range(n):
        by_user[int(user[j])].append(j)
    per_user = {}
    for u, rows in by_user.items():
        rows = sorted(rows, key=lambda j: (ts[j], j))
        per_user[u] = (np.asarray(rows, dtype=np.int64), [int(ts[j]) for j in rows])

    m = len(samples)
    out_items = np.zeros((m, max_len), np.int64)
    out_eng = np.zeros((m, max_len), np.int64)
    out_q = np.zeros((m, max_len), np.int64)
    out_ts = np.zeros((m, max_len), np.int64)
    out_mask = np.zeros((m, max_len), bool)
    for r, j in enumerate(samples):
        rows, times = per_user[int(user[j])]
        cut = bisect.bisect_left(times, int(ts[j]))
        visible = rows[max(0, cut - max_len):cut]
        k = len(visible)
        if k:
            out_items[r, max_len - k:] = item[visible]
            out_eng[r, max_len - k:] = eng[visible]
            out_q[r, max_len - k:] = query[visible]
            out_ts[r, max_len - k:] = ts[visible]
            out_mask[r, max_len - k:] = True
    return SequenceTable(user[samples].copy(), out_items, out_eng, out_q, out_ts, out_mask)


def sequence_offsets(dataset: Dataset, max_len: int = 10):
    """Compact form of :func:`build_sequences` for a whole sorted log.

    Row ``j`` sees interactions ``start[j]:stop[j]``: the same user's events
    with a strictly smaller timestamp, at most ``max_len`` of them.
    """
    user = dataset.user.astype(np.int64)
    ts = dataset.timestamp.astype(np.int64)
    key = user * (int(ts.max(initial=0)) + 1) + ts
    if len(key) and not (np.diff(key) >= 0).all():
        raise ValueError("interactions must be sorted by (user, timestamp)")
    stop = np.searchsorted(key, key, side="left")
    first = np.searchsorted(user, user, side="left")
    start = np.maximum(first, stop - max_len)
    return start, stop


def leave_one_out_split(interactions, positions=None) -> Split:
    """Per user: last event -> test, second-to-last -> validation, rest -> train.

    Returns indices into ``interactions`` (or into ``positions`` when given,
    values taken from it). Users with fewer than 3 events go wholly to train.
    """
    if isinstance(interactions, Dataset):
        user, ts = interactions.user, interactions.timestamp
    else:
        user = np.asarray([x.user for x in interactions])
        ts = np.asarray([x.timestamp for x in interactions])
    idx = np.arange(len(user)) if positions is None else np.asarray(positions)
    by_user = defaultdict(list)
    for j in idx:
        by_user[int(user[j])].append(int(j))
    train, val, test = [], [], []
    short = 0
    for u in sorted(by_user):
        rows = sorted(by_user[u], key=lambda j: (ts[j], j))
        if len(rows) < 3:
            short += 1
            train.extend(rows)
            continue
        train.extend(rows[:-2])
        val.append(rows[-2])
        test.append(rows[-1])
    if short:
        log.info("%d users with fewer than 3 events kept in train only", short)
    return Split(sorted(train), sorted(val), sorted(test))


def sample_negatives(positive: int, n_items: int, n: int = 100, seed: int = 0,
                     sample_id: int = 0) -> np.ndarray:
    """``n`` distinct items from 1..n_items, never ``positive``; a pure
    function of (seed, sample_id)."""
    if n_items - 1 < n:
        raise ValueError(f"need more than {n} items to sample negatives, have {n_items}")
    rng = np.random.default_rng([int(seed), int(sample_id)])
    pick = rng.choice(n_items - 1, size=n, replace=False) + 1
    if 1 <= positive <= n_items:
        pick[pick >= positive] += 1
    return pick.astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_users: int = 300
    n_clusters: int = 10
    subclusters: int = 5
    items_per_subcluster: int = 4
    queries_per_cluster: int = 4
    latent_dim: int = 8
    rho: float = 0.8
    search_ratio: float = 0.25
    min_events: int = 40
    max_events: int = 80
    min_search: int = 4
    noise: float = 0.9
    temperature: float = 0.25

    def validate(self):
        for k in ("n_users", "n_clusters", "subclusters", "items_per_subcluster",
                  "queries_per_cluster", "latent_dim", "min_events", "min_search"):
            if getattr(self, k) < 1:
                raise ValueError(f"synthetic config: {k} must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("synthetic config: rho must lie in [0, 1]")
        if not 0.0 < self.search_ratio <= 1.0:
            raise ValueError("synthetic config: search_ratio must lie in (0, 1]")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("synthetic config: noise must lie in [0, 1)")
        if self.max_events < self.min_events or self.min_search > self.min_events:
            raise ValueError("synthetic config: inconsistent event counts")
        if self.temperature <= 0:
            raise ValueError("synthetic config: temperature must be positive")
        if self.n_items <= 101:
            raise ValueError(f"synthetic config: {self.n_items} items cannot supply 100 negatives")

    @property
    def n_items(self):
        return self.n_clusters * self.subclusters * self.items_per_subcluster


_RATING_CUTS = np.array([-0.8416, -0.2533, 0.2533, 0.8416])  # standard normal quintiles
_TERCILE_CUTS = np.array([-0.4307, 0.4307])


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def generate_synthetic(config: SyntheticConfig | None = None, seed: int = 0) -> Dataset:
    """Planted-factor search log.

    Items live in subclusters of clusters; users carry latent taste vectors.
    Every behavior first picks a cluster by the user's taste (a search also
    names it with a query), then an item inside it by affinity. A ``noise``
    share of browsing behaviors click a uniform item of the cluster instead;
    searches always follow affinity.
    Engagement is a noisy read of affinity at correlation ``rho``.
    """
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    r = cfg.latent_dim
    C, S, P = cfg.n_clusters, cfg.subclusters, cfg.items_per_subcluster

    sub_centers = rng.normal(size=(C, S, r))
    sub_centers /= np.linalg.norm(sub_centers, axis=-1, keepdims=True)
    item_vec = np.repeat(sub_centers.reshape(C * S, r), P, axis=0)
    item_vec = item_vec + 0.35 * rng.normal(size=item_vec.shape) / math.sqrt(r)
    item_cluster = np.repeat(np.arange(C), S * P)
    item_sub = np.repeat(np.arange(C * S), P)
    n_items = cfg.n_items
    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(C)]
    cluster_center = sub_centers.mean(axis=1)

    users = rng.normal(size=(cfg.n_users, r))
    aff_all = users @ item_vec.T
    mu, sd = aff_all.mean(), aff_all.std()
    beta = 1.0 / cfg.temperature

    rec_u, rec_q, rec_i, rec_e, rec_t, rec_s = [], [], [], [], [], []
    for u in range(cfg.n_users):
        n_ev = int(rng.integers(cfg.min_events, cfg.max_events + 1))
        is_search = rng.random(n_ev) < cfg.search_ratio
        missing = cfg.min_search - int(is_search.sum())
        if missing > 0:
            flip = rng.choice(np.flatnonzero(~is_search), size=missing, replace=False)
            is_search[flip] = True
        times = 1_000_000 + np.cumsum(rng.integers(1, 1000, size=n_ev))
        cluster_p = _softmax(beta * 0.5 * (cluster_center @ users[u]))
        for e in range(n_ev):
            c = int(rng.choice(C, p=cluster_p))
            pool = cluster_items[c]
            if is_search[e]:
                q = 1 + c * cfg.queries_per_cluster + int(rng.integers(cfg.queries_per_cluster))
            else:
                q = UNKNOWN_QUERY
            if not is_search[e] and rng.random() < cfg.noise:
                i = int(rng.choice(pool))
            else:
                i = int(rng.choice(pool, p=_softmax(beta * aff_all[u, pool])))
            z = (aff_all[u, i] - mu) / sd
            lift = math.sqrt(max(0.0, 1.0 - cfg.rho ** 2))
            e_rating = cfg.rho * z + lift * rng.normal()
            e_help = cfg.rho * z + lift * rng.normal()
            rating = 1 + int(np.searchsorted(_RATING_CUTS, e_rating))
            terc = int(np.searchsorted(_TERCILE_CUTS, e_help))
            rec_u.append(u)
            rec_q.append(q)
            rec_i.append(i + 1)
            rec_e.append((rating - 1) * 3 + terc + 1)
            rec_t.append(int(times[e]))
            rec_s.append(bool(is_search[e]))

    cols = _sorted_columns(*(np.asarray(c, dtype=np.int64) for c in (rec_u, rec_q, rec_i, rec_e, rec_t)),
                           np.asarray(rec_s, dtype=bool))
    item_names = ["<pad>"] + [f"item{j}" for j in range(n_items)]
    attr_names = ["<pad>"] + [f"topic{c} sub{c}x{s}" for c in range(C) for s in range(S)]
    item_attr = np.concatenate([[0], item_sub + 1]).astype(np.int64)
    item_terms = [[]] + [[f"topic{item_cluster[j]}", f"sub{item_cluster[j]}x{item_sub[j] % S}"]
                         for j in range(n_items)]
    query_strings = ["<unk>"]
    query_term_lists = [[]]
    for c in range(C):
        for k in range(cfg.queries_per_cluster):
            terms = [f"topic{c}", f"kw{c}x{k}"]
            query_strings.append(" ".join(terms))
            query_term_lists.append(terms)
    meta = {"generator": "synthetic", "seed": int(seed), "config": asdict(cfg),
            "item_cluster": [0] + [int(c) + 1 for c in item_cluster]}
    ds = Dataset(
        name="synthetic", user_names=[f"user{u}" for u in range(cfg.n_users)],
        item_names=item_names, query_strings=query_strings, attr_names=attr_names,
        item_attr=item_attr, item_terms=item_terms, query_term_lists=query_term_lists,
        user=cols[0], query=cols[1], item=cols[2], engagement=cols[3], timestamp=cols[4],
        search=cols[5], meta=meta,
    )
    ds._latent = (users, item_vec, mu, sd)
    return ds


def true_affinity(dataset: Dataset, users, items) -> np.ndarray:
    """Planted user-item affinity for a synthetic dataset (items 1-based)."""
    latent = getattr(dataset, "_latent", None)
    if latent is None:
        raise ValueError("dataset carries no planted factors")
    uvec, ivec, _, _ = latent
    items = np.asarray(items)
    return np.einsum("...d,...d->...", uvec[np.asarray(users)], ivec[np.maximum(items - 1, 0)])
