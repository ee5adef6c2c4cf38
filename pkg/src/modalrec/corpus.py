"""Interaction logs, per-modality embedding stores, and sequence assembly.

File formats
------------
Interactions are tab-separated UTF-8 with no header, one event per
non-empty line::

    user_id<TAB>item_id<TAB>domain_id<TAB>timestamp

Embedding stores start with a ``dim=<d>`` line, then one item per line::

    item_id<TAB>v1 v2 ... vd

Chronological ordering ties break by (timestamp, item_id) inside one
domain and by (timestamp, domain_id, item_id) in the cross-domain mixed
flow, so every ordering here is total and reruns are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, ParseError, TooShortError

MODALITIES = ("text", "image", "cross")


class Interaction(NamedTuple):
    user: str
    item: str
    domain: str
    timestamp: int


class MixedFlow(NamedTuple):
    """One user's events merged across domains in chronological order."""

    user: str
    events: tuple[Interaction, ...]

    @property
    def items(self) -> list[str]:
        return [e.item for e in self.events]


class BehaviorSequence(NamedTuple):
    """One user's events within a single domain in chronological order."""

    user: str
    domain: str
    events: tuple[Interaction, ...]

    @property
    def items(self) -> list[str]:
        return [e.item for e in self.events]


class SplitTriple(NamedTuple):
    train: tuple[str, ...]
    valid: str
    test: str


@dataclass
class ModalityStore:
    """Feature vectors for the items that have this modality."""

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, item: str) -> bool:
        return item in self.vectors

    def get(self, item: str) -> np.ndarray | None:
        return self.vectors.get(item)

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class StoreSet:
    """The three modality stores used throughout the model."""

    text: ModalityStore
    image: ModalityStore
    cross: ModalityStore

    def by_modality(self, modality: str) -> ModalityStore:
        if modality not in MODALITIES:
            raise KeyError(modality)
        return getattr(self, modality)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.text.dim, self.image.dim, self.cross.dim)


# ---------------------------------------------------------------------------
# file I/O


def load_interactions(path) -> list[Interaction]:
    out: list[Interaction] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(f"line {lineno}: expected 4 tab-separated fields, "
                                 f"got {len(fields)}")
            user, item, domain, ts = fields
            try:
                timestamp = int(ts)
            except ValueError:
                raise ParseError(f"line {lineno}: timestamp {ts!r} is not an "
                                 "integer") from None
            out.append(Interaction(user, item, domain, timestamp))
    return out


def write_interactions(path, interactions: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in interactions:
            fh.write(f"{rec.user}\t{rec.item}\t{rec.domain}\t{rec.timestamp}\n")


def load_embedding_store(path) -> ModalityStore:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("dim="):
            raise FormatError(f"first line must be dim=<d>, got {header!r}")
        try:
            dim = int(header[4:])
        except ValueError:
            raise FormatError(f"bad dimension in header {header!r}") from None
        if dim <= 0:
            raise FormatError(f"dimension must be positive, got {dim}")
        store = ModalityStore(dim=dim)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"line {lineno}: expected item<TAB>values")
            item, values = fields
            if item in store.vectors:
                raise FormatError(f"duplicate item {item!r} at line {lineno}")
            try:
                vec = np.array([float(v) for v in values.split(" ")])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric value for "
                                 f"item {item!r}") from None
            if vec.shape != (dim,):
                raise FormatError(f"item {item!r} has {vec.size} values, "
                                  f"expected {dim}")
            store.vectors[item] = vec
    return store


def write_embedding_store(path, store: ModalityStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={store.dim}\n")
        for item in sorted(store.vectors):
            values = " ".join(repr(float(v)) for v in store.vectors[item])
            fh.write(f"{item}\t{values}\n")


def merge_stores(stores: list[ModalityStore]) -> ModalityStore:
    """Union of stores with a common dim; duplicate item ids are rejected."""
    if not stores:
        raise ConfigError("no stores to merge")
    dim = stores[0].dim
    merged = ModalityStore(dim=dim)
    for store in stores:
        if store.dim != dim:
            raise FormatError(f"store dims differ: {store.dim} vs {dim}")
        for item, vec in store.vectors.items():
            if item in merged.vectors:
                raise FormatError(f"item {item!r} appears in more than one store")
            merged.vectors[item] = vec
    return merged


# ---------------------------------------------------------------------------
# sequence construction


def build_domain_sequences(interactions: list[Interaction]
                           ) -> dict[tuple[str, str], BehaviorSequence]:
    """Group events by (user, domain), each sorted by (timestamp, item_id)."""
    grouped: dict[tuple[str, str], list[Interaction]] = {}
    for rec in interactions:
        grouped.setdefault((rec.user, rec.domain), []).append(rec)
    out: dict[tuple[str, str], BehaviorSequence] = {}
    for key in sorted(grouped):
        events = sorted(grouped[key], key=lambda r: (r.timestamp, r.item))
        out[key] = BehaviorSequence(user=key[0], domain=key[1],
                                    events=tuple(events))
    return out


def build_mixed_flow(interactions: list[Interaction], user: str) -> MixedFlow:
    """All of one user's events across domains, sorted by
    (timestamp, domain_id, item_id)."""
    events = [r for r in interactions if r.user == user]
    if not events:
        raise KeyError(f"user {user!r} has no interactions")
    events.sort(key=lambda r: (r.timestamp, r.domain, r.item))
    return MixedFlow(user=user, events=tuple(events))


def leave_one_out_split(items: list[str]) -> SplitTriple:
    """Last item held out for test, second-to-last for validation."""
    if len(items) < 3:
        raise TooShortError(f"need at least 3 items to split, got {len(items)}")
    return SplitTriple(train=tuple(items[:-2]), valid=items[-2], test=items[-1])


def truncate_left(items, n_max: int):
    """Keep the most recent ``n_max`` entries."""
    if n_max <= 0:
        raise ConfigError(f"n_max must be positive, got {n_max}")
    return items[-n_max:]


def merge_with_positions(source_events: list[tuple[int, str, str]],
                         target_pairs: list[tuple[str, int]],
                         target_domain: str
                         ) -> tuple[list[str], dict[int, int]]:
    """Merge one user's source events with a prefix of their target sequence.

    ``source_events`` are (timestamp, domain, item) triples; ``target_pairs``
    are (item, timestamp) in sequence order.  Returns the merged item list in
    (timestamp, domain, item) order plus a map from target position to its
    index in the merged list.
    """
    entries = [(ts, dom, item, -1) for ts, dom, item in source_events]
    entries += [(ts, target_domain, item, pos)
                for pos, (item, ts) in enumerate(target_pairs)]
    entries.sort(key=lambda e: e[:3])
    items = [e[2] for e in entries]
    positions = {e[3]: i for i, e in enumerate(entries) if e[3] >= 0}
    return items, positions


def build_pretrain_sequences(interactions: list[Interaction],
                             source_domains: list[str],
                             n_max: int) -> list[list[str]]:
    """Training sequences for pre-training: each user's cross-domain mixed
    flow over the source domains plus their per-domain sequences.

    Sequences are truncated to the most recent ``n_max`` items; anything
    shorter than 2 items after truncation is dropped.  Order is fixed
    (users sorted, mixed flow first, then domains sorted) so downstream
    shuffles are the only source of run-to-run variation.
    """
    source = set(source_domains)
    events = [r for r in interactions if r.domain in source]
    per_user: dict[str, list[Interaction]] = {}
    for rec in events:
        per_user.setdefault(rec.user, []).append(rec)
    domain_seqs = build_domain_sequences(events)
    sequences: list[list[str]] = []
    for user in sorted(per_user):
        flow = build_mixed_flow(per_user[user], user)
        candidates = [truncate_left(flow.items, n_max)]
        for domain in sorted({r.domain for r in per_user[user]}):
            seq = domain_seqs[(user, domain)]
            candidates.append(truncate_left(seq.items, n_max))
        for items in candidates:
            if len(items) >= 2:
                sequences.append(list(items))
    return sequences


@dataclass
class FinetuneUser:
    """One target-domain user: their full target sequence plus source history."""

    user_id: str
    target: list[tuple[str, int]]  # (item, timestamp), chronological, len >= 3
    source_events: list[tuple[int, str, str]]  # (timestamp, domain, item)

    @property
    def target_items(self) -> list[str]:
        return [item for item, _ in self.target]

    def split(self) -> SplitTriple:
        return leave_one_out_split(self.target_items)


@dataclass
class FinetuneData:
    users: list[FinetuneUser]
    vocab: list[str]
    item_index: dict[str, int]
    stores: StoreSet
    target_domain: str
    source_domains: list[str]


def build_finetune_data(interactions: list[Interaction],
                        source_domains: list[str], target_domain: str,
                        stores: StoreSet) -> FinetuneData:
    """Collect target-domain users (>= 3 target events) with source context.

    The candidate vocabulary is every item observed in the target domain,
    sorted, so item indexing is reproducible from the interaction log alone.
    """
    if target_domain in source_domains:
        raise ConfigError(f"target domain {target_domain!r} also listed as source")
    source = set(source_domains)
    target_events: dict[str, list[Interaction]] = {}
    source_events: dict[str, list[Interaction]] = {}
    vocab_set: set[str] = set()
    for rec in interactions:
        if rec.domain == target_domain:
            target_events.setdefault(rec.user, []).append(rec)
            vocab_set.add(rec.item)
        elif rec.domain in source:
            source_events.setdefault(rec.user, []).append(rec)
    users: list[FinetuneUser] = []
    for user in sorted(target_events):
        events = sorted(target_events[user], key=lambda r: (r.timestamp, r.item))
        if len(events) < 3:
            continue
        src = sorted(((r.timestamp, r.domain, r.item)
                      for r in source_events.get(user, [])))
        users.append(FinetuneUser(
            user_id=user,
            target=[(r.item, r.timestamp) for r in events],
            source_events=src))
    vocab = sorted(vocab_set)
    return FinetuneData(users=users, vocab=vocab,
                        item_index={item: i for i, item in enumerate(vocab)},
                        stores=stores, target_domain=target_domain,
                        source_domains=list(source_domains))


@dataclass(frozen=True)
class EvalInstance:
    """One ranking decision: contexts up to the held-out event, plus its item."""

    user_id: str
    single_context: tuple[str, ...]
    mixed_context: tuple[str, ...]
    target: str


def build_eval_instances(data: FinetuneData, mode: str,
                         n_max: int) -> list[EvalInstance]:
    """Contexts for the held-out validation or test event of every user.

    The single-domain context is the target-domain history before the
    held-out event; the mixed context additionally interleaves source-domain
    events that sort before it.  Both keep the most recent ``n_max`` items.
    """
    if mode not in ("valid", "test"):
        raise ConfigError(f"mode must be 'valid' or 'test', got {mode!r}")
    instances: list[EvalInstance] = []
    for user in data.users:
        upto = len(user.target) - (2 if mode == "valid" else 1)
        single = truncate_left([it for it, _ in user.target[:upto]], n_max)
        merged, positions = merge_with_positions(
            user.source_events, user.target[:upto + 1], data.target_domain)
        mixed = truncate_left(merged[:positions[upto]], n_max)
        instances.append(EvalInstance(
            user_id=user.user_id, single_context=tuple(single),
            mixed_context=tuple(mixed), target=user.target[upto][0]))
    return instances


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    """Generator for a multi-domain corpus with shared latent preferences.

    Users and items live in one latent space; each domain observes its
    items' content through a fixed random linear map, so content-to-latent
    decoding is domain-dependent while preference structure is shared.
    Each modality observes its own slice of the latent space (text and
    image overlap partially, cross covers all of it), so the modalities
    complement each other instead of duplicating one signal.
    ``user_scale`` = 0 removes personalization entirely and ``content_scale``
    = 0 removes the latent signal from content features (both useful as
    null-model controls).  ``target_weight`` is the relative interaction
    share of the last domain against 1.0 per other domain; values below 1
    give users long histories elsewhere but only a few events in the last
    domain, which is the transfer regime when the last domain plays target.
    ``offset_scale`` > 0 gives every (domain, modality) pair its own constant
    shift of the feature cloud, the way embeddings from off-the-shelf
    encoders sit in domain-specific regions; decoders with a learned bias
    can subtract the shift while bias-free linear maps carry it into every
    token.
    """

    n_users: int = 500
    n_items_per_domain: int = 300
    n_domains: int = 4
    latent_dim: int = 8
    interactions_per_user: int = 16
    text_dim: int = 16
    image_dim: int = 24
    cross_dim: int = 16
    text_noise: float = 0.2
    image_noise: float = 0.3
    cross_noise: float = 0.1
    text_missing: float = 0.0
    image_missing: float = 0.0
    cross_missing: float = 0.0
    user_scale: float = 1.0
    content_scale: float = 1.0
    target_weight: float = 1.0
    offset_scale: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            # CLI overrides can smuggle in strings; reject before comparing
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a number, got {value!r}")
        for name in ("n_users", "n_items_per_domain", "n_domains", "latent_dim",
                     "interactions_per_user", "text_dim", "image_dim",
                     "cross_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("text_noise", "image_noise", "cross_noise", "user_scale",
                     "content_scale", "offset_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.target_weight <= 0:
            raise ConfigError(f"target_weight must be > 0, "
                              f"got {self.target_weight}")
        for name in ("text_missing", "image_missing", "cross_missing"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {rate}")

    @property
    def domains(self) -> list[str]:
        return [f"d{i}" for i in range(self.n_domains)]


@dataclass
class SynthResult:
    config: SynthConfig
    interactions: list[Interaction]
    stores_by_domain: dict[str, StoreSet]
    user_latents: dict[str, np.ndarray]
    item_latents: dict[str, np.ndarray]  # shared-space latents driving affinity

    def merged_stores(self) -> StoreSet:
        per_modality = {}
        for modality in MODALITIES:
            per_modality[modality] = merge_stores(
                [s.by_modality(modality) for s in self.stores_by_domain.values()])
        return StoreSet(**per_modality)


def _latent_blocks(latent_dim: int) -> list[tuple[int, int]]:
    """Partition latent dims into a text half and an image half.

    Odd widths leave a middle dim visible to both mono-modalities.
    """
    side = latent_dim // 2
    return [(0, side), (side, latent_dim - side), (latent_dim - side, latent_dim)]


def modality_spans(latent_dim: int) -> dict[str, tuple[int, int]]:
    """Which latent dims each modality's content map can observe.

    Text and image see complementary halves; cross sees everything.  Cross
    is therefore the only backup for a deleted mono-modality, which is what
    makes its representation quality decide how gracefully content loss
    degrades ranking.
    """
    blocks = _latent_blocks(latent_dim)
    return {"text": (0, blocks[1][1]), "image": (blocks[1][0], latent_dim),
            "cross": (0, latent_dim)}


def synth_generate(cfg: SynthConfig) -> SynthResult:
    """Draw a corpus whose interactions follow softmax(user . item latent).

    Per domain: raw item latents g ~ N(0, I) drive preference; content
    observes z = g @ A_d (a domain-specific map) through one shared map per
    modality plus noise and a constant per-(domain, modality) offset.  A_d
    mixes dims only within the blocks of :func:`modality_spans`, so each
    modality covers the same latent aspects in every domain while the
    coordinates remain domain-specific.  Item and user ids embed their
    index so files sort stably.

    Offsets come from a generator stream separate from ``rng`` so that
    corpora with ``offset_scale`` = 0 are bit-identical to corpora drawn
    before the field existed.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    off_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    users = [f"u{i:04d}" for i in range(cfg.n_users)]
    user_lat = rng.normal(size=(cfg.n_users, cfg.latent_dim)) * cfg.user_scale

    modality_dims = {"text": cfg.text_dim, "image": cfg.image_dim,
                     "cross": cfg.cross_dim}
    modality_noise = {"text": cfg.text_noise, "image": cfg.image_noise,
                      "cross": cfg.cross_noise}
    modality_missing = {"text": cfg.text_missing, "image": cfg.image_missing,
                        "cross": cfg.cross_missing}
    spans = modality_spans(cfg.latent_dim)
    blocks = [(lo, hi) for lo, hi in _latent_blocks(cfg.latent_dim) if hi > lo]
    content_maps = {}
    for m in MODALITIES:
        lo, hi = spans[m]
        rows = rng.normal(size=(hi - lo, modality_dims[m]))
        full = np.zeros((cfg.latent_dim, modality_dims[m]))
        full[lo:hi] = rows / np.sqrt(hi - lo) * cfg.content_scale
        content_maps[m] = full

    item_ids: dict[str, list[str]] = {}
    raw_latents: dict[str, np.ndarray] = {}
    stores_by_domain: dict[str, StoreSet] = {}
    item_latents: dict[str, np.ndarray] = {}
    for domain in cfg.domains:
        ids = [f"{domain}:i{k:04d}" for k in range(cfg.n_items_per_domain)]
        g = rng.normal(size=(cfg.n_items_per_domain, cfg.latent_dim))
        domain_map = np.zeros((cfg.latent_dim, cfg.latent_dim))
        for lo, hi in blocks:
            domain_map[lo:hi, lo:hi] = rng.normal(size=(hi - lo, hi - lo)) \
                / np.sqrt(hi - lo)
        z = g @ domain_map
        per_modality = {}
        for modality in MODALITIES:
            dim = modality_dims[modality]
            offset = off_rng.normal(size=dim) * cfg.offset_scale
            features = z @ content_maps[modality] + offset \
                + rng.normal(size=(cfg.n_items_per_domain, dim)) \
                * modality_noise[modality]
            present = rng.random(cfg.n_items_per_domain) >= \
                modality_missing[modality]
            store = ModalityStore(dim=dim)
            for k, item in enumerate(ids):
                if present[k]:
                    store.vectors[item] = features[k].copy()
            per_modality[modality] = store
        stores_by_domain[domain] = StoreSet(**per_modality)
        item_ids[domain] = ids
        raw_latents[domain] = g
        for k, item in enumerate(ids):
            item_latents[item] = g[k].copy()

    interactions: list[Interaction] = []
    n_dom = cfg.n_domains
    domain_probs = np.ones(n_dom)
    domain_probs[-1] = cfg.target_weight
    domain_probs /= domain_probs.sum()
    for u, user in enumerate(users):
        for t in range(cfg.interactions_per_user):
            domain = cfg.domains[int(rng.choice(n_dom, p=domain_probs))]
            scores = raw_latents[domain] @ user_lat[u]
            scores -= scores.max()
            probs = np.exp(scores)
            probs /= probs.sum()
            k = int(rng.choice(cfg.n_items_per_domain, p=probs))
            interactions.append(Interaction(user, item_ids[domain][k], domain, t))

    return SynthResult(config=cfg, interactions=interactions,
                       stores_by_domain=stores_by_domain,
                       user_latents={u: user_lat[i].copy()
                                     for i, u in enumerate(users)},
                       item_latents=item_latents)
