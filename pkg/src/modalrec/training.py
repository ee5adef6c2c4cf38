"""Model assembly, contrastive pre-training, and target-domain fine-tuning.

Pre-training encodes source-domain sequences (per-domain and cross-domain
mixed flows) with content-only inputs and optimises two contrastive terms:

* next-item: each position's hidden state against the projected content of
  its next item, with the other in-batch targets as negatives;
* self-supervised: each sequence's last hidden state against the same
  sequence re-encoded after random item dropping, with the other original
  sequence representations (self included) in the denominator.

Fine-tuning freezes the transformer and position table, trains the three
projectors plus a fresh item-id table for the target vocabulary, and
optimises cross-entropy of the fused two-head prediction (mixed-flow head
over content candidates, single-domain head over content + id candidates).

Losses are the literal sums over instances; Adam's per-coordinate scaling
makes that equivalent to any global normalisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import AdamState, Tensor, adam_step, backward, zero_grads
from .checkpoint import Checkpoint
from .corpus import (MODALITIES, FinetuneData, FinetuneUser, StoreSet,
                     build_eval_instances, merge_with_positions, truncate_left)
from .encoder import EncoderParams, encode, init_encoder
from .errors import ConfigError, FormatError, TooShortError
from .projector import MoEProjector, init_projector
from .evaluation import EarlyStopState, early_stop_update

LOG_HALF = float(np.log(0.5))

# rng stream tags so each component/stage draws from its own substream
_TAG_TEXT, _TAG_IMAGE, _TAG_CROSS, _TAG_ENCODER, _TAG_ID = 1, 2, 3, 4, 5
_TAG_PRETRAIN, _TAG_FINETUNE = 11, 22


def stage_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters shared by pre-training and fine-tuning."""

    tau: float = 0.07             # contrastive temperature
    css_weight: float = 1e-3      # weight of the sequence-level term
    drop_ratio: float = 0.2       # item drop probability for augmentation
    learning_rate: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 30
    finetune_epochs: int = 200
    patience: int = 10            # early-stopping patience on valid ndcg@10
    d: int = 64                   # per-modality projected width; model dim = 3d
    experts: int = 8
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.2
    max_len: int = 50
    css_mode: str = "original"    # "original" | "standard"
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            if f.name == "css_mode":
                continue
            value = getattr(self, f.name)
            # CLI overrides can smuggle in strings; reject before comparing
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a number, got {value!r}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.css_weight < 0:
            raise ConfigError(f"css_weight must be >= 0, got {self.css_weight}")
        if not 0.0 <= self.drop_ratio < 1.0:
            raise ConfigError(f"drop_ratio must be in [0, 1), got {self.drop_ratio}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("batch_size", "pretrain_epochs", "finetune_epochs",
                     "patience", "d", "experts", "heads", "ffn_mult", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if (3 * self.d) % self.heads != 0:
            raise ConfigError(f"model dim {3 * self.d} not divisible by "
                              f"{self.heads} heads")
        if self.css_mode not in ("original", "standard"):
            raise ConfigError(f"css_mode must be 'original' or 'standard', "
                              f"got {self.css_mode!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


@dataclass
class Model:
    """Projectors + shared encoder, plus fine-tune additions when present."""

    projectors: dict[str, MoEProjector]
    encoder: EncoderParams
    cfg: TrainingConfig
    dims: tuple[int, int, int]
    id_embedding: Tensor | None = None
    vocab: list[str] | None = None
    item_index: dict[str, int] | None = None
    use_mix: bool = True
    use_id: bool = True

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def plain(self) -> frozenset[str]:
        return frozenset(m for m in MODALITIES if self.projectors[m].plain)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for modality in MODALITIES:
            out.update(self.projectors[modality].named(f"proj.{modality}"))
        for name, t in self.encoder.named().items():
            out[f"encoder.{name}"] = t
        if self.id_embedding is not None:
            out["id_embedding"] = self.id_embedding
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.named_parameters().items()
                if t.requires_grad}

    def freeze_encoder(self) -> None:
        for t in self.encoder.named().values():
            t.requires_grad = False


def build_model(dims: tuple[int, int, int], cfg: TrainingConfig,
                plain: frozenset[str] = frozenset()) -> Model:
    """Fresh model; each component draws from its own seed substream, so
    swapping one projector for a plain one leaves every other init intact."""
    cfg.validate()
    unknown = set(plain) - set(MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities in plain set: {sorted(unknown)}")
    tags = {"text": _TAG_TEXT, "image": _TAG_IMAGE, "cross": _TAG_CROSS}
    projectors = {}
    for modality, d_in in zip(MODALITIES, dims):
        projectors[modality] = init_projector(
            stage_rng(cfg.seed, tags[modality]), modality, d_in, cfg.d,
            cfg.experts, plain=modality in plain)
    enc = init_encoder(stage_rng(cfg.seed, _TAG_ENCODER), 3 * cfg.d, cfg.layers,
                       cfg.heads, cfg.ffn_mult * 3 * cfg.d, cfg.max_len)
    return Model(projectors=projectors, encoder=enc, cfg=cfg, dims=tuple(dims))


# ---------------------------------------------------------------------------
# checkpoint round trip


def checkpoint_from_model(model: Model, stage: str,
                          rng: np.random.Generator | None = None) -> Checkpoint:
    meta = {
        "config": model.cfg.to_dict(),
        "dims": list(model.dims),
        "plain": sorted(model.plain),
        "stage": stage,
        "use_mix": model.use_mix,
        "use_id": model.use_id,
    }
    if model.vocab is not None:
        meta["vocab"] = model.vocab
    if rng is not None:
        meta["rng_state"] = repr(rng.bit_generator.state)
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    return Checkpoint(tensors=tensors, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    meta = ckpt.meta
    for key in ("config", "dims", "plain", "stage"):
        if key not in meta:
            raise FormatError(f"checkpoint meta missing {key!r}")
    cfg = TrainingConfig.from_dict(meta["config"])
    model = build_model(tuple(meta["dims"]), cfg, frozenset(meta["plain"]))
    model.use_mix = bool(meta.get("use_mix", True))
    model.use_id = bool(meta.get("use_id", True))
    if "vocab" in meta:
        model.vocab = list(meta["vocab"])
        model.item_index = {item: i for i, item in enumerate(model.vocab)}
        if "id_embedding" in ckpt.tensors:
            model.id_embedding = Tensor(ckpt.tensors["id_embedding"],
                                        requires_grad=True)
    expected = set(model.named_parameters())
    stored = set(ckpt.tensors)
    if expected != stored:
        raise FormatError(f"checkpoint tensors do not match architecture: "
                          f"missing {sorted(expected - stored)}, "
                          f"unexpected {sorted(stored - expected)}")
    for name, t in model.named_parameters().items():
        if t.data.shape != ckpt.tensors[name].shape:
            raise FormatError(f"tensor {name} has shape "
                              f"{ckpt.tensors[name].shape}, expected {t.data.shape}")
        t.data = ckpt.tensors[name].astype(np.float64, copy=True)
    return model


# ---------------------------------------------------------------------------
# batched sequence encoding over a projected content table


def content_table(items: list[str], stores: StoreSet,
                  projectors: dict[str, MoEProjector]) -> Tensor:
    """Projected content for ``items``, one row each, slots [text|image|cross].

    Missing modalities stay zero; present features go through their
    projector in one batched call per modality.
    """
    n = len(items)
    columns = []
    for modality in MODALITIES:
        store = stores.by_modality(modality)
        projector = projectors[modality]
        present = [(row, store.get(item)) for row, item in enumerate(items)
                   if item in store]
        if not present:
            columns.append(Tensor(np.zeros((n, projector.d_out))))
            continue
        rows = [row for row, _ in present]
        raw = np.stack([vec for _, vec in present])
        from .projector import moe_project
        columns.append(ad.scatter_rows(moe_project(raw, projector), rows, n))
    return ad.concat(columns, axis=1)


def encode_item_sequences(index_seqs: list[list[int]], table: Tensor,
                          enc_params: EncoderParams,
                          id_table: Tensor | None = None,
                          p_drop: float = 0.0,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Gather table rows per sequence, add positions (and ids), run the stack.

    Padding rows are zeroed content at index 0; causal plus key masking keeps
    them out of every real position's receptive field.
    """
    if not index_seqs:
        raise ConfigError("no sequences to encode")
    lengths = [len(seq) for seq in index_seqs]
    if min(lengths) < 1:
        raise TooShortError("cannot encode an empty sequence")
    n = max(lengths)
    if n > enc_params.n_max:
        raise IndexError(f"sequence length {n} exceeds maximum {enc_params.n_max}")
    batch = len(index_seqs)
    idx = np.zeros((batch, n), dtype=np.intp)
    pad = np.zeros((batch * n, 1))
    for b, seq in enumerate(index_seqs):
        idx[b, :len(seq)] = seq
        pad[b * n:b * n + len(seq)] = 1.0
    flat = ad.mul(ad.gather_rows(table, idx.reshape(-1)), Tensor(pad))
    if id_table is not None:
        flat = ad.add(flat, ad.mul(ad.gather_rows(id_table, idx.reshape(-1)),
                                   Tensor(pad)))
    x = ad.reshape(flat, (batch, n, table.shape[1]))
    positions = ad.reshape(ad.gather_rows(enc_params.position, np.arange(n)),
                           (1, n, enc_params.dim))
    x = ad.add(x, positions)
    return encode(x, enc_params, lengths=lengths, p_drop=p_drop, rng=rng)


def _flat_rows(hidden: Tensor, pairs: list[tuple[int, int]]) -> Tensor:
    """Pick hidden states (sequence row, position) from a (B, n, dim) tensor."""
    batch, n, dim = hidden.shape
    flat = ad.reshape(hidden, (batch * n, dim))
    return ad.gather_rows(flat, [b * n + p for b, p in pairs])


# ---------------------------------------------------------------------------
# contrastive objectives


def augment_drop(sequence: list, drop_ratio: float,
                 rng: np.random.Generator) -> list:
    """Randomly drop items, keeping each with probability 1 - drop_ratio.

    Relative order is preserved.  If everything is dropped the most recent
    item is kept so the result is never empty.
    """
    if not 0.0 <= drop_ratio < 1.0:
        raise ConfigError(f"drop_ratio must be in [0, 1), got {drop_ratio}")
    if len(sequence) < 2:
        raise TooShortError(f"augmentation needs >= 2 items, got {len(sequence)}")
    keep = rng.random(len(sequence)) >= drop_ratio
    kept = [item for item, k in zip(sequence, keep) if k]
    return kept if kept else [sequence[-1]]


def _check_pair(u: Tensor, other: Tensor, tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if u.ndim != 2 or other.ndim != 2 or u.shape != other.shape:
        raise ConfigError(f"paired representations must be equal-shape row "
                          f"matrices, got {u.shape} and {other.shape}")


def loss_csi(u: Tensor, e: Tensor, tau: float) -> Tensor:
    """Next-item contrastive loss, summed over the batch.

    Row j of ``u`` is a context representation, row j of ``e`` the projected
    content of its true next item; every other row of ``e`` serves as an
    in-batch negative.
    """
    _check_pair(u, e, tau)
    t = u.shape[0]
    logits = ad.scale(ad.matmul(u, ad.swapaxes(e, 0, 1)), 1.0 / tau)
    lse = ad.logsumexp(logits, axis=-1)
    diag = ad.take_pairs(logits, np.arange(t), np.arange(t))
    return ad.sum_(ad.sub(lse, diag))


def loss_css(u: Tensor, u_aug: Tensor, tau: float,
             mode: str = "original") -> Tensor:
    """Sequence-level contrastive loss between original and augmented views.

    ``original`` follows the printed objective: the positive pairs an
    original representation with its augmented view, while the denominator
    sums similarities to the *original* batch representations only (self
    included; augmented views never appear as negatives).  ``standard`` is
    the conventional alternative with augmented views as negatives.
    """
    _check_pair(u, u_aug, tau)
    t = u.shape[0]
    if mode == "original":
        sims = ad.scale(ad.matmul(u, ad.swapaxes(u, 0, 1)), 1.0 / tau)
        lse = ad.logsumexp(sims, axis=-1)
        pos = ad.scale(ad.sum_(ad.mul(u, u_aug), axis=1), 1.0 / tau)
        return ad.sum_(ad.sub(lse, pos))
    if mode == "standard":
        logits = ad.scale(ad.matmul(u, ad.swapaxes(u_aug, 0, 1)), 1.0 / tau)
        lse = ad.logsumexp(logits, axis=-1)
        diag = ad.take_pairs(logits, np.arange(t), np.arange(t))
        return ad.sum_(ad.sub(lse, diag))
    raise ConfigError(f"css mode must be 'original' or 'standard', got {mode!r}")


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainData:
    sequences: list[list[str]]
    stores: StoreSet


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]


def pretrain_loss(model: Model, batch: list[list[str]], cfg: TrainingConfig,
                  stores: StoreSet, augmented: list[list[str]] | None = None,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Combined pre-training objective for one batch of item sequences.

    One causal pass per sequence yields every (prefix, next item) pair for
    the next-item term.  When ``css_weight`` is zero the augmented pass is
    skipped entirely; otherwise ``augmented`` may be supplied explicitly
    (for deterministic verification) or is drawn from ``rng``.
    """
    if not batch:
        raise ConfigError("empty batch")
    if any(len(seq) < 2 for seq in batch):
        raise TooShortError("pre-training sequences need >= 2 items")
    use_css = cfg.css_weight > 0.0
    if use_css and augmented is None:
        if rng is None:
            raise ConfigError("need augmented sequences or an rng to draw them")
        augmented = [augment_drop(seq, cfg.drop_ratio, rng) for seq in batch]

    items = sorted({item for seq in batch for item in seq}
                   | ({item for seq in augmented for item in seq}
                      if use_css else set()))
    row_of = {item: i for i, item in enumerate(items)}
    table = content_table(items, stores, model.projectors)

    drop_rng = rng if cfg.dropout > 0.0 else None
    index_seqs = [[row_of[item] for item in seq] for seq in batch]
    hidden = encode_item_sequences(index_seqs, table, model.encoder,
                                   p_drop=cfg.dropout, rng=drop_rng)

    ctx_pairs = [(b, j) for b, seq in enumerate(batch)
                 for j in range(len(seq) - 1)]
    target_rows = [row_of[seq[j + 1]] for b, seq in enumerate(batch)
                   for j in range(len(seq) - 1)]
    u = _flat_rows(hidden, ctx_pairs)
    e = ad.gather_rows(table, target_rows)
    loss = loss_csi(u, e, cfg.tau)

    if use_css:
        aug_seqs = [[row_of[item] for item in seq] for seq in augmented]
        hidden_aug = encode_item_sequences(aug_seqs, table, model.encoder,
                                           p_drop=cfg.dropout, rng=drop_rng)
        u_full = _flat_rows(hidden, [(b, len(seq) - 1)
                                     for b, seq in enumerate(batch)])
        u_aug = _flat_rows(hidden_aug, [(b, len(seq) - 1)
                                        for b, seq in enumerate(augmented)])
        loss = ad.add(loss, ad.scale(loss_css(u_full, u_aug, cfg.tau,
                                              cfg.css_mode), cfg.css_weight))
    return loss


def pretrain(data: PretrainData, cfg: TrainingConfig,
             plain: frozenset[str] = frozenset()) -> PretrainResult:
    """Train a fresh model on source-domain sequences for a fixed epoch count."""
    cfg.validate()
    if not data.sequences:
        raise ConfigError("no pre-training sequences")
    model = build_model(data.stores.dims, cfg, plain)
    rng = stage_rng(cfg.seed, _TAG_PRETRAIN)
    params = model.trainable_parameters()
    adam = AdamState(learning_rate=cfg.learning_rate)
    epoch_losses: list[float] = []
    n = len(data.sequences)
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [data.sequences[i] for i in order[start:start + cfg.batch_size]]
            loss = pretrain_loss(model, batch, cfg, data.stores, rng=rng)
            zero_grads(params)
            backward(loss)
            adam_step(params, adam)
            total += loss.item()
        epoch_losses.append(total / n)
    return PretrainResult(checkpoint=checkpoint_from_model(model, "pretrain", rng),
                          epoch_losses=epoch_losses)


def init_checkpoint(dims: tuple[int, int, int], cfg: TrainingConfig,
                    plain: frozenset[str] = frozenset()) -> Checkpoint:
    """Checkpoint of an untrained model (the no-pre-training ablation)."""
    return checkpoint_from_model(build_model(dims, cfg, plain), "init")


# ---------------------------------------------------------------------------
# fused prediction


def _as_row_matrix(u) -> tuple[Tensor, bool]:
    t = u if isinstance(u, Tensor) else Tensor(u)
    if t.ndim == 1:
        return ad.reshape(t, (1, t.shape[0])), True
    return t, False


def _log_softmax_rows(logits: Tensor) -> Tensor:
    lse = ad.reshape(ad.logsumexp(logits, axis=-1), (logits.shape[0], 1))
    return ad.sub(logits, lse)


def fused_log_probs(u_mixed, u_single, cand_content: Tensor,
                    cand_id: Tensor | None, use_mix: bool = True,
                    use_id: bool = True) -> Tensor:
    """Log of the fused distribution, computed without leaving log space."""
    log_heads = []
    if use_mix:
        if u_mixed is None:
            raise ConfigError("mixed head enabled but no mixed representation")
        um, _ = _as_row_matrix(u_mixed)
        log_heads.append(_log_softmax_rows(
            ad.matmul(um, ad.swapaxes(cand_content, 0, 1))))
    cand = cand_content
    if use_id:
        if cand_id is None:
            raise ConfigError("id head enabled but no id embeddings")
        cand = ad.add(cand_content, cand_id)
    us, _ = _as_row_matrix(u_single)
    log_heads.append(_log_softmax_rows(ad.matmul(us, ad.swapaxes(cand, 0, 1))))
    if len(log_heads) == 1:
        return log_heads[0]
    b, v = log_heads[0].shape
    stacked = ad.concat([ad.reshape(lp, (1, b, v)) for lp in log_heads], axis=0)
    return ad.add(ad.logsumexp(stacked, axis=0), Tensor(LOG_HALF))


def fused_predict(u_mixed, u_single, cand_content, cand_id=None,
                  use_mix: bool = True, use_id: bool = True) -> Tensor:
    """Fused next-item distribution: the equal mixture of the mixed-flow
    head over content candidates and the single-domain head over
    content-plus-id candidates.  Disabled heads drop out of the mixture."""
    cand_content = as_tensor_2d(cand_content)
    if cand_id is not None:
        cand_id = cand_id if isinstance(cand_id, Tensor) else Tensor(cand_id)
    _, squeeze = _as_row_matrix(u_single)
    lp = fused_log_probs(u_mixed, u_single, cand_content, cand_id,
                         use_mix=use_mix, use_id=use_id)
    probs = ad.exp(lp)
    return ad.reshape(probs, (probs.shape[1],)) if squeeze else probs


def as_tensor_2d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 2:
        raise ConfigError(f"candidate matrix must be 2-d, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class UserFeed:
    """Precomputed windows and training positions for one user."""

    user: FinetuneUser
    single_window: list[str]
    mixed_window: list[str]
    # (position in single window, position in mixed window, target item)
    instances: list[tuple[int, int, str]] = field(default_factory=list)


def build_user_feed(user: FinetuneUser, target_domain: str,
                    n_max: int) -> UserFeed:
    """Training windows over the user's train split (last two events held out).

    Each training step t >= 1 predicts train item t from the single-domain
    prefix and from the mixed window cut just before that event; steps whose
    prefix got truncated away are skipped.
    """
    train = user.target[:-2]
    train_items = [item for item, _ in train]
    single_window = truncate_left(train_items, n_max)
    s_off = len(train_items) - len(single_window)
    merged, positions = merge_with_positions(user.source_events, train,
                                             target_domain)
    mixed_window = truncate_left(merged, n_max)
    m_off = len(merged) - len(mixed_window)
    feed = UserFeed(user=user, single_window=single_window,
                    mixed_window=mixed_window)
    for t in range(1, len(train_items)):
        ps = t - s_off
        pm = positions[t] - m_off
        if ps >= 1 and pm >= 1:
            feed.instances.append((ps, pm, train_items[t]))
    return feed


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    model: Model
    curve: list[tuple[int, float]]  # (epoch, validation ndcg@10)
    best_epoch: int
    stopped_early: bool


def _finetune_batch_loss(model: Model, feeds: list[UserFeed],
                         data: FinetuneData, cfg: TrainingConfig,
                         rng: np.random.Generator | None) -> Tensor:
    vocab_size = len(data.vocab)
    extra = sorted({item for feed in feeds for item in feed.mixed_window
                    if item not in data.item_index}) if model.use_mix else []
    items = data.vocab + extra
    row_of = {item: i for i, item in enumerate(items)}
    table = content_table(items, data.stores, model.projectors)
    cand_content = ad.gather_rows(table, np.arange(vocab_size))

    single_idx = [[data.item_index[item] for item in feed.single_window]
                  for feed in feeds]
    drop_rng = rng if cfg.dropout > 0.0 else None
    hidden_s = encode_item_sequences(
        single_idx, table, model.encoder,
        id_table=model.id_embedding if model.use_id else None,
        p_drop=cfg.dropout, rng=drop_rng)
    u_s = _flat_rows(hidden_s, [(b, ps - 1) for b, feed in enumerate(feeds)
                                for ps, _, _ in feed.instances])
    u_m = None
    if model.use_mix:
        mixed_idx = [[row_of[item] for item in feed.mixed_window]
                     for feed in feeds]
        hidden_m = encode_item_sequences(mixed_idx, table, model.encoder,
                                         p_drop=cfg.dropout, rng=drop_rng)
        u_m = _flat_rows(hidden_m, [(b, pm - 1) for b, feed in enumerate(feeds)
                                    for _, pm, _ in feed.instances])
    targets = [data.item_index[item] for feed in feeds
               for _, _, item in feed.instances]
    lp = fused_log_probs(u_m, u_s, cand_content,
                         model.id_embedding if model.use_id else None,
                         use_mix=model.use_mix, use_id=model.use_id)
    picked = ad.take_pairs(lp, np.arange(len(targets)), targets)
    return ad.neg(ad.sum_(picked))


def score_instances(model: Model, instances, data: FinetuneData,
                    cfg: TrainingConfig, chunk: int = 256) -> np.ndarray:
    """Deterministic fused log-probability scores, one row per instance."""
    vocab_size = len(data.vocab)
    scores = np.zeros((len(instances), vocab_size))
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        extra = sorted({item for inst in part for item in inst.mixed_context
                        if item not in data.item_index}) if model.use_mix else []
        items = data.vocab + extra
        row_of = {item: i for i, item in enumerate(items)}
        table = content_table(items, data.stores, model.projectors)
        cand_content = ad.gather_rows(table, np.arange(vocab_size))
        single_idx = [[data.item_index[item] for item in inst.single_context]
                      for inst in part]
        hidden_s = encode_item_sequences(
            single_idx, table, model.encoder,
            id_table=model.id_embedding if model.use_id else None)
        u_s = _flat_rows(hidden_s, [(b, len(seq) - 1)
                                    for b, seq in enumerate(single_idx)])
        u_m = None
        if model.use_mix:
            mixed_idx = [[row_of[item] for item in inst.mixed_context]
                         for inst in part]
            hidden_m = encode_item_sequences(mixed_idx, table, model.encoder)
            u_m = _flat_rows(hidden_m, [(b, len(seq) - 1)
                                        for b, seq in enumerate(mixed_idx)])
        lp = fused_log_probs(u_m, u_s, cand_content,
                             model.id_embedding if model.use_id else None,
                             use_mix=model.use_mix, use_id=model.use_id)
        scores[start:start + len(part)] = lp.data
    return scores


def make_scorer(model: Model, data: FinetuneData, cfg: TrainingConfig):
    return lambda instances: score_instances(model, instances, data, cfg)


def finetune(ckpt: Checkpoint, data: FinetuneData, cfg: TrainingConfig,
             use_mix: bool = True, use_id: bool = True) -> FinetuneResult:
    """Adapt a pre-trained checkpoint to the target domain.

    The transformer stack and position table are frozen; projectors (and the
    new id table) train under early stopping on validation ndcg@10.  The
    returned model carries the best-validation parameters.
    """
    cfg.validate()
    model = model_from_checkpoint(ckpt)
    if model.cfg.d != cfg.d or model.cfg.layers != cfg.layers \
            or model.cfg.heads != cfg.heads or model.cfg.max_len != cfg.max_len:
        raise ConfigError("fine-tune config changes the frozen architecture")
    model.cfg = cfg
    model.use_mix = use_mix
    model.use_id = use_id
    model.freeze_encoder()
    if not data.users:
        raise ConfigError("no users with enough target-domain history")
    rng = stage_rng(cfg.seed, _TAG_FINETUNE)
    model.vocab = data.vocab
    model.item_index = dict(data.item_index)
    if use_id:
        model.id_embedding = Tensor(
            rng.normal(0.0, 0.02, (len(data.vocab), model.dim)),
            requires_grad=True)
    params = model.trainable_parameters()
    adam = AdamState(learning_rate=cfg.learning_rate)

    feeds = [feed for feed in
             (build_user_feed(u, data.target_domain, cfg.max_len)
              for u in data.users)
             if feed.instances]
    valid_instances = build_eval_instances(data, "valid", cfg.max_len)
    scorer = make_scorer(model, data, cfg)

    state = EarlyStopState(patience=cfg.patience)
    best = {name: t.data.copy() for name, t in params.items()}
    curve: list[tuple[int, float]] = []
    stopped = False
    for epoch in range(1, cfg.finetune_epochs + 1):
        order = rng.permutation(len(feeds))
        for start in range(0, len(feeds), cfg.batch_size):
            batch = [feeds[i] for i in order[start:start + cfg.batch_size]]
            loss = _finetune_batch_loss(model, batch, data, cfg, rng)
            zero_grads(params)
            backward(loss)
            adam_step(params, adam)
        report = evaluation.evaluate(valid_instances, scorer, data.item_index,
                                     ks=(10,))
        ndcg = report.ndcgs[10]
        curve.append((epoch, ndcg))
        improved = ndcg > state.best
        if early_stop_update(state, ndcg):
            stopped = True
        if improved:
            best = {name: t.data.copy() for name, t in params.items()}
        if stopped:
            break
    for name, t in params.items():
        t.data = best[name]
    out = checkpoint_from_model(model, "finetune", rng)
    return FinetuneResult(checkpoint=out, model=model, curve=curve,
                          best_epoch=state.best_epoch, stopped_early=stopped)
