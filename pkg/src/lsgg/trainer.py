"""Losses, analytic gradients, the optimizer, and the per-stage training loop.

The trainable surface is the token mapper, the pool's prompt tokens and keys,
and the mask embeddings; the decoder stays frozen unless scorer finetuning is
switched on. Gradients are assembled by hand: decoder pooling -> prompt rows
-> (prompt tokens | mapper encodes | label embeddings | mask rows), plus the
key-alignment term. Top-K retrieval is treated as non-differentiable: the
selection identity is fixed during the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ioutil import pack_floats, unpack_floats
from .numerics import RowCache, cosine
from .prompt_pool import PromptPool, admit_exemplar
from .rng import SeededRng
from .scorer import (PredicateVocab, ScorerParams, assemble_prompt,
                     position_weights, rank_predicates, score)
from .token_mapper import (KINDS, MapperParams, encode_batch, encode_batch_backward,
                           init_grads)

CKPT_MAGIC = "LSGG-CKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 0.2  # weight of the auxiliary loss slot
    lam: float = 0.5  # weight of the key-alignment loss
    lr: float = 0.002
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    rho: float = 0.25  # fraction of each batch drawn from the pool
    k_retrieve: int = 3
    scorer_lr_scale: float = 0.1  # applied when the decoder is unfrozen
    l1_mode: str = "none"  # "none" (constant 0) or "token_norm"
    # ablation switches
    random_prompts: bool = False  # ignore keys, pick K entries at random
    random_exemplar: bool = False  # ignore relation similarity inside stores
    shuffle_order: bool = False  # randomize context segment order
    naive: bool = False  # single prompt, no exemplars, no replay, no admissions

    def validate(self) -> None:
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rehearsal ratio must lie in [0, 1)")
        if self.lr < 0:  # lr == 0 is the diagnostic no-op case
            raise ValueError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.k_retrieve < 1:
            raise ValueError("epochs, batch size, and K must be >= 1")
        if self.l1_mode not in ("none", "token_norm"):
            raise ValueError(f"unknown l1_mode {self.l1_mode!r}")

    def effective_k(self) -> int:
        return 1 if self.naive else self.k_retrieve

    def effective_rho(self) -> float:
        return 0.0 if self.naive else self.rho


@dataclass
class TrainableSet:
    """Everything the optimizer may touch. The decoder participates only when
    its ``trainable`` flag is set (scorer finetuning)."""

    mapper: MapperParams
    pool: PromptPool
    y_mask: np.ndarray  # (n_mask, d_tok)
    scorer: ScorerParams

    def param_items(self):
        for name, arr in self.mapper.param_items():
            yield f"mapper.{name}", arr
        for i, entry in enumerate(self.pool.entries):
            yield f"pool.v.{i}", entry.v
            yield f"pool.k.{i}", entry.k
        yield "y_mask", self.y_mask
        if self.scorer.trainable:
            yield from self.scorer.param_items()

    def checkpoint_items(self):
        """Arrays stored in a checkpoint; the pool is referenced by path."""
        for name, arr in self.mapper.param_items():
            yield f"mapper.{name}", arr
        yield "y_mask", self.y_mask
        yield from self.scorer.param_items()


def init_y_mask(n_mask: int, d_tok: int, rng: SeededRng) -> np.ndarray:
    return rng.normal((n_mask, d_tok)) / np.sqrt(d_tok)


# -- losses --------------------------------------------------------------------


def loss_key_alignment(f_c_query, keys) -> float:
    """Sum of (1 - cosine) between the query context feature and each key."""
    keys = list(keys)
    if not keys:
        raise ValueError("key-alignment loss needs at least one key")
    return float(sum(1.0 - cosine(f_c_query, k) for k in keys))


def d_key_alignment_dk(f_c_query, key) -> np.ndarray:
    """Gradient of (1 - cosine(f, k)) with respect to k."""
    f = np.asarray(f_c_query, dtype=float)
    k = np.asarray(key, dtype=float)
    nf, nk = np.linalg.norm(f), np.linalg.norm(k)
    u = f / nf
    s = float(u @ k / nk)
    return -(u / nk - s * k / (nk * nk))


def loss_predicate_ce(distributions, target: int, vocab: PredicateVocab) -> float:
    """Teacher-forced cross-entropy over the target's non-padding token slots."""
    dist = np.asarray(distributions, dtype=float)
    toks = vocab.tokens.get(target)
    if not toks:
        raise ValueError(f"target predicate {target} has no tokens")
    total = 0.0
    for j, t in enumerate(toks):
        if not 0 <= t < dist.shape[1]:
            raise ValueError(f"token {t} outside vocabulary of size {dist.shape[1]}")
        total -= float(np.log(dist[j, t]))
    return total


def loss_total(l1_aux: float, l2: float, l3: float, config: TrainConfig) -> float:
    for name, val in (("l1", l1_aux), ("l2", l2), ("l3", l3)):
        if not np.isfinite(val):
            raise ValueError(f"loss component {name} is not finite: {val}")
    return config.alpha * l1_aux + config.lam * l2 + l3


def token_norm_penalty(block: np.ndarray):
    """Mean squared deviation of row norms from 1; the optional auxiliary loss.

    Returns (value, gradient wrt the block rows).
    """
    sq = np.sum(block * block, axis=1)
    dev = sq - 1.0
    value = float(np.mean(dev * dev))
    grad = (4.0 / block.shape[0]) * dev[:, None] * block
    return value, grad


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; dense update over all registered
    parameters each step (absent gradients count as zero)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, trainables: TrainableSet, grads: dict, config: TrainConfig) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, param in trainables.param_items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(param)
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            lr = config.lr * (config.scorer_lr_scale if name.startswith("scorer.") else 1.0)
            step = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param -= lr * (step + config.weight_decay * param)


# -- batched forward/backward ----------------------------------------------------


@dataclass
class _Item:
    source: object  # RelationInstance or Exemplar
    replay: bool  # replayed items contribute only the prediction loss


@dataclass
class _ForwardState:
    prompts: list  # AssembledPrompt per item
    probs: list  # (n_mask, V) per item
    weights: list  # position weights per item
    bases: list  # pooled base row per item
    q_blocks: np.ndarray  # (B, rows_ex, d_tok)
    q_caches: dict  # kind -> cache
    uniq_ex: list  # deduplicated exemplars shown in context segments
    ex_blocks: np.ndarray | None  # (U, rows_ex, d_tok)
    ex_caches: dict  # kind -> cache
    ex_index: dict  # id(exemplar) -> row in uniq_ex
    selections: list  # per item retrieval selection
    f_cs: list  # per item context feature (validated array)
    cnorms: list  # per item context feature norm
    keys: RowCache  # key matrix shared by the whole batch


def _kind_slices(mapper: MapperParams):
    slices, start = {}, 0
    for kind in KINDS:
        n = mapper.token_counts[kind]
        slices[kind] = slice(start, start + n)
        start += n
    return slices


class _RetrievalCtx:
    """Per-batch caches: the key matrix and each touched entry's store rows.

    Valid for one forward pass only; the pool is not mutated mid-batch. The
    cosine arithmetic matches the public retrieval ops exactly.
    """

    def __init__(self, pool: PromptPool):
        self.pool = pool
        self.keys = RowCache(pool.key_matrix())
        self._stores: dict = {}

    def store_cache(self, entry_idx: int) -> RowCache:
        cache = self._stores.get(entry_idx)
        if cache is None:
            store = self.pool.entries[entry_idx].store
            cache = RowCache(np.stack([e.f_r for e in store]))
            self._stores[entry_idx] = cache
        return cache


def _select(ctx: _RetrievalCtx, inst, config: TrainConfig, ab_rng: SeededRng | None):
    """Retrieval selection plus per-context-entry exemplars for one query.

    Returns (selection, exemplars, context feature, its norm, key cosines).
    """
    pool = ctx.pool
    f_c = np.asarray(inst.f_c, dtype=float)
    cnorm = float(np.linalg.norm(f_c))
    if cnorm == 0.0 or not np.all(np.isfinite(f_c)):
        raise ValueError("query context feature is degenerate")
    sims = ctx.keys.cosines(f_c, cnorm)
    k = min(config.effective_k(), pool.n_t)
    if config.random_prompts:
        if ab_rng is None:
            raise ValueError("random prompt selection requires an rng")
        chosen = ab_rng.choice_without_replacement(pool.n_t, k)
        chosen.sort(key=lambda i: (-sims[i], i))
        selection = [(int(i), float(sims[i])) for i in chosen]
    else:
        order = np.argsort(-sims, kind="stable")  # ties: lower index first
        selection = [(int(i), float(sims[i])) for i in order[:k]]
    exemplars = []
    if not config.naive:
        f_r = None
        for idx, _ in selection[1:]:
            entry = pool.entries[idx]
            if not entry.store:
                exemplars.append(None)
            elif config.random_exemplar:
                if ab_rng is None:
                    raise ValueError("random exemplar selection requires an rng")
                exemplars.append(entry.store[ab_rng.randint(len(entry.store))])
            else:
                if f_r is None:
                    f_r = np.asarray(inst.f_r, dtype=float)
                    rnorm = float(np.linalg.norm(f_r))
                store_sims = ctx.store_cache(idx).cosines(f_r, rnorm)
                exemplars.append(entry.store[int(np.argmax(store_sims))])
    return selection, exemplars, f_c, cnorm, sims


def _forward(items, pool: PromptPool, tr: TrainableSet, vocab: PredicateVocab,
             config: TrainConfig, ab_rng: SeededRng | None,
             ctx: _RetrievalCtx | None = None) -> _ForwardState:
    feats = {kind: np.stack([np.asarray(getattr(it.source, f"f_{kind}"), dtype=float)
                             for it in items]) for kind in KINDS}
    q_out, q_caches = {}, {}
    for kind in KINDS:
        q_out[kind], q_caches[kind] = encode_batch(tr.mapper, feats[kind], kind)
    q_blocks = np.concatenate([q_out[k] for k in KINDS], axis=1)

    if ctx is None:
        ctx = _RetrievalCtx(pool)
    selections, ex_lists, f_cs, cnorms = [], [], [], []
    uniq_ex, ex_index = [], {}
    for it in items:
        selection, exemplars, f_c, cnorm, _ = _select(ctx, it.source, config, ab_rng)
        selections.append(selection)
        ex_lists.append(exemplars)
        f_cs.append(f_c)
        cnorms.append(cnorm)
        for ex in exemplars:
            if ex is not None and id(ex) not in ex_index:
                ex_index[id(ex)] = len(uniq_ex)
                uniq_ex.append(ex)

    ex_blocks, ex_caches = None, {}
    if uniq_ex:
        efeats = {kind: np.stack([np.asarray(getattr(ex, f"f_{kind}"), dtype=float)
                                  for ex in uniq_ex]) for kind in KINDS}
        parts = []
        for kind in KINDS:
            out, ex_caches[kind] = encode_batch(tr.mapper, efeats[kind], kind)
            parts.append(out)
        ex_blocks = np.concatenate(parts, axis=1)

    prompts, probs, weights, bases = [], [], [], []
    for i, it in enumerate(items):
        pairs = []
        for ex in ex_lists[i]:
            pairs.append(None if ex is None else (ex, ex_blocks[ex_index[id(ex)]]))
        order_rng = ab_rng if config.shuffle_order else None
        prompt = assemble_prompt(pool, selections[i], pairs, q_blocks[i], tr.y_mask,
                                 tr.scorer.emb, vocab, order_rng=order_rng)
        w = position_weights(tr.scorer, prompt.n_rows)
        base = w @ prompt.rows
        prompts.append(prompt)
        probs.append(score(tr.scorer, prompt, w=w, base=base))
        weights.append(w)
        bases.append(base)
    return _ForwardState(prompts=prompts, probs=probs, weights=weights, bases=bases,
                         q_blocks=q_blocks, q_caches=q_caches, uniq_ex=uniq_ex,
                         ex_blocks=ex_blocks, ex_caches=ex_caches, ex_index=ex_index,
                         selections=selections, f_cs=f_cs, cnorms=cnorms, keys=ctx.keys)


def batch_loss_and_grads(items, pool: PromptPool, tr: TrainableSet, vocab: PredicateVocab,
                         config: TrainConfig, ab_rng: SeededRng | None = None):
    """Mean total loss over the batch and gradients for every trainable.

    Replayed items contribute only the prediction loss; query items add the
    key-alignment term and, when bound, the auxiliary token-norm term.
    """
    if not items:
        raise ValueError("empty batch")
    state = _forward(items, pool, tr, vocab, config, ab_rng)
    n = len(items)
    inv = 1.0 / n
    scorer_train = tr.scorer.trainable

    grads = {name: np.zeros_like(arr) for name, arr in tr.param_items()}
    mapper_grads = init_grads(tr.mapper)
    d_q_blocks = np.zeros_like(state.q_blocks)
    d_ex_blocks = None if state.ex_blocks is None else np.zeros_like(state.ex_blocks)

    l1_sum = l2_sum = l3_sum = 0.0
    for i, it in enumerate(items):
        prompt, p = state.prompts[i], state.probs[i]
        w, base = state.weights[i], state.bases[i]
        target = int(it.source.predicate)
        toks = vocab.tokens[target]
        l3 = loss_predicate_ce(p, target, vocab)
        l3_sum += l3

        d_rows = np.zeros_like(prompt.rows)
        d_base = np.zeros(tr.scorer.d_tok)
        for j, t in enumerate(toks):
            d_logits = p[j].copy()
            d_logits[t] -= 1.0
            d_logits *= inv
            pooled = base + prompt.rows[prompt.mask_positions[j]]
            if scorer_train:
                grads["scorer.readout"][j] += np.outer(d_logits, pooled)
            d_pooled = tr.scorer.readout[j].T @ d_logits
            d_base += d_pooled
            d_rows[prompt.mask_positions[j]] += d_pooled
        d_rows += w[:, None] * d_base[None, :]
        if scorer_train:
            g = prompt.rows @ d_base
            grads["scorer.pos_weight"][: prompt.n_rows] += w * (g - float(w @ g))

        for seg in prompt.segments:
            grads[f"pool.v.{seg.entry_index}"] += d_rows[seg.prompt_start:
                                                         seg.prompt_start + seg.n_prompt]
            if seg.is_query:
                d_q_blocks[i] += d_rows[seg.exemplar_start:
                                        seg.exemplar_start + seg.n_exemplar]
            elif seg.exemplar is not None:
                u = state.ex_index[id(seg.exemplar)]
                d_ex_blocks[u] += d_rows[seg.exemplar_start:
                                         seg.exemplar_start + seg.n_exemplar]
                if scorer_train:
                    for pos, tok in enumerate(seg.label_tokens):
                        grads["scorer.emb"][tok] += d_rows[seg.label_start + pos]
        grads["y_mask"] += d_rows[prompt.mask_positions]

        if not it.replay:
            u = state.f_cs[i] / state.cnorms[i]
            coeff = config.lam * inv
            for idx, sim in state.selections[i]:
                l2_sum += 1.0 - sim
                knorm = state.keys.norms[idx]
                k = pool.entries[idx].k
                grads[f"pool.k.{idx}"] += coeff * (-(u / knorm) + sim * k / (knorm * knorm))
            if config.l1_mode == "token_norm":
                val, d_block = token_norm_penalty(state.q_blocks[i])
                l1_sum += val
                d_q_blocks[i] += config.alpha * inv * d_block

    slices = _kind_slices(tr.mapper)
    for kind in KINDS:
        encode_batch_backward(tr.mapper, state.q_caches[kind],
                              d_q_blocks[:, slices[kind], :], mapper_grads)
        if state.uniq_ex:
            encode_batch_backward(tr.mapper, state.ex_caches[kind],
                                  d_ex_blocks[:, slices[kind], :], mapper_grads)
    for name, g in mapper_grads.items():
        grads[f"mapper.{name}"] += g

    loss = loss_total(l1_sum * inv, l2_sum * inv, l3_sum * inv, config)
    if not np.isfinite(loss):
        raise RuntimeError(
            f"non-finite batch loss: l1={l1_sum * inv} l2={l2_sum * inv} l3={l3_sum * inv}"
        )
    parts = {"l1": l1_sum * inv, "l2": l2_sum * inv, "l3": l3_sum * inv}
    return loss, grads, parts


def grad_step(tr: TrainableSet, batch, pool: PromptPool, vocab: PredicateVocab,
              config: TrainConfig, opt: AdamW, ab_rng: SeededRng | None = None) -> float:
    """One optimizer step over a batch of (source, replay) items."""
    loss, grads, _ = batch_loss_and_grads(batch, pool, tr, vocab, config, ab_rng)
    opt.step(tr, grads, config)
    return loss


# -- stage loop ------------------------------------------------------------------


def _replay_candidates(pool: PromptPool):
    flat = []
    for i, entry in enumerate(pool.entries):
        flat.extend(entry.store)
    return flat


def stage_quota(pool: PromptPool, n_stages: int) -> int:
    return (pool.n_t * pool.n_e) // n_stages


def train_stage(stage, pool: PromptPool, tr: TrainableSet, vocab: PredicateVocab,
                config: TrainConfig, opt: AdamW, rng: SeededRng,
                quota: int = 0) -> dict:
    """Train on one stage's train split with rehearsal and pool admissions.

    Only this stage's data and the pool are visible here; earlier stages reach
    the loop solely through stored exemplars. ``quota`` admissions are spread
    evenly over the stage's full visit stream (epochs x instances); the
    pool stays untouched when the quota is 0 or the naive path is active.
    """
    config.validate()
    train = list(stage.train)
    if not train:
        raise ValueError("stage train split is empty")
    ab_rng = rng.derive("ablation")
    replay_rng = rng.derive("replay")
    admit_rng = rng.derive("admit")
    order_rng = rng.derive("order")

    total_visits = config.epochs * len(train)
    if config.naive:
        quota = 0
    n_admit = min(quota, total_visits)
    admit_at = set()
    if n_admit > 0:
        admit_at = {(i * total_visits) // n_admit for i in range(n_admit)}

    rho = config.effective_rho()
    n_re_full = int(round(config.batch_size * rho))
    chunk = max(1, config.batch_size - n_re_full)

    epoch_losses = []
    visit = 0
    admitted = 0
    for _ in range(config.epochs):
        order = order_rng.permutation(len(train))
        step_losses = []
        for start in range(0, len(order), chunk):
            idxs = order[start : start + chunk]
            batch = []
            for idx in idxs:
                inst = train[idx]
                if visit in admit_at:
                    if admit_exemplar(pool, inst, admit_rng) is not None:
                        admitted += 1
                visit += 1
                batch.append(_Item(source=inst, replay=False))
            if rho > 0:
                stored = _replay_candidates(pool)
                if stored:
                    want = int(round(len(idxs) * rho / (1.0 - rho)))
                    for _ in range(want):
                        batch.append(_Item(source=stored[replay_rng.randint(len(stored))],
                                           replay=True))
            step_losses.append(grad_step(tr, batch, pool, vocab, config, opt, ab_rng))
        epoch_losses.append(float(np.mean(step_losses)))
    steps_per_epoch = (len(train) + chunk - 1) // chunk
    return {"epoch_losses": epoch_losses, "admitted": admitted,
            "steps": config.epochs * steps_per_epoch}


# -- inference --------------------------------------------------------------------


def predict_ranked(instances, pool: PromptPool, tr: TrainableSet, vocab: PredicateVocab,
                   config: TrainConfig, candidates=None, ab_rng: SeededRng | None = None,
                   batch_size: int = 256) -> list:
    """Ranked (predicate, score) lists for a sequence of instances.

    Forward-only; never admits or mutates. Ablation randomness (random
    prompts/exemplars/order) still applies when configured, via ``ab_rng``.
    """
    needs_rng = config.random_prompts or config.random_exemplar or config.shuffle_order
    if needs_rng and ab_rng is None:
        raise ValueError("configured ablations need an rng at inference")
    out = []
    ctx = _RetrievalCtx(pool)  # pool is frozen here, safe to reuse across batches
    for start in range(0, len(instances), batch_size):
        group = [_Item(source=inst, replay=False)
                 for inst in instances[start : start + batch_size]]
        state = _forward(group, pool, tr, vocab, config, ab_rng, ctx=ctx)
        for p in state.probs:
            out.append(rank_predicates(p, vocab, candidates=candidates))
    return out


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, tr: TrainableSet, config: TrainConfig, pool_path: str) -> None:
    """LSGG-CKPT 1: config echo, pool file reference, and all non-pool arrays."""
    with open(path, "w") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n")
        fh.write(f"pool {pool_path}\n")
        for key in sorted(vars(config)):
            fh.write(f"config {key}={getattr(config, key)}\n")
        fh.write(f"scorer_trainable {int(tr.scorer.trainable)}\n")
        fh.write(f"mapper_meta {tr.mapper.d_tok} {tr.mapper.depth}\n")
        for kind in KINDS:
            fh.write(f"mapper_kind {kind} {tr.mapper.feat_dims[kind]} "
                     f"{tr.mapper.token_counts[kind]} {tr.mapper.proj_counts[kind]}\n")
        for name, arr in tr.checkpoint_items():
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"array {name} {shape} {pack_floats(arr)}\n")


class CheckpointFormatError(ValueError):
    pass


def load_checkpoint(path):
    """Returns (arrays by name, config echo dict, pool path, metadata dict)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].split() != [CKPT_MAGIC, str(CKPT_VERSION)]:
        raise CheckpointFormatError(f"bad checkpoint header: {lines[0] if lines else ''!r}")
    arrays, config_echo, meta = {}, {}, {"kinds": {}}
    pool_path = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        if tag == "pool":
            pool_path = rest
        elif tag == "config":
            key, _, val = rest.partition("=")
            config_echo[key] = val
        elif tag == "scorer_trainable":
            meta["scorer_trainable"] = bool(int(rest))
        elif tag == "mapper_meta":
            d_tok, depth = rest.split()
            meta["d_tok"], meta["depth"] = int(d_tok), int(depth)
        elif tag == "mapper_kind":
            kind, d_in, n_tok, l_proj = rest.split()
            meta["kinds"][kind] = (int(d_in), int(n_tok), int(l_proj))
        elif tag == "array":
            name, shape_s, payload = rest.split(" ", 2)
            shape = tuple(int(s) for s in shape_s.split(","))
            arrays[name] = unpack_floats(payload, shape)
        else:
            raise CheckpointFormatError(f"line {lineno}: unknown record {tag!r}")
    if pool_path is None:
        raise CheckpointFormatError("checkpoint is missing its pool reference")
    return arrays, config_echo, pool_path, meta
