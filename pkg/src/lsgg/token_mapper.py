"""Feature-to-token mapping: each feature vector becomes a small block of
token embeddings via a per-kind affine projector, learnable soft-position
vectors, and a shared depth-L token-mixing encoder.

Layer form (applied to the stacked rows X, row mean x_bar):

    X' = tanh(X W + 1 (x_bar U) + b)

so every row sees every other row through the mean term. The block read out
is the rows at the position-vector slots (the tail). At depth 0 the encoder
is skipped and the block is reshape(W_phi f + b_phi) + p, which requires the
projected row count to equal the block row count.

All gradients are computed analytically in closed form; ``encode_batch`` /
``encode_batch_backward`` are the batched primitives the trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng

KINDS = ("c", "r", "s", "o")
KIND_NAMES = {"c": "context", "r": "relation", "s": "subject", "o": "object"}
DEFAULT_TOKEN_COUNTS = {"c": 4, "r": 4, "s": 2, "o": 2}


@dataclass
class TokenBlock:
    tokens: np.ndarray  # (rows, d_tok)
    kind: str


@dataclass
class MapperParams:
    d_tok: int
    depth: int
    feat_dims: dict  # kind -> d_*
    token_counts: dict  # kind -> n_* (rows read out)
    proj_counts: dict  # kind -> l_* (rows produced by the projector)
    proj_w: dict  # kind -> (l_*·d_tok, d_*)
    proj_b: dict  # kind -> (l_*·d_tok,)
    pos: dict  # kind -> (n_*, d_tok)
    mix_w: list  # depth × (d_tok, d_tok)
    mix_u: list  # depth × (d_tok, d_tok)
    mix_b: list  # depth × (d_tok,)

    def param_items(self):
        """Stable (name, array) iteration for optimizers and checkpoints."""
        for kind in KINDS:
            yield f"proj_w.{kind}", self.proj_w[kind]
            yield f"proj_b.{kind}", self.proj_b[kind]
            yield f"pos.{kind}", self.pos[kind]
        for layer in range(self.depth):
            yield f"mix_w.{layer}", self.mix_w[layer]
            yield f"mix_u.{layer}", self.mix_u[layer]
            yield f"mix_b.{layer}", self.mix_b[layer]

    def exemplar_rows(self) -> int:
        return sum(self.token_counts[k] for k in KINDS)


def init_mapper(feat_dims: dict, d_tok: int = 64, token_counts=None, depth: int = 1,
                proj_counts=None, rng: SeededRng | None = None) -> MapperParams:
    if rng is None:
        raise ValueError("init_mapper requires an rng")
    counts = dict(DEFAULT_TOKEN_COUNTS if token_counts is None else token_counts)
    if sorted(feat_dims) != sorted(KINDS) or sorted(counts) != sorted(KINDS):
        raise ValueError(f"feature dims and token counts must cover kinds {KINDS}")
    lcounts = dict(counts if proj_counts is None else proj_counts)
    if depth < 0 or d_tok < 1 or min(counts.values()) < 1 or min(lcounts.values()) < 1:
        raise ValueError("bad mapper sizes")
    if depth == 0 and any(lcounts[k] != counts[k] for k in KINDS):
        raise ValueError("depth 0 requires projected row count == block row count")
    proj_w, proj_b, pos = {}, {}, {}
    for kind in KINDS:
        d_in = feat_dims[kind]
        if d_in < 1:
            raise ValueError(f"bad feature dimension for kind {kind!r}")
        proj_w[kind] = rng.normal((lcounts[kind] * d_tok, d_in)) / np.sqrt(d_in)
        proj_b[kind] = np.zeros(lcounts[kind] * d_tok)
        pos[kind] = rng.normal((counts[kind], d_tok)) / np.sqrt(d_tok)
    mix_w = [rng.normal((d_tok, d_tok)) / np.sqrt(d_tok) for _ in range(depth)]
    mix_u = [rng.normal((d_tok, d_tok)) / np.sqrt(d_tok) for _ in range(depth)]
    mix_b = [np.zeros(d_tok) for _ in range(depth)]
    return MapperParams(
        d_tok=d_tok, depth=depth, feat_dims=dict(feat_dims), token_counts=counts,
        proj_counts=lcounts, proj_w=proj_w, proj_b=proj_b, pos=pos,
        mix_w=mix_w, mix_u=mix_u, mix_b=mix_b,
    )


def init_grads(params: MapperParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.param_items()}


@dataclass
class MapperKindCache:
    kind: str
    feats: np.ndarray  # (B, d_in)
    states: list  # X_0..X_depth, each (B, rows, d_tok); post-activation


def encode_batch(params: MapperParams, feats: np.ndarray, kind: str):
    """Map a batch of same-kind features to token blocks.

    Returns (out, cache): out is (B, n_kind, d_tok); the cache feeds
    ``encode_batch_backward``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    if feats.shape[1] != params.feat_dims[kind]:
        raise ValueError(
            f"kind {kind!r} expects dimension {params.feat_dims[kind]}, got {feats.shape[1]}"
        )
    b = feats.shape[0]
    n, l = params.token_counts[kind], params.proj_counts[kind]
    proj = feats @ params.proj_w[kind].T + params.proj_b[kind]
    proj = proj.reshape(b, l, params.d_tok)
    if params.depth == 0:
        out = proj + params.pos[kind]
        cache = MapperKindCache(kind=kind, feats=feats, states=[out])
        return out, cache
    x = np.concatenate([proj, np.broadcast_to(params.pos[kind], (b, n, params.d_tok))], axis=1)
    states = [x]
    for layer in range(params.depth):
        mean = x.mean(axis=1)  # (B, d_tok)
        z = x @ params.mix_w[layer] + (mean @ params.mix_u[layer])[:, None, :] + params.mix_b[layer]
        x = np.tanh(z)
        states.append(x)
    cache = MapperKindCache(kind=kind, feats=feats, states=states)
    return x[:, l:, :], cache


def encode_batch_backward(params: MapperParams, cache: MapperKindCache,
                          d_out: np.ndarray, grads: dict) -> None:
    """Accumulate parameter gradients for one batched encode into ``grads``."""
    kind = cache.kind
    b = cache.feats.shape[0]
    n, l = params.token_counts[kind], params.proj_counts[kind]
    if params.depth == 0:
        d_proj = d_out
        grads[f"pos.{kind}"] += d_out.sum(axis=0)
    else:
        rows = l + n
        d_x = np.zeros((b, rows, params.d_tok))
        d_x[:, l:, :] = d_out
        for layer in range(params.depth - 1, -1, -1):
            x_out = cache.states[layer + 1]
            x_in = cache.states[layer]
            d_z = d_x * (1.0 - x_out * x_out)
            dz_rowsum = d_z.sum(axis=1)  # (B, d_tok)
            mean = x_in.mean(axis=1)
            grads[f"mix_w.{layer}"] += np.tensordot(x_in, d_z, axes=([0, 1], [0, 1]))
            grads[f"mix_u.{layer}"] += mean.T @ dz_rowsum
            grads[f"mix_b.{layer}"] += dz_rowsum.sum(axis=0)
            d_x = d_z @ params.mix_w[layer].T
            d_x += (dz_rowsum @ params.mix_u[layer].T)[:, None, :] / rows
        d_proj = d_x[:, :l, :]
        grads[f"pos.{kind}"] += d_x[:, l:, :].sum(axis=0)
    d_flat = d_proj.reshape(b, l * params.d_tok)
    grads[f"proj_w.{kind}"] += d_flat.T @ cache.feats
    grads[f"proj_b.{kind}"] += d_flat.sum(axis=0)


def encode_feature(params: MapperParams, f, kind: str) -> TokenBlock:
    """Single-feature convenience wrapper around ``encode_batch``."""
    out, _ = encode_batch(params, np.asarray(f, dtype=float)[None, :], kind)
    return TokenBlock(tokens=out[0], kind=KIND_NAMES[kind])


def encode_exemplar(params: MapperParams, e) -> TokenBlock:
    """Tokens for a full instance: context, relation, subject, object rows
    concatenated in that fixed order."""
    for name in ("f_c", "f_r", "f_s", "f_o"):
        if getattr(e, name, None) is None:
            raise ValueError(f"exemplar is missing feature {name}")
    blocks = [
        encode_feature(params, e.f_c, "c").tokens,
        encode_feature(params, e.f_r, "r").tokens,
        encode_feature(params, e.f_s, "s").tokens,
        encode_feature(params, e.f_o, "o").tokens,
    ]
    return TokenBlock(tokens=np.concatenate(blocks, axis=0), kind="exemplar")
