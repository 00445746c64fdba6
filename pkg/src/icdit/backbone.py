"""Denoising transformer with pairwise multi-modal attention.

Each block runs three joint attentions between the noisy-image stream and the
text, layout, and embedding condition streams, in that order, followed by
per-stream MLPs. Timestep conditioning modulates the image stream through
zero-initialized adaptive layer-norm gates, so every block is the identity on
the image stream at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoders import (SurrogateEncoders, TokenStream, patchify_raw,
                       sinusoid_positions, unpatchify)
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Rng, Tensor

CONDITION_KINDS = ("text", "layout", "embedding")
_SUBLAYERS = CONDITION_KINDS + ("mlp",)
_STREAMS = ("z", "text", "layout", "embedding")


def _weight(rng, rows, cols, scale=None):
    scale = scale if scale is not None else 1.0 / math.sqrt(rows)
    return Tensor(rng.normal((rows, cols)) * scale, requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(n):
    return Tensor(np.ones(n), requires_grad=True)


@dataclass
class AttentionParams:
    """Per-stream Q/K/V and output projections for one modality pair."""

    wq_a: Tensor
    wk_a: Tensor
    wv_a: Tensor
    wq_b: Tensor
    wk_b: Tensor
    wv_b: Tensor
    wo_a: Tensor
    wo_b: Tensor
    n_heads: int

    @classmethod
    def init(cls, rng, d, n_heads):
        if d % n_heads:
            raise ConfigError(f"d_model {d} not divisible by {n_heads} heads")
        mats = {k: _weight(rng.split(k), d, d)
                for k in ("wq_a", "wk_a", "wv_a", "wq_b", "wk_b", "wv_b",
                          "wo_a", "wo_b")}
        return cls(n_heads=n_heads, **mats)

    def named(self, prefix):
        for k in ("wq_a", "wk_a", "wv_a", "wq_b", "wk_b", "wv_b",
                  "wo_a", "wo_b"):
            yield f"{prefix}.{k}", getattr(self, k)


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d):
        return cls(w1=_weight(rng.split("w1"), d, 4 * d), b1=_zeros(4 * d),
                   w2=_weight(rng.split("w2"), 4 * d, d), b2=_zeros(d))

    def named(self, prefix):
        for k in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{k}", getattr(self, k)

    def forward(self, x):
        h = nc.gelu(nc.add(nc.matmul(x, self.w1), self.b1))
        return nc.add(nc.matmul(h, self.w2), self.b2)


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d):
        return cls(gain=_ones(d), bias=_zeros(d))

    def named(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias

    def forward(self, x):
        return nc.layer_norm(x, self.gain, self.bias, eps=1e-6)


@dataclass
class BlockParams:
    """One transformer block: three modality-pair attentions plus MLPs."""

    attn: dict  # kind -> AttentionParams
    mlp: dict  # stream -> MlpParams
    norm_z: dict  # sublayer -> NormParams (image stream, pre-norm)
    norm_c: dict  # kind -> NormParams for each condition's attention input
    norm_c_mlp: dict  # kind -> NormParams before each condition's MLP
    ada: dict  # sublayer -> (w, b) mapping t_emb to (scale, shift, gate)

    @classmethod
    def init(cls, rng, d, n_heads):
        attn = {k: AttentionParams.init(rng.split("attn", k), d, n_heads)
                for k in CONDITION_KINDS}
        mlp = {s: MlpParams.init(rng.split("mlp", s), d) for s in _STREAMS}
        norm_z = {s: NormParams.init(d) for s in _SUBLAYERS}
        norm_c = {k: NormParams.init(d) for k in CONDITION_KINDS}
        norm_c_mlp = {k: NormParams.init(d) for k in CONDITION_KINDS}
        # zero-init: scale/shift/gate all start at zero => identity block
        ada = {s: (_zeros(d, 3 * d), _zeros(3 * d)) for s in _SUBLAYERS}
        return cls(attn, mlp, norm_z, norm_c, norm_c_mlp, ada)

    def named(self, prefix):
        for k, a in self.attn.items():
            yield from a.named(f"{prefix}.attn.{k}")
        for s, m in self.mlp.items():
            yield from m.named(f"{prefix}.mlp.{s}")
        for s, n in self.norm_z.items():
            yield from n.named(f"{prefix}.norm_z.{s}")
        for k, n in self.norm_c.items():
            yield from n.named(f"{prefix}.norm_c.{k}")
        for k, n in self.norm_c_mlp.items():
            yield from n.named(f"{prefix}.norm_c_mlp.{k}")
        for s, (w, b) in self.ada.items():
            yield f"{prefix}.ada.{s}.w", w
            yield f"{prefix}.ada.{s}.b", b


@dataclass
class ModelParams:
    """All trainable parameters of the denoiser (frozen encoders excluded)."""

    depth: int
    d_model: int
    n_heads: int
    patch_size: int
    latent_shape: tuple  # (c, h, w)
    blocks: list
    t_mlp: MlpParams
    patch_w: Tensor  # trainable embedding of noisy-latent patches
    final_norm: NormParams
    head_w: Tensor
    head_b: Tensor
    null_tokens: dict  # kind -> Tensor[1, d]

    @classmethod
    def init(cls, seed, depth=2, d_model=32, n_heads=4, patch_size=2,
             latent_shape=(4, 8, 8)):
        rng = Rng(seed).split("model")
        c = latent_shape[0]
        out_w = c * patch_size ** 2
        d = d_model
        blocks = [BlockParams.init(rng.split("block", i), d, n_heads)
                  for i in range(depth)]
        t_mlp = MlpParams.init(rng.split("t_mlp"), d)
        patch_w = _weight(rng.split("patch"), out_w, d)
        head_w = _zeros(d, out_w)  # zero-init head: epsilon-hat starts at 0
        head_b = _zeros(out_w)
        null = {k: _weight(rng.split("null", k), 1, d, scale=0.02)
                for k in CONDITION_KINDS}
        return cls(depth=depth, d_model=d, n_heads=n_heads,
                   patch_size=patch_size, latent_shape=tuple(latent_shape),
                   blocks=blocks, t_mlp=t_mlp, patch_w=patch_w,
                   final_norm=NormParams.init(d), head_w=head_w,
                   head_b=head_b, null_tokens=null)

    def named_trainable(self):
        out = []
        for i, b in enumerate(self.blocks):
            out.extend(b.named(f"blocks.{i}"))
        out.extend(self.t_mlp.named("t_mlp"))
        out.append(("patch_embed.w", self.patch_w))
        out.extend(self.final_norm.named("final_norm"))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        for k, t in self.null_tokens.items():
            out.append((f"null.{k}", t))
        return out

    def zero_grad(self):
        for _, t in self.named_trainable():
            t.zero_grad()


def timestep_embed(t, dim, t_mlp, n_steps):
    """Sinusoidal frequency embedding of t pushed through a small MLP."""
    if not 0 <= t < n_steps:
        raise ContractError(f"timestep {t} outside [0, {n_steps})")
    pre = timestep_frequencies(t, dim)
    return t_mlp.forward(Tensor(pre[None, :]))  # [1, dim]


def timestep_frequencies(t, dim):
    """Raw sin/cos embedding: sines in the first half, cosines second."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def mm_attention(a, b, params: AttentionParams):
    """Joint multi-head attention over the token-concatenation of two streams.

    Returns updated token tensors (a', b') with token counts preserved.
    """
    at = a.tokens if isinstance(a, TokenStream) else a
    bt = b.tokens if isinstance(b, TokenStream) else b
    if at.shape[1] != bt.shape[1]:
        raise ShapeError(
            f"mm_attention: widths differ {at.shape} vs {bt.shape}")
    d = at.shape[1]
    if params.wq_a.shape != (d, d):
        raise ShapeError(
            f"mm_attention: params width {params.wq_a.shape} != stream {d}")
    n_a, n_b = at.shape[0], bt.shape[0]
    h = params.n_heads
    dh = d // h
    q = nc.concat_tokens([nc.matmul(at, params.wq_a),
                          nc.matmul(bt, params.wq_b)])
    k = nc.concat_tokens([nc.matmul(at, params.wk_a),
                          nc.matmul(bt, params.wk_b)])
    v = nc.concat_tokens([nc.matmul(at, params.wv_a),
                          nc.matmul(bt, params.wv_b)])
    scale = 1.0 / math.sqrt(dh)
    heads = []
    qs = nc.split(q, [dh] * h, axis=1)
    ks = nc.split(k, [dh] * h, axis=1)
    vs = nc.split(v, [dh] * h, axis=1)
    for qh, kh, vh in zip(qs, ks, vs):
        logits = nc.mul(nc.matmul(qh, nc.transpose(kh)), scale)
        attn = nc.softmax(logits)
        heads.append(nc.matmul(attn, vh))
    joint = nc.concat(heads, axis=1)
    oa, ob = nc.split_tokens(joint, [n_a, n_b])
    return nc.matmul(oa, params.wo_a), nc.matmul(ob, params.wo_b)


def _modulation(t_emb, ada_w, ada_b, d):
    vec = nc.add(nc.matmul(t_emb, ada_w), ada_b)  # [1, 3d]
    scale, shift, gate = nc.split(vec, [d, d, d], axis=1)
    return (nc.reshape(scale, (d,)), nc.reshape(shift, (d,)),
            nc.reshape(gate, (d,)))


def block_forward(z, p, l, e, t_emb, bp: BlockParams, n_heads):
    """One block over (image, text, layout, embedding) token tensors."""
    d = z.shape[1]
    conds = {"text": p, "layout": l, "embedding": e}
    for kind in CONDITION_KINDS:
        scale, shift, gate = _modulation(t_emb, *bp.ada[kind], d)
        zn = bp.norm_z[kind].forward(z)
        zn = nc.add(nc.mul(zn, nc.add(scale, 1.0)), shift)
        cn = bp.norm_c[kind].forward(conds[kind])
        dz, dc = mm_attention(zn, cn, bp.attn[kind])
        z = nc.add(z, nc.mul(dz, gate))
        conds[kind] = nc.add(conds[kind], dc)
    scale, shift, gate = _modulation(t_emb, *bp.ada["mlp"], d)
    zn = bp.norm_z["mlp"].forward(z)
    zn = nc.add(nc.mul(zn, nc.add(scale, 1.0)), shift)
    z = nc.add(z, nc.mul(bp.mlp["z"].forward(zn), gate))
    for kind in CONDITION_KINDS:
        c = conds[kind]
        conds[kind] = nc.add(
            c, bp.mlp[kind].forward(bp.norm_c_mlp[kind].forward(c)))
    return z, conds["text"], conds["layout"], conds["embedding"]


def positions_2d(grid, d):
    """Fixed 2-D sin/cos position signal for a gh x gw token grid."""
    gh, gw = grid
    half = d // 2
    py = sinusoid_positions(gh, half)
    px = sinusoid_positions(gw, d - half)
    out = np.zeros((gh * gw, d))
    out[:, :half] = np.repeat(py, gw, axis=0)
    out[:, half:] = np.tile(px, (gh, 1))
    return out


class Denoiser:
    """Epsilon-prediction model tying the encoders to the transformer."""

    def __init__(self, params: ModelParams, encoders: SurrogateEncoders,
                 n_steps):
        if params.d_model != encoders.params.d_model:
            raise ConfigError("model and encoder widths differ")
        if params.patch_size != encoders.params.patch_size:
            raise ConfigError("model and encoder patch sizes differ")
        self.params = params
        self.encoders = encoders
        self.n_steps = n_steps
        c, h, w = params.latent_shape
        self._grid = (h // params.patch_size, w // params.patch_size)
        self._pos = positions_2d(self._grid, params.d_model)

    def predict_epsilon(self, z_t, t, p, l, e):
        """Predict the injected noise for one latent sample."""
        mp = self.params
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != mp.latent_shape:
            raise ConfigError(
                f"latent {z_t.shape} does not match configured "
                f"{mp.latent_shape}")
        patches, _ = patchify_raw(z_t, mp.patch_size)
        z = nc.add(nc.matmul(Tensor(patches), mp.patch_w), Tensor(self._pos))
        pt = p.tokens if isinstance(p, TokenStream) else p
        et = e.tokens if isinstance(e, TokenStream) else e
        lt = l.tokens if isinstance(l, TokenStream) else l
        if isinstance(l, TokenStream) and l.grid == self._grid:
            lt = nc.add(lt, Tensor(self._pos))
        t_emb = timestep_embed(t, mp.d_model, mp.t_mlp, self.n_steps)
        for bp in mp.blocks:
            z, pt, lt, et = block_forward(z, pt, lt, et, t_emb, bp,
                                          mp.n_heads)
        z = mp.final_norm.forward(z)
        tokens = nc.add(nc.matmul(z, mp.head_w), mp.head_b)
        c = mp.latent_shape[0]
        return unpatchify(tokens, self._grid, c, mp.patch_size)

    def drop_condition(self, kind, streams):
        """Replace one condition stream with the learned null token."""
        if kind not in CONDITION_KINDS:
            raise ContractError(f"unknown condition kind {kind!r}")
        modality = {"text": "text", "layout": "layout",
                    "embedding": "embedding"}[kind]
        out = dict(streams)
        out[kind] = TokenStream(modality, self.params.null_tokens[kind])
        return out
