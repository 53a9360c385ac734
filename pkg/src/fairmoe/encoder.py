"""Toy CLIP-shaped dual encoder with MoE layers in the last block and on the feature.

Image branch: patchify -> linear patch projection -> prepend class embedding
-> add positions -> pre-norm attention blocks -> feature MoE on row 0.
Text branch mirrors it with a token table and a key-padding mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nncore as nn
from .moe import EmbeddingMoE, FeatureMoE, FeatureProjection, FeedForward
from .nncore import ContractError, DimensionError, Module, Tensor
from .routing import GateWeights

NEG_INF = -1e30


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    dim: int = 32
    heads: int = 4
    blocks: int = 2
    d_feat: int = 16
    vocab_size: int = 64
    seq_len: int = 16
    m1: int = 4
    m2: int = 4
    k1: int = 2
    k2: int = 2
    capacity: float = 1.0
    hidden_mult: int = 4
    activation: str = "gelu"
    use_em: bool = True
    use_fm: bool = True
    use_image_moe: bool = True
    use_text_moe: bool = True
    init_logit_scale: float = math.log(1 / 0.07)
    max_logit_scale: float = math.log(100.0)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ContractError("dim must be divisible by heads")
        if not (1 <= self.k1 <= self.m1 and 1 <= self.k2 <= self.m2):
            raise ContractError("need 1 <= k <= M for both MoE layers")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.wq = nn.Linear(rng, dim, dim)
        self.wk = nn.Linear(rng, dim, dim)
        self.wv = nn.Linear(rng, dim, dim)
        self.wo = nn.Linear(rng, dim, dim)
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        *lead, T, D = x.shape
        h = self.heads
        x = x.reshape(tuple(lead) + (T, h, D // h))
        return nn.swapaxes(x, -2, -3)  # [..., H, T, dh]

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        *lead, T, D = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scores = nn.bmm(q, nn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(D // self.heads))
        if key_mask is not None:
            # key_mask [..., T] -> [..., 1, 1, T]
            m = np.asarray(key_mask, dtype=bool)
            m = m.reshape(m.shape[:-1] + (1, 1, T))
            scores = nn.where(np.broadcast_to(m, scores.shape), scores, NEG_INF)
        attn = nn.softmax(scores, axis=-1)
        out = nn.swapaxes(nn.bmm(attn, v), -2, -3).reshape(tuple(lead) + (T, D))
        return self.wo(out)


class AttentionBlock(Module):
    """Pre-norm block; the feed-forward slot holds either a dense MLP or an embedding MoE."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp: Module):
        self.ln1_g = nn.parameter(np.ones(dim))
        self.ln1_b = nn.init_zeros((dim,))
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2_g = nn.parameter(np.ones(dim))
        self.ln2_b = nn.init_zeros((dim,))
        self.mlp = mlp

    @property
    def is_moe(self) -> bool:
        return isinstance(self.mlp, EmbeddingMoE)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, GateWeights | None]:
        x = x + self.attn(nn.layer_norm(x, self.ln1_g, self.ln1_b), key_mask)
        h = nn.layer_norm(x, self.ln2_g, self.ln2_b)
        if self.is_moe:
            y, gates = self.mlp(h, token_mask=key_mask)
            return x + y, gates
        return x + self.mlp(h), None


def _build_blocks(rng, cfg: ModelConfig, num_tokens: int, moe_on: bool) -> list[AttentionBlock]:
    hidden = cfg.hidden_mult * cfg.dim
    blocks = []
    for i in range(cfg.blocks):
        if moe_on and cfg.use_em and i == cfg.blocks - 1:
            mlp = EmbeddingMoE(rng, cfg.dim, cfg.m1, cfg.k1, cfg.capacity, num_tokens, hidden, activation=cfg.activation)
        else:
            mlp = FeedForward(rng, cfg.dim, hidden, cfg.activation)
        blocks.append(AttentionBlock(rng, cfg.dim, cfg.heads, mlp))
    return blocks


def _build_head(rng, cfg: ModelConfig, moe_on: bool) -> Module:
    if moe_on and cfg.use_fm:
        return FeatureMoE(rng, cfg.dim, cfg.d_feat, cfg.m2, cfg.k2, cfg.hidden_mult * cfg.dim, cfg.activation)
    return FeatureProjection(rng, cfg.dim, cfg.d_feat)


@dataclass
class Encoded:
    """Encoder output: feature vectors plus the gate records of each MoE layer (None when absent)."""

    feature: Tensor
    embed_gates: GateWeights | None
    feature_gates: GateWeights | None
    token_mask: np.ndarray | None = None

    @property
    def gate_records(self) -> list[GateWeights]:
        return [g for g in (self.embed_gates, self.feature_gates) if g is not None]


class _Tower(Module):
    def _run(self, x: Tensor, key_mask=None) -> Encoded:
        embed_gates = None
        for block in self.blocks:
            x, gates = block(x, key_mask)
            if gates is not None:
                embed_gates = gates
        feat, fgates = self.head(x)
        return Encoded(feat, embed_gates, fgates, key_mask)


class ImageEncoder(_Tower):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        moe_on = cfg.use_image_moe
        n_tok = cfg.num_patches + 1
        self.patch_proj = nn.init_weight(rng, (cfg.patch_size**2, cfg.dim))
        self.class_emb = nn.init_weight(rng, (cfg.dim,))
        self.pos_emb = nn.init_weight(rng, (n_tok, cfg.dim))
        self.blocks = _build_blocks(rng, cfg, n_tok, moe_on)
        self.head = _build_head(rng, cfg, moe_on)
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """``[..., S, S] -> [..., N, p*p]`` in row-major patch order."""
        S, p = self.image_size, self.patch_size
        images = np.asarray(images, dtype=nn.DTYPE)
        if images.shape[-2:] != (S, S):
            raise DimensionError(f"expected images of shape [..., {S}, {S}], got {images.shape}")
        lead = images.shape[:-2]
        g = S // p
        x = images.reshape(lead + (g, p, g, p))
        nd = len(lead)
        x = x.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3))
        return x.reshape(lead + (g * g, p * p))

    def __call__(self, images) -> Encoded:
        patches = Tensor(self.patchify(images.data if isinstance(images, Tensor) else images))
        x = nn.bmm(patches, self.patch_proj)  # [..., N, D]
        lead = x.shape[:-2]
        cls = self.class_emb.reshape((1,) * len(lead) + (1, -1)) + np.zeros(lead + (1, x.shape[-1]))
        x = nn.concat([cls, x], axis=-2) + self.pos_emb
        return self._run(x)


class TextEncoder(_Tower):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        moe_on = cfg.use_text_moe
        self.token_emb = nn.init_weight(rng, (cfg.vocab_size, cfg.dim))
        self.pos_emb = nn.init_weight(rng, (cfg.seq_len, cfg.dim))
        self.blocks = _build_blocks(rng, cfg, cfg.seq_len, moe_on)
        self.head = _build_head(rng, cfg, moe_on)
        self.vocab_size = cfg.vocab_size
        self.seq_len = cfg.seq_len

    def pad(self, tokens, lengths=None) -> tuple[np.ndarray, np.ndarray]:
        """Right-pad to ``seq_len`` with token 0; returns ``(tokens, key_mask)``.

        ``tokens`` is one sequence or a list of sequences.  ``lengths``
        overrides the valid prefix length when sequences are pre-padded.
        """
        single = len(tokens) == 0 or np.ndim(tokens[0]) == 0
        seqs = [tokens] if single else list(tokens)
        if lengths is not None:
            lengths = [lengths] if single else list(lengths)
        L = self.seq_len
        arr = np.zeros((len(seqs), L), dtype=np.int64)
        mask = np.zeros((len(seqs), L), dtype=bool)
        for i, s in enumerate(seqs):
            s = np.asarray(s, dtype=np.int64)
            if len(s) > L:
                raise ContractError(f"sequence length {len(s)} exceeds seq_len {L}")
            if len(s) and (s.min() < 0 or s.max() >= self.vocab_size):
                raise ContractError(f"token out of vocabulary [0, {self.vocab_size})")
            n = len(s) if lengths is None else int(lengths[i])
            arr[i, : len(s)] = s
            mask[i, :n] = True
        if single:
            return arr[0], mask[0]
        return arr, mask

    def __call__(self, tokens, lengths=None) -> Encoded:
        ids, mask = self.pad(tokens, lengths)
        x = self.token_emb[ids] + self.pos_emb
        return self._run(x, mask)


class DualEncoder(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.image = ImageEncoder(rng, cfg)
        self.text = TextEncoder(rng, cfg)
        self.logit_scale = nn.parameter(np.array(cfg.init_logit_scale))
        self.config = cfg

    def scale(self) -> Tensor:
        """``1 / temperature``, clamped to at most ``exp(max_logit_scale)``."""
        return nn.exp(nn.clamp(self.logit_scale, hi=self.config.max_logit_scale))

    def encode_image(self, images) -> Encoded:
        return self.image(images)

    def encode_text(self, tokens, lengths=None) -> Encoded:
        return self.text(tokens, lengths)


def encode_image(enc: ImageEncoder, image) -> tuple[Tensor, list[GateWeights]]:
    out = enc(image)
    return out.feature, out.gate_records


def encode_text(enc: TextEncoder, tokens, lengths=None) -> tuple[Tensor, list[GateWeights]]:
    out = enc(tokens, lengths)
    return out.feature, out.gate_records
