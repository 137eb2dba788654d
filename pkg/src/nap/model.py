"""The prediction-aggregation network.

Per modality, projected probability streams form a (T, channels, predictors,
d_model) tensor that runs through a stack of encoder layers whose multi-head
attention is factorized into three pathways: one attending across channels,
one along time, one across base predictors, each owning an equal share of the
heads. Encoded streams from all modalities are then stacked and collapsed
per epoch by a learned attention pool, and a small feedforward head emits
stage logits.

All forward methods accept either a single instance (T, C, B, ...) or a
batched (S, T, C, B, ...) tensor; axes are addressed from the right.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ValidationError
from .synth import N_STAGES

# Feature-axis concatenation order of the attention pathways, with the
# tensor axis each one attends over (counted from the right).
PATHWAYS = (("spatial", -3), ("temporal", -4), ("blending", -2))

ROW_SUM_TOL = 1e-4


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the reference setup."""

    d_model: int = 24
    n_heads: int = 6
    n_layers: int = 4
    d_ff: int | None = None  # defaults to 4 * d_model
    d_attn: int | None = None  # fusion attention size, defaults to 2 * d_model
    classifier_hidden: int = 16
    dropout: float = 0.1
    max_modalities: int = 2
    mix_pathways: bool = True  # output projection after pathway concatenation

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_attn is None:
            self.d_attn = 2 * self.d_model
        if self.n_heads % 3 != 0:
            raise ConfigError(f"n_heads must be divisible by 3, got {self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        for name in ("d_model", "n_heads", "d_ff", "d_attn", "classifier_hidden",
                     "max_modalities"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def heads_per_pathway(self) -> int:
        return self.n_heads // 3

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_pathway(self) -> int:
        return self.heads_per_pathway * self.d_head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@lru_cache(maxsize=256)
def _sinusoid_table(t_len: int, d_model: int, dtype_name: str) -> np.ndarray:
    dtype = np.dtype(dtype_name)
    pe = np.zeros((t_len, d_model), dtype=dtype)
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * idx / d_model)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: pe[:, 1::2].shape[1]])
    pe.flags.writeable = False
    return pe


def sinusoidal_encoding(t_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos absolute position table, positions 0..t_len-1."""
    return _sinusoid_table(t_len, d_model, np.dtype(dtype).name)


def init_params(config: ModelConfig, seed) -> dict[str, Tensor]:
    """Fresh learnable parameters: scaled-uniform fan-in projections, zero
    biases, unit norm gains, small-normal modality embeddings."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def param(name, data):
        params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)

    def proj(name, fan_in, fan_out):
        lim = 1.0 / math.sqrt(fan_in)
        param(name, rng.uniform(-lim, lim, size=(fan_in, fan_out)))

    d, hp, dk = config.d_model, config.heads_per_pathway, config.d_head

    proj("input_proj.w", N_STAGES, d)
    param("input_proj.b", np.zeros(d))
    param("modality_embed", rng.normal(0.0, 0.02, size=(config.max_modalities, d)))

    for i in range(config.n_layers):
        param(f"layers.{i}.ln1.gain", np.ones(d))
        for pathway, _ in PATHWAYS:
            base = f"layers.{i}.attn.{pathway}"
            proj(f"{base}.wq", d, config.d_pathway)
            proj(f"{base}.wk", d, config.d_pathway)
            proj(f"{base}.wv", d, config.d_pathway)
            param(f"{base}.q_gain", np.ones((hp, dk)))
            param(f"{base}.k_gain", np.ones((hp, dk)))
        if config.mix_pathways:
            proj(f"layers.{i}.attn.out.w", d, d)
        param(f"layers.{i}.ln2.gain", np.ones(d))
        proj(f"layers.{i}.ffn.w1", d, config.d_ff)
        param(f"layers.{i}.ffn.b1", np.zeros(config.d_ff))
        proj(f"layers.{i}.ffn.w2", config.d_ff, d)
        param(f"layers.{i}.ffn.b2", np.zeros(d))

    proj("fusion.w", d, config.d_attn)
    param("fusion.b", np.zeros(config.d_attn))
    param("fusion.u", rng.uniform(-1.0 / math.sqrt(config.d_attn), 1.0 / math.sqrt(config.d_attn),
                                  size=(config.d_attn, 1)))
    proj("classifier.w1", d, config.classifier_hidden)
    param("classifier.b1", np.zeros(config.classifier_hidden))
    proj("classifier.w2", config.classifier_hidden, N_STAGES)
    param("classifier.b2", np.zeros(N_STAGES))
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def attention_fusion(z: Tensor, w: Tensor, b: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
    """Score each stream by ``tanh(z w + b) . u``, softmax over the stream
    axis (second from the right), and return the convex combination plus the
    weights."""
    n = z.shape[-2]
    if n < 1:
        raise ValidationError("fusion needs at least one prediction stream")
    s = ag.tanh(ag.linear(z, w, b))
    scores = ag.reshape(ag.matmul(s, u), z.shape[:-2] + (n,))
    alpha = ag.softmax(scores, axis=-1)
    fused = ag.matmul(ag.reshape(alpha, z.shape[:-2] + (1, n)), z)
    return ag.reshape(fused, z.shape[:-2] + (z.shape[-1],)), alpha


def _axis_from_right(ndim: int, offset: int) -> int:
    axis = ndim + offset
    if axis < 0:
        raise ValidationError(f"tensor with {ndim} axes lacks axis {offset}")
    return axis


class NapModel:
    """Configuration plus parameters, with the forward pass as methods.

    Parameters are immutable during a forward pass; independent copies may
    evaluate concurrently. Dropout is active only when an ``rng`` is passed.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- per-stage operations --------------------------------------------

    def project_hypnodensity(self, probs: np.ndarray) -> Tensor:
        """Affine map of probability rows (trailing axis 5) into d_model features."""
        probs = np.asarray(probs)
        if probs.shape[-1] != N_STAGES:
            raise ValidationError(f"expected trailing axis {N_STAGES}, got {probs.shape}")
        sums = probs.sum(axis=-1)
        err = np.abs(sums - 1.0).max()
        if err > ROW_SUM_TOL or probs.min() < -ROW_SUM_TOL:
            raise ValidationError(
                f"input rows must be probability vectors (max row-sum deviation {err:.3g}); "
                "pass probabilities, not logits"
            )
        dtype = self._p("input_proj.w").dtype
        x = Tensor(probs.astype(dtype, copy=False))
        return ag.linear(x, self._p("input_proj.w"), self._p("input_proj.b"))

    def add_encodings(self, h: Tensor, modality_id: int) -> Tensor:
        """Add the sinusoidal position table (broadcast over channel/predictor
        axes) and the modality's learnable embedding vector."""
        if not 0 <= modality_id < self.config.max_modalities:
            raise ValidationError(
                f"modality id {modality_id} out of range [0, {self.config.max_modalities})"
            )
        t_axis = _axis_from_right(h.ndim, -4)
        pe = sinusoidal_encoding(h.shape[t_axis], self.config.d_model, dtype=h.dtype)
        h = ag.add(h, Tensor(pe[:, None, None, :]))
        return ag.add(h, ag.take_row(self._p("modality_embed"), modality_id))

    def _attend(self, h: Tensor, layer: int, pathway: str, axis_offset: int) -> Tensor:
        """One pathway: multi-head scaled dot-product attention along a single
        axis, every other axis batched independently."""
        cfg = self.config
        base = f"layers.{layer}.attn.{pathway}"
        hp, dk = cfg.heads_per_pathway, cfg.d_head

        axis = _axis_from_right(h.ndim, axis_offset)
        x = ag.moveaxis(h, axis, h.ndim - 2)  # (..., A, d_model)
        lead = x.shape[:-2]
        a_len = x.shape[-2]

        def heads(w):  # (..., A, hp, dk) -> (..., hp, A, dk)
            y = ag.reshape(ag.matmul(x, w), lead + (a_len, hp, dk))
            perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
            return ag.transpose(y, perm)

        q = heads(self._p(f"{base}.wq"))
        k = heads(self._p(f"{base}.wk"))
        v = heads(self._p(f"{base}.wv"))
        q = ag.layer_norm(q, ag.reshape(self._p(f"{base}.q_gain"), (hp, 1, dk)))
        k = ag.layer_norm(k, ag.reshape(self._p(f"{base}.k_gain"), (hp, 1, dk)))

        scores = ag.scale(ag.matmul(q, ag.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                          1.0 / math.sqrt(dk))
        att = ag.softmax(scores, axis=-1)
        out = ag.matmul(att, v)  # (..., hp, A, dk)

        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        out = ag.reshape(ag.transpose(out, perm), lead + (a_len, hp * dk))
        return ag.moveaxis(out, out.ndim - 2, axis)

    def triaxial_attention(self, h: Tensor, layer: int, return_pathways: bool = False):
        """Run all three pathways and concatenate their features; optionally
        also return the per-pathway outputs (before mixing)."""
        outs = {name: self._attend(h, layer, name, off) for name, off in PATHWAYS}
        merged = ag.concat([outs[name] for name, _ in PATHWAYS], axis=-1)
        if self.config.mix_pathways:
            merged = ag.matmul(merged, self._p(f"layers.{layer}.attn.out.w"))
        if return_pathways:
            return merged, outs
        return merged

    def encoder_layer(self, h: Tensor, layer: int, rng=None) -> Tensor:
        """Pre-norm residual attention sublayer followed by a pre-norm
        residual feedforward sublayer."""
        p = self.config.dropout
        att = self.triaxial_attention(ag.layer_norm(h, self._p(f"layers.{layer}.ln1.gain")), layer)
        h = ag.add(h, ag.dropout(att, p, rng))
        f = ag.layer_norm(h, self._p(f"layers.{layer}.ln2.gain"))
        f = ag.linear(f, self._p(f"layers.{layer}.ffn.w1"), self._p(f"layers.{layer}.ffn.b1"))
        f = ag.dropout(ag.gelu(f), p, rng)
        f = ag.linear(f, self._p(f"layers.{layer}.ffn.w2"), self._p(f"layers.{layer}.ffn.b2"))
        return ag.add(h, ag.dropout(f, p, rng))

    def encode_modality(self, h: Tensor, modality_id: int, rng=None) -> Tensor:
        """Positional/modality encodings plus the full encoder stack; encoder
        weights are shared across modalities."""
        h = self.add_encodings(h, modality_id)
        for layer in range(self.config.n_layers):
            h = self.encoder_layer(h, layer, rng=rng)
        return h

    def fuse_streams(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Per-epoch convex combination of the stream axis (second from the
        right). Returns (fused features, attention weights)."""
        return attention_fusion(z, self._p("fusion.w"), self._p("fusion.b"),
                                self._p("fusion.u"))

    def classify(self, z: Tensor, rng=None) -> Tensor:
        """Per-epoch stage logits from fused features."""
        z = ag.linear(z, self._p("classifier.w1"), self._p("classifier.b1"))
        z = ag.dropout(ag.gelu(z), self.config.dropout, rng)
        return ag.linear(z, self._p("classifier.w2"), self._p("classifier.b2"))

    # -- full network ------------------------------------------------------

    def forward_batch(
        self,
        blocks: list[np.ndarray],
        modality_ids: list[int],
        rng=None,
        return_alpha: bool = False,
    ):
        """Forward a batch: one (S, T, C_k, B_k, 5) probability block per
        modality. Returns (S, T, 5) logits, plus (S, T, N) fusion weights if
        ``return_alpha``. Dropout is active iff ``rng`` is given."""
        if not blocks:
            raise ValidationError("forward needs at least one modality block")
        if len(blocks) != len(modality_ids):
            raise ValidationError("one modality id per block required")
        if len(set(modality_ids)) != len(modality_ids):
            raise ValidationError(f"duplicate modality ids: {modality_ids}")
        if len(blocks) > self.config.max_modalities:
            raise ValidationError(
                f"{len(blocks)} modalities exceed the configured maximum "
                f"{self.config.max_modalities}"
            )
        blocks = [np.asarray(b) for b in blocks]
        shapes = [b.shape for b in blocks]
        for shape in shapes:
            if len(shape) != 5:
                raise ValidationError(f"expected (S, T, C, B, {N_STAGES}) block, got {shape}")
        if len({(s[0], s[1]) for s in shapes}) != 1:
            raise ValidationError(f"modality blocks disagree on (S, T): {shapes}")

        s_len, t_len = shapes[0][:2]
        encoded = []
        for block, modality_id in zip(blocks, modality_ids):
            h = self.project_hypnodensity(block)
            h = self.encode_modality(h, modality_id, rng=rng)
            c_len, b_len = block.shape[2], block.shape[3]
            encoded.append(ag.reshape(h, (s_len, t_len, c_len * b_len, self.config.d_model)))
        z = encoded[0] if len(encoded) == 1 else ag.concat(encoded, axis=2)
        fused, alpha = self.fuse_streams(z)
        logits = self.classify(fused, rng=rng)
        if return_alpha:
            return logits, alpha
        return logits

    def forward(self, blocks: list[np.ndarray], modality_ids: list[int] | None = None,
                rng=None, return_alpha: bool = False):
        """Single-instance forward: (T, C_k, B_k, 5) blocks -> (T, 5) logits."""
        if modality_ids is None:
            modality_ids = list(range(len(blocks)))
        batched = [np.asarray(b)[None] for b in blocks]
        out = self.forward_batch(batched, modality_ids, rng=rng, return_alpha=return_alpha)
        if return_alpha:
            logits, alpha = out
            return ag.reshape(logits, logits.shape[1:]), ag.reshape(alpha, alpha.shape[1:])
        return ag.reshape(out, out.shape[1:])

    def parameter_count(self) -> int:
        return parameter_count(self.params)

    def cast(self, dtype) -> "NapModel":
        """In-place dtype change of all parameters (e.g. float32 training)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name, data in values.items():
            self.params[name].data = data.copy()
            self.params[name].grad = None
