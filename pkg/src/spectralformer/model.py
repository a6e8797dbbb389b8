"""SpectralFormer network: group-wise spectral embedding, encoder stack, CAF.

Token sequences are laid out row-wise, ``(..., tokens, width)``.  The
embedding stage keeps the column layout of the grouped band matrix
(``(..., n*t, m)`` in, ``(..., d, m)`` out) and transposes once when the
class token is attached.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

PIXEL, PATCH = "pixel", "patch"


@dataclass(frozen=True)
class ModelConfig:
    m: int
    classes: int
    n: int = 3
    d: int = 64
    blocks: int = 5
    heads: int = 4
    mlp_hidden: int = 8
    dropout_p: float = 0.1
    caf: bool = True
    input_mode: str = PIXEL
    patch_side: int = 7
    readout: str = "cls"  # or "mean"
    pos: str = "learned"  # or "fixed"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.m < 1 or self.classes < 1:
            raise ConfigError(f"m and classes must be positive (m={self.m}, classes={self.classes})")
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"group size n must be odd and positive, got {self.n}")
        if self.n > self.m:
            raise ConfigError(f"group size n={self.n} exceeds band count m={self.m}")
        if self.d < 2 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"width d={self.d} must be divisible by heads={self.heads}")
        if self.blocks < 1:
            raise ConfigError("need at least one encoder block")
        if self.caf and self.blocks < 3:
            raise ConfigError("CAF needs at least 3 encoder blocks")
        if self.input_mode not in (PIXEL, PATCH):
            raise ConfigError(f"input_mode must be pixel or patch, got {self.input_mode!r}")
        if self.input_mode == PATCH and (self.patch_side < 1 or self.patch_side % 2 == 0):
            raise ConfigError(f"patch_side must be odd and positive, got {self.patch_side}")
        if self.readout not in ("cls", "mean"):
            raise ConfigError(f"readout must be cls or mean, got {self.readout!r}")
        if self.pos not in ("learned", "fixed"):
            raise ConfigError(f"pos must be learned or fixed, got {self.pos!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def t(self) -> int:
        """Spatial positions per band token (1 pixel-wise, side² patch-wise)."""
        return 1 if self.input_mode == PIXEL else self.patch_side ** 2

    @property
    def caf_sites(self) -> list[int]:
        """1-based block indices whose output is fused with block l-2."""
        return list(range(3, self.blocks + 1)) if self.caf else []

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every learnable tensor in checkpoint order."""
    d, h = config.d, config.mlp_hidden
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["gse.weight"] = (d, config.n * config.t)
    if config.pos == "learned":
        shapes["pos.table"] = (config.m + 1, d)
    shapes["cls.token"] = (d,)
    for b in range(1, config.blocks + 1):
        p = f"blocks.{b}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w1"] = (d, h)
        shapes[p + "mlp.b1"] = (h,)
        shapes[p + "mlp.w2"] = (h, d)
        shapes[p + "mlp.b2"] = (d,)
    for site in config.caf_sites:
        shapes[f"caf.{site}.weight"] = (2,)
    shapes["head.weight"] = (config.classes, d)
    shapes["head.bias"] = (config.classes,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight matrices take decoupled weight decay; nothing else does."""
    return name == "gse.weight" or name == "head.weight" or ".attn.w" in name or name.endswith(
        (".mlp.w1", ".mlp.w2"))


def init_params(config: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Glorot-uniform matrices, zero biases, unit LN gains, N(0, 0.02) tables, CAF = [1, 0]."""
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name in ("pos.table", "cls.token"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.startswith("caf."):
            value = np.array([1.0, 0.0])
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith((".beta", ".b1", ".b2", "head.bias")):
            value = np.zeros(shape)
        else:
            fan_out, fan_in = shape if name in ("gse.weight", "head.weight") else shape[::-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = np.asarray(value, dtype=dtype)
    return params


def sinusoidal_table(length: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


# --------------------------------------------------------------------------
# input preparation (no gradients flow into data)


def unfold_patch(patch: np.ndarray) -> np.ndarray:
    """``(..., m, w, h)`` window cube to ``(..., w*h, m)``; column i is band i flattened row-major."""
    patch = np.asarray(patch)
    *lead, m, w, h = patch.shape
    flat = patch.reshape(*lead, m, w * h)
    return np.swapaxes(flat, -1, -2)


def group_bands(x: np.ndarray, n: int) -> np.ndarray:
    """Overlapping band grouping with replicate padding at both spectral ends.

    ``x`` is ``(..., t, m)``.  Column q of the result stacks the t-vectors of
    bands ``q - n//2 .. q + n//2`` (clamped to the valid range), giving
    ``(..., n*t, m)``.
    """
    x = np.asarray(x)
    m = x.shape[-1]
    if n < 1 or n % 2 == 0:
        raise ConfigError(f"group size n must be odd and positive, got {n}")
    if n > m:
        raise ConfigError(f"group size n={n} exceeds band count m={m}")
    k = n // 2
    idx = np.clip(np.arange(m)[None, :] + np.arange(-k, k + 1)[:, None], 0, m - 1)  # (n, m)
    g = x[..., idx]  # (..., t, n, m)
    g = np.swapaxes(g, -3, -2)  # (..., n, t, m)
    return g.reshape(*x.shape[:-2], n * x.shape[-2], m)


def prepare_input(samples: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Raw spectra ``(..., m)`` or windows ``(..., m, w, h)`` to grouped ``(..., n*t, m)``."""
    samples = np.asarray(samples)
    if config.input_mode == PIXEL:
        if samples.shape[-1] != config.m:
            raise DataError(f"sample has {samples.shape[-1]} bands, model expects {config.m}")
        x = samples[..., None, :]
    else:
        side = config.patch_side
        if samples.ndim < 3 or samples.shape[-3:] != (config.m, side, side):
            raise DataError(f"patch sample shape {samples.shape[-3:]} does not match "
                            f"(m={config.m}, {side}, {side})")
        x = unfold_patch(samples)
    return group_bands(x, config.n)


# --------------------------------------------------------------------------
# network pieces


def gse_embed(xg, weight) -> Tensor:
    """Group-wise spectral embedding ``W @ g(x)``: ``(..., n*t, m)`` to ``(..., d, m)``."""
    xg, weight = T.as_tensor(xg), T.as_tensor(weight)
    if weight.shape[-1] != xg.shape[-2]:
        raise DimensionError(f"gse_embed: weight {weight.shape} does not fit grouped input {xg.shape}")
    return T.matmul(weight, xg)


def add_positional_and_cls(a, pos_table, cls_token, dropout_p: float = 0.0,
                           training: bool = False, rng=None) -> Tensor:
    """Column embeddings ``(..., d, m)`` to tokens ``(..., m+1, d)`` with class token 0."""
    a, pos_table, cls_token = T.as_tensor(a), T.as_tensor(pos_table), T.as_tensor(cls_token)
    m = a.shape[-1]
    if pos_table.shape[0] != m + 1:
        raise ConfigError(f"positional table has {pos_table.shape[0]} rows, need m+1 = {m + 1}")
    tokens = T.transpose(a)
    lead = tokens.shape[:-2]
    cls = T.reshape(cls_token, (1, cls_token.shape[0]))
    if lead:
        cls = T.expand(cls, lead)
    z = T.add(T.concat([cls, tokens], axis=-2), pos_table)
    return T.dropout(z, dropout_p, training, rng)


def attention(q, k, v) -> Tensor:
    """``softmax(Q K^T / sqrt(d_h)) V`` with ``d_h`` the per-head width."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    scores = T.mul_const(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax_rows(scores), v)


def multi_head(z, bp: Mapping[str, Tensor], heads: int) -> Tensor:
    z = T.as_tensor(z)
    *lead, s, d = z.shape
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        x = T.reshape(x, (*lead, s, heads, dh))
        n = len(lead)
        return T.permute(x, (*range(n), n + 1, n, n + 2))

    q = split(T.matmul(z, bp["attn.wq"]))
    k = split(T.matmul(z, bp["attn.wk"]))
    v = split(T.matmul(z, bp["attn.wv"]))
    out = attention(q, k, v)  # (..., heads, s, dh)
    n = len(lead)
    out = T.permute(out, (*range(n), n + 1, n, n + 2))
    out = T.reshape(out, (*lead, s, d))
    return T.matmul(out, bp["attn.wo"])


def mlp(z: Tensor, bp: Mapping[str, Tensor], dropout_p: float, training: bool, rng) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(z, bp["mlp.w1"]), bp["mlp.b1"]))
    hidden = T.dropout(hidden, dropout_p, training, rng)
    return T.add(T.matmul(hidden, bp["mlp.w2"]), bp["mlp.b2"])


def encoder_block(z, bp: Mapping[str, Tensor], config: ModelConfig,
                  rng=None, training: bool = False) -> Tensor:
    """Pre-norm block: ``z + MHA(LN1(z))`` then ``+ MLP(LN2(.))``."""
    z = T.as_tensor(z)
    eps = config.ln_eps
    z1 = T.add(z, multi_head(T.layer_norm(z, bp["ln1.gamma"], bp["ln1.beta"], eps), bp, config.heads))
    branch = mlp(T.layer_norm(z1, bp["ln2.gamma"], bp["ln2.beta"], eps), bp,
                 config.dropout_p, training, rng)
    return T.add(z1, branch)


def caf_fuse(z_l, z_lm2, weight) -> Tensor:
    """Adaptive two-term fusion ``w[0] * z_l + w[1] * z_{l-2}``."""
    z_l, z_lm2, weight = T.as_tensor(z_l), T.as_tensor(z_lm2), T.as_tensor(weight)
    if z_l.shape != z_lm2.shape:
        raise DimensionError(f"caf_fuse: shapes differ, {z_l.shape} vs {z_lm2.shape}")
    if weight.shape != (2,):
        raise DimensionError(f"caf_fuse: weight must be a 2-vector, got {weight.shape}")
    return T.add(T.scale(z_l, T.take(weight, 0, 0)), T.scale(z_lm2, T.take(weight, 1, 0)))


def block_params(params: Mapping[str, Tensor], b: int) -> dict[str, Tensor]:
    prefix = f"blocks.{b}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encode(tokens: Tensor, params: Mapping[str, Tensor], config: ModelConfig,
           rng=None, training: bool = False) -> Tensor:
    """Run the encoder stack; with CAF on, block l >= 3 output is fused with the stream two blocks back."""
    stream = [tokens]  # stream[l] is the (possibly fused) output of block l
    for b in range(1, config.blocks + 1):
        out = encoder_block(stream[-1], block_params(params, b), config, rng, training)
        if config.caf and b >= 3:
            out = caf_fuse(out, stream[b - 2], params[f"caf.{b}.weight"])
        stream.append(out)
    return stream[-1]


def classify(z: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    if config.readout == "cls":
        feat = T.take(z, 0, axis=-2)
    else:
        feat = T.mean_axis(T.narrow(z, 1, z.shape[-2], axis=-2), axis=-2)
    if feat.ndim == 1:
        feat = T.reshape(feat, (1, feat.shape[0]))
    return T.add(T.matmul(feat, T.transpose(params["head.weight"])), params["head.bias"])


def _as_tensors(params: Mapping, dtype) -> dict[str, Tensor]:
    return {k: (v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=dtype)))
            for k, v in params.items()}


def embed(xg: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig,
          rng=None, training: bool = False) -> Tensor:
    dtype = params["gse.weight"].dtype
    a = gse_embed(Tensor(np.asarray(xg, dtype=dtype)), params["gse.weight"])
    pos = params["pos.table"] if config.pos == "learned" else Tensor(
        sinusoidal_table(config.m + 1, config.d, dtype))
    return add_positional_and_cls(a, pos, params["cls.token"], config.dropout_p, training, rng)


def forward(params: Mapping, config: ModelConfig, samples: np.ndarray,
            rng=None, training: bool = False) -> Tensor:
    """Logits for one sample (``(K,)``) or a batch (``(B, K)``).

    ``samples`` holds spectra ``(m,)``/``(B, m)`` pixel-wise or windows
    ``(m, s, s)``/``(B, m, s, s)`` patch-wise.  ``params`` may mix arrays
    (treated as constants) and tape leaves.
    """
    samples = np.asarray(samples)
    single = samples.ndim == (1 if config.input_mode == PIXEL else 3)
    if single:
        samples = samples[None]
    p = _as_tensors(params, np.asarray(_first(params)).dtype)
    xg = prepare_input(samples, config)
    z = encode(embed(xg, p, config, rng, training), p, config, rng, training)
    logits = classify(z, p, config)
    return T.reshape(logits, (config.classes,)) if single else logits


def _first(params: Mapping):
    v = params["gse.weight"]
    return v.data if isinstance(v, Tensor) else v


def predict(params: Mapping[str, np.ndarray], config: ModelConfig, samples: np.ndarray,
            batch: int = 256) -> np.ndarray:
    """1-based class predictions in eval mode."""
    samples = np.asarray(samples)
    out = []
    for i in range(0, len(samples), batch):
        logits = forward(params, config, samples[i:i + batch]).data
        out.append(np.argmax(logits, axis=-1) + 1)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
