"""The MSGL-Transformer forward pass.

Pipeline for a window X (T x D), optionally batched as (B, T, D):

    embed      Z0 = concat(g0, X W_e + b_e) + P                      (T+1) x d
    BAM        m = sigmoid(W2 relu(W1 vec(Z0[1:]) + b1) + b2),  Z0 * m
    MSA        short causal (first T//2 frames) + medium causal (all T frames)
               averaged on the overlap -> A_local; bidirectional over all
               T+1 tokens -> A_global;  U = LN(Z + Dropout(A_local + A_global))
    encoder    L post-norm blocks: U' = LN(U + MHA(U)), V = LN(U' + FFN(U'))
    head       logits = Dropout(V[0]) W_c + b_c

BAM and MSA can be switched off independently to obtain the ablation variants.
Weight matrices are stored (fan_in, fan_out) and applied as ``x @ W``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from msgl.autograd import functional as F
from msgl.autograd.functional import AttentionMask
from msgl.autograd.random import RngStream
from msgl.autograd.tensor import Tensor
from msgl.container import read_container, write_container
from msgl.errors import ConfigurationError, DimensionError, PersistenceError

CHECKPOINT_SCHEMA_VERSION = 1
_MHA_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

VARIANTS = {
    "base": (False, False),
    "msa": (False, True),
    "bam": (True, False),
    "full": (True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    T: int = 35
    D: int = 12
    C: int = 5
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    layers: int = 2
    dropout_p: float = 0.2
    enable_bam: bool = True
    enable_msa: bool = True
    bam_hidden: int = 64

    def __post_init__(self):
        for name in ("T", "D", "C", "d_model", "d_ff", "heads", "layers", "bam_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.T < 2:
            raise ConfigurationError("window length T must be at least 2")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.enable_bam, self.enable_msa):
                return name
        raise AssertionError("unreachable")

    def with_variant(self, variant: str) -> "ModelConfig":
        try:
            bam, msa = VARIANTS[variant]
        except KeyError:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return ModelConfig(**{**asdict(self), "enable_bam": bam, "enable_msa": msa})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields {sorted(unknown)}")
        return cls(**doc)


class ModelParams:
    """Ordered, name-addressable collection of trainable tensors."""

    def __init__(self, tensors: Optional[dict[str, Tensor]] = None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})
        self._groups: dict[str, dict[str, Tensor]] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name}")
        self._tensors[name] = value
        self._groups.clear()

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        if prefix not in self._groups:
            cut = len(prefix) + 1
            self._groups[prefix] = {
                k[cut:]: v for k, v in self._tensors.items() if k.startswith(prefix + ".")
            }
        return self._groups[prefix]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            raise KeyError("snapshot does not match parameter names")
        for k, t in self._tensors.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = arrays[k].copy()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


# --------------------------------------------------------------------- layout & init

def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every trainable tensor, in canonical order.

    Init kinds: ``xavier`` (2-D weight), ``zeros`` (bias / LN shift),
    ``ones`` (LN scale), ``normal`` (global token and positional table).
    """
    d, T = cfg.d_model, cfg.T
    out = [
        ("embed.weight", (cfg.D, d), "xavier"),
        ("embed.bias", (d,), "zeros"),
        ("global_token", (1, d), "normal"),
        ("pos_enc", (T + 1, d), "normal"),
    ]
    if cfg.enable_bam:
        h = cfg.bam_hidden
        out += [
            ("bam.fc1.weight", (T * d, h), "xavier"),
            ("bam.fc1.bias", (h,), "zeros"),
            ("bam.fc2.weight", (h, d), "xavier"),
            ("bam.fc2.bias", (d,), "zeros"),
        ]

    def mha(prefix):
        rows = []
        for k in _MHA_KEYS:
            if k.startswith("w"):
                rows.append((f"{prefix}.{k}", (d, d), "xavier"))
            else:
                rows.append((f"{prefix}.{k}", (d,), "zeros"))
        return rows

    def norm(prefix):
        return [(f"{prefix}.gamma", (d,), "ones"), (f"{prefix}.beta", (d,), "zeros")]

    if cfg.enable_msa:
        for branch in ("short", "medium", "global"):
            out += mha(f"msa.{branch}")
        out += norm("msa.norm")
    for i in range(cfg.layers):
        p = f"encoder.{i}"
        out += mha(f"{p}.attn")
        out += norm(f"{p}.norm1")
        out += [
            (f"{p}.ffn.fc1.weight", (d, cfg.d_ff), "xavier"),
            (f"{p}.ffn.fc1.bias", (cfg.d_ff,), "zeros"),
            (f"{p}.ffn.fc2.weight", (cfg.d_ff, d), "xavier"),
            (f"{p}.ffn.fc2.bias", (d,), "zeros"),
        ]
        out += norm(f"{p}.norm2")
    out += [("head.weight", (d, cfg.C), "xavier"), ("head.bias", (cfg.C,), "zeros")]
    return out


def init_params(cfg: ModelConfig, rng: RngStream) -> ModelParams:
    params = ModelParams()
    for name, shape, kind in param_shapes(cfg):
        if kind == "xavier":
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, shape)
        elif kind == "normal":
            data = rng.normal(0.0, 0.02, shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(params: Union[ModelParams, ModelConfig]) -> int:
    if isinstance(params, ModelConfig):
        return int(sum(np.prod(shape) for _, shape, _ in param_shapes(params)))
    return int(sum(t.size for t in params.values()))


# --------------------------------------------------------------------- forward pieces

def _check_input(cfg: ModelConfig, X) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim < 2 or X.shape[-2:] != (cfg.T, cfg.D):
        raise DimensionError(f"expected window shape ({cfg.T}, {cfg.D}) or a batch of them, got {X.shape}")
    return X


def embed_sequence(params: ModelParams, cfg: ModelConfig, X) -> Tensor:
    """Project frames to d, prepend the global token, add positional encoding."""
    X = _check_input(cfg, X)
    frames = F.linear(X, params["embed.weight"], params["embed.bias"])
    lead = X.shape[:-2]
    token = F.add(np.zeros(lead + (1, cfg.d_model)), params["global_token"])
    return F.add(F.concat([token, frames], axis=-2), params["pos_enc"])


def bam_gate(params: ModelParams, cfg: ModelConfig, Z0: Tensor) -> Tensor:
    """Modulation vector m in (0,1)^d, shaped (..., 1, d), from the frame tokens only."""
    # row-major flatten of the T frame rows, kept as a 1-row matrix
    flat = F.reshape(Z0[..., 1:, :], Z0.shape[:-2] + (1, cfg.T * cfg.d_model))
    hidden = F.relu(F.linear(flat, params["bam.fc1.weight"], params["bam.fc1.bias"]))
    return F.sigmoid(F.linear(hidden, params["bam.fc2.weight"], params["bam.fc2.bias"]))


def bam_modulate(params: ModelParams, cfg: ModelConfig, Z0: Tensor) -> Tensor:
    """Rescale every token, global token included, channel-wise by the gate."""
    return F.mul(Z0, bam_gate(params, cfg, Z0))


def msa_branches(params: ModelParams, cfg: ModelConfig, Z: Tensor) -> dict[str, Tensor]:
    """Raw outputs of the short, medium and global attention branches."""
    frames = Z[..., 1:, :]
    s = cfg.T // 2
    return {
        "short": F.multihead_attention(
            frames[..., :s, :], frames[..., :s, :], params.group("msa.short"), cfg.heads,
            AttentionMask("causal", s),
        ),
        "medium": F.multihead_attention(
            frames, frames, params.group("msa.medium"), cfg.heads, AttentionMask("causal", cfg.T)
        ),
        "global": F.multihead_attention(Z, Z, params.group("msa.global"), cfg.heads, None),
    }


def multi_scale_attention(
    params: ModelParams, cfg: ModelConfig, Z: Tensor, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    b = msa_branches(params, cfg, Z)
    s = cfg.T // 2
    medium = b["medium"]
    overlap = F.mul(F.add(b["short"], medium[..., :s, :]), 0.5)
    # the global-token row receives no local contribution
    zero_row = np.zeros(Z.shape[:-2] + (1, cfg.d_model))
    local = F.concat([zero_row, overlap, medium[..., s:, :]], axis=-2)
    mixed = F.dropout(F.add(local, b["global"]), cfg.dropout_p, training, rng)
    return F.layer_norm(F.add(Z, mixed), params["msa.norm.gamma"], params["msa.norm.beta"])


def encoder_layer(
    params: ModelParams, cfg: ModelConfig, i: int, U: Tensor, training: bool = False,
    rng: Optional[RngStream] = None,
) -> Tensor:
    p = f"encoder.{i}"
    attn = F.multihead_attention(U, U, params.group(f"{p}.attn"), cfg.heads, None)
    U1 = F.layer_norm(F.add(U, attn), params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"])
    h = F.relu(F.linear(U1, params[f"{p}.ffn.fc1.weight"], params[f"{p}.ffn.fc1.bias"]))
    h = F.dropout(h, cfg.dropout_p, training, rng)
    ffn = F.linear(h, params[f"{p}.ffn.fc2.weight"], params[f"{p}.ffn.fc2.bias"])
    return F.layer_norm(F.add(U1, ffn), params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"])


def encoder_forward(
    params: ModelParams, cfg: ModelConfig, U: Tensor, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    for i in range(cfg.layers):
        U = encoder_layer(params, cfg, i, U, training, rng)
    return U


def classify(
    params: ModelParams, cfg: ModelConfig, X, training: bool = False, rng: Optional[RngStream] = None
) -> Tensor:
    """Logits, shape (C,) for one window or (B, C) for a batch."""
    Z = embed_sequence(params, cfg, X)
    if cfg.enable_bam:
        Z = bam_modulate(params, cfg, Z)
    if cfg.enable_msa:
        Z = multi_scale_attention(params, cfg, Z, training, rng)
    V = encoder_forward(params, cfg, Z, training, rng)
    v_g = F.dropout(V[..., 0:1, :], cfg.dropout_p, training, rng)
    logits = F.linear(v_g, params["head.weight"], params["head.bias"])
    return F.reshape(logits, logits.shape[:-2] + (cfg.C,))


def predict(logits) -> np.ndarray:
    """Arg-max class; ties resolve to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def predict_proba(params: ModelParams, cfg: ModelConfig, X, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for an (M, T, D) array, without a tape."""
    from msgl.autograd.tensor import no_grad

    X = np.asarray(X, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            logits = classify(params, cfg, X[start:start + batch_size], training=False)
            out.append(F.softmax(logits, axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.C))


# --------------------------------------------------------------------- checkpoints

def save_checkpoint(path: Union[str, Path], params: ModelParams, cfg: ModelConfig) -> None:
    header = {"schema_version": CHECKPOINT_SCHEMA_VERSION, "kind": "checkpoint", "config": cfg.to_dict()}
    write_container(path, header, [(k, v.data) for k, v in params.items()])


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelParams, ModelConfig]:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint" or header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise PersistenceError(f"{path}: not a version-{CHECKPOINT_SCHEMA_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    expected = [(n, s) for n, s, _ in param_shapes(cfg)]
    if [(n, tuple(arrays[n].shape)) for n in arrays] != expected:
        raise PersistenceError(f"{path}: parameter layout does not match its config")
    return ModelParams({n: Tensor(a, requires_grad=True) for n, a in arrays.items()}), cfg
