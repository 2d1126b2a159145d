"""BERT-style protein encoder with a pooled classification head.

All parameters live in float64 torch tensors stored with the ``x @ W`` layout
(input features along rows). Every forward entry point accepts arbitrary
leading batch dimensions, so a whole integration path can be evaluated in a
single call.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .tensor_core import Rng

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
AMBIGUOUS = "BZXUO"
PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
VOCAB = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
VOCAB.update({aa: len(SPECIAL_TOKENS) + i for i, aa in enumerate(AMINO_ACIDS)})
VOCAB_SIZE = len(VOCAB)
MAX_RESIDUES = 1000
LN_EPS = 1e-12


class TokenizeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def tokenize(sequence: str, max_residues: int = MAX_RESIDUES) -> list[int]:
    """Map an amino-acid string to ``[CLS] residues [SEP]``.

    Canonical residues get their own ids, the ambiguity codes B, Z, X, U, O map
    to ``[UNK]`` and anything past ``max_residues`` is cropped.
    """
    if not sequence:
        raise TokenizeError("empty sequence")
    ids = [CLS]
    for pos, ch in enumerate(sequence[:max_residues].upper(), start=1):
        if ch in AMBIGUOUS:
            ids.append(UNK)
        elif ch in AMINO_ACIDS:
            ids.append(VOCAB[ch])
        else:
            raise TokenizeError(f"illegal character {ch!r} at position {pos}")
    # characters beyond the crop still have to be legal residues
    for pos, ch in enumerate(sequence[max_residues:].upper(), start=max_residues + 1):
        if ch not in AMBIGUOUS and ch not in AMINO_ACIDS:
            raise TokenizeError(f"illegal character {ch!r} at position {pos}")
    ids.append(SEP)
    return ids


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = VOCAB_SIZE
    max_positions: int = MAX_RESIDUES + 2
    n_classes: int = 2
    task_kind: str = "multiclass"
    head_hidden: int = 50
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size",
                     "max_positions", "n_classes", "head_hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.task_kind not in ("multilabel", "multiclass"):
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        if self.max_positions < 3:
            raise ConfigError("max_positions must allow [CLS] residue [SEP]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate out of range: {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in canonical archive order."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (cfg.vocab_size, d),
        "embed.position": (cfg.max_positions, d),
        "embed.ln_gain": (d,),
        "embed.ln_bias": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"w_{proj}"] = (d, d)
            shapes[p + f"b_{proj}"] = (d,)
        shapes.update({
            p + "ln1_gain": (d,), p + "ln1_bias": (d,),
            p + "ff_w1": (d, ff), p + "ff_b1": (ff,),
            p + "ff_w2": (ff, d), p + "ff_b2": (d,),
            p + "ln2_gain": (d,), p + "ln2_bias": (d,),
        })
    shapes.update({
        "head.w1": (4 * d, cfg.head_hidden), "head.b1": (cfg.head_hidden,),
        "head.ln_gain": (cfg.head_hidden,), "head.ln_bias": (cfg.head_hidden,),
        "head.w2": (cfg.head_hidden, cfg.n_classes), "head.b2": (cfg.n_classes,),
    })
    return shapes


def is_encoder_param(name: str) -> bool:
    return not name.startswith("head.")


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    freq = np.arange((d_model + 1) // 2)[None, :]
    angle = pos / 10000.0 ** (2 * freq / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def init_weights(cfg: ModelConfig, seed: int, std: float = 0.02,
                 scheme: str = "scaled") -> dict[str, np.ndarray]:
    """Seeded initial weights; gains are one and biases zero under both schemes.

    ``"normal"``: every matrix N(0, std).
    ``"scaled"``: unit-variance token embeddings, a sinusoidal position table,
    encoder matrices N(0, 1/fan_in) and classifier matrices N(0, std). Trains
    far faster from scratch than the small uniform init.
    Both schemes consume the same random draws in the same order.
    """
    if scheme not in ("normal", "scaled"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    rng = Rng(seed)
    weights = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("gain"):
            weights[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("bias"):
            weights[name] = np.zeros(shape)
        else:
            z = rng.normal(shape)
            if scheme == "normal" or name.startswith("head."):
                weights[name] = z * std
            elif name == "embed.token":
                weights[name] = z
            elif name == "embed.position":
                weights[name] = sinusoidal_positions(*shape)
            else:
                weights[name] = z / np.sqrt(shape[0])
    return weights


@dataclass
class ForwardCache:
    tokens: list[int]
    embedding: np.ndarray                  # E (token embeddings), seq x d_model
    block_inputs: list[np.ndarray]         # s_l
    head_outputs: list[np.ndarray]         # c_l, heads contiguous along channels
    hidden: list[np.ndarray]               # post-residual, post-norm output of block l
    pooled: np.ndarray
    logits: np.ndarray
    extra: dict = field(default_factory=dict)


def _layer_norm(x, gain, bias):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * gain + bias


class Encoder:
    """Post-LN transformer encoder plus pooled classifier.

    ``dropout`` is a ``torch.Generator`` while training and ``None`` at
    inference, which makes every inference path deterministic.
    """

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        expected = parameter_shapes(config)
        missing = set(expected) - set(weights)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        self.params: dict[str, torch.Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name}: non-finite values")
            self.params[name] = torch.tensor(arr, dtype=torch.float64)
        self.dropout: torch.Generator | None = None

    @classmethod
    def initialized(cls, config: ModelConfig, seed: int = 0) -> "Encoder":
        return cls(config, init_weights(config, seed))

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}

    def _drop(self, x):
        if self.dropout is None or self.config.dropout_rate == 0.0:
            return x
        rate = self.config.dropout_rate
        keep = torch.rand(x.shape, generator=self.dropout, dtype=torch.float64) >= rate
        return x * keep / (1.0 - rate)

    # --- pieces ---------------------------------------------------------

    def embed(self, tokens) -> torch.Tensor:
        """Token-embedding lookup E; this is the tensor attributions are taken against."""
        ids = torch.as_tensor(tokens, dtype=torch.long)
        n = ids.shape[-1]
        if n < 3 or n > self.config.max_positions:
            raise ConfigError(
                f"token count {n} outside [3, {self.config.max_positions}]")
        return self.params["embed.token"][ids]

    def embedding_input(self, emb: torch.Tensor) -> torch.Tensor:
        """Block-0 input: LN(E + position embeddings)."""
        p = self.params
        n = emb.shape[-2]
        if n < 3 or n > self.config.max_positions:
            raise ConfigError(
                f"token count {n} outside [3, {self.config.max_positions}]")
        return _layer_norm(emb + p["embed.position"][:n], p["embed.ln_gain"], p["embed.ln_bias"])

    def head_outputs(self, layer: int, s: torch.Tensor) -> torch.Tensor:
        """Concatenated per-head attention output before the output projection."""
        p, cfg = self.params, self.config
        pre = f"layer{layer}."
        *lead, n, d = s.shape
        h, dk = cfg.n_heads, cfg.head_dim

        def split(x):
            return x.reshape(*lead, n, h, dk).transpose(-3, -2)

        q = split(s @ p[pre + "w_q"] + p[pre + "b_q"])
        k = split(s @ p[pre + "w_k"] + p[pre + "b_k"])
        v = split(s @ p[pre + "w_v"] + p[pre + "b_v"])
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
        out = att @ v
        return out.transpose(-3, -2).reshape(*lead, n, d)

    def block_rest(self, layer: int, s: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Everything in block ``layer`` after the heads: projection, skip, LN, FFN."""
        p = self.params
        pre = f"layer{layer}."
        a = self._drop(c @ p[pre + "w_o"] + p[pre + "b_o"])
        h = _layer_norm(s + a, p[pre + "ln1_gain"], p[pre + "ln1_bias"])
        f = F.gelu(h @ p[pre + "ff_w1"] + p[pre + "ff_b1"]) @ p[pre + "ff_w2"] + p[pre + "ff_b2"]
        f = self._drop(f)
        return _layer_norm(h + f, p[pre + "ln2_gain"], p[pre + "ln2_bias"])

    def block(self, layer: int, s: torch.Tensor) -> torch.Tensor:
        return self.block_rest(layer, s, self.head_outputs(layer, s))

    @staticmethod
    def pool(hidden: torch.Tensor) -> torch.Tensor:
        """[CLS] feature, then max, mean and sum/sqrt(n) over the residue tokens."""
        residues = hidden[..., 1:-1, :]
        n = residues.shape[-2]
        if n < 1:
            raise ConfigError("pooling needs at least one residue token")
        total = residues.sum(dim=-2)
        return torch.cat([
            hidden[..., 0, :],
            residues.max(dim=-2).values,
            total / n,
            total / math.sqrt(n),
        ], dim=-1)

    def classify(self, pooled: torch.Tensor) -> torch.Tensor:
        p = self.params
        h = torch.relu(pooled @ p["head.w1"] + p["head.b1"])
        h = self._drop(_layer_norm(h, p["head.ln_gain"], p["head.ln_bias"]))
        return h @ p["head.w2"] + p["head.b2"]

    def run_from(self, layer: int, s: torch.Tensor) -> torch.Tensor:
        """Logits given the input ``s`` of block ``layer`` (``layer == n_layers`` means final hidden)."""
        x = s
        for i in range(layer, self.config.n_layers):
            x = self.block(i, x)
        return self.classify(self.pool(x))

    def downstream(self, layer: int, s: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Logits as a function G(s_l, c_l) of block input and head output."""
        return self.run_from(layer + 1, self.block_rest(layer, s, c))

    def logits_from_embedding(self, emb: torch.Tensor) -> torch.Tensor:
        return self.run_from(0, self.embedding_input(emb))

    def logits(self, tokens) -> torch.Tensor:
        return self.logits_from_embedding(self.embed(tokens))

    # --- public numeric API ---------------------------------------------

    def forward(self, tokens) -> tuple[np.ndarray, ForwardCache]:
        tokens = list(tokens)
        with torch.no_grad():
            emb = self.embed(tokens)
            x = self.embedding_input(emb)
            inputs, heads, hidden = [], [], []
            for i in range(self.config.n_layers):
                c = self.head_outputs(i, x)
                inputs.append(x.numpy().copy())
                heads.append(c.numpy().copy())
                x = self.block_rest(i, x, c)
                hidden.append(x.numpy().copy())
            pooled = self.pool(x)
            logits = self.classify(pooled).numpy().copy()
        cache = ForwardCache(tokens, emb.numpy().copy(), inputs, heads, hidden,
                             pooled.numpy().copy(), logits)
        return logits, cache

    def _check_class(self, class_index: int):
        if not 0 <= class_index < self.config.n_classes:
            raise ValueError(f"class index {class_index} out of range "
                             f"[0, {self.config.n_classes})")

    def embedding_gradient(self, emb, class_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Logit values and d logit / d E for a (possibly batched) embedding tensor."""
        self._check_class(class_index)
        e = torch.as_tensor(emb, dtype=torch.float64).detach().clone().requires_grad_(True)
        out = self.logits_from_embedding(e)[..., class_index]
        (grad,) = torch.autograd.grad(out.sum(), e)
        return out.detach().numpy().copy(), grad.numpy().copy()

    def head_cut_gradient(self, layer: int, s, c, class_index: int):
        """Logit values and partials (dG/dc, dG/ds) of G(s_l, c_l) = downstream logit."""
        self._check_class(class_index)
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.config.n_layers})")
        return partials(lambda s_, c_: self.downstream(layer, s_, c_)[..., class_index], s, c)

    def grad_embedding(self, cache: ForwardCache, class_index: int) -> np.ndarray:
        return self.embedding_gradient(cache.embedding, class_index)[1]

    def grad_head_cut(self, cache: ForwardCache, layer: int, class_index: int):
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.config.n_layers})")
        _, g_c, g_s = self.head_cut_gradient(
            layer, cache.block_inputs[layer], cache.head_outputs[layer], class_index)
        return g_c, g_s


def partials(fn, s, c):
    """Evaluate ``fn(s, c)`` and its partial derivatives with ``s`` and ``c`` held independent.

    Returns ``(values, d/dc, d/ds)``. Batched outputs are summed before the
    backward pass, which is exact because batch elements never interact.
    """
    s_leaf = torch.as_tensor(s, dtype=torch.float64).detach().clone().requires_grad_(True)
    c_leaf = torch.as_tensor(c, dtype=torch.float64).detach().clone().requires_grad_(True)
    out = fn(s_leaf, c_leaf)
    g_s, g_c = torch.autograd.grad(out.sum(), (s_leaf, c_leaf), allow_unused=True)
    if g_s is None:
        g_s = torch.zeros_like(s_leaf)
    if g_c is None:
        g_c = torch.zeros_like(c_leaf)
    return out.detach().numpy().copy(), g_c.numpy().copy(), g_s.numpy().copy()
