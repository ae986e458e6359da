"""A decoder-only transformer whose every structural dimension is runtime data.

Block count, per-head channel width, FFN hidden width and embedding width all
live in ``ModelConfig``; the parameter tensors are plain arrays keyed by
name, so structural surgery is ordinary array slicing plus a config update.

Architecture: learned absolute position embeddings, pre-norm residual
blocks, multi-head attention with per-head projection tensors, GELU FFN,
no biases on projections. The conventional 1/sqrt(d_head) attention scale
is folded into W_Q at initialization instead of applied at runtime, so
removing or appending head channels never rescales the surviving ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    ContractError,
    NEG_INF,
    Tensor,
    add,
    gelu,
    index_rows,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "ModelConfig",
    "ModelState",
    "init_model",
    "forward",
    "param_count",
    "expected_shapes",
    "shape_audit",
    "clone_model",
    "zero_extend_ffn",
    "zero_extend_attention",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int
    d_model: int
    n_blocks: int
    n_heads: int
    d_head: int
    d_ffn: int
    tie_embeddings: bool = False

    def validate(self):
        for field in ("vocab_size", "max_seq_len", "d_model", "n_heads", "d_head", "d_ffn"):
            if getattr(self, field) < 1:
                raise ContractError(f"config field {field} must be >= 1")
        if self.n_blocks < 0:
            raise ContractError("n_blocks must be >= 0")


@dataclass
class ModelState:
    """Config plus the named parameter tensors it prescribes."""

    config: ModelConfig
    params: dict[str, Tensor]

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    """The exact tensor shape every parameter name must have under ``config``."""
    c = config
    shapes = {
        "tok_emb": (c.vocab_size, c.d_model),
        "pos_emb": (c.max_seq_len, c.d_model),
        "final_norm.scale": (c.d_model,),
        "final_norm.shift": (c.d_model,),
    }
    if not c.tie_embeddings:
        shapes["head"] = (c.vocab_size, c.d_model)
    for b in range(c.n_blocks):
        p = f"blocks.{b}."
        shapes[p + "ln1.scale"] = (c.d_model,)
        shapes[p + "ln1.shift"] = (c.d_model,)
        shapes[p + "ln2.scale"] = (c.d_model,)
        shapes[p + "ln2.shift"] = (c.d_model,)
        shapes[p + "attn.wq"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.wk"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.wv"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.wo"] = (c.n_heads, c.d_head, c.d_model)
        shapes[p + "ffn.w_in"] = (c.d_ffn, c.d_model)
        shapes[p + "ffn.w_out"] = (c.d_model, c.d_ffn)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter total; equals the sum of actual tensor sizes."""
    c = config
    per_block = (
        4 * c.n_heads * c.d_model * c.d_head  # q, k, v, o
        + 4 * c.d_model  # two layer norms, scale + shift
        + 2 * c.d_ffn * c.d_model  # w_in, w_out
    )
    total = (
        c.vocab_size * c.d_model
        + c.max_seq_len * c.d_model
        + 2 * c.d_model  # final norm
        + c.n_blocks * per_block
    )
    if not c.tie_embeddings:
        total += c.vocab_size * c.d_model
    return total


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """Normal(0, 0.02) projections, unit/zero layer norms.

    W_Q is additionally scaled by d_head**-0.5 so attention logits are the
    usual scaled dot product without a runtime factor.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    params: dict[str, Tensor] = {}

    def normal(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32))

    q_scale = 0.02 * config.d_head ** -0.5
    for name, shape in expected_shapes(config).items():
        if name.endswith((".scale",)):
            params[name] = Tensor(np.ones(shape, dtype=np.float32))
        elif name.endswith((".shift",)):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
        elif name.endswith("attn.wq"):
            params[name] = normal(shape, q_scale)
        else:
            params[name] = normal(shape)
    return ModelState(config=config, params=params)


def clone_model(model: ModelState) -> ModelState:
    return ModelState(
        config=model.config,
        params={k: v.copy() for k, v in model.params.items()},
    )


def shape_audit(model: ModelState) -> list[str]:
    """Empty list when every tensor matches the config's closed-form shape."""
    violations = []
    want = expected_shapes(model.config)
    for name, shape in want.items():
        if name not in model.params:
            violations.append(f"missing parameter {name} (expected {shape})")
        elif tuple(model.params[name].shape) != shape:
            violations.append(
                f"{name}: shape {tuple(model.params[name].shape)} != expected {shape}"
            )
    for name in model.params:
        if name not in want:
            violations.append(f"unexpected parameter {name}")
    return violations


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t)
    if mask is None:
        mask = np.triu(np.full((t, t), NEG_INF, dtype=np.float32), k=1)
        _MASK_CACHE[t] = mask
    return mask


def _affine_norm(x, scale, shift):
    return add(mul(layer_norm(x), scale), shift)


def forward(model: ModelState, tokens) -> Tensor:
    """Per-position next-token logits, causally masked.

    ``tokens`` is an int array [batch, seq]. Records on the active
    ComputeGraph when one is open.
    """
    c = model.config
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    batch, seq = tokens.shape
    if seq > c.max_seq_len:
        raise ContractError(f"sequence length {seq} exceeds max_seq_len {c.max_seq_len}")
    bad = (tokens < 0) | (tokens >= c.vocab_size)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise ContractError(
            f"token id {tokens[b, t]} out of range at sample {b}, position {t}"
        )

    x = add(index_rows(p["tok_emb"], tokens), index_rows(p["pos_emb"], np.arange(seq)))
    mask = _causal_mask(seq)
    hd = c.n_heads * c.d_head

    for b in range(c.n_blocks):
        pre = f"blocks.{b}."
        h = _affine_norm(x, p[pre + "ln1.scale"], p[pre + "ln1.shift"])
        # [H, d, dh] -> [d, H*dh] so one gemm covers all heads
        wq = reshape(transpose(p[pre + "attn.wq"], (1, 0, 2)), (c.d_model, hd))
        wk = reshape(transpose(p[pre + "attn.wk"], (1, 0, 2)), (c.d_model, hd))
        wv = reshape(transpose(p[pre + "attn.wv"], (1, 0, 2)), (c.d_model, hd))
        q = transpose(reshape(matmul(h, wq), (batch, seq, c.n_heads, c.d_head)), (0, 2, 1, 3))
        k = transpose(reshape(matmul(h, wk), (batch, seq, c.n_heads, c.d_head)), (0, 2, 1, 3))
        v = transpose(reshape(matmul(h, wv), (batch, seq, c.n_heads, c.d_head)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
        attn = softmax(scores, mask=mask)
        mixed = transpose(matmul(attn, v), (0, 2, 1, 3))
        wo = reshape(p[pre + "attn.wo"], (hd, c.d_model))
        x = add(x, matmul(reshape(mixed, (batch, seq, hd)), wo))

        h = _affine_norm(x, p[pre + "ln2.scale"], p[pre + "ln2.shift"])
        hidden = gelu(matmul(h, transpose(p[pre + "ffn.w_in"], (1, 0))))
        x = add(x, matmul(hidden, transpose(p[pre + "ffn.w_out"], (1, 0))))

    x = _affine_norm(x, p["final_norm.scale"], p["final_norm.shift"])
    head = p["tok_emb"] if c.tie_embeddings else p["head"]
    return matmul(x, transpose(head, (1, 0)))


# ---------------------------------------------------------------------------
# zero-extension: the converse of pruning a dead dimension


def zero_extend_ffn(model: ModelState, count: int) -> ModelState:
    """Append ``count`` all-zero FFN hidden units to every block."""
    c = model.config
    new = clone_model(model)
    for b in range(c.n_blocks):
        pre = f"blocks.{b}.ffn."
        w_in = new.params[pre + "w_in"].data
        w_out = new.params[pre + "w_out"].data
        new.params[pre + "w_in"] = Tensor(
            np.concatenate([w_in, np.zeros((count, c.d_model), np.float32)], axis=0)
        )
        new.params[pre + "w_out"] = Tensor(
            np.concatenate([w_out, np.zeros((c.d_model, count), np.float32)], axis=1)
        )
    new.config = replace(c, d_ffn=c.d_ffn + count)
    return new


def zero_extend_attention(model: ModelState, count: int) -> ModelState:
    """Append ``count`` all-zero channels to every head of every block."""
    c = model.config
    new = clone_model(model)
    for b in range(c.n_blocks):
        pre = f"blocks.{b}.attn."
        pad_qkv = np.zeros((c.n_heads, c.d_model, count), np.float32)
        pad_o = np.zeros((c.n_heads, count, c.d_model), np.float32)
        for nm in ("wq", "wk", "wv"):
            w = new.params[pre + nm].data
            new.params[pre + nm] = Tensor(np.concatenate([w, pad_qkv], axis=2))
        wo = new.params[pre + "wo"].data
        new.params[pre + "wo"] = Tensor(np.concatenate([wo, pad_o], axis=1))
    new.config = replace(c, d_head=c.d_head + count)
    return new
