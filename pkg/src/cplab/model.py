"""Permutation-invariant Transformer for in-context set prediction.

The encoder consumes a sequence of context tokens (input + one-hot label
through projector h1) followed by query tokens (input only, through h2).
A structured attention mask lets contexts attend to each other and each
query attend to all contexts plus itself; there is no positional encoding,
so outputs at query positions are invariant to context order and
independent across queries.  One forward pass over the augmented dataset
therefore yields all n+1 predictive distributions needed by full conformal
prediction, for one candidate label, without retraining.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import numerics

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_layers: int = 6
    model_dim: int = 16
    num_heads: int = 2
    ffn_dim: int = 1024
    num_classes: int = 4
    input_dim: int = 2

    def __post_init__(self):
        if min(self.num_layers, self.model_dim, self.num_heads,
               self.ffn_dim, self.num_classes, self.input_dim) <= 0:
            raise ValueError("all ModelConfig fields must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")


def build_mask(nc: int, nq: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """(nc+nq) x (nc+nq) additive attention mask.

    Contexts attend to all contexts; queries attend to all contexts and to
    themselves only.  Context rows never see query columns.
    """
    if nc < 1:
        raise ValueError("need at least one context token (nc >= 1)")
    if nq < 0:
        raise ValueError("nq must be nonnegative")
    blk = numerics.block_value(dtype)
    m = torch.zeros((nc + nq, nc + nq), dtype=dtype)
    m[:nc, nc:] = blk
    qq = torch.full((nq, nq), blk, dtype=dtype)
    qq.fill_diagonal_(0.0)
    m[nc:, nc:] = qq
    return m


class _Block(nn.Module):
    """Pre-norm Transformer block: LN -> masked MHA -> residual, LN -> FFN -> residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.ln1 = nn.LayerNorm(d, eps=1e-5)
        self.ln2 = nn.LayerNorm(d, eps=1e-5)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ffn1 = nn.Linear(d, cfg.ffn_dim)
        self.ffn2 = nn.Linear(cfg.ffn_dim, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        h = self.num_heads
        dh = d // h
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, l, h, dh).transpose(1, 2)
        k = k.view(b, l, h, dh).transpose(1, 2)
        v = v.view(b, l, h, dh).transpose(1, 2)
        att = numerics.masked_attention(q, k, v, mask)
        x = x + self.out(att.transpose(1, 2).reshape(b, l, d))
        x = x + self.ffn2(torch.nn.functional.gelu(self.ffn1(self.ln2(x))))
        return x


class IclTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        self.h1 = nn.Linear(cfg.input_dim + cfg.num_classes, cfg.model_dim)
        self.h2 = nn.Linear(cfg.input_dim, cfg.model_dim)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim, eps=1e-5)
        self.head = nn.Linear(cfg.model_dim, cfg.num_classes)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.h1.weight.dtype

    def seed_init(self, seed: int) -> "IclTransformer":
        """Deterministic init: weights ~ U(-1/sqrt(fan_in), ..), biases 0, LN identity."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    numerics.init_uniform_fanin_(mod.weight, gen)
                    mod.bias.zero_()
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
        return self

    def embed_context(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """h1 token for (x, y): affine map of [x || onehot(y)].  x (..., input_dim), y (...) long."""
        if (y < 0).any() or (y >= self.cfg.num_classes).any():
            raise ValueError("context label out of range")
        onehot = torch.nn.functional.one_hot(y, self.cfg.num_classes).to(x.dtype)
        return self.h1(torch.cat([x, onehot], dim=-1))

    def embed_query(self, x: torch.Tensor) -> torch.Tensor:
        """h2 token for a query input (label-free)."""
        return self.h2(x)

    def forward(self, ctx_x: torch.Tensor, ctx_y: torch.Tensor, query_x: torch.Tensor) -> torch.Tensor:
        """Predictive distributions at every query position.

        ctx_x (B, nc, input_dim), ctx_y (B, nc) long, query_x (B, nq, input_dim)
        -> probabilities (B, nq, K).
        """
        nc, nq = ctx_x.shape[1], query_x.shape[1]
        tokens = torch.cat(
            [self.embed_context(ctx_x, ctx_y), self.embed_query(query_x)], dim=1
        )
        mask = build_mask(nc, nq, dtype=tokens.dtype)
        x = tokens
        for blk in self.blocks:
            x = blk(x, mask)
        logits = self.head(self.ln_f(x[:, nc:]))
        probs = torch.softmax(logits, dim=-1)
        numerics.assert_finite(probs, "predictive distributions")
        return probs


def _as_tensor(arr, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


def forward_context_query(
    model: IclTransformer, context_x, context_y, queries_x
) -> np.ndarray:
    """Condition on l labeled pairs and predict each query independently.

    context_x (l, input_dim), context_y (l,), queries_x (q, input_dim)
    -> (q, K) probabilities.
    """
    if len(context_y) < 1:
        raise ValueError("context must be nonempty")
    with torch.no_grad():
        probs = model(
            _as_tensor(context_x, model.dtype).unsqueeze(0),
            _as_tensor(context_y, torch.long).unsqueeze(0),
            _as_tensor(queries_x, model.dtype).unsqueeze(0),
        )
    return probs[0].numpy()


def forward_augmented(model: IclTransformer, xs, ys) -> np.ndarray:
    """Predictive distributions for every point of an augmented dataset.

    The n+1 pairs enter both as contexts (with labels) and as queries
    (inputs only); output i is p-hat(.|x_i) under the dataset-conditioned
    model.  xs (n+1, input_dim), ys (n+1,) -> (n+1, K).
    """
    if len(ys) < 1:
        raise ValueError("augmented dataset must be nonempty")
    with torch.no_grad():
        probs = model(
            _as_tensor(xs, model.dtype).unsqueeze(0),
            _as_tensor(ys, torch.long).unsqueeze(0),
            _as_tensor(xs, model.dtype).unsqueeze(0),
        )
    return probs[0].numpy()


def forward_augmented_batch(
    model: IclTransformer, xs: torch.Tensor, ys: torch.Tensor
) -> torch.Tensor:
    """Differentiable batched variant: xs (B, m, input_dim), ys (B, m) -> (B, m, K)."""
    return model(xs, ys, xs)


def save_checkpoint(path, model: IclTransformer, seed: int, objective: str,
                    extra: dict | None = None) -> None:
    """Versioned checkpoint: config + named float64 parameter arrays + seed.

    Round-trips bit-exactly (parameters stored as raw float64 npz arrays).
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": "icl_transformer",
        "config": asdict(model.cfg),
        "seed": int(seed),
        "objective": objective,
        **(extra or {}),
    }
    arrays = {
        f"param/{name}": p.detach().to(torch.float64).numpy()
        for name, p in model.named_parameters()
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path, dtype: torch.dtype = torch.float64):
    """Load a checkpoint; returns (model, meta dict)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        if meta.get("kind") != "icl_transformer":
            raise ValueError(f"not an ICL transformer checkpoint: {meta.get('kind')!r}")
        model = IclTransformer(ModelConfig(**meta["config"]), dtype=dtype)
        state = {
            name[len("param/"):]: torch.from_numpy(data[name].copy()).to(dtype)
            for name in data.files if name.startswith("param/")
        }
    model.load_state_dict(state)
    return model, meta
