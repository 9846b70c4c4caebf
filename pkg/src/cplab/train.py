"""Meta-training loops.

Three objectives over episodic task streams:

* ``log_loss``      — conventional in-context objective: cross-entropy of the
                      query label under the context-conditioned prediction.
* ``cp_aware_fcp``  — differentiable full-CP surrogate over the per-candidate
                      augmented score matrices.
* ``cp_aware_scp``  — split variant: soft threshold from the calibration
                      split, soft inclusion of the test scores.

Optimization is Adam with cosine-annealed learning rate; the best-validation
checkpoint is returned.  Everything is deterministic given the config seed.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import numerics, softcp, tasks
from .cp import P_FLOOR
from .model import IclTransformer, ModelConfig, forward_augmented_batch, load_checkpoint
from .softcp import SoftCpHyper

OBJECTIVES = ("log_loss", "cp_aware_fcp", "cp_aware_scp")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    tasks_per_epoch: int = 256
    realizations_per_task: int = 50
    batch_size: int = 32
    lr_init: float = 2e-4
    lr_min: float = 2e-5
    cosine_period: int = 50
    seed: int = 0
    objective: str = "log_loss"
    hyper: SoftCpHyper = field(default_factory=SoftCpHyper)
    n: int = 19
    l: int = 10
    m: int = 9
    task: str = "qpsk"
    val_tasks: int = 256
    warm_start: str | None = None

    def __post_init__(self):
        if self.l + self.m != self.n:
            raise ValueError(f"l + m must equal n ({self.l}+{self.m} != {self.n})")
        if self.lr_min >= self.lr_init:
            raise ValueError("lr_min must be below lr_init")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.task not in ("qpsk", "gaussian"):
            raise ValueError(f"unknown task family {self.task!r}")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine anneal from lr_init to lr_min over cosine_period steps, then flat."""
    t = min(step, cfg.cosine_period) / cfg.cosine_period
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


def adam_init(params) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def adam_step(
    params,
    grads,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Standard Adam update with bias correction, in place on params."""
    state["step"] += 1
    t = state["step"]
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            mhat = m / (1 - beta1**t)
            vhat = v / (1 - beta2**t)
            p.addcdiv_(mhat, vhat.sqrt().add_(eps), value=-lr)
    return state


def _sample_task(cfg: TrainConfig, num_classes: int, rng):
    if cfg.task == "qpsk":
        return tasks.sample_task(rng)
    sigma = 0.2
    return tasks.sample_gaussian_task(
        rng, num_classes=num_classes, box=2.0, sigma=sigma, min_separation=10 * sigma
    )


def _sample_episode(cfg: TrainConfig, params, rng) -> tasks.Episode:
    if cfg.task == "qpsk":
        return tasks.sample_episode(params, cfg.n, rng)
    return tasks.sample_gaussian_episode(params, cfg.n, rng)


def _epoch_episodes(cfg: TrainConfig, num_classes: int, domain: int, epoch: int,
                    num_tasks: int, reals: int) -> list[tasks.Episode]:
    out = []
    for ti in range(num_tasks):
        rng = tasks.rng_for(cfg.seed, domain, epoch, ti)
        params = _sample_task(cfg, num_classes, rng)
        for _ in range(reals):
            out.append(_sample_episode(cfg, params, rng))
    return out


def _stack(episodes: list[tasks.Episode], dtype):
    cx = torch.as_tensor(np.stack([e.context_x for e in episodes]), dtype=dtype)
    cy = torch.as_tensor(np.stack([e.context_y for e in episodes]), dtype=torch.long)
    qx = torch.as_tensor(np.stack([e.query_x for e in episodes]), dtype=dtype)
    qy = torch.as_tensor([e.query_y for e in episodes], dtype=torch.long)
    return cx, cy, qx, qy


def _neglog(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(p.clamp_min(P_FLOOR))


def fcp_score_matrices(model: IclTransformer, cx, cy, qx, qy=None) -> torch.Tensor:
    """Differentiable (B, K, n+1) augmented score matrices for a batch of episodes."""
    b, n, d = cx.shape
    k = model.cfg.num_classes
    xs = torch.cat([cx, qx.unsqueeze(1)], dim=1)  # (B, n+1, d)
    xs = xs.unsqueeze(1).expand(b, k, n + 1, d).reshape(b * k, n + 1, d)
    cand = torch.arange(k).repeat(b)
    ys = torch.cat([cy, cand.new_zeros(b, 1)], dim=1)
    ys = ys.unsqueeze(1).expand(b, k, n + 1).reshape(b * k, n + 1).clone()
    ys[:, -1] = cand
    probs = forward_augmented_batch(model, xs, ys)  # (B*K, n+1, K)
    picked = probs.gather(2, ys.unsqueeze(-1)).squeeze(-1)  # (B*K, n+1)
    return _neglog(picked).view(b, k, n + 1)


def _loss_log_loss(model, batch, cfg, dtype):
    cx, cy, qx, qy = _stack(batch, dtype)
    probs = model(cx, cy, qx.unsqueeze(1))[:, 0]  # (B, K)
    return _neglog(probs.gather(1, qy.unsqueeze(1))).mean()


def _loss_cp_fcp(model, batch, cfg, dtype):
    cx, cy, qx, qy = _stack(batch, dtype)
    mats = fcp_score_matrices(model, cx, cy, qx, qy)
    return softcp.loss_total(mats, qy, cfg.hyper) / len(batch)


def _loss_cp_scp(model, batch, cfg, dtype):
    cx, cy, qx, qy = _stack(batch, dtype)
    ctx_x, ctx_y = cx[:, : cfg.l], cy[:, : cfg.l]
    cal_x, cal_y = cx[:, cfg.l :], cy[:, cfg.l :]
    queries = torch.cat([cal_x, qx.unsqueeze(1)], dim=1)  # (B, m+1, d)
    probs = model(ctx_x, ctx_y, queries)  # (B, m+1, K)
    cal_scores = _neglog(probs[:, :-1].gather(2, cal_y.unsqueeze(-1)).squeeze(-1))
    test_rows = _neglog(probs[:, -1])
    return softcp.loss_scp_soft(cal_scores, test_rows, qy, cfg.hyper) / len(batch)


_LOSS_FNS = {
    "log_loss": _loss_log_loss,
    "cp_aware_fcp": _loss_cp_fcp,
    "cp_aware_scp": _loss_cp_scp,
}


def validation_metric(model: IclTransformer, cfg: TrainConfig) -> float:
    """Mean val log-loss (log_loss objective) or mean soft set size (cp-aware)."""
    episodes = _epoch_episodes(
        cfg, model.cfg.num_classes, tasks.DOMAIN_VAL, 0, cfg.val_tasks, 1
    )
    dtype = model.dtype
    total = 0.0
    with torch.no_grad():
        for batch in _chunks(episodes, max(cfg.batch_size, 64)):
            cx, cy, qx, qy = _stack(batch, dtype)
            if cfg.objective == "log_loss":
                probs = model(cx, cy, qx.unsqueeze(1))[:, 0]
                total += _neglog(probs.gather(1, qy.unsqueeze(1))).sum().item()
            elif cfg.objective == "cp_aware_fcp":
                mats = fcp_score_matrices(model, cx, cy, qx, qy)
                total += softcp.loss_ineff(mats, cfg.hyper).item()
            else:
                ctx_x, ctx_y = cx[:, : cfg.l], cy[:, : cfg.l]
                queries = torch.cat([cx[:, cfg.l :], qx.unsqueeze(1)], dim=1)
                probs = model(ctx_x, ctx_y, queries)
                cal_y = cy[:, cfg.l :]
                cal = _neglog(probs[:, :-1].gather(2, cal_y.unsqueeze(-1)).squeeze(-1))
                rows = _neglog(probs[:, -1])
                tau = softcp.soft_quantile(cal, cfg.hyper.alpha, cfg.hyper.c_q)
                total += softcp.soft_indicator(
                    rows, tau.unsqueeze(-1), cfg.hyper.kappa
                ).sum().item()
    return total / len(episodes)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train(
    model_cfg: ModelConfig, cfg: TrainConfig, dtype: torch.dtype = torch.float64
):
    """Run meta-training; returns (model with best-validation weights, log records)."""
    if cfg.warm_start:
        model, _ = load_checkpoint(cfg.warm_start, dtype=dtype)
    else:
        model = IclTransformer(model_cfg, dtype=dtype).seed_init(cfg.seed)
    params = list(model.parameters())
    state = adam_init(params)
    loss_fn = _LOSS_FNS[cfg.objective]
    log: list[dict] = []
    best_metric = math.inf
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        episodes = _epoch_episodes(
            cfg, model_cfg.num_classes, tasks.DOMAIN_TRAIN, epoch,
            cfg.tasks_per_epoch, cfg.realizations_per_task,
        )
        epoch_loss = 0.0
        for batch in _chunks(episodes, cfg.batch_size):
            model.zero_grad(set_to_none=True)
            loss = loss_fn(model, batch, cfg, dtype)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (objective {cfg.objective})"
                )
            numerics.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            epoch_loss += loss.item() * len(batch)
        epoch_loss /= len(episodes)
        metric = validation_metric(model, cfg)
        if metric < best_metric:
            best_metric = metric
            best_state = copy.deepcopy(model.state_dict())
        log.append(
            {"epoch": epoch, "loss": epoch_loss, "lr": lr, "val_metric": metric}
        )
    model.load_state_dict(best_state)
    return model, log


def write_log(path, log: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- joint-learning baseline -------------------------------------------------


class JointMlp(nn.Module):
    """Four-layer feedforward classifier shared across tasks (no adaptation)."""

    def __init__(self, input_dim: int = 2, hidden_dim: int = 64, num_classes: int = 4,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, num_classes),
        )
        self.to(dtype)

    @property
    def dtype(self):
        return self.net[0].weight.dtype

    def seed_init(self, seed: int) -> "JointMlp":
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in self.net:
                if isinstance(mod, nn.Linear):
                    numerics.init_uniform_fanin_(mod.weight, gen)
                    mod.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=-1)

    def predict_proba(self, xs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(np.atleast_2d(xs), dtype=self.dtype)).numpy()


def train_jl(cfg: TrainConfig, num_classes: int = 4, input_dim: int = 2,
             hidden_dim: int = 64, dtype: torch.dtype = torch.float64):
    """Train the joint MLP on task-pooled points with log-loss."""
    mlp = JointMlp(input_dim, hidden_dim, num_classes, dtype=dtype).seed_init(cfg.seed)
    params = list(mlp.parameters())
    state = adam_init(params)
    log = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        episodes = _epoch_episodes(
            cfg, num_classes, tasks.DOMAIN_TRAIN, epoch,
            cfg.tasks_per_epoch, cfg.realizations_per_task,
        )
        xs = np.concatenate(
            [np.concatenate([e.context_x, e.query_x[None]]) for e in episodes]
        )
        ys = np.concatenate(
            [np.concatenate([e.context_y, [e.query_y]]) for e in episodes]
        )
        xt = torch.as_tensor(xs, dtype=dtype)
        yt = torch.as_tensor(ys, dtype=torch.long)
        epoch_loss = 0.0
        for lo in range(0, len(yt), 512):
            xb, yb = xt[lo : lo + 512], yt[lo : lo + 512]
            mlp.zero_grad(set_to_none=True)
            probs = mlp(xb)
            loss = _neglog(probs.gather(1, yb.unsqueeze(1))).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite JL loss at epoch {epoch}")
            numerics.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            epoch_loss += loss.item() * len(yb)
        log.append({"epoch": epoch, "loss": epoch_loss / len(yt), "lr": lr})
    return mlp, log


def save_mlp_checkpoint(path, mlp: JointMlp, seed: int) -> None:
    meta = {
        "version": 1,
        "kind": "joint_mlp",
        "config": {
            "input_dim": mlp.input_dim,
            "hidden_dim": mlp.hidden_dim,
            "num_classes": mlp.num_classes,
        },
        "seed": int(seed),
        "objective": "jl_log_loss",
    }
    arrays = {
        f"param/{name}": p.detach().to(torch.float64).numpy()
        for name, p in mlp.named_parameters()
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            **arrays,
        )


def load_mlp_checkpoint(path, dtype: torch.dtype = torch.float64):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("kind") != "joint_mlp":
            raise ValueError(f"not a joint MLP checkpoint: {meta.get('kind')!r}")
        mlp = JointMlp(dtype=dtype, **meta["config"])
        stated = {
            name[len("param/"):]: torch.from_numpy(data[name].copy()).to(dtype)
            for name in data.files if name.startswith("param/")
        }
    mlp.load_state_dict(stated)
    return mlp, meta
