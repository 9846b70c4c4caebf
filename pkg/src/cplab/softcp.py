"""Differentiable surrogates for conformal set construction.

Replaces the order-statistic quantile with a pinball-weighted softmin and
the hard inclusion indicator with a sigmoid, yielding a training loss whose
minimization shrinks prediction sets while keeping the true label inside.

The soft indicator uses exponent (tau - r) / kappa so that kappa -> 0
recovers the hard indicator of the inclusion condition r <= tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class SoftCpHyper:
    alpha: float = 0.1
    c_q: float = 0.1  # soft-quantile smoothness
    kappa: float = 0.1  # indicator sharpness
    lam: float = 1.0  # weight of the true-label inclusion term

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0,1)")
        if self.c_q <= 0 or self.kappa <= 0:
            raise ValueError("c_q and kappa must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


def pinball(z: torch.Tensor, zs: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * sum_j [z - z_j]_+ + (1 - alpha) * sum_j [z_j - z]_+.

    z broadcasts against zs' leading dims; the sum runs over zs' last axis.
    """
    d = z.unsqueeze(-1) - zs
    return alpha * torch.relu(d).sum(-1) + (1.0 - alpha) * torch.relu(-d).sum(-1)


def soft_quantile(zs: torch.Tensor, alpha: float, c_q: float) -> torch.Tensor:
    """Softmin-weighted (1-alpha)-quantile over the last axis of zs.

    Each element is weighted by exp(-pinball(z_j; zs) / c_q), normalized with
    max-subtraction stabilization; the result lies in [min zs, max zs] and is
    differentiable in every z_j.  c_q -> 0 selects the pinball argmin.
    """
    if zs.shape[-1] == 0:
        raise ValueError("soft_quantile of an empty set")
    rho = pinball(zs, zs.unsqueeze(-2), alpha)  # (..., n): pinball of each z_j
    w = torch.softmax(-rho / c_q, dim=-1)
    return (zs * w).sum(-1)


def soft_indicator(r: torch.Tensor, tau: torch.Tensor, kappa: float) -> torch.Tensor:
    """Sigmoid relaxation of 1(r <= tau); strictly decreasing in r, 0.5 at r = tau."""
    return torch.sigmoid((tau - r) / kappa)


def loss_ineff(score_matrices: torch.Tensor, hyper: SoftCpHyper) -> torch.Tensor:
    """Soft expected set size: sum over tasks and labels of the soft inclusion.

    score_matrices: (T, K, n+1), last column = test scores.
    """
    if score_matrices.dim() != 3:
        raise ValueError("expected (T, K, n+1) score matrices")
    tau = soft_quantile(score_matrices, hyper.alpha, hyper.c_q)  # (T, K)
    return soft_indicator(score_matrices[..., -1], tau, hyper.kappa).sum()


def loss_class(
    score_matrices: torch.Tensor, true_labels: torch.Tensor, hyper: SoftCpHyper
) -> torch.Tensor:
    """Penalty for excluding the true label: sum_t (1 - soft inclusion at y_t)."""
    t, k, _ = score_matrices.shape
    if (true_labels < 0).any() or (true_labels >= k).any():
        raise ValueError("true label out of range")
    rows = score_matrices[torch.arange(t), true_labels]  # (T, n+1)
    tau = soft_quantile(rows, hyper.alpha, hyper.c_q)
    return (1.0 - soft_indicator(rows[:, -1], tau, hyper.kappa)).sum()


def loss_total(
    score_matrices: torch.Tensor, true_labels: torch.Tensor, hyper: SoftCpHyper
) -> torch.Tensor:
    """Combined objective: loss_ineff + lam * loss_class."""
    return loss_ineff(score_matrices, hyper) + hyper.lam * loss_class(
        score_matrices, true_labels, hyper
    )


def loss_scp_soft(
    cal_scores: torch.Tensor,
    test_rows: torch.Tensor,
    true_labels: torch.Tensor,
    hyper: SoftCpHyper,
) -> torch.Tensor:
    """Split-CP variant: soft threshold from the calibration scores only.

    cal_scores (T, m), test_rows (T, K) per-label test scores, true_labels (T,).
    """
    if cal_scores.dim() == 1:
        cal_scores = cal_scores.unsqueeze(0)
        test_rows = test_rows.unsqueeze(0)
        true_labels = torch.atleast_1d(torch.as_tensor(true_labels))
    tau = soft_quantile(cal_scores, hyper.alpha, hyper.c_q)  # (T,)
    incl = soft_indicator(test_rows, tau.unsqueeze(-1), hyper.kappa)  # (T, K)
    ineff = incl.sum()
    t = len(true_labels)
    cls = (1.0 - incl[torch.arange(t), true_labels]).sum()
    return ineff + hyper.lam * cls
