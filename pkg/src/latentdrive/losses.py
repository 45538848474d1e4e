"""Training objective: reconstruction likelihoods plus a balanced KL.

The sequence loss rolls the latent dynamics over a window of frames with
observation dropout (each step keeps the posterior sample with probability
1 - p_drop, otherwise falls back to the prior sample), reconstructs BeV
labels / actions / optionally images from every state, and regularises the
posterior towards the prior with a KL whose gradient is split between the
two sides.

Reduction conventions: sum over channels / vector components, mean over
batch and time.  The BeV term keeps only the hardest k fraction of pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .dynamics import DiagonalGaussian

VEHICLE_CLASS = 3  # BeV label id carrying instance offsets


@dataclass
class LossWeights:
    action: float = 1.0
    segmentation: float = 0.1
    seg_top_k: float = 0.25
    image: float = 0.0
    instance: float = 0.1
    instance_center: float = 200.0
    instance_offset: float = 0.1
    kl: float = 1e-3
    kl_balance: float = 0.75
    p_drop: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 < self.seg_top_k <= 1.0:
            raise ValueError("seg_top_k must lie in (0, 1]")
        if not 0.0 <= self.kl_balance <= 1.0:
            raise ValueError("kl_balance must lie in [0, 1]")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")


def kl_diag_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the event dim."""
    var_p = p.stddev.square()
    term = torch.log(p.stddev / q.stddev)
    term = term + (q.stddev.square() + (q.mean - p.mean).square()) / (2.0 * var_p)
    return (term - 0.5).sum(dim=-1)


def kl_balanced(q: DiagonalGaussian, p: DiagonalGaussian, alpha: float) -> torch.Tensor:
    """KL with the gradient split: alpha drives the prior towards the
    (stopped) posterior, 1 - alpha the posterior towards the (stopped) prior.
    The forward value equals plain kl_diag_gaussian(q, p)."""
    return alpha * kl_diag_gaussian(q.detach(), p) + (1.0 - alpha) * kl_diag_gaussian(q, p.detach())


def action_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Laplace(scale 1) negative log likelihood up to its constant: L1 summed
    over action components."""
    return (pred - target).abs().sum(dim=-1)


def bev_nll(logits: torch.Tensor, labels: torch.Tensor, top_k: float = 1.0) -> torch.Tensor:
    """Per-pixel cross entropy, averaged over the k fraction of hardest pixels.

    logits: (..., C, H, W), labels: (..., H, W) integer classes.  top_k = 1
    reduces to the plain mean.  Returns one value per leading element.
    """
    lead = labels.shape[:-2]
    n = labels.shape[-2] * labels.shape[-1]
    flat_logits = logits.reshape(-1, logits.shape[-3], n)
    flat_labels = labels.reshape(-1, n)
    ce = torch.nn.functional.cross_entropy(flat_logits, flat_labels, reduction="none")
    k = max(1, int(round(top_k * n)))
    worst = ce.topk(k, dim=-1).values
    return worst.mean(dim=-1).reshape(lead)


def image_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian likelihood: half squared error summed over
    channels, averaged over pixels.  Shapes (..., C, H, W)."""
    sq = (pred - target).square().sum(dim=-3)
    return 0.5 * sq.mean(dim=(-2, -1))


def instance_center_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error on the centre heatmap, (..., 1, H, W) -> (...,)."""
    return (pred - target).square().sum(dim=-3).mean(dim=(-2, -1))


def instance_offset_loss(
    pred: torch.Tensor, target: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """L1 on centroid offsets, masked to vehicle pixels; zero when none.

    pred/target: (..., 2, H, W), labels: (..., H, W).
    """
    mask = (labels == VEHICLE_CLASS).to(pred.dtype)
    err = (pred - target).abs().sum(dim=-3) * mask
    denom = mask.sum(dim=(-2, -1)).clamp(min=1.0)
    return err.sum(dim=(-2, -1)) / denom


def sample_dropout_mask(
    shape: tuple[int, ...], p_drop: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Boolean mask, True = keep the posterior sample at that step.

    Each entry is an independent Bernoulli(1 - p_drop) draw, so consecutive
    prior-run lengths are geometric with success probability 1 - p_drop.
    """
    if p_drop == 0.0:
        return torch.ones(shape, dtype=torch.bool)
    u = torch.rand(shape, generator=generator)
    return u >= p_drop


@dataclass
class ElboBreakdown:
    """Weighted total plus unweighted components; tensors keep the graph."""

    total: torch.Tensor
    action_nll: torch.Tensor
    bev_nll: torch.Tensor
    image_nll: torch.Tensor
    instance_center: torch.Tensor
    instance_offset: torch.Tensor
    kl_value: torch.Tensor
    kl_balanced: torch.Tensor
    posterior_mask: torch.Tensor = field(repr=False)

    def scalars(self) -> dict[str, float]:
        out = {}
        for name in (
            "total",
            "action_nll",
            "bev_nll",
            "image_nll",
            "instance_center",
            "instance_offset",
            "kl_value",
            "kl_balanced",
        ):
            out[name] = float(getattr(self, name).detach())
        return out


def sequence_elbo_loss(
    batch,
    model,
    weights: LossWeights,
    generator: torch.Generator | None = None,
) -> ElboBreakdown:
    """Roll the model over a window of frames and score the evidence bound.

    batch: FrameBatch with images (B,T,3,H,W), routes (B,T,1,Hr,Wr),
    speeds (B,T), actions (B,T,2) (the action executed at each step),
    bev_labels (B,T,Hb,Wb) and optional instance targets.  Needs T >= 2 to
    exercise the transition model.

    Stepping: h_1 = 0 and the first KL target is N(0, I); afterwards
    h_t = f(h_{t-1}, s_{t-1}), the prior sees the policy's own action
    estimate from step t-1, the posterior sees the executed action a_{t-1}
    and the embedding of frame t.  The posterior's sample is kept with
    probability 1 - p_drop, otherwise the prior's.
    """
    images = batch.images
    b, t_len = images.shape[:2]
    if t_len < 2:
        raise ValueError(f"sequences must have T >= 2, got {t_len}")

    x = model.encoder(
        images.reshape(b * t_len, *images.shape[2:]),
        batch.routes.reshape(b * t_len, *batch.routes.shape[2:]),
        batch.speeds.reshape(b * t_len),
    ).reshape(b, t_len, -1)

    keep_posterior = sample_dropout_mask((b, t_len), weights.p_drop, generator)
    keep_f = keep_posterior.to(images.dtype)

    dyn = model.dynamics
    zeros_action = batch.actions.new_zeros(b, dyn.action_dim)
    h = x.new_zeros(b, dyn.h_dim)
    prior_t = DiagonalGaussian(x.new_zeros(b, dyn.s_dim), x.new_ones(b, dyn.s_dim))

    hs, ss, policy_actions = [], [], []
    kl_vals, kl_bals = [], []
    s_prev = None
    for t in range(t_len):
        if t > 0:
            state = LatentStateLite(h, s_prev)
            h = dyn.deterministic_step(state)
            prior_t = dyn.prior(h, policy_actions[-1])
        a_prev = batch.actions[:, t - 1] if t > 0 else zeros_action
        post_t = dyn.posterior(h, a_prev, x[:, t])
        kl_vals.append(kl_diag_gaussian(post_t, prior_t))
        kl_bals.append(kl_balanced(post_t, prior_t, weights.kl_balance))
        keep = keep_f[:, t].unsqueeze(-1)
        s_t = keep * post_t.sample(generator) + (1.0 - keep) * prior_t.sample(generator)
        a_hat = model.predict_action(h, s_t)
        hs.append(h)
        ss.append(s_t)
        policy_actions.append(a_hat)
        s_prev = s_t

    h_all = torch.stack(hs, dim=1)
    s_all = torch.stack(ss, dim=1)
    a_hat_all = torch.stack(policy_actions, dim=1)

    action_term = action_nll(a_hat_all, batch.actions).mean()
    kl_value = torch.stack(kl_vals, dim=1).mean()
    kl_bal = torch.stack(kl_bals, dim=1).mean()

    h_flat = h_all.reshape(b * t_len, -1)
    s_flat = s_all.reshape(b * t_len, -1)
    bev = model.decode_bev(h_flat, s_flat)
    labels = batch.bev_labels.reshape(b * t_len, *batch.bev_labels.shape[2:])
    bev_term = bev_nll(bev.logits, labels, weights.seg_top_k).mean()

    zero = x.new_zeros(())
    center_term, offset_term = zero, zero
    if bev.center is not None and batch.centers is not None:
        centers = batch.centers.reshape(b * t_len, *batch.centers.shape[2:])
        offsets = batch.offsets.reshape(b * t_len, *batch.offsets.shape[2:])
        center_term = instance_center_loss(bev.center, centers).mean()
        offset_term = instance_offset_loss(bev.offset, offsets, labels).mean()

    image_term = zero
    if weights.image > 0:
        pred = model.decode_image(h_flat, s_flat)
        targets = images.reshape(b * t_len, *images.shape[2:])
        image_term = image_nll(pred, targets).mean()

    total = (
        weights.action * action_term
        + weights.segmentation * bev_term
        + weights.image * image_term
        + weights.instance * (weights.instance_center * center_term + weights.instance_offset * offset_term)
        + weights.kl * kl_bal
    )
    return ElboBreakdown(
        total=total,
        action_nll=action_term,
        bev_nll=bev_term,
        image_nll=image_term,
        instance_center=center_term,
        instance_offset=offset_term,
        kl_value=kl_value,
        kl_balanced=kl_bal,
        posterior_mask=keep_posterior,
    )


@dataclass
class LatentStateLite:
    """Minimal (h, s) pair for stepping the GRU inside the loss loop."""

    h: torch.Tensor
    s: torch.Tensor


def geometric_run_length_pmf(p_drop: float, max_k: int) -> torch.Tensor:
    """P(run of k consecutive prior steps before a posterior step),
    k = 0 .. max_k-1: (1 - p_drop) * p_drop**k."""
    k = torch.arange(max_k, dtype=torch.float64)
    return (1.0 - p_drop) * torch.pow(torch.tensor(p_drop, dtype=torch.float64), k)


def laplace_nll_reference(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Exact -log Laplace(target; pred, 1): action_nll plus d*log 2."""
    d = pred.shape[-1]
    return action_nll(pred, target) + d * math.log(2.0)
