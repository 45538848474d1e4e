"""Recurrent latent dynamics: deterministic history + stochastic state.

The latent state splits into a deterministic path h, advanced by a GRU cell
from the previous (h, s), and a stochastic diagonal-Gaussian state s.  Two
heads parameterise s: the prior sees (h, previous action) only, the
posterior additionally sees the current observation embedding.  Actions
enter through a small dense embedding inside each head; the GRU itself only
consumes (h, s).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian with strictly positive stddev, event on the last dim."""

    mean: torch.Tensor
    stddev: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.stddev.shape:
            raise ValueError("mean and stddev must share a shape")
        if not torch.all(self.stddev > 0):
            raise ValueError("stddev must be strictly positive")

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        """Reparameterised sample mean + stddev * eps, eps ~ N(0, I)."""
        eps = torch.randn(
            self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device
        )
        return self.mean + self.stddev * eps

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.stddev.detach())

    @property
    def event_dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class LatentState:
    """h: deterministic history, s: stochastic sample, s_dist: its distribution."""

    h: torch.Tensor
    s: torch.Tensor
    s_dist: DiagonalGaussian


class _GaussianHead(nn.Module):
    """MLP emitting a DiagonalGaussian; stddev via softplus plus a floor."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, min_stddev: float) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ELU(),
            nn.Linear(hidden_dim, 2 * out_dim),
        )
        self.min_stddev = min_stddev

    def forward(self, x: torch.Tensor) -> DiagonalGaussian:
        mean, raw = self.net(x).chunk(2, dim=-1)
        return DiagonalGaussian(mean, nn.functional.softplus(raw) + self.min_stddev)


class LatentDynamics(nn.Module):
    def __init__(
        self,
        h_dim: int = 256,
        s_dim: int = 64,
        action_dim: int = 2,
        embedding_dim: int = 512,
        action_embed_dim: int = 16,
        gru_input_dim: int = 128,
        prior_hidden: int = 128,
        posterior_hidden: int = 256,
        min_stddev: float = 1e-3,
    ) -> None:
        super().__init__()
        self.h_dim = h_dim
        self.s_dim = s_dim
        self.action_dim = action_dim
        self.pre_gru = nn.Sequential(nn.Linear(s_dim, gru_input_dim), nn.ELU())
        self.cell = nn.GRUCell(gru_input_dim, h_dim)
        self.prior_action_embed = nn.Sequential(nn.Linear(action_dim, action_embed_dim), nn.ELU())
        self.posterior_action_embed = nn.Sequential(nn.Linear(action_dim, action_embed_dim), nn.ELU())
        self.prior_head = _GaussianHead(h_dim + action_embed_dim, prior_hidden, s_dim, min_stddev)
        self.posterior_head = _GaussianHead(
            h_dim + action_embed_dim + embedding_dim, posterior_hidden, s_dim, min_stddev
        )

    def _param(self) -> torch.Tensor:
        return self.cell.weight_hh

    def initial_state(
        self,
        batch_shape: tuple[int, ...] = (),
        deterministic: bool = False,
        generator: torch.Generator | None = None,
    ) -> LatentState:
        """Start of sequence: h = 0 and s ~ N(0, I) (or s = 0 if deterministic)."""
        p = self._param()
        mean = p.new_zeros(batch_shape + (self.s_dim,))
        dist = DiagonalGaussian(mean, torch.ones_like(mean))
        s = mean if deterministic else dist.sample(generator)
        return LatentState(h=p.new_zeros(batch_shape + (self.h_dim,)), s=s, s_dist=dist)

    def deterministic_step(self, prev: LatentState) -> torch.Tensor:
        """h_next = f(h, s); no action input on the deterministic path."""
        x = self.pre_gru(prev.s)
        flat_h = prev.h.reshape(-1, self.h_dim)
        h_next = self.cell(x.reshape(-1, x.shape[-1]), flat_h)
        return h_next.reshape(prev.h.shape)

    def prior(self, h: torch.Tensor, a_prev: torch.Tensor) -> DiagonalGaussian:
        return self.prior_head(torch.cat([h, self.prior_action_embed(a_prev)], dim=-1))

    def posterior(self, h: torch.Tensor, a_prev: torch.Tensor, x: torch.Tensor) -> DiagonalGaussian:
        inp = torch.cat([h, self.posterior_action_embed(a_prev), x], dim=-1)
        return self.posterior_head(inp)

    def imagine(
        self,
        state: LatentState,
        policy,
        horizon: int,
        generator: torch.Generator | None = None,
    ) -> tuple[list[LatentState], list[torch.Tensor]]:
        """Roll the prior forward without observations.

        Each step predicts an action with `policy(h, s)`, advances h, samples
        the next s from the prior conditioned on that action.  Returns the
        `horizon` new states and the actions that produced them.  Consumes
        exactly one Gaussian draw per step, so imagining k then m steps under
        one RNG stream matches imagining k + m.
        """
        if horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        states: list[LatentState] = []
        actions: list[torch.Tensor] = []
        for _ in range(horizon):
            a = policy(state.h, state.s)
            h_next = self.deterministic_step(state)
            dist = self.prior(h_next, a)
            state = LatentState(h=h_next, s=dist.sample(generator), s_dist=dist)
            states.append(state)
            actions.append(a)
        return states, actions
