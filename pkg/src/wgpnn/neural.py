"""Embeddings, neighborhood aggregation, GRU history encoder and pseudo-point heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from wgpnn.gp import DTYPE, KernelParams
from wgpnn.graph import HistoryWindow


def softplus(x):
    return torch.logaddexp(x, torch.zeros_like(x))


def relu(x):
    # subgradient 1 at exactly 0 so zero-initialized heads can still learn
    return torch.where(x >= 0, x, torch.zeros_like(x))


def aggregate_neighbors(objects, entity_embeddings: torch.Tensor) -> torch.Tensor:
    """Element-wise mean of the embedding rows in ``objects``."""
    objects = list(objects)
    if not objects:
        raise ValueError("cannot aggregate an empty neighbor set")
    return entity_embeddings[torch.as_tensor(objects, dtype=torch.long)].mean(0)


@dataclass
class PseudoPoints:
    """Decoder output, each field shaped ``(..., C, N)``."""

    tau: torch.Tensor
    y: torch.Tensor
    w: torch.Tensor

    def candidate(self, c):
        return self.tau[..., c, :], self.y[..., c, :], self.w[..., c, :]

    def as_tuple(self):
        return self.tau, self.y, self.w


@dataclass
class WindowBatch:
    """Padded, right-aligned history windows for a batch of queries.

    ``neighbor_ids[k]`` belongs to slot ``segment[k]`` where slot
    ``b * M + l`` is step ``l`` of query ``b``.
    """

    subjects: torch.Tensor  # (B,)
    predicates: torch.Tensor  # (B,)
    mask: torch.Tensor  # (B, M) bool
    neighbor_ids: torch.Tensor  # (K,)
    segment: torch.Tensor  # (K,)
    counts: torch.Tensor  # (B * M,)

    @property
    def size(self):
        return self.subjects.shape[0]

    @property
    def steps(self):
        return self.mask.shape[1]

    @classmethod
    def from_windows(cls, windows: list[HistoryWindow], M: int):
        B = len(windows)
        mask = np.zeros((B, M), dtype=bool)
        ids, seg = [], []
        counts = np.zeros(B * M, dtype=np.float64)
        for b, win in enumerate(windows):
            offset = M - len(win.entries)
            for l, (_, objs) in enumerate(win.entries[-M:]):
                slot = b * M + offset + l
                mask[b, offset + l] = True
                ids.extend(objs)
                seg.extend([slot] * len(objs))
                counts[slot] = len(objs)
        return cls(
            subjects=torch.tensor([w.pair[0] for w in windows], dtype=torch.long),
            predicates=torch.tensor([w.pair[1] for w in windows], dtype=torch.long),
            mask=torch.from_numpy(mask),
            neighbor_ids=torch.tensor(ids, dtype=torch.long),
            segment=torch.tensor(seg, dtype=torch.long),
            counts=torch.from_numpy(counts),
        )


class WGPNN(nn.Module):
    """Parameter container and forward pass up to the pseudo-points.

    ``num_predicates`` counts reciprocal predicates too. Candidates are all
    entities, so every head maps the hidden state to ``num_points * num_entities``
    outputs laid out candidate-major.
    """

    def __init__(self, num_entities, num_predicates, dim=32, num_points=2, hidden=None, seed=0, gamma=1.0):
        super().__init__()
        hidden = hidden or dim
        self.num_entities = num_entities
        self.num_predicates = num_predicates
        self.dim = dim
        self.hidden = hidden
        self.num_points = num_points
        gen = torch.Generator().manual_seed(int(seed))

        def uniform(*shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))

        out = num_points * num_entities
        self.entity_embeddings = uniform(num_entities, dim, fan_in=dim)
        self.predicate_embeddings = uniform(num_predicates, dim, fan_in=dim)
        # GRU gates stacked as (reset, update, new)
        self.gru_w_ih = uniform(3 * hidden, 3 * dim, fan_in=hidden)
        self.gru_w_hh = uniform(3 * hidden, hidden, fan_in=hidden)
        self.gru_b_ih = zeros(3 * hidden)
        self.gru_b_hh = zeros(3 * hidden)
        self.tau_weight = uniform(out, hidden, fan_in=hidden)
        self.tau_bias = zeros(out)
        self.logit_weight = uniform(out, hidden, fan_in=hidden)
        self.logit_bias = zeros(out)
        self.weight_weight = uniform(out, hidden, fan_in=hidden)
        self.weight_bias = zeros(out)
        # gamma = softplus(gamma_raw)
        self.gamma_raw = nn.Parameter(torch.tensor(math.log(math.expm1(gamma)), dtype=DTYPE))

    @property
    def gamma(self):
        return softplus(self.gamma_raw)

    def kernel_params(self, query_weight=1.0, jitter=1e-8):
        return KernelParams(gamma=self.gamma, query_weight=query_weight, jitter=jitter)

    def cell(self, x, h):
        gi = x @ self.gru_w_ih.T + self.gru_b_ih
        gh = h @ self.gru_w_hh.T + self.gru_b_hh
        i_r, i_z, i_n = gi.chunk(3, -1)
        h_r, h_z, h_n = gh.chunk(3, -1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1 - z) * n + z * h

    def zero_state(self, *batch):
        return torch.zeros(*batch, self.hidden, dtype=DTYPE)

    def step_input(self, subject, predicate, neighbors):
        return torch.cat(
            [self.entity_embeddings[subject], self.predicate_embeddings[predicate], neighbors], -1
        )

    def encode_batch(self, batch: WindowBatch):
        B, M = batch.size, batch.steps
        agg = torch.zeros(B * M, self.dim, dtype=DTYPE)
        if batch.neighbor_ids.numel():
            agg = agg.index_add(0, batch.segment, self.entity_embeddings[batch.neighbor_ids])
        agg = (agg / batch.counts.clamp(min=1.0)[:, None]).reshape(B, M, self.dim)
        e_s = self.entity_embeddings[batch.subjects]
        e_p = self.predicate_embeddings[batch.predicates]
        h = self.zero_state(B)
        for l in range(M):
            active = batch.mask[:, l]
            if not bool(active.any()):
                continue
            x = torch.cat([e_s, e_p, agg[:, l]], -1)
            h = torch.where(active[:, None], self.cell(x, h), h)
        return h

    def pseudo_points(self, h) -> PseudoPoints:
        shape = h.shape[:-1] + (self.num_entities, self.num_points)
        tau = softplus(h @ self.tau_weight.T + self.tau_bias).reshape(shape)
        y = relu(h @ self.logit_weight.T + self.logit_bias).reshape(shape)
        w = torch.sigmoid(h @ self.weight_weight.T + self.weight_bias).reshape(shape)
        return PseudoPoints(tau, y, w)

    def forward(self, batch: WindowBatch) -> PseudoPoints:
        return self.pseudo_points(self.encode_batch(batch))


def encode_history(model: WGPNN, window: HistoryWindow, state=None):
    """Run the GRU over ``window`` one entry at a time, starting from ``state`` (zeros by default)."""
    s, p = window.pair
    h = model.zero_state() if state is None else state
    for _, objs in window.entries:
        x = model.step_input(s, p, aggregate_neighbors(objs, model.entity_embeddings))
        h = model.cell(x, h)
    return h


def generate_pseudo_points(model: WGPNN, state) -> PseudoPoints:
    return model.pseudo_points(state)
