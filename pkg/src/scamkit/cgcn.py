"""Conservative graph reasoning over a target node and multi-granularity nodes.

Inter-attention edges mix flattened node features; gated updates run m steps
with a fixation refine layer applied to every node after each step.  All
Hadamard/sigmoid work in Eq-space happens on flattened (C, h*w) matrices and
is reshaped back afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    channel_mean,
    conv2d,
    expand_channel,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax_rows,
    transpose2d,
)

DEFAULT_TD = 0.8
DEFAULT_TR = 0.6
DEFAULT_STEPS = 3
DEFAULT_MG_NODES = 2


@dataclass
class GraphState:
    """Target node + n multi-granularity node tensors, all (C,h,w)."""

    h_ta: Tensor
    h_mg: list
    step: int = 0

    def __post_init__(self):
        shape = self.h_ta.shape
        if len(self.h_mg) < 1:
            raise ShapeError("graph needs at least one multi-granularity node")
        for h in self.h_mg:
            if h.shape != shape:
                raise ShapeError(f"node shape mismatch: {h.shape} vs {shape}")


def frl_mask(h: Tensor, td: float = DEFAULT_TD) -> np.ndarray:
    """Binary redundancy mask: 1 where the channel mean is strictly below
    max(channel mean) * td.  Detached from the tape."""
    if not 0.0 < td <= 1.0:
        raise ValueError(f"td must be in (0,1], got {td}")
    cm = h.data.mean(axis=0)
    return (cm.max() * td - cm > 0.0).astype(np.float64)


def frl_refine(h: Tensor, mask: np.ndarray, tr: float = DEFAULT_TR) -> Tensor:
    """Attenuate low-response (masked) positions strictly more than the rest."""
    if not 0.0 < tr <= 1.0:
        raise ValueError(f"tr must be in (0,1], got {tr}")
    c = h.shape[0]
    sig = sigmoid(channel_mean(h))
    factor = add(mul(sig, Tensor(tr * mask)), mul(sig, Tensor(1.0 - mask)))
    scaled = mul(h, expand_channel(factor, c))
    return mul(add(scaled, h), Tensor(0.5))


def _flat(h: Tensor) -> Tensor:
    c = h.shape[0]
    return reshape(h, (c, h.shape[1] * h.shape[2]))


class CGCN:
    """m-step semantic reasoning with per-stage fixation refinement."""

    def __init__(self, rng: np.random.Generator, channels: int,
                 td: float = DEFAULT_TD, tr: float = DEFAULT_TR,
                 share_branch_weights: bool = False):
        self.channels = channels
        self.td = td
        self.tr = tr
        limit = np.sqrt(3.0 / channels)
        self.wa = Tensor(rng.uniform(-limit, limit, (channels, channels, 1, 1)),
                         requires_grad=True)
        self.ba = Tensor(np.zeros(channels), requires_grad=True)
        if share_branch_weights:
            self.wb, self.bb = self.wa, self.ba
        else:
            self.wb = Tensor(rng.uniform(-limit, limit, (channels, channels, 1, 1)),
                             requires_grad=True)
            self.bb = Tensor(np.zeros(channels), requires_grad=True)
        self.shared = share_branch_weights

    def params(self):
        out = [("cgcn.wa", self.wa), ("cgcn.ba", self.ba)]
        if not self.shared:
            out += [("cgcn.wb", self.wb), ("cgcn.bb", self.bb)]
        return out

    def interattention(self, ha: Tensor, hb: Tensor) -> Tensor:
        """Consistency matrix [R(conv(ha))]^T (x) [R(conv(hb))], (h*w, h*w)."""
        if ha.shape != hb.shape:
            raise ShapeError(f"interattention shape mismatch: {ha.shape} vs {hb.shape}")
        qa = _flat(add(conv2d(ha, self.wa), self.ba))
        qb = _flat(add(conv2d(hb, self.wb), self.bb))
        return matmul(transpose2d(qa), qb)

    def edge(self, ha: Tensor, hb: Tensor) -> Tensor:
        """Row-stochastic edge weights from a to b."""
        return softmax_rows(transpose2d(self.interattention(ha, hb)))

    def update_target(self, state: GraphState, edges_ta_mg: list) -> Tensor:
        shape = state.h_ta.shape
        msg = None
        for h_mg, e in zip(state.h_mg, edges_ta_mg):
            term = matmul(_flat(h_mg), e)
            msg = term if msg is None else add(msg, term)
        gated = mul(_flat(state.h_ta), sigmoid(msg))
        return reshape(gated, shape)

    def update_mg(self, state: GraphState, i: int, edges_mg_ta: list,
                  edges_mg_mg: dict) -> Tensor:
        shape = state.h_ta.shape
        msg = matmul(_flat(state.h_ta), edges_mg_ta[i])
        for j, h_other in enumerate(state.h_mg):
            if j == i:
                continue
            msg = add(msg, matmul(_flat(h_other), edges_mg_mg[(i, j)]))
        gated = mul(_flat(state.h_mg[i]), sigmoid(msg))
        return reshape(gated, shape)

    def step(self, state: GraphState, frl: bool = True) -> GraphState:
        n = len(state.h_mg)
        edges_ta_mg = [self.edge(state.h_ta, h) for h in state.h_mg]
        edges_mg_ta = [self.edge(h, state.h_ta) for h in state.h_mg]
        edges_mg_mg = {}
        for i in range(n):
            for j in range(n):
                if i != j:
                    edges_mg_mg[(i, j)] = self.edge(state.h_mg[i], state.h_mg[j])
        new_ta = self.update_target(state, edges_ta_mg)
        new_mg = [self.update_mg(state, i, edges_mg_ta, edges_mg_mg) for i in range(n)]
        if frl:
            new_ta = frl_refine(new_ta, frl_mask(new_ta, self.td), self.tr)
            new_mg = [frl_refine(h, frl_mask(h, self.td), self.tr) for h in new_mg]
        return GraphState(h_ta=new_ta, h_mg=new_mg, step=state.step + 1)

    def reason(self, state: GraphState, m: int = DEFAULT_STEPS, frl: bool = True) -> GraphState:
        if m < 1:
            raise ValueError(f"reasoning steps must be >= 1, got {m}")
        for _ in range(m):
            state = self.step(state, frl=frl)
        return state
