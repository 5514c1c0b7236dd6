"""GRU cell and softmax attention pooling over the hidden-state sequence."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Layer, glorot_uniform
from .rng import SeededRng
from .tensor import Tensor


def _orthogonal(rng: SeededRng, d: int, dtype) -> np.ndarray:
    a = rng.normal_array((d, d), dtype=np.float64)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.astype(dtype)


class GruCell(Layer):
    """Update/reset-gate recurrent cell.

    z = sigmoid(W_zx x + W_zh h + b_z)
    r = sigmoid(W_rx x + W_rh h + b_r)
    h' = z * h + (1 - z) * tanh(W_hx x + W_hr (r * h) + b_h)
    """

    def __init__(self, in_dim: int, hidden: int, rng: SeededRng,
                 recurrent_init: str = "glorot", dtype=np.float32):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden

        def inp():
            return Tensor(glorot_uniform(rng, (hidden, in_dim), in_dim, hidden, dtype),
                          requires_grad=True)

        def rec():
            if recurrent_init == "orthogonal":
                w = _orthogonal(rng, hidden, dtype)
            elif recurrent_init == "glorot":
                w = glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype)
            else:
                raise T.ContractError(f"unknown recurrent init {recurrent_init!r}")
            return Tensor(w, requires_grad=True)

        def bias():
            return Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)

        self.W_zx, self.W_zh, self.b_z = inp(), rec(), bias()
        self.W_rx, self.W_rh, self.b_r = inp(), rec(), bias()
        self.W_hx, self.W_hr, self.b_h = inp(), rec(), bias()

    def step(self, x_t: Tensor, h_prev: Tensor) -> Tensor:
        if x_t.shape[1] != self.in_dim or h_prev.shape[1] != self.hidden:
            raise T.ShapeError(
                f"gru_step: got x {x_t.shape}, h {h_prev.shape} for in={self.in_dim}, d={self.hidden}")
        z = T.sigmoid(T.add(T.linear(x_t, self.W_zx, self.b_z), T.linear(h_prev, self.W_zh)))
        r = T.sigmoid(T.add(T.linear(x_t, self.W_rx, self.b_r), T.linear(h_prev, self.W_rh)))
        cand = T.tanh(T.add(T.linear(x_t, self.W_hx, self.b_h),
                            T.linear(T.mul(r, h_prev), self.W_hr)))
        return T.add(T.mul(z, h_prev), T.mul(T.affine(z, -1.0, 1.0), cand))

    def unroll(self, sequence: list[Tensor]) -> Tensor:
        """Run the cell left-to-right from h0 = 0; returns H of shape (n, T, d)."""
        if not sequence:
            raise T.ContractError("gru_unroll: empty sequence")
        n = sequence[0].shape[0]
        h = Tensor(np.zeros((n, self.hidden), dtype=sequence[0].dtype))
        states = []
        for x_t in sequence:
            h = self.step(x_t, h)
            states.append(h)
        return T.stack_time(states)


class AttentionParams(Layer):
    """Learned softmax pooling of per-timestamp hidden states."""

    def __init__(self, hidden: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        self.W_a = Tensor(glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype),
                          requires_grad=True)
        self.b_a = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.u_a = Tensor(glorot_uniform(rng, (hidden,), hidden, 1, dtype),
                          requires_grad=True)

    def pool(self, h_all: Tensor) -> tuple[Tensor, Tensor]:
        """(n, T, d) -> pooled (n, d) and weights (n, T).

        v = tanh(H W_a^T + b_a); scores = v . u_a; weights = softmax over T;
        pooled = sum_t weights[t] * H[:, t, :].
        """
        n, t_len, d = h_all.shape
        flat = T.reshape(h_all, (n * t_len, d))
        v = T.tanh(T.linear(flat, self.W_a, self.b_a))
        u_col = T.reshape(self.u_a, (d, 1))
        scores = T.reshape(T.matmul(v, u_col), (n, t_len))
        weights = T.softmax_lastaxis(scores)
        parts = []
        for t_idx in range(t_len):
            h_t = T.select_time(h_all, t_idx)
            w_t = T.select_time(T.reshape(weights, (n, t_len, 1)), t_idx)
            parts.append(T.scale_rows(h_t, T.reshape(w_t, (n,))))
        pooled = parts[0]
        for p in parts[1:]:
            pooled = T.add(pooled, p)
        return pooled, weights
