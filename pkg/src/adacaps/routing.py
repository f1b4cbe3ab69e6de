"""Routing algorithms mapping votes to parent capsules.

Votes arrive as a tensor of shape (batch, num_in, num_out, dim_out): the
prediction each low-layer capsule i makes for each high-layer capsule j.
Three algorithms are provided:

* ``dynamic_routing`` — the agreement-iteration baseline with coupling
  coefficients c_ij (softmax over the output axis).
* ``adaptive_routing`` — no coupling coefficients; votes are summed, squashed,
  and each vote is pulled toward the consensus for the next iteration.
* ``adaptive_lambda`` — the closed one-pass form: squash(lambda * sum of votes).

By default dynamic routing treats the coupling coefficients as constants in
the backward pass (only the final weighted sum is differentiated), so c_ij
multiplies the gradient exactly; ``differentiate_coupling=True`` records the
whole iteration on the tape instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("dynamic", "adaptive", "adaptive-lambda")


@dataclass(frozen=True)
class RoutingSpec:
    """Tagged choice of routing algorithm.

    ``iterations`` applies to dynamic and adaptive; ``lambda_`` to
    adaptive-lambda. Any positive real lambda is accepted.
    """
    variant: str = "adaptive-lambda"
    iterations: int = 3
    lambda_: float = 2.0
    differentiate_coupling: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown routing variant {self.variant!r}; "
                             f"expected one of {VARIANTS}")
        if self.variant in ("dynamic", "adaptive") and self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.variant == "adaptive-lambda" and not self.lambda_ > 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_}")


@dataclass
class CouplingState:
    """Coupling coefficients of a dynamic-routing pass, for diagnostics.

    ``coefficients`` are the weights that produced the returned parents
    (softmax of ``logits`` over the output axis), shape (B, num_in, num_out).
    """
    logits: np.ndarray
    coefficients: np.ndarray

    def check(self, tol: float = 1e-9) -> None:
        sums = self.coefficients.sum(axis=2)
        if not np.allclose(sums, 1.0, rtol=0, atol=tol):
            raise AssertionError("coupling coefficients do not sum to 1 over outputs")
        if (self.coefficients < 0).any():
            raise AssertionError("negative coupling coefficient")


SQUASH_NORM_EPS = 1e-12


def squash(s: Tensor) -> Tensor:
    """Norm-contracting nonlinearity over the last axis.

    v = (|s|^2 / (1 + |s|^2)) * (s / |s|), with the divisor norm computed as
    sqrt(|s|^2 + 1e-12) so exact zero maps to exact zero. Direction is
    preserved and |v| < 1.
    """
    s_data = s.data
    sq = np.einsum("...i,...i->...", s_data, s_data)[..., None]
    n = np.sqrt(sq + s_data.dtype.type(SQUASH_NORM_EPS))
    factor = sq / ((1.0 + sq) * n)
    out = s_data * factor

    def bwd(g):
        # d factor / d sq, applied through sq = sum(s^2).
        dfac = 1.0 / (n * (1.0 + sq) ** 2) - sq / (2.0 * (1.0 + sq) * n ** 3)
        inner = np.einsum("...i,...i->...", g, s_data)[..., None]
        return (g * factor + s_data * (2.0 * dfac * inner),)

    return T.record_op("squash", (s,), out, bwd)


def weighted_vote_sum(votes: Tensor, coefficients: np.ndarray) -> Tensor:
    """s_j = sum_i c_ij * u_hat_j|i with c held constant.

    The coefficients multiply the incoming gradient elementwise in backward,
    which is exactly the suppression mechanism under study.
    """
    if coefficients.shape != votes.shape[:3]:
        raise ValueError(
            f"coefficients shape {coefficients.shape} does not match votes {votes.shape}")
    out = np.einsum("bije,bij->bje", votes.data, coefficients)

    def bwd(g):
        return (coefficients[..., None] * g[:, None, :, :],)

    return T.record_op("weighted_vote_sum", (votes,), out, bwd)


def _softmax_outputs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def dynamic_routing(votes: Tensor, iterations: int,
                    differentiate_coupling: bool = False):
    """Agreement routing: returns (parents, CouplingState).

    Logits start at zero, so the first iteration couples uniformly with
    c_ij = 1/num_out. Each iteration re-weights by softmax over outputs,
    forms the weighted sum, squashes, and adds the vote/parent dot product
    to the logits.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    B, I, J, E = votes.shape
    if differentiate_coupling:
        return _dynamic_routing_differentiated(votes, iterations)

    b = np.zeros((B, I, J), dtype=votes.data.dtype)
    v = None
    c = None
    for r in range(iterations):
        c = _softmax_outputs(b)
        if r < iterations - 1:
            # Intermediate iterations are routing bookkeeping, not part of
            # the differentiated graph.
            s_np = np.einsum("bije,bij->bje", votes.data, c)
            v_np = _squash_np(s_np)
            b = b + np.einsum("bije,bje->bij", votes.data, v_np)
        else:
            s = weighted_vote_sum(votes, c)
            v = squash(s)
    return v, CouplingState(logits=b, coefficients=c)


def _dynamic_routing_differentiated(votes: Tensor, iterations: int):
    """Same procedure with every iteration recorded on the tape."""
    B, I, J, E = votes.shape
    b = Tensor(np.zeros((B, I, J), dtype=votes.data.dtype))
    v = None
    c = None
    for r in range(iterations):
        c = T.softmax_over_axis(b, 2)
        c4 = T.reshape(c, (B, I, J, 1))
        s = T.sum_over_axis(T.mul(c4, votes), axis=1)
        v = squash(s)
        if r < iterations - 1:
            v4 = T.reshape(v, (B, 1, J, E))
            agreement = T.sum_over_axis(T.mul(votes, v4), axis=-1)
            b = T.add(b, agreement)
    return v, CouplingState(logits=b.data.copy(), coefficients=c.data.copy())


def _squash_np(s: np.ndarray) -> np.ndarray:
    sq = np.einsum("...i,...i->...", s, s)[..., None]
    n = np.sqrt(sq + s.dtype.type(SQUASH_NORM_EPS))
    return s * (sq / ((1.0 + sq) * n))


def adaptive_routing(votes: Tensor, iterations: int) -> Tensor:
    """Coupling-free routing: sum votes, squash, pull votes toward parents.

    The vote update is part of the forward graph and is differentiated
    through. The update after the last iteration cannot reach the output,
    so it is not recorded.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    B, I, J, E = votes.shape
    u = votes
    v = None
    for r in range(iterations):
        s = T.sum_over_axis(u, axis=1)          # (B, J, E)
        v = squash(s)
        if r < iterations - 1:
            u = T.add(T.reshape(v, (B, 1, J, E)), u)
    return v


def adaptive_lambda(votes: Tensor, lambda_: float) -> Tensor:
    """One-pass adaptive routing: squash(lambda * sum_i votes).

    lambda replaces the iteration count; it scales the summed votes before
    the squash and therefore scales the pre-squash gradient linearly.
    """
    if not lambda_ > 0:
        raise ValueError(f"lambda must be positive, got {lambda_}")
    s = T.sum_over_axis(votes, axis=1)
    return squash(T.scale(s, lambda_))


def route(votes: Tensor, spec: RoutingSpec):
    """Dispatch on the routing spec; returns (parents, CouplingState or None)."""
    if spec.variant == "dynamic":
        return dynamic_routing(votes, spec.iterations, spec.differentiate_coupling)
    if spec.variant == "adaptive":
        return adaptive_routing(votes, spec.iterations), None
    return adaptive_lambda(votes, spec.lambda_), None
