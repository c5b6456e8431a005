"""Finite-horizon block-lifted algebra for discrete-time affine systems.

A length-(T+1) signal is stored as one stacked vector, e.g. the state
trajectory is ``x = [x_0; x_1; ...; x_T]`` of length ``n*(T+1)``. Operators
acting on stacked signals are partitioned into blocks; throughout the
package, block (i, j) of an operator with p-by-q blocks occupies rows
``[i*p, (i+1)*p)`` and columns ``[j*q, (j+1)*q)``.

Causality of an operator means every block strictly above the block
diagonal is zero: output block i depends only on input blocks 0..i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

# Structural zero tolerance. Causality and identity-diagonal checks are
# exact structural facts, so the tolerance only absorbs floating-point dust.
CAUSAL_TOL = 1e-12


class AffineLTVSystem:
    """Discrete-time affine system x(t+1) = A(t) x(t) + B(t) u(t) + s + w(t).

    Holds the per-step matrices over a fixed horizon T, i.e. A(0..T-1) and
    B(0..T-1), together with the constant offset s.

    Args:
        A: sequence of T state matrices, each (n, n).
        B: sequence of T input matrices, each (n, m).
        s: constant offset vector of length n.
    """

    def __init__(self, A, B, s):
        A = [np.atleast_2d(np.asarray(At, dtype=float)) for At in A]
        B = [np.atleast_2d(np.asarray(Bt, dtype=float)) for Bt in B]
        s = np.asarray(s, dtype=float).reshape(-1)
        if len(A) == 0 or len(B) == 0:
            raise ValueError("system needs at least one time step (horizon >= 1)")
        if len(A) != len(B):
            raise ValueError(
                f"A has {len(A)} steps but B has {len(B)}; horizons must match"
            )
        n = A[0].shape[0]
        m = B[0].shape[1]
        if n < 1 or m < 1:
            raise ValueError("state and input dimensions must be positive")
        for t, At in enumerate(A):
            if At.shape != (n, n):
                raise ValueError(f"A[{t}] must have shape ({n}, {n}), got {At.shape}")
        for t, Bt in enumerate(B):
            if Bt.shape != (n, m):
                raise ValueError(f"B[{t}] must have shape ({n}, {m}), got {Bt.shape}")
        if s.shape != (n,):
            raise ValueError(f"s must have length {n}, got shape {s.shape}")
        self.A = A
        self.B = B
        self.s = s
        self.n = n
        self.m = m
        self.T = len(A)

    @classmethod
    def time_invariant(cls, A, B, s, horizon: int) -> "AffineLTVSystem":
        """Replicate constant (A, B) over `horizon` steps."""
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls([A] * horizon, [B] * horizon, s)

    @property
    def is_time_invariant(self) -> bool:
        return all(np.array_equal(At, self.A[0]) for At in self.A) and all(
            np.array_equal(Bt, self.B[0]) for Bt in self.B
        )

    def step(self, x, u, t: int = 0, w=None):
        """One dynamics step x(t+1) = A(t) x + B(t) u + s (+ w)."""
        x_next = self.A[t] @ x + self.B[t] @ u + self.s
        if w is not None:
            x_next = x_next + w
        return x_next

    def __repr__(self) -> str:
        tag = "TI" if self.is_time_invariant else "TV"
        return f"AffineLTVSystem(n={self.n}, m={self.m}, T={self.T}, {tag})"


@dataclass(frozen=True)
class LiftedDynamics:
    """Block-lifted form of an affine system over the horizon.

    calA = diag(A(0), ..., A(T-1), 0_{n x n}) and
    calB = diag(B(0), ..., B(T-1), 0_{n x m}); the trailing zero blocks pad
    the operators to full signal length, and are discarded again by the
    downshift Z, so the lifted dynamics read

        x = Z calA x + Z calB u + Z s_stack + w,

    where w = [x(0); w(0); ...; w(T-1)] carries the initial condition in its
    first block and s_stack = [s; ...; s; 0] repeats the offset.
    """

    calA: np.ndarray
    calB: np.ndarray
    Z: np.ndarray
    s_stack: np.ndarray
    n: int
    m: int
    T: int

    @property
    def nx(self) -> int:
        return self.n * (self.T + 1)

    @property
    def nu(self) -> int:
        return self.m * (self.T + 1)


def block_downshift(n: int, T: int) -> np.ndarray:
    """Block-downshift operator: identity n-blocks on the first sub-diagonal.

    Returns the n(T+1) x n(T+1) matrix Z with entry (i, j) = 1 iff i = j + n.
    Multiplying a stacked signal by Z delays it by one step (the last block
    falls off); Z is nilpotent with Z^(T+1) = 0.
    """
    if n < 1 or T < 1:
        raise ValueError(f"need n >= 1 and T >= 1, got n={n}, T={T}")
    size = n * (T + 1)
    Z = np.zeros((size, size))
    Z[n:, :-n] = np.eye(n * T)
    return Z


def lift_system(sys: AffineLTVSystem) -> LiftedDynamics:
    """Rearrange per-step system matrices into their block-lifted form."""
    n, m, T = sys.n, sys.m, sys.T
    calA = block_diag(*sys.A, np.zeros((n, n)))
    calB = block_diag(*sys.B, np.zeros((n, m)))
    Z = block_downshift(n, T)
    s_stack = np.concatenate([np.tile(sys.s, T), np.zeros(n)])
    for arr in (calA, calB, Z, s_stack):
        arr.flags.writeable = False
    return LiftedDynamics(calA=calA, calB=calB, Z=Z, s_stack=s_stack, n=n, m=m, T=T)


def _block_grid(op: np.ndarray, p: int, q: int) -> int:
    """Validate that op partitions into p x q blocks; return the block count."""
    op = np.asarray(op)
    if op.ndim != 2:
        raise ValueError(f"operator must be 2-D, got ndim={op.ndim}")
    rows, cols = op.shape
    if rows % p != 0 or cols % q != 0:
        raise ValueError(
            f"shape {op.shape} is not divisible into ({p}, {q}) blocks"
        )
    if rows // p != cols // q:
        raise ValueError(
            f"shape {op.shape} has {rows // p} block rows but {cols // q} "
            f"block columns; causal operators must be block-square"
        )
    return rows // p


def is_causal(
    op: np.ndarray,
    p: int,
    q: int,
    strict_identity_diag: bool = False,
    tol: float = CAUSAL_TOL,
) -> bool:
    """Check lower-block-triangularity of an operator with p x q blocks.

    Every block strictly above the block diagonal must vanish within `tol`
    (absolute). With `strict_identity_diag` (requires p == q), each diagonal
    block must additionally equal the identity within `tol`.
    """
    op = np.asarray(op, dtype=float)
    n_blocks = _block_grid(op, p, q)
    if strict_identity_diag and p != q:
        raise ValueError("strict_identity_diag requires square blocks (p == q)")
    for i in range(n_blocks):
        upper = op[i * p : (i + 1) * p, (i + 1) * q :]
        if upper.size and np.max(np.abs(upper)) > tol:
            return False
        if strict_identity_diag:
            diag = op[i * p : (i + 1) * p, i * q : (i + 1) * q]
            if np.max(np.abs(diag - np.eye(p))) > tol:
                return False
    return True


def causal_mask(p: int, q: int, T: int, strictly_lower: bool = False) -> np.ndarray:
    """Boolean mask of the (strictly) lower block triangle, p x q blocks."""
    mask = np.zeros((p * (T + 1), q * (T + 1)), dtype=bool)
    for i in range(T + 1):
        stop = i if strictly_lower else i + 1
        mask[i * p : (i + 1) * p, : stop * q] = True
    return mask


class CausalOperator:
    """A lower-block-triangular operator together with its block partition.

    Attributes:
        matrix: the p(T+1) x q(T+1) array.
        block_rows: block row size p.
        block_cols: block column size q.
    """

    def __init__(self, matrix, block_rows: int, block_cols: int):
        matrix = np.asarray(matrix, dtype=float)
        n_blocks = _block_grid(matrix, block_rows, block_cols)
        if not is_causal(matrix, block_rows, block_cols):
            raise ValueError("matrix has nonzero blocks above the block diagonal")
        self.matrix = matrix
        self.block_rows = block_rows
        self.block_cols = block_cols
        self.horizon = n_blocks - 1

    @classmethod
    def zero(cls, p: int, q: int, T: int) -> "CausalOperator":
        return cls(np.zeros((p * (T + 1), q * (T + 1))), p, q)

    def block(self, i: int, j: int) -> np.ndarray:
        """Block (i, j): rows [i*p, (i+1)*p), columns [j*q, (j+1)*q)."""
        p, q = self.block_rows, self.block_cols
        return self.matrix[i * p : (i + 1) * p, j * q : (j + 1) * q]

    def __repr__(self) -> str:
        return (
            f"CausalOperator(blocks {self.block_rows}x{self.block_cols}, "
            f"horizon={self.horizon})"
        )
