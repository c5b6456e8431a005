"""Closed-loop system responses under time-varying affine policies.

An affine causal policy u = K x + u_s applied to the lifted dynamics
x = Z calA x + Z calB u + Z s_stack + w produces the closed-loop maps

    [x]   [Phi_x  phi_x] [w]
    [u] = [Phi_u  phi_u] [1]

with

    Phi_x = (I - Z calA - Z calB K)^{-1}        (unit lower triangular),
    Phi_u = K Phi_x,
    phi_x = Phi_x Z (calB u_s + s_stack),
    phi_u = Phi_u Z (calB u_s + s_stack) + u_s.

The achievable maps are exactly the affine subspace

    [I - Z calA, -Z calB] [[Phi_x, phi_x], [Phi_u, phi_u]] = [I, Z s_stack],

and any member of that subspace is realized by the policy with
K = Phi_u Phi_x^{-1} and u_s = phi_u - K phi_x. With s = 0 and u_s = 0 the
affine columns vanish and the parameterization reduces to standard linear
SLS.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .lifted import (
    CAUSAL_TOL,
    AffineLTVSystem,
    CausalOperator,
    LiftedDynamics,
    causal_mask,
    is_causal,
)

# Construction accuracy (what freshly built responses must satisfy) vs. the
# looser gate applied to user-supplied responses before inversion.
CONSTRUCTION_TOL = 1e-10
GATE_TOL = 1e-8


class AffineCausalController:
    """Affine causal policy u = K x + u_s over the horizon.

    K is a causal operator with m x n blocks; block (t, tau) is the gain
    from state x_tau to input u_t (zero for tau > t). u_s is the stacked
    affine input sequence of length m(T+1).
    """

    def __init__(self, K: CausalOperator, u_s):
        if not isinstance(K, CausalOperator):
            raise TypeError("K must be a CausalOperator (use from_matrix)")
        u_s = np.asarray(u_s, dtype=float).reshape(-1)
        if u_s.shape[0] != K.matrix.shape[0]:
            raise ValueError(
                f"u_s has length {u_s.shape[0]}, expected {K.matrix.shape[0]}"
            )
        if not np.all(np.isfinite(u_s)):
            raise ValueError("u_s must be finite")
        self.K = K
        self.u_s = u_s

    @classmethod
    def from_matrix(cls, K, u_s, m: int, n: int) -> "AffineCausalController":
        return cls(CausalOperator(K, m, n), u_s)

    @classmethod
    def zero(cls, n: int, m: int, T: int) -> "AffineCausalController":
        return cls(CausalOperator.zero(m, n, T), np.zeros(m * (T + 1)))

    @property
    def m(self) -> int:
        return self.K.block_rows

    @property
    def n(self) -> int:
        return self.K.block_cols

    @property
    def T(self) -> int:
        return self.K.horizon


class SystemResponse:
    """The four closed-loop blocks {Phi_x, phi_x, Phi_u, phi_u}.

    Phi_x is n(T+1) square, causal with identity diagonal blocks (hence
    invertible); Phi_u is m(T+1) x n(T+1) causal; phi_x and phi_u are the
    affine columns. The first n entries of phi_x are zero: the affine
    column cannot move the initial state.
    """

    def __init__(self, Phi_x, Phi_u, phi_x, phi_u, n: int, m: int):
        Phi_x = np.asarray(Phi_x, dtype=float)
        Phi_u = np.asarray(Phi_u, dtype=float)
        phi_x = np.asarray(phi_x, dtype=float).reshape(-1)
        phi_u = np.asarray(phi_u, dtype=float).reshape(-1)
        nx = Phi_x.shape[0]
        if Phi_x.shape != (nx, nx) or nx % n != 0:
            raise ValueError(f"Phi_x must be square with n-divisible size, got {Phi_x.shape}")
        T = nx // n - 1
        nu = m * (T + 1)
        if Phi_u.shape != (nu, nx):
            raise ValueError(f"Phi_u must have shape ({nu}, {nx}), got {Phi_u.shape}")
        if phi_x.shape != (nx,) or phi_u.shape != (nu,):
            raise ValueError("affine columns have inconsistent lengths")
        if not is_causal(Phi_x, n, n, strict_identity_diag=True):
            raise ValueError("Phi_x must be causal with identity diagonal blocks")
        if not is_causal(Phi_u, m, n):
            raise ValueError("Phi_u must be causal")
        if np.max(np.abs(phi_x[:n])) > CAUSAL_TOL:
            raise ValueError("first n entries of phi_x must be zero")
        self.Phi_x = Phi_x
        self.Phi_u = Phi_u
        self.phi_x = phi_x
        self.phi_u = phi_u
        self.n = n
        self.m = m
        self.T = T

    def to_flat(self) -> np.ndarray:
        """Flatten to [n, m, T, Phi_x (row-major), phi_x, Phi_u, phi_u]."""
        return np.concatenate(
            [
                np.array([self.n, self.m, self.T], dtype=float),
                self.Phi_x.ravel(),
                self.phi_x,
                self.Phi_u.ravel(),
                self.phi_u,
            ]
        )

    @classmethod
    def from_flat(cls, flat) -> "SystemResponse":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        n, m, T = (int(round(v)) for v in flat[:3])
        nx, nu = n * (T + 1), m * (T + 1)
        pos = 3
        Phi_x = flat[pos : pos + nx * nx].reshape(nx, nx)
        pos += nx * nx
        phi_x = flat[pos : pos + nx]
        pos += nx
        Phi_u = flat[pos : pos + nu * nx].reshape(nu, nx)
        pos += nu * nx
        phi_u = flat[pos : pos + nu]
        pos += nu
        if pos != flat.size:
            raise ValueError(f"flat container has {flat.size} values, expected {pos}")
        return cls(Phi_x, Phi_u, phi_x, phi_u, n, m)


class ReducedResponse:
    """Noiseless-case responses: first n columns plus the affine column.

    Phi_x_bar = [Phi_x[:, :n], phi_x] has shape n(T+1) x (n+1) and maps
    [x0; 1] to the state trajectory; Phi_u_bar likewise to the inputs. The
    top n x n block of Phi_x_bar is the identity and the top n entries of
    its last column are zero.
    """

    def __init__(self, Phi_x_bar, Phi_u_bar, n: int, m: int):
        Phi_x_bar = np.asarray(Phi_x_bar, dtype=float)
        Phi_u_bar = np.asarray(Phi_u_bar, dtype=float)
        nx = Phi_x_bar.shape[0]
        if nx % n != 0 or Phi_x_bar.shape[1] != n + 1:
            raise ValueError(f"Phi_x_bar must be (n(T+1), n+1), got {Phi_x_bar.shape}")
        T = nx // n - 1
        if Phi_u_bar.shape != (m * (T + 1), n + 1):
            raise ValueError(
                f"Phi_u_bar must be ({m * (T + 1)}, {n + 1}), got {Phi_u_bar.shape}"
            )
        if np.max(np.abs(Phi_x_bar[:n, :n] - np.eye(n))) > GATE_TOL:
            raise ValueError("top n x n block of Phi_x_bar must be the identity")
        if np.max(np.abs(Phi_x_bar[:n, n])) > GATE_TOL:
            raise ValueError("top n entries of the affine column must be zero")
        self.Phi_x_bar = Phi_x_bar
        self.Phi_u_bar = Phi_u_bar
        self.n = n
        self.m = m
        self.T = T

    def rollout(self, x0) -> tuple[np.ndarray, np.ndarray]:
        """Noiseless trajectories [x; u] = [Phi_x_bar; Phi_u_bar] [x0; 1]."""
        v = np.concatenate([np.asarray(x0, dtype=float).reshape(-1), [1.0]])
        return self.Phi_x_bar @ v, self.Phi_u_bar @ v


def responses_from_controller(
    ctrl: AffineCausalController, lifted: LiftedDynamics
) -> SystemResponse:
    """Closed-loop maps achieved by an affine causal policy.

    Inverts I - Z calA - Z calB K by forward substitution (the matrix is
    unit lower triangular by construction, so the inverse always exists)
    and assembles the four response blocks. Raises ArithmeticError if the
    result leaves the parameterizing subspace by more than the
    construction tolerance.
    """
    if ctrl.n != lifted.n or ctrl.m != lifted.m or ctrl.T != lifted.T:
        raise ValueError(
            f"controller dims (n={ctrl.n}, m={ctrl.m}, T={ctrl.T}) do not match "
            f"lifted dynamics (n={lifted.n}, m={lifted.m}, T={lifted.T})"
        )
    nx = lifted.nx
    ZA = lifted.Z @ lifted.calA
    ZB = lifted.Z @ lifted.calB
    M = np.eye(nx) - ZA - ZB @ ctrl.K.matrix
    Phi_x = solve_triangular(M, np.eye(nx), lower=True, unit_diagonal=True)
    Phi_u = ctrl.K.matrix @ Phi_x
    drive = lifted.Z @ (lifted.calB @ ctrl.u_s + lifted.s_stack)
    phi_x = Phi_x @ drive
    phi_u = Phi_u @ drive + ctrl.u_s
    resp = SystemResponse(Phi_x, Phi_u, phi_x, phi_u, lifted.n, lifted.m)
    residual = validate_subspace(resp, lifted)
    if residual > CONSTRUCTION_TOL:
        raise ArithmeticError(
            f"response construction left the subspace: residual {residual:.3e} "
            f"exceeds {CONSTRUCTION_TOL:.0e} (ill-conditioned closed loop?)"
        )
    return resp


def validate_subspace(resp: SystemResponse, lifted: LiftedDynamics) -> float:
    """Max-abs residual of the parameterizing affine subspace equation.

    Returns || [I - Z calA, -Z calB] [[Phi_x, phi_x], [Phi_u, phi_u]]
    - [I, Z s_stack] ||_inf (entrywise). Zero exactly when the response is
    an achievable closed-loop map.
    """
    nx = lifted.nx
    ImZA = np.eye(nx) - lifted.Z @ lifted.calA
    ZB = lifted.Z @ lifted.calB
    E_lin = ImZA @ resp.Phi_x - ZB @ resp.Phi_u - np.eye(nx)
    E_aff = ImZA @ resp.phi_x - ZB @ resp.phi_u - lifted.Z @ lifted.s_stack
    return max(np.max(np.abs(E_lin)), np.max(np.abs(E_aff)))


def controller_from_responses(
    resp: SystemResponse,
    lifted: LiftedDynamics | None = None,
    residual_tol: float = GATE_TOL,
) -> AffineCausalController:
    """Recover the unique policy realizing a valid response.

    Computes K = Phi_u Phi_x^{-1} by solving unit-triangular systems
    against Phi_u^T (never forming Phi_x^{-1}) and u_s = phi_u - K phi_x.
    When `lifted` is given, the response is first gated on the subspace
    residual; responses violating it are rejected since the recovery
    formula only applies to members of the subspace.
    """
    if lifted is not None:
        residual = validate_subspace(resp, lifted)
        if residual > residual_tol:
            raise ValueError(
                f"response rejected: subspace residual {residual:.3e} exceeds "
                f"{residual_tol:.0e}"
            )
    K = solve_triangular(
        resp.Phi_x.T, resp.Phi_u.T, lower=False, unit_diagonal=True
    ).T
    # K is causal in exact arithmetic; clear sub-tolerance numerical dust
    # above the block diagonal, but refuse anything larger.
    mask = causal_mask(resp.m, resp.n, resp.T)
    dust = np.max(np.abs(K[~mask])) if (~mask).any() else 0.0
    if dust > GATE_TOL * max(1.0, np.max(np.abs(K))):
        raise ArithmeticError(
            f"recovered gain is not causal (max anticausal entry {dust:.3e})"
        )
    K = np.where(mask, K, 0.0)
    u_s = resp.phi_u - K @ resp.phi_x
    return AffineCausalController(CausalOperator(K, resp.m, resp.n), u_s)


def closed_loop_rollout(
    resp: SystemResponse, w
) -> tuple[np.ndarray, np.ndarray]:
    """Trajectories [x; u] = [[Phi_x, phi_x], [Phi_u, phi_u]] [w; 1].

    w stacks the initial condition and the process disturbances,
    w = [x(0); w(0); ...; w(T-1)].
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != resp.Phi_x.shape[1]:
        raise ValueError(
            f"w has length {w.shape[0]}, expected {resp.Phi_x.shape[1]}"
        )
    x = resp.Phi_x @ w + resp.phi_x
    u = resp.Phi_u @ w + resp.phi_u
    return x, u


def direct_rollout(
    sys: AffineLTVSystem,
    ctrl: AffineCausalController,
    x0,
    w_seq=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force oracle: step the dynamics under the causal policy.

    Computes u_t = sum_{tau<=t} K[t, tau] x_tau + u_s[t] and
    x_{t+1} = A(t) x_t + B(t) u_t + s + w(t) one step at a time, with no
    lifted-operator algebra. Returns stacked (x, u).
    """
    n, m, T = sys.n, sys.m, sys.T
    if ctrl.n != n or ctrl.m != m or ctrl.T != T:
        raise ValueError("controller dimensions do not match the system")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have length {n}")
    if w_seq is None:
        w_seq = np.zeros((T, n))
    w_seq = np.asarray(w_seq, dtype=float).reshape(T, n)
    xs = [x0]
    us = []
    for t in range(T + 1):
        u_t = ctrl.u_s[t * m : (t + 1) * m].copy()
        for tau in range(t + 1):
            u_t += ctrl.K.block(t, tau) @ xs[tau]
        us.append(u_t)
        if t < T:
            xs.append(sys.step(xs[t], u_t, t, w_seq[t]))
    return np.concatenate(xs), np.concatenate(us)


def reduce_noiseless(
    resp: SystemResponse,
    lifted: LiftedDynamics | None = None,
    residual_tol: float = GATE_TOL,
) -> ReducedResponse:
    """Restrict a response to the noiseless channels [x0; 1].

    Keeps the first n columns of Phi_x / Phi_u (the maps from the initial
    condition) next to the affine columns. When `lifted` is given, the
    input response is gated on the subspace residual first.
    """
    if lifted is not None:
        residual = validate_subspace(resp, lifted)
        if residual > residual_tol:
            raise ValueError(
                f"response rejected: subspace residual {residual:.3e} exceeds "
                f"{residual_tol:.0e}"
            )
    n = resp.n
    Phi_x_bar = np.column_stack([resp.Phi_x[:, :n], resp.phi_x])
    Phi_u_bar = np.column_stack([resp.Phi_u[:, :n], resp.phi_u])
    return ReducedResponse(Phi_x_bar, Phi_u_bar, resp.n, resp.m)


def reduced_rhs(lifted: LiftedDynamics) -> np.ndarray:
    """Right-hand side of the reduced subspace equation, shape (nx, n+1)."""
    rhs = np.zeros((lifted.nx, lifted.n + 1))
    rhs[: lifted.n, : lifted.n] = np.eye(lifted.n)
    rhs[:, lifted.n] = lifted.Z @ lifted.s_stack
    return rhs


def validate_reduced(red: ReducedResponse, lifted: LiftedDynamics) -> float:
    """Max-abs residual of the reduced (noiseless) subspace equation.

    Returns || [I - Z calA, -Z calB] [Phi_x_bar; Phi_u_bar]
    - [[I_n, 0], [0, Z s_stack tail]] ||_inf.
    """
    nx = lifted.nx
    ImZA = np.eye(nx) - lifted.Z @ lifted.calA
    ZB = lifted.Z @ lifted.calB
    E = ImZA @ red.Phi_x_bar - ZB @ red.Phi_u_bar - reduced_rhs(lifted)
    return float(np.max(np.abs(E)))


def complete_reduced_response(
    red: ReducedResponse, lifted: LiftedDynamics
) -> SystemResponse:
    """Embed a reduced response into a full one.

    The disturbance columns that the noiseless case leaves free are filled
    with the open-loop response (I - Z calA)^{-1} columns and zero input
    response; the result satisfies the full subspace equation and shares
    the reduced response's noiseless trajectories, so its recovered policy
    reproduces them on the nominal system.
    """
    n = red.n
    nx = lifted.nx
    M0 = np.eye(nx) - lifted.Z @ lifted.calA
    open_loop = solve_triangular(M0, np.eye(nx), lower=True, unit_diagonal=True)
    Phi_x = np.column_stack([red.Phi_x_bar[:, :n], open_loop[:, n:]])
    Phi_u = np.column_stack(
        [red.Phi_u_bar[:, :n], np.zeros((red.m * (red.T + 1), nx - n))]
    )
    return SystemResponse(
        Phi_x, Phi_u, red.Phi_x_bar[:, n], red.Phi_u_bar[:, n], red.n, red.m
    )
