"""Labeled LTI state-space blocks and the algebra used to wire them together.

Every small-signal model in the package is a :class:`StateSpaceBlock`. Blocks
are immutable; all functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla


class LtiError(ValueError):
    """Base class for block-algebra failures."""


class UnknownLabelError(LtiError):
    pass


class AlgebraicLoopError(LtiError):
    """Raised when a feedthrough loop cannot be eliminated (I - M D singular)."""

    def __init__(self, msg: str, cycle: Sequence[str] = ()):
        super().__init__(msg)
        self.cycle = list(cycle)


class EigenError(LtiError):
    pass


def _labels(seq: Iterable[str], kind: str) -> tuple[str, ...]:
    out = tuple(str(s) for s in seq)
    if len(set(out)) != len(out):
        dup = sorted({s for s in out if out.count(s) > 1})
        raise LtiError(f"duplicate {kind} labels: {dup}")
    return out


@dataclass(frozen=True)
class StateSpaceBlock:
    """x' = A x + B u,  y = C x + D u  with named states, inputs and outputs."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    state_labels: tuple[str, ...] = ()
    input_labels: tuple[str, ...] = ()
    output_labels: tuple[str, ...] = ()

    def __post_init__(self):
        n, m, p = len(self.state_labels), len(self.input_labels), len(self.output_labels)
        A = np.array(self.A, dtype=float).reshape(n, n)
        B = np.array(self.B, dtype=float).reshape(n, m)
        C = np.array(self.C, dtype=float).reshape(p, n)
        D = np.array(self.D, dtype=float).reshape(p, m)
        for arr in (A, B, C, D):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "state_labels", _labels(self.state_labels, "state"))
        object.__setattr__(self, "input_labels", _labels(self.input_labels, "input"))
        object.__setattr__(self, "output_labels", _labels(self.output_labels, "output"))

    @property
    def nstates(self) -> int:
        return len(self.state_labels)

    def state_index(self, label: str) -> int:
        try:
            return self.state_labels.index(label)
        except ValueError:
            raise UnknownLabelError(f"no state {label!r}") from None

    def input_index(self, label: str) -> int:
        try:
            return self.input_labels.index(label)
        except ValueError:
            raise UnknownLabelError(f"no input {label!r}") from None

    def output_index(self, label: str) -> int:
        try:
            return self.output_labels.index(label)
        except ValueError:
            raise UnknownLabelError(f"no output {label!r}") from None

    def relabel(self, prefix: str = "", states: dict | None = None,
                inputs: dict | None = None, outputs: dict | None = None) -> "StateSpaceBlock":
        """Return a copy with renamed labels. ``prefix`` applies to states only."""
        states = states or {}
        inputs = inputs or {}
        outputs = outputs or {}
        return StateSpaceBlock(
            self.A, self.B, self.C, self.D,
            [prefix + states.get(s, s) for s in self.state_labels],
            [inputs.get(s, s) for s in self.input_labels],
            [outputs.get(s, s) for s in self.output_labels],
        )

    def subsystem(self, inputs: Sequence[str] | None = None,
                  outputs: Sequence[str] | None = None) -> "StateSpaceBlock":
        ii = [self.input_index(s) for s in (inputs if inputs is not None else self.input_labels)]
        oo = [self.output_index(s) for s in (outputs if outputs is not None else self.output_labels)]
        return StateSpaceBlock(
            self.A, self.B[:, ii], self.C[oo, :], self.D[np.ix_(oo, ii)],
            self.state_labels, [self.input_labels[i] for i in ii],
            [self.output_labels[i] for i in oo],
        )

    def reorder_states(self, order: Sequence[str]) -> "StateSpaceBlock":
        idx = [self.state_index(s) for s in order]
        if len(idx) != self.nstates:
            raise LtiError("state reordering must be a permutation")
        return StateSpaceBlock(
            self.A[np.ix_(idx, idx)], self.B[idx, :], self.C[:, idx], self.D,
            [self.state_labels[i] for i in idx], self.input_labels, self.output_labels,
        )


@dataclass(frozen=True)
class FreqSample:
    omega: float
    G: np.ndarray
    ok: bool = True


@dataclass(frozen=True)
class EigenSolution:
    values: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray  # rows, normalized so left @ right = I
    damping: np.ndarray = field(repr=False)
    freq_hz: np.ndarray = field(repr=False)


# --------------------------------------------------------------- primitives

def gain(K, inputs: Sequence[str], outputs: Sequence[str]) -> StateSpaceBlock:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return StateSpaceBlock(np.zeros((0, 0)), np.zeros((0, K.shape[1])),
                           np.zeros((K.shape[0], 0)), K, (), inputs, outputs)


def summing_junction(inputs: Sequence[str], output: str,
                     signs: Sequence[float] | None = None) -> StateSpaceBlock:
    """Explicit fan-in point: ``output = sum(sign_k * input_k)``."""
    signs = [1.0] * len(inputs) if signs is None else list(signs)
    if len(signs) != len(inputs):
        raise LtiError("one sign per summing-junction input")
    return gain(np.array([signs], dtype=float), inputs, [output])


def integrator(inp: str = "u", out: str = "y", state: str = "x", k: float = 1.0) -> StateSpaceBlock:
    return StateSpaceBlock([[0.0]], [[k]], [[1.0]], [[0.0]], [state], [inp], [out])


def pi_block(kp: float, ki: float, inp: str = "u", out: str = "y",
             state: str = "x") -> StateSpaceBlock:
    """kp + ki/s."""
    return StateSpaceBlock([[0.0]], [[ki]], [[1.0]], [[kp]], [state], [inp], [out])


def lowpass(T: float, inp: str = "u", out: str = "y", state: str = "x",
            k: float = 1.0) -> StateSpaceBlock:
    """k / (1 + sT); the state is the output itself."""
    if not T > 0:
        raise LtiError(f"lowpass time constant must be positive, got {T}")
    return StateSpaceBlock([[-1.0 / T]], [[k / T]], [[1.0]], [[0.0]], [state], [inp], [out])


def highpass(tau: float, inp: str = "u", out: str = "y", state: str = "x") -> StateSpaceBlock:
    """s tau / (1 + s tau), realised as 1 - 1/(1 + s tau)."""
    if not tau > 0:
        raise LtiError(f"highpass time constant must be positive, got {tau}")
    return StateSpaceBlock([[-1.0 / tau]], [[1.0 / tau]], [[-1.0]], [[1.0]], [state], [inp], [out])




def pade3(Td: float, inp: str = "u", out: str = "y", prefix: str = "pade") -> StateSpaceBlock:
    """Third-order all-pass approximation of exp(-s Td)."""
    if Td < 0:
        raise LtiError(f"delay must be non-negative, got {Td}")
    if Td == 0:
        return gain([[1.0]], [inp], [out])
    # H(x) = -1 + 2 (12 x^2 + 120) / den(x); companion form in x, then x = s Td
    Abar = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-120.0, -60.0, -12.0]])
    bbar = np.array([[0.0], [0.0], [1.0]])
    cbar = np.array([[240.0, 0.0, 24.0]])
    # balance to keep state magnitudes and matrix entries comparable
    _, (sc, _) = sla.matrix_balance(Abar, permute=False, separate=True)
    T = np.diag(sc)
    Ti = np.diag(1.0 / sc)
    A = Ti @ Abar @ T / Td
    B = Ti @ bbar / Td
    C = cbar @ T
    return StateSpaceBlock(A, B, C, [[-1.0]], [f"{prefix}{k}" for k in (1, 2, 3)], [inp], [out])


def pade3_coefficients(Td: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(A, B, C, D) arrays of :func:`pade3` for use inside compiled kernels."""
    blk = pade3(Td)
    if blk.nstates == 0:
        return np.zeros((3, 3)), np.zeros(3), np.zeros(3), 1.0
    return np.array(blk.A), blk.B[:, 0].copy(), blk.C[0].copy(), float(blk.D[0, 0])


def append(*blocks: StateSpaceBlock) -> StateSpaceBlock:
    """Block-diagonal stacking with no wiring."""
    n = sum(b.nstates for b in blocks)
    m = sum(len(b.input_labels) for b in blocks)
    p = sum(len(b.output_labels) for b in blocks)
    A = np.zeros((n, n)); B = np.zeros((n, m)); C = np.zeros((p, n)); D = np.zeros((p, m))
    i = j = k = 0
    for b in blocks:
        ni, mi, pi = b.nstates, len(b.input_labels), len(b.output_labels)
        A[i:i + ni, i:i + ni] = b.A
        B[i:i + ni, j:j + mi] = b.B
        C[k:k + pi, i:i + ni] = b.C
        D[k:k + pi, j:j + mi] = b.D
        i += ni; j += mi; k += pi
    return A, B, C, D


def interconnect(blocks: Sequence[StateSpaceBlock],
                 wiring: Iterable[tuple[str, str]],
                 external_inputs: Sequence[str],
                 external_outputs: Sequence[str]) -> StateSpaceBlock:
    """Wire blocks by label and eliminate feedthrough loops exactly.

    ``wiring`` holds ``(source_output, target_input)`` pairs. A target label
    refers to every block input carrying that name, so one signal may fan out
    to several blocks; fan-in is only allowed through a summing junction
    block. Each external input feeds every block input with the same label.
    """
    blocks = list(blocks)
    in_labels = [lab for b in blocks for lab in b.input_labels]
    out_labels = [lab for b in blocks for lab in b.output_labels]
    st_labels = [lab for b in blocks for lab in b.state_labels]
    if len(set(out_labels)) != len(out_labels):
        dup = sorted({s for s in out_labels if out_labels.count(s) > 1})
        raise LtiError(f"output labels must be unique across blocks: {dup}")
    if len(set(st_labels)) != len(st_labels):
        dup = sorted({s for s in st_labels if st_labels.count(s) > 1})
        raise LtiError(f"state labels must be unique across blocks: {dup}")
    out_pos = {lab: k for k, lab in enumerate(out_labels)}
    in_pos: dict[str, list[int]] = {}
    for k, lab in enumerate(in_labels):
        in_pos.setdefault(lab, []).append(k)

    A, B, C, D = append(*blocks)
    nu = len(in_labels)
    M = np.zeros((nu, len(out_labels)))
    driven: dict[str, str] = {}
    for src, tgt in wiring:
        if src not in out_pos:
            raise UnknownLabelError(f"wiring source {src!r} is not an output of any block")
        if tgt not in in_pos:
            raise UnknownLabelError(f"wiring target {tgt!r} is not an input of any block")
        if tgt in driven:
            raise LtiError(f"input {tgt!r} wired twice ({driven[tgt]!r}, {src!r}); "
                           "use a summing junction")
        driven[tgt] = src
        for k in in_pos[tgt]:
            M[k, out_pos[src]] = 1.0

    N = np.zeros((nu, len(external_inputs)))
    for j, lab in enumerate(external_inputs):
        if lab not in in_pos:
            raise UnknownLabelError(f"external input {lab!r} is not an input of any block")
        if lab in driven:
            raise LtiError(f"input {lab!r} is both wired and external")
        for k in in_pos[lab]:
            N[k, j] = 1.0
    for lab in external_outputs:
        if lab not in out_pos:
            raise UnknownLabelError(f"external output {lab!r} is not an output of any block")

    # u = M y + N w, y = C x + D u  ->  (I - M D) u = M C x + N w
    L = np.eye(nu) - M @ D
    try:
        cond = np.linalg.cond(L) if nu else 1.0
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise AlgebraicLoopError("ill-posed algebraic loop (I - M D singular)",
                                 _feedthrough_cycle(M, D, in_labels, out_labels))
    Linv = np.linalg.inv(L) if nu else np.zeros((0, 0))
    Ucx = Linv @ M @ C
    Ucw = Linv @ N
    Acl = A + B @ Ucx
    Bcl = B @ Ucw
    oo = [out_pos[lab] for lab in external_outputs]
    Ccl = C[oo, :] + D[oo, :] @ Ucx
    Dcl = D[oo, :] @ Ucw
    return StateSpaceBlock(Acl, Bcl, Ccl, Dcl, st_labels, external_inputs, external_outputs)


def _feedthrough_cycle(M, D, in_labels, out_labels) -> list[str]:
    """Find one cycle in the graph input -> (D) -> output -> (M) -> input."""
    nu = len(in_labels)
    G = (np.abs(M @ D) > 0)  # input k -> input l via some output
    adj = {k: [l for l in range(nu) if G[l, k]] for k in range(nu)}
    color = [0] * nu
    stack: list[int] = []

    def dfs(k):
        color[k] = 1
        stack.append(k)
        for l in adj[k]:
            if color[l] == 1:
                return stack[stack.index(l):] + [l]
            if color[l] == 0:
                cyc = dfs(l)
                if cyc:
                    return cyc
        stack.pop()
        color[k] = 2
        return None

    for k in range(nu):
        if color[k] == 0:
            cyc = dfs(k)
            if cyc:
                return [in_labels[i] for i in cyc]
    return []


# --------------------------------------------------------------- analysis

def freq_response(block: StateSpaceBlock, omegas: Iterable[float],
                  rcond: float = 1e-13) -> list[FreqSample]:
    """G(jw) = C (jw I - A)^-1 B + D on a grid of angular frequencies."""
    omegas = np.asarray(list(omegas), dtype=float)
    if np.any(omegas <= 0):
        raise LtiError("frequency grid must be strictly positive")
    if omegas.size > 1 and np.any(np.diff(omegas) <= 0):
        raise LtiError("frequency grid must be strictly increasing")
    n = block.nstates
    A, B, C, D = block.A, block.B, block.C, block.D
    out = []
    I = np.eye(n)
    for w in omegas:
        if n == 0:
            out.append(FreqSample(float(w), D.astype(complex)))
            continue
        R = 1j * w * I - A
        if 1.0 / np.linalg.cond(R) < rcond:
            out.append(FreqSample(float(w), np.full(D.shape, np.nan + 0j), ok=False))
            continue
        out.append(FreqSample(float(w), C @ np.linalg.solve(R, B) + D))
    return out


def eigen(block_or_A) -> EigenSolution:
    A = block_or_A.A if isinstance(block_or_A, StateSpaceBlock) else np.asarray(block_or_A, float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise EigenError("state matrix must be square")
    try:
        lam, vr = sla.eig(A)
    except (sla.LinAlgError, ValueError) as exc:
        raise EigenError(f"eigen-solver failed: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise EigenError("eigen-solver returned non-finite eigenvalues")
    # rows of V^-1 are the left eigenvectors already scaled so that psi @ phi = I
    try:
        W = np.linalg.inv(vr)
    except np.linalg.LinAlgError as exc:
        raise EigenError("defective eigenvector basis") from exc
    mag = np.abs(lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        zeta = np.where(mag > 0, -lam.real / np.where(mag > 0, mag, 1.0), 1.0)
    return EigenSolution(lam, vr, W, zeta, np.abs(lam.imag) / (2 * np.pi))


def participation(block_or_A, sol: EigenSolution | None = None) -> np.ndarray:
    """p[k, i] = |phi_ki psi_ik|, each mode column normalized to sum 1."""
    sol = sol or eigen(block_or_A)
    P = np.abs(sol.right_vectors * sol.left_vectors.T)
    return P / P.sum(axis=0, keepdims=True)


def participation_residue(block_or_A, npts: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Participation from residues of (sI - A)^-1 diagonal entries.

    The residue of [(sI - A)^-1]_kk at a simple pole lambda_i equals
    phi_ki psi_ik; it is evaluated by a trapezoidal contour integral around
    each eigenvalue, so no eigenvectors are used. Returns (eigenvalues, P).
    """
    A = block_or_A.A if isinstance(block_or_A, StateSpaceBlock) else np.asarray(block_or_A, float)
    n = A.shape[0]
    lam = np.linalg.eigvals(A)
    P = np.zeros((n, n))
    I = np.eye(n)
    theta = 2 * np.pi * np.arange(npts) / npts
    for i, li in enumerate(lam):
        others = np.delete(lam, i)
        gap = np.min(np.abs(others - li)) if others.size else 1.0
        r = 0.3 * gap
        acc = np.zeros(n, dtype=complex)
        for th in theta:
            z = r * np.exp(1j * th)
            diag = np.diag(np.linalg.inv((li + z) * I - A))
            acc += diag * z  # ds = j z dtheta; 1/(2 pi j) cancels j
        res = acc / npts
        P[:, i] = np.abs(res)
    P /= P.sum(axis=0, keepdims=True)
    return lam, P


def reconstruct(sol: EigenSolution) -> np.ndarray:
    """sum_i lam_i phi_i psi_i, which must reproduce A."""
    return (sol.right_vectors * sol.values) @ sol.left_vectors


def dcgain(block: StateSpaceBlock) -> np.ndarray:
    if block.nstates == 0:
        return np.array(block.D)
    return block.D - block.C @ np.linalg.solve(block.A, block.B)


def evaluate(block: StateSpaceBlock, s: complex) -> np.ndarray:
    n = block.nstates
    if n == 0:
        return block.D.astype(complex)
    return block.C @ np.linalg.solve(s * np.eye(n) - block.A, block.B) + block.D


def discretize(block: StateSpaceBlock, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold (Ad, Bd) via the augmented matrix exponential."""
    n, m = block.nstates, len(block.input_labels)
    Mx = np.zeros((n + m, n + m))
    Mx[:n, :n] = block.A * dt
    Mx[:n, n:] = block.B * dt
    E = sla.expm(Mx)
    return E[:n, :n], E[:n, n:]


def simulate_steps(block: StateSpaceBlock, t: np.ndarray, u: np.ndarray,
                   x0: np.ndarray | None = None) -> np.ndarray:
    """Exact ZOH response on a uniform grid; ``u`` has shape (len(t), m)."""
    dt = float(t[1] - t[0])
    Ad, Bd = discretize(block, dt)
    n = block.nstates
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    y = np.empty((len(t), len(block.output_labels)))
    for k in range(len(t)):
        y[k] = block.C @ x + block.D @ u[k]
        x = Ad @ x + Bd @ u[k]
    return y
