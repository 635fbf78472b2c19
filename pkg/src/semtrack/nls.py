"""Sparse nonlinear least-squares machinery.

A problem object exposes ``linearize(state)`` returning a linearization
that can produce damped Gauss-Newton steps, plus ``cost(state)`` and
``retract(state, step)``.  :func:`solve_nls` runs Levenberg-Marquardt on
top of that interface.

Two normal-equation accumulators are provided: a plain dense one, and a
Schur-complement variant that eliminates a block-diagonal landmark block
(the standard trick for bundle-adjustment style problems where the number
of 3D points dwarfs the number of poses).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import NumericalFailure

MAX_DAMPING = 1e8


def huber_factor(norm, delta):
    """IRLS weight and robust cost for a whitened residual norm.

    Returns (weight, cost): the residual and Jacobian rows are scaled by
    sqrt(weight); cost is the Huber loss value (0.5 * norm^2 inside the
    delta band, linear outside).
    """
    if delta is None or norm <= delta:
        return 1.0, 0.5 * norm * norm
    return delta / norm, delta * (norm - 0.5 * delta)


def _whiten(residual, sqrt_info):
    if sqrt_info is None:
        return residual
    if np.isscalar(sqrt_info):
        return residual * sqrt_info
    sqrt_info = np.asarray(sqrt_info)
    if sqrt_info.ndim == 1:
        return residual * sqrt_info
    return sqrt_info @ residual


def _whiten_jac(jac, sqrt_info):
    if sqrt_info is None:
        return jac
    if np.isscalar(sqrt_info):
        return jac * sqrt_info
    sqrt_info = np.asarray(sqrt_info)
    if sqrt_info.ndim == 1:
        return jac * sqrt_info[:, None]
    return sqrt_info @ jac


def _damped(h_mat, damping):
    diag = np.maximum(np.diag(h_mat), 1e-12)
    return h_mat + damping * np.diag(diag)


def _try_cholesky_solve(h_mat, rhs):
    try:
        low = np.linalg.cholesky(h_mat)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(low, rhs)
    return np.linalg.solve(low.T, y)


@dataclass
class DenseNormalEquations:
    """Accumulator for H dx = -g over a single dense parameter vector."""

    size: int
    cost: float = 0.0
    cost_by_tag: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h_mat = np.zeros((self.size, self.size))
        self.grad = np.zeros(self.size)

    def add(self, blocks, residual, sqrt_info=None, huber_delta=None,
            tag=None):
        """Add one residual. ``blocks`` is a list of (offset, jacobian)."""
        r_w = _whiten(np.asarray(residual, dtype=float), sqrt_info)
        weight, rho = huber_factor(np.linalg.norm(r_w), huber_delta)
        self.cost += rho
        if tag is not None:
            self.cost_by_tag[tag] = self.cost_by_tag.get(tag, 0.0) + rho
        scale = np.sqrt(weight)
        r_w = r_w * scale
        mats = [(off, _whiten_jac(np.asarray(jac, dtype=float),
                                  sqrt_info) * scale)
                for off, jac in blocks]
        for off_a, jac_a in mats:
            sl_a = slice(off_a, off_a + jac_a.shape[1])
            self.grad[sl_a] += jac_a.T @ r_w
            for off_b, jac_b in mats:
                sl_b = slice(off_b, off_b + jac_b.shape[1])
                self.h_mat[sl_a, sl_b] += jac_a.T @ jac_b

    def add_batch(self, offset, jac, residuals, sqrt_info=1.0,
                  huber_delta=None, tag=None):
        """Add n independent residuals sharing one dense block.

        ``jac`` is (n, k, p) (ignored when the accumulator has size 0,
        which serves as a cost-only evaluator), ``residuals`` (n, k),
        ``sqrt_info`` a scalar.
        """
        r_w = np.asarray(residuals, dtype=float) * sqrt_info
        weight, rho = _huber_batch(r_w, huber_delta)
        self.cost += float(rho.sum())
        if tag is not None:
            self.cost_by_tag[tag] = self.cost_by_tag.get(tag, 0.0) \
                + float(rho.sum())
        if self.size == 0:
            return
        scale = np.sqrt(weight)
        r_w = r_w * scale[:, None]
        jac_w = np.asarray(jac, dtype=float) * sqrt_info * scale[:, None, None]
        sl = slice(offset, offset + jac_w.shape[2])
        self.grad[sl] += np.einsum("nij,ni->j", jac_w, r_w)
        self.h_mat[sl, sl] += np.einsum("nij,nik->jk", jac_w, jac_w)

    @property
    def gradient_norm(self):
        return float(np.abs(self.grad).max()) if self.size else 0.0

    def solve(self, damping):
        if self.size == 0:
            return np.zeros(0)
        return _try_cholesky_solve(_damped(self.h_mat, damping), -self.grad)


def _huber_batch(r_w, delta):
    norms = np.linalg.norm(r_w, axis=1)
    if delta is None:
        return np.ones(len(norms)), 0.5 * norms ** 2
    weight = np.ones(len(norms))
    out = norms > delta
    weight[out] = delta / norms[out]
    rho = 0.5 * norms ** 2
    rho[out] = delta * (norms[out] - 0.5 * delta)
    return weight, rho


@dataclass
class SchurNormalEquations:
    """Normal equations with a dense block and eliminated landmark blocks.

    The parameter vector is (dense params, landmark 0, landmark 1, ...)
    with every landmark of dimension ``lm_dim``.  Solving forms the Schur
    complement onto the dense block and back-substitutes the landmarks.
    """

    dense_size: int
    n_landmarks: int
    lm_dim: int = 3
    cost: float = 0.0
    cost_by_tag: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h_dd = np.zeros((self.dense_size, self.dense_size))
        self.g_d = np.zeros(self.dense_size)
        self.h_ll = np.zeros((self.n_landmarks, self.lm_dim, self.lm_dim))
        self.g_l = np.zeros((self.n_landmarks, self.lm_dim))
        self.h_dl = np.zeros((self.dense_size, self.n_landmarks * self.lm_dim))

    def add(self, blocks, residual, sqrt_info=None, huber_delta=None,
            tag=None, lm_index=None, lm_jacobian=None):
        """Add one residual touching dense blocks and at most one landmark."""
        r_w = _whiten(np.asarray(residual, dtype=float), sqrt_info)
        weight, rho = huber_factor(np.linalg.norm(r_w), huber_delta)
        self.cost += rho
        if tag is not None:
            self.cost_by_tag[tag] = self.cost_by_tag.get(tag, 0.0) + rho
        scale = np.sqrt(weight)
        r_w = r_w * scale
        mats = [(off, _whiten_jac(np.asarray(jac, dtype=float),
                                  sqrt_info) * scale)
                for off, jac in blocks]
        for off_a, jac_a in mats:
            sl_a = slice(off_a, off_a + jac_a.shape[1])
            self.g_d[sl_a] += jac_a.T @ r_w
            for off_b, jac_b in mats:
                sl_b = slice(off_b, off_b + jac_b.shape[1])
                self.h_dd[sl_a, sl_b] += jac_a.T @ jac_b
        if lm_index is None:
            return
        jac_l = _whiten_jac(np.asarray(lm_jacobian, dtype=float),
                            sqrt_info) * scale
        self.h_ll[lm_index] += jac_l.T @ jac_l
        self.g_l[lm_index] += jac_l.T @ r_w
        sl_l = slice(lm_index * self.lm_dim, (lm_index + 1) * self.lm_dim)
        for off_a, jac_a in mats:
            sl_a = slice(off_a, off_a + jac_a.shape[1])
            self.h_dl[sl_a, sl_l] += jac_a.T @ jac_l

    def add_batch(self, offset, jac, residuals, lm_indices, lm_jacobians,
                  sqrt_info=1.0, huber_delta=None, tag=None):
        """Add n independent residuals sharing one dense block, each
        touching one landmark.

        ``jac`` is (n, k, p), ``residuals`` (n, k), ``lm_indices`` (n,)
        with no repeated index, ``lm_jacobians`` (n, k, lm_dim),
        ``sqrt_info`` a scalar.
        """
        r_w = np.asarray(residuals, dtype=float) * sqrt_info
        weight, rho = _huber_batch(r_w, huber_delta)
        self.cost += float(rho.sum())
        if tag is not None:
            self.cost_by_tag[tag] = self.cost_by_tag.get(tag, 0.0) \
                + float(rho.sum())
        scale = np.sqrt(weight)
        r_w = r_w * scale[:, None]
        jac_d = np.asarray(jac, dtype=float) * sqrt_info * scale[:, None, None]
        jac_l = np.asarray(lm_jacobians, dtype=float) * sqrt_info \
            * scale[:, None, None]
        sl = slice(offset, offset + jac_d.shape[2])
        self.g_d[sl] += np.einsum("nij,ni->j", jac_d, r_w)
        self.h_dd[sl, sl] += np.einsum("nij,nik->jk", jac_d, jac_d)
        # lm_indices are unique within one call, so plain fancy-index
        # accumulation is safe (and much faster than np.add.at)
        self.h_ll[lm_indices] += np.einsum("nij,nik->njk", jac_l, jac_l)
        self.g_l[lm_indices] += np.einsum("nij,ni->nj", jac_l, r_w)
        cross = np.einsum("nij,nik->njk", jac_d, jac_l)
        view = self.h_dl.reshape(self.dense_size, self.n_landmarks,
                                 self.lm_dim)[sl].transpose(1, 0, 2)
        view[lm_indices] += cross

    @property
    def gradient_norm(self):
        parts = []
        if self.dense_size:
            parts.append(np.abs(self.g_d).max())
        if self.n_landmarks:
            parts.append(np.abs(self.g_l).max())
        return float(max(parts)) if parts else 0.0

    def solve(self, damping):
        n_l = self.n_landmarks * self.lm_dim
        # damp the landmark blocks and invert them
        h_ll = self.h_ll.copy()
        for k in range(self.n_landmarks):
            h_ll[k] = _damped(h_ll[k], damping)
        try:
            h_ll_inv = np.linalg.inv(h_ll) if self.n_landmarks else h_ll
        except np.linalg.LinAlgError:
            return None
        # reduced system on the dense block
        w_mat = self.h_dl.reshape(self.dense_size, self.n_landmarks,
                                  self.lm_dim)
        w_inv = np.einsum("dki,kij->dkj", w_mat, h_ll_inv)
        h_red = (_damped(self.h_dd, damping)
                 - np.einsum("dkj,ekj->de", w_inv, w_mat))
        g_red = self.g_d - np.einsum("dkj,kj->d", w_inv, self.g_l)
        dx_d = _try_cholesky_solve(h_red, -g_red)
        if dx_d is None:
            return None
        # back-substitute the landmarks
        rhs = -self.g_l - np.einsum("dkj,d->kj", w_mat, dx_d)
        dx_l = np.einsum("kij,kj->ki", h_ll_inv, rhs)
        return np.concatenate([dx_d, dx_l.ravel()])


class Linearization(Protocol):
    cost: float

    @property
    def gradient_norm(self) -> float: ...

    def solve(self, damping) -> np.ndarray | None: ...


class Problem(Protocol):
    def linearize(self, state) -> Linearization: ...

    def cost(self, state) -> float: ...

    def retract(self, state, step): ...


@dataclass(frozen=True)
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    reason: str
    cost_by_tag: dict


def solve_nls(problem, state, max_iterations=50, cost_tol=1e-8,
              gradient_tol=1e-10, step_tol=1e-12, initial_damping=1e-4):
    """Levenberg-Marquardt with multiplicative diagonal damping.

    Steps are accepted only when they strictly lower the cost.  Stops on
    relative cost decrease below ``cost_tol``, gradient infinity norm
    below ``gradient_tol``, accepted step norm below ``step_tol`` (the
    relative-decrease test is meaningless once the cost sits at machine
    noise), or ``max_iterations``.  Raises
    :class:`NumericalFailure` when the normal equations stay unsolvable
    up to the damping cap.
    """
    damping = initial_damping
    lin = problem.linearize(state)
    initial_cost = lin.cost
    cost = initial_cost
    reason = "max_iterations"
    converged = False
    iteration = 0
    while iteration < max_iterations:
        iteration += 1
        if lin.gradient_norm < gradient_tol:
            reason = "gradient"
            converged = True
            break
        accepted = False
        while damping <= MAX_DAMPING:
            step = lin.solve(damping)
            if step is None:
                damping *= 10.0
                continue
            trial = problem.retract(state, step)
            trial_cost = problem.cost(trial)
            if np.isfinite(trial_cost) and trial_cost < cost:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            if lin.solve(MAX_DAMPING) is None:
                raise NumericalFailure(
                    "normal equations unsolvable at maximum damping")
            # solvable but no descent direction left: stalled minimum
            reason = "stalled"
            converged = True
            break
        rel_drop = (cost - trial_cost) / max(cost, 1e-300)
        step_norm = float(np.abs(step).max())
        state = trial
        cost = trial_cost
        damping = max(damping / 10.0, 1e-12)
        lin = problem.linearize(state)
        if rel_drop < cost_tol:
            reason = "cost"
            converged = True
            break
        if step_norm < step_tol:
            reason = "step"
            converged = True
            break
    report = SolveReport(initial_cost=initial_cost, final_cost=cost,
                         iterations=iteration, converged=converged,
                         reason=reason,
                         cost_by_tag=dict(getattr(lin, "cost_by_tag", {})))
    return state, report
