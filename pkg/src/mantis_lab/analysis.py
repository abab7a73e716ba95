"""Transfer-kernel construction and the appendix-style audits.

The transfer matrix is the unrolled form of the recurrence: block (t, i)
maps the input at step i to the output at step t through the operator
chain C_t (prod_{j=i+1..t} A_hat_j) B_hat_i.  Because the state diagonal
is per-channel, every block is itself diagonal over channels and is
stored as its d_e diagonal entries.  Construction is O(n^2) on purpose:
this is the audit path, not the production path, and it must stay
independent of the sequential scan it checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .ssm import OperatorBundle, selective_scan


@dataclass
class TransferMatrix:
    """Strictly block-lower-triangular transfer operator.

    ``diag_blocks[t, i, c]`` is the scalar mapping input channel c at
    step i to output channel c at step t; entries with i > t are zero
    by construction and never read.
    """

    diag_blocks: np.ndarray  # (n, n, d_e)

    @property
    def steps(self) -> int:
        return self.diag_blocks.shape[0]

    def block(self, t: int, i: int) -> np.ndarray:
        """Dense (d_e, d_e) block W_{t,i} (1-based step indices)."""
        if not 1 <= i <= t <= self.steps:
            raise ArgumentError(f"block ({t}, {i}) outside the lower triangle")
        return np.diag(self.diag_blocks[t - 1, i - 1])

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Multiply the stacked input sequence: y_t = sum_i W_{t,i} x_i."""
        return np.einsum("tic,ic->tc", self.diag_blocks, x)

    def dense(self) -> np.ndarray:
        """Materialize the full (n*d_e, n*d_e) matrix (small n only)."""
        n, _, d_e = self.diag_blocks.shape
        out = np.zeros((n * d_e, n * d_e))
        for t in range(n):
            for i in range(t + 1):
                out[t * d_e:(t + 1) * d_e, i * d_e:(i + 1) * d_e] = np.diag(
                    self.diag_blocks[t, i])
        return out


def build_transfer_matrix(ops: OperatorBundle) -> TransferMatrix:
    """Unroll the discretized operators into the explicit transfer matrix."""
    n = ops.steps
    d_e, n_state = ops.a.shape
    blocks = np.zeros((n, n, d_e))
    for i in range(n):
        # chain[c, k] = (prod_{j=i+1..t} A_hat_j)[c, k] * B_hat_i[c, k]
        chain = ops.b_hat[i].copy()
        for t in range(i, n):
            if t > i:
                chain = ops.a_hat[t] * chain
            blocks[t, i] = chain @ ops.c_ctl[t]
    return TransferMatrix(blocks)


@dataclass
class PerturbationReport:
    """Blockwise kernel change plus the operator-space perturbations."""

    delta_blocks: np.ndarray            # (n, n, d_e)
    delta_ops: list[np.ndarray] = field(default_factory=list)  # (m, m) each
    ranks: list[int] = field(default_factory=list)
    support_sizes: list[int] = field(default_factory=list)

    def max_block_change(self) -> float:
        return float(np.abs(self.delta_blocks).max())


def numerical_rank(mat: np.ndarray, rel_tol: float = 1e-10) -> int:
    """Rank with singular values below rel_tol * sigma_max treated as zero."""
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def kernel_perturbation(
    frozen: TransferMatrix,
    controlled: TransferMatrix,
    controls: list[np.ndarray] | None = None,
    u_mat: np.ndarray | None = None,
    v_mat: np.ndarray | None = None,
) -> PerturbationReport:
    """Blockwise difference of two kernels, with per-step rank audit.

    When the control trajectory (u_t) and the low-rank factors are
    supplied, the report also carries each step's operator-space
    perturbation U diag(u_t) V, its numerical rank, and |u_t|_0.
    """
    if frozen.diag_blocks.shape != controlled.diag_blocks.shape:
        raise ArgumentError("transfer matrices have mismatched shapes")
    report = PerturbationReport(controlled.diag_blocks - frozen.diag_blocks)
    if controls is not None:
        if u_mat is None or v_mat is None:
            raise ArgumentError("rank audit needs the low-rank factors U, V")
        for u in controls:
            delta = u_mat @ np.diag(u) @ v_mat
            report.delta_ops.append(delta)
            report.ranks.append(numerical_rank(delta))
            report.support_sizes.append(int(np.sum(u != 0.0)))
    return report


@dataclass
class DeviationReport:
    """Measured hidden-state deviations against the geometric-series bound."""

    deviations: np.ndarray  # (n,) measured ||delta h_t||_2
    bounds: np.ndarray      # (n,) bound values
    rho: float
    eps_a: float
    eps_b: float
    h_bound: float
    x_bound: float
    contractive: bool
    passed: bool

    def as_dict(self) -> dict:
        return {
            "rho": self.rho, "eps_a": self.eps_a, "eps_b": self.eps_b,
            "h_bound": self.h_bound, "x_bound": self.x_bound,
            "contractive": self.contractive, "passed": self.passed,
            "max_deviation": float(self.deviations.max(initial=0.0)),
            "max_bound": float(self.bounds.max(initial=0.0)),
        }


def deviation_bound_check(
    frozen: OperatorBundle, adapted: OperatorBundle, x: np.ndarray
) -> DeviationReport:
    """Check ||dh_t|| <= rho^t ||dh_0|| + (1-rho^t)/(1-rho) (eps_A H + eps_B X).

    Both trajectories start from h_0 = 0 on the same inputs.  rho is the
    largest |A_hat| entry of the frozen run (the transition is diagonal,
    so this is its operator norm); eps_A / eps_B are the largest
    operator-norm changes; H and X are measured from the adapted run.
    With rho >= 1 the bound is vacuous and the report says so instead of
    failing.
    """
    _, h_frozen = selective_scan(x, frozen)
    _, h_adapted = selective_scan(x, adapted)
    n = x.shape[0]

    rho = frozen.contraction_factor()
    eps_a = float(np.abs(adapted.a_hat - frozen.a_hat).max())
    # B_hat maps the d_e input onto the (d_e x N) state block-diagonally;
    # its operator 2-norm is the largest per-channel row norm
    eps_b = float(np.linalg.norm(adapted.b_hat - frozen.b_hat, axis=2).max())
    h_bound = float(np.linalg.norm(h_adapted.reshape(n, -1), axis=1).max())
    x_bound = float(np.linalg.norm(x, axis=1).max())

    deviations = np.linalg.norm((h_adapted - h_frozen).reshape(n, -1), axis=1)
    steps = np.arange(1, n + 1)
    drive = eps_a * h_bound + eps_b * x_bound
    contractive = rho < 1.0
    if contractive:
        bounds = (1.0 - rho ** steps) / (1.0 - rho) * drive
        passed = bool(np.all(deviations <= bounds + 1e-12))
    else:
        bounds = np.full(n, np.inf)
        passed = False
    return DeviationReport(deviations, bounds, rho, eps_a, eps_b,
                           h_bound, x_bound, contractive, passed)


# -- randomized system generation -------------------------------------------


def random_contractive_system(
    rng: np.random.Generator,
    n: int,
    d_e: int,
    n_state: int,
    rho_max: float = 0.9,
):
    """Random frozen operators with contraction factor at most rho_max.

    a entries lie in [-3, -0.6] and delta >= -ln(rho_max)/0.6, which
    pins every exp(a * delta) at or below rho_max.
    """
    a = -np.exp(rng.uniform(np.log(0.6), np.log(3.0), size=(d_e, n_state)))
    delta_min = -np.log(rho_max) / 0.6
    delta = rng.uniform(delta_min, delta_min + 1.5, size=(n, d_e))
    b_in = rng.normal(size=(n, n_state))
    c_out = rng.normal(size=(n, n_state))
    return OperatorBundle.frozen(a, b_in, c_out, delta)


def random_controlled_pair(
    rng: np.random.Generator,
    n: int,
    d_e: int,
    n_state: int,
    r: int,
    control_scale: float = 0.05,
    sparsity: float = 0.5,
    rho_max: float = 0.9,
):
    """A frozen system plus its low-rank-controlled counterpart.

    Returns (frozen, adapted, controls, u_mat, v_mat).  Controls are
    sparse r-vectors; the perturbation follows the same stacked-state
    partition as the adapter (log-magnitude for a, preactivation for
    delta), so sign-domain safety holds by construction.
    """
    from .adapter import modulate_operators

    frozen = random_contractive_system(rng, n, d_e, n_state, rho_max)
    m = 3 * n_state + 1
    u_mat = rng.normal(scale=1.0 / np.sqrt(m), size=(m, r))
    v_mat = rng.normal(scale=1.0 / np.sqrt(m), size=(r, m))
    delta_pre = np.log(np.expm1(frozen.delta))  # softplus preimage
    a_log = np.log(-frozen.a)

    controls = []
    a_ctl = np.empty((n, d_e, n_state))
    b_ctl = np.empty((n, n_state))
    c_ctl = np.empty((n, n_state))
    delta_ctl = np.empty((n, d_e))
    for t in range(n):
        u = rng.normal(scale=control_scale, size=r)
        u[rng.random(r) < sparsity] = 0.0
        controls.append(u)
        theta = np.concatenate([
            a_log.mean(axis=0), frozen.b_in[t], frozen.c_out[t],
            [delta_pre[t].mean()]])
        dtheta = modulate_operators(theta, u, u_mat, v_mat) - theta
        a_ctl[t] = -np.exp(a_log + dtheta[:n_state])
        b_ctl[t] = frozen.b_in[t] + dtheta[n_state:2 * n_state]
        c_ctl[t] = frozen.c_out[t] + dtheta[2 * n_state:3 * n_state]
        delta_ctl[t] = np.logaddexp(0.0, delta_pre[t] + dtheta[3 * n_state])
    adapted = OperatorBundle(frozen.a, frozen.b_in, frozen.c_out, frozen.delta,
                             a_ctl, b_ctl, c_ctl, delta_ctl)
    return frozen, adapted, controls, u_mat, v_mat


# -- wall-time scaling --------------------------------------------------------


def complexity_probe(model_config, lengths: list[int], adapter_on: bool = True,
                     repeats: int = 3, seed: int = 0) -> dict:
    """Forward wall time of one block across sequence lengths.

    Returns the measured (n, seconds) table and a least-squares linear
    fit with its R^2.  Times take the best of ``repeats`` runs.
    """
    from . import autodiff as ad
    from .model import build_model, bind_all

    if any(b >= a for a, b in zip(lengths[1:], lengths)):
        raise ArgumentError("lengths must be strictly increasing")
    rng = np.random.default_rng(seed)
    times = []
    model = build_model(model_config, rng)
    params = bind_all(model.store)
    block = model.block_params(params, 0)
    adapter_p = model.adapter_params(params, 0) if adapter_on else None
    for n in lengths:
        z = rng.normal(size=(1, n, model_config.d))
        e = rng.normal(size=(1, model_config.d))
        from .ssm import block_forward
        with ad.no_grad():
            block_forward(z, block, adapter_p, ad.Tensor(e))  # warm-up
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                block_forward(z, block, adapter_p, ad.Tensor(e))
                best = min(best, time.perf_counter() - t0)
        times.append((n, best))
    xs = np.array([t[0] for t in times], dtype=float)
    ys = np.array([t[1] for t in times])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return {"times": times, "slope": float(slope),
            "intercept": float(intercept), "r_squared": r2}
