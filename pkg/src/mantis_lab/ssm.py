"""Frozen selective-SSM backbone: blocks, ZOH discretization, the scan.

The state matrix is diagonal per channel (S6 convention): ``a[c]`` holds
N negative reals, stored as log-magnitudes so a = -exp(a_log).  Each
step's input/readout operators (B_t, C_t) are shared across channels and
produced from the step input; the discretization step Delta_t is
per-channel through a low-rank projection and a softplus.

Block wiring, with Linear/DWConv/LN shapes as declared in the parameter
container:

    xn   = LayerNorm(Z_in)
    X    = SiLU(DWConv(Linear_in(xn)))          causal depthwise, width w
    y    = scan(X)                              optionally SAA-controlled
    gate = SiLU(Linear_gate(Z_in))
    Z    = Linear_out(y + gate)

The scan is strictly sequential; that keeps the adapter's dependence on
h_{t-1} exact and is the honest desk-scale rendition of the recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError


@dataclass
class BackboneParams:
    """One frozen block's parameters (all Tensors)."""

    ln_scale: Tensor  # (d,)
    ln_shift: Tensor  # (d,)
    w_in: Tensor      # (d_e, d)
    b_in: Tensor      # (d_e,)
    conv_w: Tensor    # (w, d_e) depthwise causal kernel
    conv_b: Tensor    # (d_e,)
    w_gate: Tensor    # (d_e, d)
    b_gate: Tensor    # (d_e,)
    w_out: Tensor     # (d, d_e)
    b_out: Tensor     # (d,)
    a_log: Tensor     # (d_e, N): a = -exp(a_log)
    w_x: Tensor       # (dt_rank + 2N, d_e) produces (dt_x, B_t, C_t)
    w_dt: Tensor      # (d_e, dt_rank)
    b_dt: Tensor      # (d_e,)

    @property
    def state_dim(self) -> int:
        return self.a_log.data.shape[1]

    @property
    def expanded_dim(self) -> int:
        return self.a_log.data.shape[0]

    @property
    def dt_rank(self) -> int:
        return self.w_x.data.shape[0] - 2 * self.state_dim


def _wrap_call(fn, *args):
    """Run fn on Tensors; return plain arrays when no input was a Tensor."""
    if any(isinstance(a, Tensor) for a in args):
        return fn(*[ad.as_tensor(a) for a in args])
    with ad.no_grad():
        out = fn(*[ad.as_tensor(a) for a in args])
    return tuple(t.data for t in out) if isinstance(out, tuple) else out.data


def zoh_discretize(a, b_in, delta):
    """Zero-order-hold discretization of a diagonal continuous system.

    A_hat = exp(a * delta); B_hat = (exp(a * delta) - 1) / a * b_in, with
    the removable singularity at |a * delta| < 1e-8 replaced by its limit
    delta * b_in.  Inputs broadcast elementwise.
    """

    def impl(a_t, b_t, d_t):
        a_hat = ad.exp(a_t * d_t)
        b_hat = ad.zoh_input_factor(a_t, d_t) * b_t
        return a_hat, b_hat

    return _wrap_call(impl, a, b_in, delta)


@dataclass
class OperatorBundle:
    """Per-step selective-SSM operators, frozen and controlled forms.

    Shapes: n steps, d_e channels, N states.  ``a`` is the frozen
    continuous diagonal; the ``*_ctl`` fields are the controlled
    variants (equal to the frozen ones when no control is applied) and
    ``a_hat``/``b_hat`` their ZOH discretizations.
    """

    a: np.ndarray          # (d_e, N)
    b_in: np.ndarray       # (n, N)
    c_out: np.ndarray      # (n, N)
    delta: np.ndarray      # (n, d_e)
    a_ctl: np.ndarray      # (n, d_e, N)
    b_ctl: np.ndarray      # (n, N)
    c_ctl: np.ndarray      # (n, N)
    delta_ctl: np.ndarray  # (n, d_e)
    a_hat: np.ndarray = field(init=False)
    b_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        a_hat, b_hat = zoh_discretize(
            self.a_ctl, self.b_ctl[:, None, :], self.delta_ctl[:, :, None])
        self.a_hat = a_hat
        self.b_hat = b_hat
        if not (np.all(np.isfinite(self.a_hat)) and np.all(np.isfinite(self.b_hat))):
            raise ValidationError("non-finite discretized operators")

    @classmethod
    def frozen(cls, a, b_in, c_out, delta) -> "OperatorBundle":
        n = b_in.shape[0]
        a_ctl = np.broadcast_to(a, (n,) + a.shape).copy()
        return cls(a, b_in, c_out, delta, a_ctl, b_in.copy(), c_out.copy(),
                   delta.copy())

    @property
    def steps(self) -> int:
        return self.b_in.shape[0]

    def contraction_factor(self) -> float:
        """max_t of the largest |A_hat| entry; < 1 for a contractive system."""
        return float(np.abs(self.a_hat).max())


def selective_scan(x: np.ndarray, ops: OperatorBundle):
    """Run the recurrence h_t = A_hat_t h_{t-1} + B_hat_t x_t, y_t = C_t h_t.

    ``x`` has shape (n, d_e); h_0 = 0.  Returns (y, h) with y of shape
    (n, d_e) and the hidden trajectory h of shape (n, d_e, N).
    """
    x = np.asarray(x, dtype=np.float64)
    n, d_e = x.shape
    if n != ops.steps:
        raise ValidationError(f"{n} inputs vs {ops.steps} operator steps")
    h = np.zeros((d_e, ops.a.shape[1]))
    ys = np.empty((n, d_e))
    hs = np.empty((n, d_e, ops.a.shape[1]))
    for t in range(n):
        h = ops.a_hat[t] * h + ops.b_hat[t] * x[t][:, None]
        hs[t] = h
        ys[t] = (h * ops.c_ctl[t][None, :]).sum(axis=1)
    return ys, hs


def _causal_depthwise_conv(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along axis -2 of (..., n, d_e)."""
    w = kernel.shape[0]
    n = x.shape[-2]
    pad_shape = x.shape[:-2] + (w - 1,) + x.shape[-1:]
    padded = ad.concat([Tensor(np.zeros(pad_shape)), x], axis=-2)
    out = None
    for j in range(w):
        term = padded[..., j:j + n, :] * kernel[j]
        out = term if out is None else out + term
    return out + bias


@dataclass
class ScanCapture:
    """Numpy copies of the per-step operators seen by one scan."""

    a_ctl: list = field(default_factory=list)
    b_ctl: list = field(default_factory=list)
    c_ctl: list = field(default_factory=list)
    delta_ctl: list = field(default_factory=list)
    controls: list = field(default_factory=list)  # u_t arrays (SAA runs)
    xs: list = field(default_factory=list)        # scan inputs x_t
    dead_zone_margins: list = field(default_factory=list)  # per-step min ||q|-lam|

    def inputs(self) -> np.ndarray:
        return np.stack(self.xs)

    def bundle(self, frozen: "ScanCapture | None" = None) -> OperatorBundle:
        """Build a bundle; ``frozen`` supplies the baseline operators.

        Without ``frozen`` this capture is treated as the frozen run
        itself (its per-step continuous diagonal must then be constant).
        """
        base = frozen if frozen is not None else self
        return OperatorBundle(
            base.a_ctl[0], np.stack(base.b_ctl), np.stack(base.c_ctl),
            np.stack(base.delta_ctl),
            np.stack(self.a_ctl), np.stack(self.b_ctl),
            np.stack(self.c_ctl), np.stack(self.delta_ctl))


def block_forward(
    z_in: Tensor,
    block: BackboneParams,
    adapter=None,
    e: Tensor | None = None,
    capture: ScanCapture | None = None,
    label: str = "block",
) -> Tensor:
    """One SAA-Mamba block over (B, n, d) input tokens.

    With ``adapter`` absent the scan runs on the frozen operators.  With
    an adapter, each step's operators pass through the control chain in
    :mod:`mantis_lab.adapter` before discretization; ``e`` is the
    branch's order-aware summary vector (B, d).  ``capture`` (single
    sample only) records the per-step operators for analysis.
    """
    from . import adapter as adapter_mod

    z_in = ad.as_tensor(z_in)
    squeeze = z_in.ndim == 2
    if squeeze:
        z_in = ad.expand_dims(z_in, 0)
    bsz, n, _ = z_in.shape
    d_e, n_state = block.expanded_dim, block.state_dim
    dt_rank = block.dt_rank

    xn = ad.layer_norm(z_in, block.ln_scale, block.ln_shift)
    pre = ad.matmul(xn, ad.swapaxes(block.w_in, 0, 1)) + block.b_in
    x_seq = ad.silu(_causal_depthwise_conv(pre, block.conv_w, block.conv_b))

    proj = ad.matmul(x_seq, ad.swapaxes(block.w_x, 0, 1))
    dt_x = proj[:, :, :dt_rank]
    b_seq = proj[:, :, dt_rank:dt_rank + n_state]          # (B, n, N)
    c_seq = proj[:, :, dt_rank + n_state:]                 # (B, n, N)
    delta_pre = ad.matmul(dt_x, ad.swapaxes(block.w_dt, 0, 1)) + block.b_dt

    if capture is not None and bsz != 1:
        raise ValidationError("operator capture requires a single sample")

    if adapter is None:
        a_cont = -ad.exp(block.a_log)                       # (d_e, N)
        h = Tensor(np.zeros((bsz, d_e, n_state)))
        ys = []
        for t in range(n):
            delta_t = ad.softplus(delta_pre[:, t])          # (B, d_e)
            a_hat, b_hat = zoh_discretize(
                a_cont, ad.expand_dims(b_seq[:, t], 1),
                ad.expand_dims(delta_t, 2))
            h = a_hat * h + b_hat * ad.expand_dims(x_seq[:, t], 2)
            y_t = (h * ad.expand_dims(c_seq[:, t], 1)).sum(axis=2)
            ys.append(ad.expand_dims(y_t, 1))
            if capture is not None:
                capture.a_ctl.append(a_cont.data.copy())
                capture.b_ctl.append(b_seq.data[0, t].copy())
                capture.c_ctl.append(c_seq.data[0, t].copy())
                capture.delta_ctl.append(delta_t.data[0].copy())
                capture.xs.append(x_seq.data[0, t].copy())
        y = ad.concat(ys, axis=1)
    else:
        theta = adapter_mod.stack_operator_state(
            block.a_log, b_seq, c_seq, delta_pre)           # (B, n, m)
        a_cont = -ad.exp(block.a_log)
        # step-independent controller projections, hoisted out of the scan
        px_all = ad.matmul(xn, ad.swapaxes(adapter["w_x"], 0, 1))
        pe = ad.matmul(e, ad.swapaxes(adapter["w_e"], 0, 1))
        wh_t = ad.swapaxes(adapter["w_h"], 0, 1)
        h = Tensor(np.zeros((bsz, d_e, n_state)))
        ys = []
        for t in range(n):
            ph = ad.matmul(h.mean(axis=1), wh_t)
            phi = adapter_mod.fuse_control_inputs(px_all[:, t], ph, pe, adapter)
            step = adapter_mod.apply_control(
                adapter_mod.generate_control(phi, adapter),
                adapter_mod.FrozenStepOps(
                    block.a_log, b_seq[:, t], c_seq[:, t],
                    delta_pre[:, t], theta[:, t], a_cont),
                adapter)
            h = step.a_hat * h + step.b_hat * ad.expand_dims(x_seq[:, t], 2)
            y_t = (h * ad.expand_dims(step.c_ctl, 1)).sum(axis=2)
            ys.append(ad.expand_dims(y_t, 1))
            if capture is not None:
                capture.a_ctl.append(step.a_ctl.data[0].copy())
                capture.b_ctl.append(step.b_ctl.data[0].copy())
                capture.c_ctl.append(step.c_ctl.data[0].copy())
                capture.delta_ctl.append(step.delta_ctl.data[0].copy())
                capture.controls.append(step.u.data[0].copy())
                capture.xs.append(x_seq.data[0, t].copy())
                if step.state.q is not None and step.state.lam is not None:
                    capture.dead_zone_margins.append(float(np.abs(
                        np.abs(step.state.q.data) - step.state.lam.data).min()))
        y = ad.concat(ys, axis=1)

    gate = ad.silu(ad.matmul(z_in, ad.swapaxes(block.w_gate, 0, 1)) + block.b_gate)
    out = ad.matmul(y + gate, ad.swapaxes(block.w_out, 0, 1)) + block.b_out
    ad.check_finite(out, f"{label} output (n={n})")
    return out[0] if squeeze else out
