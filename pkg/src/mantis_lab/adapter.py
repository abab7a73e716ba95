"""State-aware adapter: sparse control signals over the scan operators.

Per sequence step the adapter projects (current token, pooled previous
hidden state, order summary) into a shared control space, derives a
sparse control vector by proximal soft-thresholding, and applies a
low-rank multiplicative correction to the stacked operator state

    theta_t = (a log-magnitudes | B_t | C_t | Delta preactivation)

of length m = 3N + 1, shared across channels.  The correction is
partitioned back onto the four operators in their sign-safe domains:
the state diagonal keeps its log-magnitude parametrization (stays
negative) and Delta passes through softplus (stays positive), so the
discretized transition always remains contractive.

``count_parameters`` reports the exact trainable tally of one adapter
module; for the thresholding/gating controllers with the concat-MLP
fusion this equals 2*d_phi*d + d_phi*d_h + 3*d_phi^2 + d_phi +
2*r*d_phi + 2*m*r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InternalError
from .ssm import zoh_discretize

CONTROLLERS = ("soft", "hard", "sigmoid", "tanh", "dense")
FUSIONS = ("add", "concat", "gated", "xattn", "concat_mlp")
OPERATOR_NAMES = ("A", "B", "C", "Delta")


@dataclass(frozen=True)
class AdapterConfig:
    d: int
    d_h: int
    d_phi: int
    r: int
    m: int
    controller: str = "soft"
    fusion: str = "concat_mlp"
    modulate: tuple[str, ...] = OPERATOR_NAMES

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        bad = set(self.modulate) - set(OPERATOR_NAMES)
        if bad:
            raise ConfigError(f"unknown modulation targets {sorted(bad)}")


def adapter_param_shapes(cfg: AdapterConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map of every trainable tensor in one adapter module."""
    shapes = {
        "w_x": (cfg.d_phi, cfg.d),
        "w_h": (cfg.d_phi, cfg.d_h),
        "w_e": (cfg.d_phi, cfg.d),
        "u_mat": (cfg.m, cfg.r),
        "v_mat": (cfg.r, cfg.m),
    }
    if cfg.fusion == "concat_mlp":
        shapes["fuse_w"] = (cfg.d_phi, 3 * cfg.d_phi)
        shapes["fuse_b"] = (cfg.d_phi,)
    elif cfg.fusion == "concat":
        shapes["fuse_w"] = (cfg.d_phi, 3 * cfg.d_phi)
    elif cfg.fusion == "gated":
        shapes["gate_w"] = (cfg.d_phi, cfg.d_phi)
    elif cfg.fusion == "xattn":
        shapes["attn_q"] = (cfg.d_phi, cfg.d_phi)
        shapes["attn_k"] = (cfg.d_phi, cfg.d_phi)
        shapes["attn_v"] = (cfg.d_phi, cfg.d_phi)
    if cfg.controller == "dense":
        shapes["ctrl_w1"] = (cfg.d_phi, cfg.d_phi)
        shapes["ctrl_w2"] = (cfg.r, cfg.d_phi)
    else:
        shapes["w_drv"] = (cfg.r, cfg.d_phi)
        shapes["w_gt"] = (cfg.r, cfg.d_phi)
    return shapes


def count_parameters(cfg: AdapterConfig) -> int:
    """Actual trainable-parameter tally of one adapter module."""
    return sum(int(np.prod(s)) for s in adapter_param_shapes(cfg).values())


def modulation_mask(cfg: AdapterConfig) -> np.ndarray:
    """0/1 vector over theta selecting which operator slots to perturb."""
    n_state = (cfg.m - 1) // 3
    mask = np.zeros(cfg.m)
    spans = {"A": (0, n_state), "B": (n_state, 2 * n_state),
             "C": (2 * n_state, 3 * n_state), "Delta": (3 * n_state, cfg.m)}
    for name in cfg.modulate:
        lo, hi = spans[name]
        mask[lo:hi] = 1.0
    return mask


@dataclass
class AdapterParams:
    config: AdapterConfig
    tensors: dict[str, Tensor]
    mask: np.ndarray = field(init=False)

    def __post_init__(self):
        expected = adapter_param_shapes(self.config)
        for name, shape in expected.items():
            got = self.tensors[name].data.shape
            if got != shape:
                raise ConfigError(f"adapter tensor {name}: shape {got} != {shape}")
        self.mask = modulation_mask(self.config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class ControlState:
    """Per-step controller internals (phi, drive, thresholds, control)."""

    phi: Tensor
    q: Tensor | None
    lam: Tensor | None
    u: Tensor


def soft_threshold(q, lam):
    """sign(q) * max(|q| - lam, 0): the proximal map of the L1 penalty."""
    lam_arr = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise InternalError("soft_threshold requires strictly positive thresholds")
    if isinstance(q, Tensor) or isinstance(lam, Tensor):
        return ad.soft_threshold(q, lam)
    return ad.soft_threshold(Tensor(q), Tensor(lam)).data


def control_feature(x_t, h_pooled, e, params: AdapterParams) -> Tensor:
    """Fuse token / pooled-state / order projections into phi_t (B, d_phi)."""
    x_t, h_pooled, e = ad.as_tensor(x_t), ad.as_tensor(h_pooled), ad.as_tensor(e)
    t = params.tensors
    px = ad.matmul(x_t, ad.swapaxes(t["w_x"], 0, 1))
    ph = ad.matmul(h_pooled, ad.swapaxes(t["w_h"], 0, 1))
    pe = ad.matmul(e, ad.swapaxes(t["w_e"], 0, 1))
    return fuse_control_inputs(px, ph, pe, params)


def fuse_control_inputs(px: Tensor, ph: Tensor, pe: Tensor,
                        params: AdapterParams) -> Tensor:
    """Fusion stage over already-projected (B, d_phi) inputs."""
    t = params.tensors
    kind = params.config.fusion
    if kind == "concat_mlp":
        joint = ad.concat([px, ph, pe], axis=-1)
        return ad.tanh(ad.matmul(joint, ad.swapaxes(t["fuse_w"], 0, 1)) + t["fuse_b"])
    if kind == "concat":
        joint = ad.concat([px, ph, pe], axis=-1)
        return ad.matmul(joint, ad.swapaxes(t["fuse_w"], 0, 1))
    if kind == "add":
        return ad.tanh(px + ph + pe)
    if kind == "gated":
        g = ad.sigmoid(ad.matmul(px + ph + pe, ad.swapaxes(t["gate_w"], 0, 1)))
        return ad.tanh(g * px + (1.0 - g) * (ph + pe))
    # cross-attention over the three projected slots, query from the token
    qv = ad.matmul(px, ad.swapaxes(t["attn_q"], 0, 1))
    scale = 1.0 / math.sqrt(params.config.d_phi)
    scores, values = [], []
    for slot in (px, ph, pe):
        k = ad.matmul(slot, ad.swapaxes(t["attn_k"], 0, 1))
        scores.append(ad.expand_dims((qv * k).sum(axis=-1) * scale, -1))
        values.append(ad.expand_dims(
            ad.matmul(slot, ad.swapaxes(t["attn_v"], 0, 1)), -2))
    attn = ad.softmax(ad.concat(scores, axis=-1), axis=-1)      # (B, 3)
    stacked = ad.concat(values, axis=-2)                         # (B, 3, d_phi)
    mixed = (stacked * ad.expand_dims(attn, -1)).sum(axis=-2)
    return ad.tanh(mixed)


def generate_control(phi: Tensor, params: AdapterParams) -> ControlState:
    """Turn a control feature into the sparse control vector u_t."""
    t = params.tensors
    kind = params.config.controller
    if kind == "dense":
        hidden = ad.tanh(ad.matmul(phi, ad.swapaxes(t["ctrl_w1"], 0, 1)))
        u = ad.matmul(hidden, ad.swapaxes(t["ctrl_w2"], 0, 1))
        return ControlState(phi, None, None, u)
    q = ad.matmul(phi, ad.swapaxes(t["w_drv"], 0, 1))
    g = ad.matmul(phi, ad.swapaxes(t["w_gt"], 0, 1))
    if kind == "soft":
        lam = ad.softplus(-g)  # equals -log(sigmoid(g)), strictly positive
        return ControlState(phi, q, lam, ad.soft_threshold(q, lam))
    if kind == "hard":
        lam = ad.softplus(-g)
        return ControlState(phi, q, lam, ad.hard_threshold(q, lam))
    gate = ad.sigmoid(g) if kind == "sigmoid" else ad.tanh(g)
    return ControlState(phi, q, None, gate * q)


def stack_operator_state(a_log: Tensor, b_seq: Tensor, c_seq: Tensor,
                         delta_pre: Tensor) -> Tensor:
    """Stack per-step operator state theta of shape (B, n, 3N + 1).

    The A and Delta slots hold channel means; their corrections are
    broadcast back over channels when applied.
    """
    bsz, n, n_state = b_seq.shape
    a_mean = ad.reshape(a_log.mean(axis=0), (1, 1, n_state))
    a_tile = a_mean + Tensor(np.zeros((bsz, n, 1)))
    d_mean = delta_pre.mean(axis=-1, keepdims=True)
    return ad.concat([a_tile, b_seq, c_seq, d_mean], axis=-1)


def modulate_operators(theta, u, u_mat, v_mat, mask=None):
    """theta + U diag(u) V theta, optionally masking operator slots.

    Accepts (m,) vectors or (B, m) batches; arrays in, array out.
    """
    wrap = not any(isinstance(v, Tensor) for v in (theta, u, u_mat, v_mat))
    theta, u = ad.as_tensor(theta), ad.as_tensor(u)
    u_mat, v_mat = ad.as_tensor(u_mat), ad.as_tensor(v_mat)
    flat = theta.ndim == 1
    if flat:
        theta, u = ad.reshape(theta, (1, -1)), ad.reshape(u, (1, -1))
    driven = ad.matmul(theta, ad.swapaxes(v_mat, 0, 1)) * u
    correction = ad.matmul(driven, ad.swapaxes(u_mat, 0, 1))
    if mask is not None:
        correction = correction * Tensor(mask)
    out = theta + correction
    if flat:
        out = ad.reshape(out, (-1,))
    return out.data if wrap else out


@dataclass
class FrozenStepOps:
    """Frozen operator state of one scan step (pre-control).

    ``a_cont`` caches -exp(a_log) so the controlled diagonal can be
    formed as a_cont * exp(da) with the cheap (B, 1, N) exponential.
    """

    a_log: Tensor      # (d_e, N)
    b_in: Tensor       # (B, N)
    c_out: Tensor      # (B, N)
    delta_pre: Tensor  # (B, d_e)
    theta: Tensor      # (B, m)
    a_cont: Tensor | None = None

    def continuous_diag(self) -> Tensor:
        if self.a_cont is None:
            self.a_cont = -ad.exp(self.a_log)
        return self.a_cont


@dataclass
class ControlledStepOps:
    a_hat: Tensor      # (B, d_e, N)
    b_hat: Tensor      # (B, d_e, N)
    a_ctl: Tensor      # (B, d_e, N) continuous, negative
    b_ctl: Tensor      # (B, N)
    c_ctl: Tensor      # (B, N)
    delta_ctl: Tensor  # (B, d_e) positive
    state: ControlState

    @property
    def u(self) -> Tensor:
        return self.state.u


def apply_control(ctl: ControlState, frozen: FrozenStepOps,
                  params: AdapterParams) -> ControlledStepOps:
    """Modulate the stacked operator state and discretize the result."""
    n_state = frozen.a_log.shape[1]
    theta_tilde = modulate_operators(
        frozen.theta, ctl.u, params["u_mat"], params["v_mat"], params.mask)
    dtheta = theta_tilde - frozen.theta
    da = dtheta[:, :n_state]
    db = dtheta[:, n_state:2 * n_state]
    dc = dtheta[:, 2 * n_state:3 * n_state]
    ddelta = dtheta[:, 3 * n_state:]
    # -exp(a_log + da) == -exp(a_log) * exp(da): keeps the per-step
    # exponential on the small broadcast shape
    a_ctl = frozen.continuous_diag() * ad.exp(ad.expand_dims(da, 1))
    b_ctl = frozen.b_in + db
    c_ctl = frozen.c_out + dc
    delta_ctl = ad.softplus(frozen.delta_pre + ddelta)
    a_hat, b_hat = zoh_discretize(
        a_ctl, ad.expand_dims(b_ctl, 1), ad.expand_dims(delta_ctl, 2))
    return ControlledStepOps(a_hat, b_hat, a_ctl, b_ctl, c_ctl, delta_ctl, ctl)


def saa_step(x_tok: Tensor, h_prev: Tensor, e: Tensor,
             frozen: FrozenStepOps, params: AdapterParams) -> ControlledStepOps:
    """Full per-step chain: control feature -> u_t -> modulation -> ZOH."""
    h_pooled = h_prev.mean(axis=1)
    phi = control_feature(x_tok, h_pooled, e, params)
    return apply_control(generate_control(phi, params), frozen, params)
