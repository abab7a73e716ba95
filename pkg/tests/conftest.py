"""Shared builders for random model pieces (oracles live in the test files)."""

import numpy as np
import pytest

from mantis_lab.adapter import AdapterConfig, AdapterParams, adapter_param_shapes
from mantis_lab.autodiff import Tensor
from mantis_lab.ssm import BackboneParams


def random_block(rng, d=8, d_e=16, n_state=4, dt_rank=2, width=3) -> BackboneParams:
    def t(*shape, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(shape[-1])
        return Tensor(rng.normal(scale=s, size=shape))

    dt = np.exp(rng.uniform(np.log(1e-2), np.log(0.2), size=d_e))
    return BackboneParams(
        ln_scale=Tensor(rng.uniform(0.5, 1.5, size=d)),
        ln_shift=Tensor(rng.normal(scale=0.1, size=d)),
        w_in=t(d_e, d), b_in=Tensor(rng.normal(scale=0.1, size=d_e)),
        conv_w=t(width, d_e, scale=0.5), conv_b=Tensor(rng.normal(scale=0.1, size=d_e)),
        w_gate=t(d_e, d), b_gate=Tensor(rng.normal(scale=0.1, size=d_e)),
        w_out=t(d, d_e), b_out=Tensor(rng.normal(scale=0.1, size=d)),
        a_log=Tensor(rng.uniform(np.log(0.5), np.log(4.0), size=(d_e, n_state))),
        w_x=t(dt_rank + 2 * n_state, d_e),
        w_dt=t(d_e, dt_rank, scale=0.2),
        b_dt=Tensor(np.log(np.expm1(dt))),
    )


def random_adapter(rng, d=8, n_state=4, d_phi=6, r=3, controller="soft",
                   fusion="concat_mlp", modulate=("A", "B", "C", "Delta"),
                   drv_scale=None) -> AdapterParams:
    cfg = AdapterConfig(d, n_state, d_phi, r, 3 * n_state + 1, controller,
                        fusion, tuple(modulate))
    tensors = {}
    for name, shape in adapter_param_shapes(cfg).items():
        if name in ("u_mat", "v_mat"):
            value = rng.normal(scale=0.1, size=shape)
        elif name == "w_drv" and drv_scale is not None:
            value = rng.normal(scale=drv_scale, size=shape)
        else:
            value = rng.normal(scale=1.0 / np.sqrt(shape[-1]), size=shape)
        tensors[name] = Tensor(value)
    return AdapterParams(cfg, tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
