"""Adapter assembly: the trainable modules around a frozen backbone.

The adapter owns four parameter groups: the learned correlation estimator
(optional, see ``dce_mode``), the dual projection stacks that split a
representation into positive/negative-correlation views, the threshold that
turns a correlation estimate into contrastive masks, and the fusion head
that blends an adapter forecast with the frozen backbone's.

Training runs through the autodiff graph (``training_losses``); inference
(``predict``) runs only the projection + fusion path on plain forwards, with
no correlation matrices built.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .backbone import BackboneOutput, BackboneState
from .config import TrainConfig
from .contrastive import (EpsilonParam, HpclConfig, MaskPair, aux_loss,
                          init_epsilon, threshold_masks)
from .correlation import (DceParams, compose_correlation, init_dce_params,
                          time_invariant_component, time_varying_component)
from .fusion import FusionParams, fuse_predict, init_fusion_params
from .projection import HdParams, divide, init_hd_params


@dataclass
class AdapterState:
    """Trainable adapter parameters plus the switches they were built with."""

    train_config: TrainConfig
    n_channels: int
    n_patches: int
    repr_dim: int
    horizon: int
    dce: DceParams | None
    hd: HdParams
    eps: EpsilonParam
    fusion: FusionParams

    def hpcl_config(self) -> HpclConfig:
        cfg = self.train_config
        return HpclConfig(tau=cfg.tau, gate_temp=cfg.gate_temp,
                          soft_gate=cfg.soft_gate, binarize=cfg.binarize)


def init_adapter(backbone: BackboneState, n_channels: int,
                 config: TrainConfig) -> AdapterState:
    """Fresh adapter for ``backbone``.  One seeded rng draws everything in a
    fixed order (dce, hd, fusion) so states are reproducible."""
    bc = backbone.config
    rng = np.random.default_rng(config.seed)
    dce = None
    if config.dce_mode == "full":
        dce = init_dce_params(n_channels, bc.repr_dim, degree=config.poly_degree,
                              rank=config.rank, embed_dim=config.embed_dim,
                              rng=rng)
    hd = init_hd_params(bc.n_patches, bc.repr_dim, config.depth_division, rng,
                        shared=(config.hd_mode == "single-branch"))
    fusion = init_fusion_params(n_channels, bc.n_patches, bc.repr_dim,
                                bc.horizon, depth=config.depth_fusion, rng=rng,
                                beta_logit_init=config.beta_logit_init)
    return AdapterState(train_config=config, n_channels=n_channels,
                        n_patches=bc.n_patches, repr_dim=bc.repr_dim,
                        horizon=bc.horizon, dce=dce, hd=hd,
                        eps=init_epsilon(config.epsilon_init), fusion=fusion)


def named_parameters(state: AdapterState) -> list[tuple[str, Tensor]]:
    """Trainable tensors in a fixed, documented order.

    The threshold joins only when HPCL is on (it has no other consumer);
    the correlation estimator only in full ``dce_mode``.
    """
    out = []
    if state.dce is not None:
        out.extend(state.dce.named_tensors())
    out.extend(state.hd.named_tensors())
    if state.train_config.hpcl:
        out.extend(state.eps.named_tensors())
    out.extend((f"fusion.{n}", t) for n, t in state.fusion.named_tensors())
    return out


def parameter_count(state: AdapterState) -> int:
    return sum(t.data.size for _, t in named_parameters(state))


def backbone_parameter_count(backbone: BackboneState) -> int:
    return backbone.embed.size + backbone.head.size


def correlation_estimate(state: AdapterState, repr_t, r: np.ndarray) -> Tensor:
    """Training-path correlation estimate M for a window batch.

    ``repr_t``: (..., P, N, d) tensor; ``r``: (..., N, N) precomputed window
    Pearson matrices (held constant).  In pearson-only mode M is just R.
    """
    if state.dce is None:
        return ad.constant(np.asarray(r, dtype=np.float64))
    q = time_varying_component(repr_t, state.dce)
    v = time_invariant_component(state.dce)
    return compose_correlation(r, q, v)


def training_losses(state: AdapterState, rep: np.ndarray, yhat_norm: np.ndarray,
                    y_norm: np.ndarray, r: np.ndarray | None):
    """Forward pass for one batch; returns the loss tensors.

    rep (B, P, N, d), yhat_norm / y_norm (B, N, F), r (B, N, N) or None when
    HPCL is off.  Output dict holds ``prediction`` (normalized-space MSE),
    ``l_pos``/``l_neg``/``aux``, and ``ystar`` for inspection.
    """
    repr_t = ad.constant(rep)
    x_pos, x_neg = divide(state.hd, repr_t)
    ystar = fuse_predict(state.fusion, x_pos, x_neg, ad.constant(yhat_norm))
    pred = ad.mse_loss(ystar, ad.constant(y_norm))
    if state.train_config.hpcl:
        if r is None:
            raise ValueError("HPCL is on but no correlation input was given")
        m = correlation_estimate(state, repr_t, r)
        masks = threshold_masks(m, state.eps, state.hpcl_config())
        l_pos, l_neg, total = aux_loss(x_pos, x_neg, masks, state.hpcl_config())
    else:
        l_pos = ad.constant(0.0)
        l_neg = ad.constant(0.0)
        total = ad.constant(0.0)
    return {"prediction": pred, "l_pos": l_pos, "l_neg": l_neg, "aux": total,
            "ystar": ystar}


def predict(state: AdapterState, out: BackboneOutput) -> np.ndarray:
    """Raw-space adapter forecast.  Inference path: projections + fusion
    only — no correlation estimate, no contrastive terms."""
    with ad.no_grad():
        x_pos, x_neg = divide(state.hd, ad.constant(out.repr))
        ystar_norm = fuse_predict(state.fusion, x_pos, x_neg,
                                  ad.constant(out.yhat_norm))
        return ystar_norm.data * out.std + out.mean


def branch_views(state: AdapterState, out: BackboneOutput):
    """Positive/negative per-channel views as plain (..., N, P*d) arrays
    (for similarity export)."""
    with ad.no_grad():
        x_pos, x_neg = divide(state.hd, ad.constant(out.repr))
        nd = x_pos.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        pos = np.transpose(x_pos.data, axes)
        neg = np.transpose(x_neg.data, axes)
        flat = pos.shape[:-2] + (pos.shape[-2] * pos.shape[-1],)
        return pos.reshape(flat), neg.reshape(flat)


def save_adapter(state: AdapterState, path) -> None:
    cfg = asdict(state.train_config)
    cfg.update(kind="adapter", n_channels=state.n_channels,
               n_patches=state.n_patches, repr_dim=state.repr_dim,
               horizon=state.horizon)
    arrays = {name: np.asarray(t.data) for name, t in named_parameters(state)}
    # the threshold is part of the state even when HPCL is off
    arrays.setdefault("hpcl.eps_raw", np.asarray(state.eps.raw.data))
    serialize.save_arrays(path, cfg, arrays)


def load_adapter(path, backbone: BackboneState) -> AdapterState:
    config, arrays = serialize.load_arrays(path)
    if config.get("kind") != "adapter":
        raise serialize.SerializationError(
            f"{path}: checkpoint kind {config.get('kind')!r}, expected 'adapter'")
    field_names = TrainConfig.__dataclass_fields__.keys()
    train_config = TrainConfig(**{k: config[k] for k in field_names if k in config})
    state = init_adapter(backbone, int(config["n_channels"]), train_config)
    if (state.n_patches != int(config["n_patches"])
            or state.repr_dim != int(config["repr_dim"])
            or state.horizon != int(config["horizon"])):
        raise serialize.SerializationError(
            f"{path}: adapter was built for a different backbone geometry")
    expected = dict(named_parameters(state))
    expected.setdefault("hpcl.eps_raw", state.eps.raw)
    for name, tensor in expected.items():
        if name not in arrays:
            raise serialize.SerializationError(f"{path}: missing array {name!r}")
        stored = arrays[name]
        if stored.shape != tensor.data.shape:
            raise serialize.SerializationError(
                f"{path}: array {name!r} has shape {stored.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data[...] = stored
    extra = set(arrays) - set(expected)
    if extra:
        raise serialize.SerializationError(
            f"{path}: unexpected arrays {sorted(extra)}")
    return state
