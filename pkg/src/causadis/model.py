"""Dual-latent autoencoder and its training objective.

Two encoders with identical layout but untied weights map a flux vector
to a stellar embedding and an instrument embedding. Each embedding goes
two ways: through a projection head (normalized, used only by the
contrastive losses, discarded at inference) and through a fusion head
whose outputs are combined element-wise and decoded back to flux.

The contrastive objective is a multi-positive InfoNCE: for an anchor's
stellar projection, positives are every in-batch observation of the same
star and negatives every observation of a different star; the instrument
space mirrors this with instrument ids. A single-latent baseline trained
on same-star pairs only is included for comparison.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nncore import (
    Mlp,
    MlpSpec,
    l2_normalize_backward,
    l2_normalize_forward,
    mlp_backward,
    mlp_forward,
)


@dataclass(frozen=True)
class ModelConfig:
    t_len: int
    z_dim: int = 20
    fuse_dim: int = 64
    enc_hidden: tuple = (256, 128)
    dec_hidden: tuple = (128,)
    proj_hidden: tuple = (32,)
    proj_dim: int = 16
    tau: float = 0.1
    activation: str = "relu"
    decoder_final: str = "tanh"
    fuse_final: str = "tanh"
    baseline_z_dim: int | None = None  # defaults to z_dim; set 2*z_dim for the wide variant

    def __post_init__(self):
        if self.tau <= 0:
            raise DataError("temperature tau must be > 0")

    @property
    def baseline_width(self) -> int:
        return self.z_dim if self.baseline_z_dim is None else self.baseline_z_dim


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1.0
    lambda_star: float = 1.0
    lambda_instr: float = 1.0

    def __post_init__(self):
        if min(self.lambda_recon, self.lambda_star, self.lambda_instr) < 0:
            raise DataError("loss weights must be >= 0")


class DualModel:
    """Two encoders, two projection heads, two fusion heads, one decoder."""

    kind = "dual"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        enc_spec = MlpSpec((cfg.t_len, *cfg.enc_hidden, cfg.z_dim), cfg.activation, "none")
        proj_spec = MlpSpec((cfg.z_dim, *cfg.proj_hidden, cfg.proj_dim), cfg.activation, "none")
        fuse_spec = MlpSpec((cfg.z_dim, cfg.fuse_dim), cfg.activation, cfg.fuse_final)
        dec_spec = MlpSpec((cfg.fuse_dim, *cfg.dec_hidden, cfg.t_len), cfg.activation, cfg.decoder_final)
        self.enc_star = Mlp(enc_spec, rng)
        self.enc_instr = Mlp(enc_spec, rng)
        self.proj_star = Mlp(proj_spec, rng)
        self.proj_instr = Mlp(proj_spec, rng)
        self.fuse_star = Mlp(fuse_spec, rng)
        self.fuse_instr = Mlp(fuse_spec, rng)
        self.decoder = Mlp(dec_spec, rng)

    @property
    def tau(self) -> float:
        return self.cfg.tau

    def submodules(self) -> dict:
        return {
            "enc_star": self.enc_star,
            "enc_instr": self.enc_instr,
            "proj_star": self.proj_star,
            "proj_instr": self.proj_instr,
            "fuse_star": self.fuse_star,
            "fuse_instr": self.fuse_instr,
            "decoder": self.decoder,
        }

    def named_params(self) -> dict:
        out = {}
        for name, module in self.submodules().items():
            out.update(module.params(prefix=f"{name}."))
        return out

    def zero_grad(self):
        for module in self.submodules().values():
            module.zero_grad()

    def arch(self) -> dict:
        return {"kind": self.kind, **_cfg_arch(self.cfg)}


class BaselineModel:
    """Single shared latent: one encoder, one projection head, one decoder.

    The decoder width chain mirrors the dual model's fusion + decoder
    stack so capacity is comparable.
    """

    kind = "baseline"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        width = cfg.baseline_width
        enc_spec = MlpSpec((cfg.t_len, *cfg.enc_hidden, width), cfg.activation, "none")
        proj_spec = MlpSpec((width, *cfg.proj_hidden, cfg.proj_dim), cfg.activation, "none")
        dec_spec = MlpSpec(
            (width, cfg.fuse_dim, *cfg.dec_hidden, cfg.t_len), cfg.activation, cfg.decoder_final
        )
        self.encoder = Mlp(enc_spec, rng)
        self.proj = Mlp(proj_spec, rng)
        self.decoder = Mlp(dec_spec, rng)

    @property
    def tau(self) -> float:
        return self.cfg.tau

    def submodules(self) -> dict:
        return {"encoder": self.encoder, "proj": self.proj, "decoder": self.decoder}

    def named_params(self) -> dict:
        out = {}
        for name, module in self.submodules().items():
            out.update(module.params(prefix=f"{name}."))
        return out

    def zero_grad(self):
        for module in self.submodules().values():
            module.zero_grad()

    def arch(self) -> dict:
        return {"kind": self.kind, **_cfg_arch(self.cfg)}


def _cfg_arch(cfg: ModelConfig) -> dict:
    return {
        "t_len": cfg.t_len,
        "z_dim": cfg.z_dim,
        "fuse_dim": cfg.fuse_dim,
        "enc_hidden": list(cfg.enc_hidden),
        "dec_hidden": list(cfg.dec_hidden),
        "proj_hidden": list(cfg.proj_hidden),
        "proj_dim": cfg.proj_dim,
        "tau": cfg.tau,
        "activation": cfg.activation,
        "decoder_final": cfg.decoder_final,
        "fuse_final": cfg.fuse_final,
        "baseline_z_dim": cfg.baseline_width,
    }


def arch_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_model(kind: str, cfg: ModelConfig, rng: np.random.Generator):
    if kind == "dual":
        return DualModel(cfg, rng)
    if kind == "baseline":
        return BaselineModel(cfg, rng)
    raise DataError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# batches


@dataclass
class TripletBatch:
    """Rows ordered [anchors | same-star members | same-instrument members]."""

    flux: np.ndarray  # (3B, T)
    star_ids: np.ndarray  # (3B,)
    inst_ids: np.ndarray  # (3B,)
    obs_ids: np.ndarray  # (3B,)
    n_anchors: int
    mask: np.ndarray | None = None  # (3B, T) in {0,1}; None means all ones


@dataclass
class PairBatch:
    """Rows ordered [anchors | same-star members]."""

    flux: np.ndarray  # (2B, T)
    star_ids: np.ndarray  # (2B,)
    obs_ids: np.ndarray  # (2B,)
    n_anchors: int
    mask: np.ndarray | None = None


def assemble_triplet_batch(dataset, triplets) -> TripletBatch:
    order = (
        [t.anchor for t in triplets]
        + [t.same_star for t in triplets]
        + [t.same_inst for t in triplets]
    )
    return TripletBatch(
        flux=dataset.flux_rows(order),
        star_ids=np.array([dataset.star_of(o) for o in order], dtype=np.int64),
        inst_ids=np.array([dataset.instrument_of(o) for o in order], dtype=np.int64),
        obs_ids=np.array(order, dtype=np.int64),
        n_anchors=len(triplets),
    )


def assemble_pair_batch(dataset, triplets) -> PairBatch:
    order = [t.anchor for t in triplets] + [t.same_star for t in triplets]
    return PairBatch(
        flux=dataset.flux_rows(order),
        star_ids=np.array([dataset.star_of(o) for o in order], dtype=np.int64),
        obs_ids=np.array(order, dtype=np.int64),
        n_anchors=len(triplets),
    )


# ---------------------------------------------------------------------------
# inference-side ops


def encode(model, flux_batch: np.ndarray):
    """Embeddings only; projection and fusion heads are not consulted."""
    flux_batch = np.asarray(flux_batch, dtype=np.float64)
    if isinstance(model, DualModel):
        z_star, _ = mlp_forward(model.enc_star, flux_batch)
        z_instr, _ = mlp_forward(model.enc_instr, flux_batch)
        return z_star, z_instr
    z, _ = mlp_forward(model.encoder, flux_batch)
    return z


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"fusion shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def decode(model: DualModel, z_star: np.ndarray, z_instr: np.ndarray) -> np.ndarray:
    g_star, _ = mlp_forward(model.fuse_star, np.asarray(z_star, dtype=np.float64))
    g_instr, _ = mlp_forward(model.fuse_instr, np.asarray(z_instr, dtype=np.float64))
    recon, _ = mlp_forward(model.decoder, hadamard(g_star, g_instr))
    return recon


# ---------------------------------------------------------------------------
# losses


def recon_loss(reconstruction: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Masked mean squared error: sum(mask * (r - x)^2) / sum(mask)."""
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if reconstruction.shape != target.shape:
        raise DataError("reconstruction and target shapes differ")
    if mask is None:
        mask = np.ones_like(target)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != target.shape:
        raise DataError("mask shape differs from target")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DataError("mask entries must be 0 or 1")
    total = mask.sum()
    if total == 0:
        raise DataError("mask is all zeros")
    diff = reconstruction - target
    return float(np.sum(mask * diff * diff) / total)


def _masked_mse_batch(recon, target, mask, want_grad: bool):
    """Mean over rows of per-row masked MSE; gradient w.r.t. recon if asked."""
    if mask is None:
        mask = np.ones_like(target)
    row_counts = mask.sum(axis=1, keepdims=True)
    if np.any(row_counts == 0):
        raise DataError("mask is all zeros for at least one row")
    diff = recon - target
    per_row = np.sum(mask * diff * diff, axis=1, keepdims=True) / row_counts
    loss = float(per_row.mean())
    grad = None
    if want_grad:
        grad = 2.0 * mask * diff / row_counts / recon.shape[0]
    return loss, grad


def infonce_multi(anchor_p: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float) -> float:
    """Multi-positive InfoNCE for one anchor.

    -log( sum_p e^{a.p/tau} / (sum_p e^{a.p/tau} + sum_n e^{a.n/tau}) ),
    computed with max subtraction. Exponential terms are summed in sorted
    order so the result is exactly invariant to the ordering of the
    positive and negative sets.
    """
    if tau <= 0:
        raise DataError("temperature tau must be > 0")
    anchor_p = np.asarray(anchor_p, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise DataError("need at least one positive and one negative")
    lp = positives @ anchor_p / tau
    ln = negatives @ anchor_p / tau
    m = max(lp.max(), ln.max())
    sp = float(np.sort(np.exp(lp - m)).sum())
    sn = float(np.sort(np.exp(ln - m)).sum())
    # -log(sp / (sp + sn)) written as log1p for accuracy when sn << sp
    return float(np.log1p(sn / sp))


def _infonce_batch(proj, group_ids, n_anchors, tau, want_grad: bool):
    """Mean InfoNCE over the first n_anchors rows; candidates are all rows.

    For anchor a, positives are rows j != a with group_ids[j] ==
    group_ids[a], negatives rows with a different group. Returns
    (loss, grad w.r.t. proj) with grad None unless requested.
    """
    n_rows = proj.shape[0]
    anchors = np.arange(n_anchors)
    same = group_ids[anchors, None] == group_ids[None, :]
    pos_mask = same.copy()
    pos_mask[anchors, anchors] = False
    neg_mask = ~same
    if np.any(pos_mask.sum(axis=1) == 0):
        bad = int(np.flatnonzero(pos_mask.sum(axis=1) == 0)[0])
        raise DataError(f"anchor row {bad} has no in-batch positives")
    if np.any(neg_mask.sum(axis=1) == 0):
        bad = int(np.flatnonzero(neg_mask.sum(axis=1) == 0)[0])
        raise DataError(f"anchor row {bad} has no in-batch negatives")

    logits = (proj[:n_anchors] @ proj.T) / tau
    cand = pos_mask | neg_mask
    m = np.where(cand, logits, -np.inf).max(axis=1, keepdims=True)
    expv = np.exp(logits - m) * cand
    sp = (expv * pos_mask).sum(axis=1, keepdims=True)
    sn = (expv * neg_mask).sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log1p(sn / sp)))
    if not want_grad:
        return loss, None

    inv_total = 1.0 / (sp + sn)
    w = expv * inv_total - pos_mask * (expv / sp)
    w /= n_anchors
    grad = np.zeros_like(proj)
    grad[:n_anchors] += (w @ proj) / tau
    grad += (w.T @ proj[:n_anchors]) / tau
    return loss, grad


def _dual_forward(model: DualModel, batch: TripletBatch):
    x = batch.flux
    z_star, c_es = mlp_forward(model.enc_star, x)
    z_instr, c_ei = mlp_forward(model.enc_instr, x)
    q_star, c_ps = mlp_forward(model.proj_star, z_star)
    q_instr, c_pi = mlp_forward(model.proj_instr, z_instr)
    p_star, n_s = l2_normalize_forward(q_star)
    p_instr, n_i = l2_normalize_forward(q_instr)
    g_star, c_fs = mlp_forward(model.fuse_star, z_star)
    g_instr, c_fi = mlp_forward(model.fuse_instr, z_instr)
    recon, c_d = mlp_forward(model.decoder, g_star * g_instr)
    return {
        "recon": recon,
        "p_star": p_star,
        "p_instr": p_instr,
        "g_star": g_star,
        "g_instr": g_instr,
        "caches": (c_es, c_ei, c_ps, c_pi, n_s, n_i, c_fs, c_fi, c_d),
    }


def batch_contrastive_losses(model: DualModel, batch: TripletBatch):
    """Forward-only (L_star, L_instr) over the realized batch."""
    fwd = _dual_forward(model, batch)
    l_star, _ = _infonce_batch(fwd["p_star"], batch.star_ids, batch.n_anchors, model.tau, False)
    l_instr, _ = _infonce_batch(fwd["p_instr"], batch.inst_ids, batch.n_anchors, model.tau, False)
    return l_star, l_instr


def _dual_losses(model, batch, weights, want_grads):
    fwd = _dual_forward(model, batch)
    l_recon, d_recon = _masked_mse_batch(fwd["recon"], batch.flux, batch.mask, want_grads)
    l_star, d_pstar = _infonce_batch(
        fwd["p_star"], batch.star_ids, batch.n_anchors, model.tau, want_grads
    )
    l_instr, d_pinstr = _infonce_batch(
        fwd["p_instr"], batch.inst_ids, batch.n_anchors, model.tau, want_grads
    )
    components = {"recon": l_recon, "star": l_star, "instr": l_instr}
    total = (
        weights.lambda_recon * l_recon
        + weights.lambda_star * l_star
        + weights.lambda_instr * l_instr
    )
    if not want_grads:
        return total, components

    c_es, c_ei, c_ps, c_pi, n_s, n_i, c_fs, c_fi, c_d = fwd["caches"]
    d_fused = mlp_backward(c_d, weights.lambda_recon * d_recon)
    d_gstar = d_fused * fwd["g_instr"]
    d_ginstr = d_fused * fwd["g_star"]
    dz_star = mlp_backward(c_fs, d_gstar)
    dz_instr = mlp_backward(c_fi, d_ginstr)
    dq_star = l2_normalize_backward(n_s, weights.lambda_star * d_pstar)
    dq_instr = l2_normalize_backward(n_i, weights.lambda_instr * d_pinstr)
    dz_star += mlp_backward(c_ps, dq_star)
    dz_instr += mlp_backward(c_pi, dq_instr)
    mlp_backward(c_es, dz_star)
    mlp_backward(c_ei, dz_instr)
    return total, components


def total_loss(model: DualModel, batch: TripletBatch, weights: LossWeights):
    """Weighted objective and its components; no gradients touched."""
    return _dual_losses(model, batch, weights, want_grads=False)


def dual_loss_and_grads(model: DualModel, batch: TripletBatch, weights: LossWeights):
    """Weighted objective; accumulates parameter gradients in place."""
    return _dual_losses(model, batch, weights, want_grads=True)


def _baseline_losses(model, batch, weights, want_grads):
    x = batch.flux
    z, c_e = mlp_forward(model.encoder, x)
    q, c_p = mlp_forward(model.proj, z)
    p, n_c = l2_normalize_forward(q)
    recon, c_d = mlp_forward(model.decoder, z)
    l_recon, d_recon = _masked_mse_batch(recon, x, batch.mask, want_grads)
    l_con, d_p = _infonce_batch(p, batch.star_ids, batch.n_anchors, model.tau, want_grads)
    components = {"recon": l_recon, "star": l_con, "instr": 0.0}
    total = weights.lambda_recon * l_recon + weights.lambda_star * l_con
    if not want_grads:
        return total, components
    dz = mlp_backward(c_d, weights.lambda_recon * d_recon)
    dq = l2_normalize_backward(n_c, weights.lambda_star * d_p)
    dz += mlp_backward(c_p, dq)
    mlp_backward(c_e, dz)
    return total, components


def baseline_losses(model: BaselineModel, batch: PairBatch, weights: LossWeights):
    """Reconstruction + same-star InfoNCE on the single latent (forward only)."""
    return _baseline_losses(model, batch, weights, want_grads=False)


def baseline_loss_and_grads(model: BaselineModel, batch: PairBatch, weights: LossWeights):
    return _baseline_losses(model, batch, weights, want_grads=True)
