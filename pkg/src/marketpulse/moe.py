"""Stage 3: category signals, stress-modulated gating, mechanism experts.

Each expert autoencodes one category-aligned slice of the normalized
final-day features, conditioned on the stock embedding; the network-structure
expert conditions on the spatial embedding instead. Routing weights over
experts are the interpretability signal exported with every score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .layers import MLP, MultiHeadSelfAttention
from .optim import ParamStore
from .schema import CATEGORY_NAMES, CATEGORY_SLICES, N_FEATURES
from .tensor import Tensor

__all__ = ["ExpertGroup", "MixtureOfExperts", "expert_groups", "category_signals"]

BETA_STRESS = 0.5  # fixed stress-to-temperature slope


@dataclass(frozen=True)
class ExpertGroup:
    name: str
    cols: slice
    use_spat: bool
    categories: tuple[str, ...]  # schema categories this expert covers


def expert_groups(expert_count: int) -> list[ExpertGroup]:
    """Feature groupings per expert count; 4 is the canonical mechanism set."""
    ps, lq, cg, mm = (CATEGORY_SLICES[c] for c in CATEGORY_NAMES)
    if expert_count == 4:
        return [
            ExpertGroup("price_shock", ps, False, ("price_shock",)),
            ExpertGroup("liquidity", lq, False, ("liquidity",)),
            ExpertGroup("contagion", cg, True, ("contagion",)),
            ExpertGroup("momentum", mm, False, ("momentum",)),
        ]
    if expert_count == 1:
        return [ExpertGroup("all", slice(0, N_FEATURES), False,
                            tuple(CATEGORY_NAMES))]
    if expert_count == 2:
        return [
            ExpertGroup("individual", slice(ps.start, lq.stop), False,
                        ("price_shock", "liquidity")),
            ExpertGroup("network", slice(cg.start, mm.stop), True,
                        ("contagion", "momentum")),
        ]
    if expert_count == 6:
        lq_mid = (lq.start + lq.stop) // 2
        mm_mid = (mm.start + mm.stop) // 2
        return [
            ExpertGroup("price_shock", ps, False, ("price_shock",)),
            ExpertGroup("liquidity_a", slice(lq.start, lq_mid), False, ("liquidity",)),
            ExpertGroup("liquidity_b", slice(lq_mid, lq.stop), False, ("liquidity",)),
            ExpertGroup("contagion", cg, True, ("contagion",)),
            ExpertGroup("momentum_a", slice(mm.start, mm_mid), False, ("momentum",)),
            ExpertGroup("momentum_b", slice(mm_mid, mm.stop), False, ("momentum",)),
        ]
    raise ValueError(f"unsupported expert_count {expert_count}")


def category_signals(x_last_norm: Tensor) -> Tensor:
    """Per-category mean |feature|, layer-normalized across the 4 signals."""
    parts = [
        tz.tmean(tz.absolute(x_last_norm[:, CATEGORY_SLICES[c]]), axis=-1, keepdims=True)
        for c in CATEGORY_NAMES
    ]
    return tz.layer_norm(tz.concat(parts, axis=-1), axis=-1, eps=1e-8)


@dataclass
class MoEOutput:
    w: Tensor            # (N, K) routing weights, simplex rows
    tau: Tensor          # scalar temperature
    errors: Tensor       # (N, K) per-expert reconstruction errors
    e_moe: Tensor        # (N,) routing-weighted error
    latent: Tensor       # (N, latent_dim) routing-weighted mixture latent
    f_bar: Tensor        # (N, 4) category signals
    logits: Tensor       # (N, K) pre-softmax gating logits


class MixtureOfExperts:
    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.groups = expert_groups(cfg.expert_count)
        k = len(self.groups)
        self.attn = MultiHeadSelfAttention(
            store, "moe.gattn", rng, dim=2 * d, heads=cfg.heads,
            head_dim=2 * d // cfg.heads, out_dim=2 * d)
        self.gate = MLP(store, "moe.gate", rng, [4 * d + 5, 2 * d, d // 2, k])
        b_init = np.array([0.0, 0.5, 0.3, 0.2]) if k == 4 else np.zeros(k)
        self.b_div = store.register("moe.b_div", b_init)
        self.tau_base = store.register("moe.tau_base", np.array([1.0]))
        self.enc = []
        self.dec = []
        for i, g in enumerate(self.groups):
            emb = d if g.use_spat else 2 * d
            dk = g.cols.stop - g.cols.start
            self.enc.append(MLP(store, f"moe.exp{i}.enc", rng,
                                [emb + dk, d, cfg.latent_dim]))
            self.dec.append(MLP(store, f"moe.exp{i}.dec", rng,
                                [emb + cfg.latent_dim, d, dk]))

    def gating(self, z_final: Tensor, psi: Tensor, f_bar: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n = z_final.shape[0]
        d2 = z_final.shape[1]
        a = tz.reshape(self.attn(tz.reshape(z_final, (1, n, d2))), (n, d2))
        psi_col = tz.broadcast_to(tz.reshape(psi, (1, 1)), (n, 1))
        feats = tz.concat([z_final, a, psi_col, f_bar], axis=-1)
        logits = tz.add(self.gate(feats), self.b_div)
        tau = tz.add(tz.absolute(self.tau_base), tz.mul(psi, BETA_STRESS))
        if self.cfg.temperature_mode == "narrative":
            scaled = tz.mul(logits, tau)
        else:
            scaled = tz.div(logits, tau)
        w = tz.softmax(scaled, axis=-1)
        w = self._route(w)
        return w, tau, logits

    def _route(self, w: Tensor) -> Tensor:
        mode = self.cfg.routing
        if mode == "soft":
            return w
        keep = 2 if mode == "top2" else 1
        k = w.shape[-1]
        if keep >= k:
            return w
        thresh = np.partition(w.data, k - keep, axis=-1)[:, k - keep][:, None]
        mask = (w.data >= thresh).astype(w.data.dtype)
        kept = tz.mul(w, tz.constant(mask))
        total = tz.tsum(kept, axis=-1, keepdims=True)
        return tz.div(kept, total)

    def expert_forward(self, i: int, z_final: Tensor, h_spat: Tensor,
                       x_last_norm: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        g = self.groups[i]
        emb = h_spat if g.use_spat else z_final
        f_k = x_last_norm[:, g.cols]
        latent = self.enc[i](tz.concat([emb, f_k], axis=-1))
        recon = self.dec[i](tz.concat([emb, latent], axis=-1))
        err = tz.l2norm(tz.sub(f_k, recon), axis=-1)
        return latent, recon, err

    def __call__(self, z_final: Tensor, h_spat: Tensor, x_last_norm: Tensor,
                 psi: Tensor) -> MoEOutput:
        n = z_final.shape[0]
        f_bar = category_signals(x_last_norm)
        w, tau, logits = self.gating(z_final, psi, f_bar)
        latents, errs = [], []
        for i in range(len(self.groups)):
            latent, _, err = self.expert_forward(i, z_final, h_spat, x_last_norm)
            latents.append(latent)
            errs.append(tz.reshape(err, (n, 1)))
        errors = tz.concat(errs, axis=-1)
        e_moe = tz.tsum(tz.mul(w, errors), axis=-1)
        mix = None
        for i, latent in enumerate(latents):
            term = tz.mul(w[:, i:i + 1], latent)
            mix = term if mix is None else tz.add(mix, term)
        return MoEOutput(w=w, tau=tau, errors=errors, e_moe=e_moe,
                         latent=mix, f_bar=f_bar, logits=logits)
