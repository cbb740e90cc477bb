"""The forecasting model: per-group encoders, residual temporal refinement,
hierarchical attention that emits a control vector, a spectrally constrained
linear latent step, and a residual decoder.

Per window of w standardized visits the model computes
    z_t = silu(W_int [h^(1); ...; h^(G)] + b_int),   h^(g) per-group MLP
    z_t^ref = z_t + sum of residual blocks
    c_t = g * c_feat + (1 - g) * c_time               (attention + gate)
    y_hat = decode(K z_last^ref + c_t)
All array math runs on the autodiff tape; diagnostics (attention weights,
gate) are detached copies.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import schema
from .linalg import clip_singular_values, power_iteration_norm, spectral_scale
from .optim import ParamStore
from .tensor import (Tensor, add, concat_cols, div, exp, layer_norm, matmul,
                     mul, sigmoid, silu, sub, tsum, transpose)

_DESK_HIDDEN = {"genetic": (12, 8), "csf": (12, 8), "pet": (12, 8),
                "mri": (24, 12), "demo": (12, 8)}
_FULL_HIDDEN = {"genetic": (90, 20), "csf": (90, 20), "pet": (90, 20),
                "mri": (180, 120), "demo": (90, 20)}


@dataclass
class ArchConfig:
    d_z: int = 16
    n_heads: int = 4
    groups: tuple[str, ...] = tuple(schema.GROUP_NAMES)
    group_hidden: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(_DESK_HIDDEN))
    n_refine_blocks: int = 5
    n_decoder_blocks: int = 3
    window: int = 3
    dropout: float = 0.1
    sigma_init: float = 1e-2
    rho_init: float = 0.99

    def __post_init__(self):
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if self.n_heads < 1 or self.d_z % self.n_heads:
            raise ValueError("n_heads must divide d_z")
        groups = tuple(self.groups)
        if groups not in (tuple(schema.GROUP_NAMES),
                          tuple(g for g in schema.GROUP_NAMES if g != "demo")):
            raise ValueError("groups must be the full set or the set without demo")
        self.groups = groups
        for g in groups:
            hidden = tuple(self.group_hidden.get(g, ()))
            if not hidden or any(h < 1 for h in hidden):
                raise ValueError(f"group {g!r} needs positive hidden widths")
            self.group_hidden[g] = hidden
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.n_refine_blocks < 0 or self.n_decoder_blocks < 0:
            raise ValueError("block counts must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d_z // self.n_heads

    def total_feature_dim(self) -> int:
        return sum(len(schema.GROUP_COLUMNS[g]) for g in self.groups)


def full_arch() -> ArchConfig:
    """The published architecture: 360-d latent, 8 heads, deep encoders."""
    return ArchConfig(d_z=360, n_heads=8, group_hidden=dict(_FULL_HIDDEN))


@dataclass
class AblationFlags:
    no_control: bool = False
    no_temporal_attention: bool = False
    no_feature_attention: bool = False
    no_spectral_reg: bool = False

    def __post_init__(self):
        if sum([self.no_control, self.no_temporal_attention,
                self.no_feature_attention, self.no_spectral_reg]) > 1:
            raise ValueError("at most one ablation flag may be set")

    @staticmethod
    def from_name(name: str) -> "AblationFlags":
        if name == "full":
            return AblationFlags()
        valid = ("no_control", "no_temporal_attention",
                 "no_feature_attention", "no_spectral_reg")
        if name not in valid:
            raise ValueError(f"unknown ablation setup {name!r}")
        return AblationFlags(**{name: True})


ABLATION_SETUPS = ["full", "no_control", "no_temporal_attention",
                   "no_feature_attention", "no_spectral_reg"]


def init_koopman(d_z: int, sigma_init: float, rho_init: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Identity plus a small Gaussian perturbation, singular values clipped."""
    K = np.eye(d_z) + sigma_init * rng.standard_normal((d_z, d_z))
    return clip_singular_values(K, rho_init)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class ForwardOut:
    pred: Tensor                 # (B, 3)
    control: Tensor              # (B, d_z)
    z_next: Tensor               # (B, d_z) = K z_last + c
    z_refs: list[Tensor]         # per timestep (B, d_z)
    alpha: np.ndarray            # (B, n_heads, w) temporal weights
    beta: np.ndarray             # (B, n_groups) feature weights
    gate: np.ndarray             # (B, d_z)


class NkmModel:
    """Holds parameters and runs the forward pass. Seeded construction."""

    def __init__(self, arch: ArchConfig | None = None, seed: int = 0,
                 ablation: AblationFlags | None = None):
        self.arch = arch if arch is not None else ArchConfig()
        self.seed = int(seed)
        self.ablation = ablation if ablation is not None else AblationFlags()
        self.params = ParamStore()
        self._slices = schema.group_slices(list(self.arch.groups))
        self._build(np.random.default_rng(self.seed))

    def _build(self, rng: np.random.Generator) -> None:
        a = self.arch
        p = self.params
        emb_dim: dict[str, int] = {}
        for g in a.groups:
            d_in = len(schema.GROUP_COLUMNS[g])
            for i, h in enumerate(a.group_hidden[g]):
                p.add(f"enc.{g}.{i}.W", _glorot(rng, d_in, h))
                p.add(f"enc.{g}.{i}.b", np.zeros(h))
                p.add(f"enc.{g}.{i}.gamma", np.ones(h))
                p.add(f"enc.{g}.{i}.beta", np.zeros(h))
                d_in = h
            emb_dim[g] = d_in
        self._emb_dim = emb_dim

        fuse_in = sum(emb_dim.values())
        p.add("fuse.W", _glorot(rng, fuse_in, a.d_z))
        p.add("fuse.b", np.zeros(a.d_z))

        for i in range(a.n_refine_blocks):
            p.add(f"refine.{i}.W", _glorot(rng, a.d_z, a.d_z))
            p.add(f"refine.{i}.b", np.zeros(a.d_z))
            p.add(f"refine.{i}.gamma", np.ones(a.d_z))
            p.add(f"refine.{i}.beta", np.zeros(a.d_z))

        if a.n_heads == 1:
            p.add("attn_t.q.W", _glorot(rng, a.d_z, a.d_k))
            p.add("attn_t.k.W", _glorot(rng, a.d_z, a.d_k))
        else:
            for h in range(a.n_heads):
                p.add(f"attn_t.q{h}.W", _glorot(rng, a.d_z, a.d_k))
                p.add(f"attn_t.k{h}.W", _glorot(rng, a.d_z, a.d_k))
                p.add(f"attn_t.v{h}.W", _glorot(rng, a.d_z, a.d_k))
            p.add("attn_t.out.W", _glorot(rng, a.d_z, a.d_z))

        p.add("attn_f.q.W", _glorot(rng, a.d_z, a.d_k))
        for g in a.groups:
            p.add(f"attn_f.key.{g}.W", _glorot(rng, emb_dim[g], a.d_k))
            p.add(f"attn_f.val.{g}.W", _glorot(rng, emb_dim[g], a.d_z))

        p.add("gate.W", _glorot(rng, 2 * a.d_z, a.d_z))
        p.add("gate.b", np.zeros(a.d_z))

        p.add("koopman.K", init_koopman(a.d_z, a.sigma_init, a.rho_init, rng))

        for i in range(a.n_decoder_blocks):
            p.add(f"dec.{i}.W", _glorot(rng, a.d_z, a.d_z))
            p.add(f"dec.{i}.b", np.zeros(a.d_z))
            p.add(f"dec.{i}.gamma", np.ones(a.d_z))
            p.add(f"dec.{i}.beta", np.zeros(a.d_z))
        p.add("dec.head.W", _glorot(rng, a.d_z, schema.N_TARGETS))
        p.add("dec.head.b", np.zeros(schema.N_TARGETS))

    @property
    def K(self) -> Tensor:
        return self.params["koopman.K"]

    # ---- stage helpers -------------------------------------------------

    def _dropout(self, t: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        p = self.arch.dropout
        if not train or p == 0.0:
            return t
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        mask = (rng.random(t.data.shape) >= p) / (1.0 - p)
        return mul(t, Tensor(mask))

    def encode_rows(self, x: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, dict[str, Tensor]]:
        """One visit per row -> fused latent plus per-group embeddings."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != schema.N_FEATURES:
            raise ValueError(f"expected (n, {schema.N_FEATURES}) rows")
        if not np.all(np.isfinite(x)):
            raise ValueError("encoder input contains non-finite entries "
                             "(impute before the model)")
        embeds: dict[str, Tensor] = {}
        for g in self.arch.groups:
            h = Tensor(x[:, self._slices[g]])
            for i in range(len(self.arch.group_hidden[g])):
                pre = add(matmul(h, self.params[f"enc.{g}.{i}.W"]),
                          self.params[f"enc.{g}.{i}.b"])
                h = silu(layer_norm(pre, self.params[f"enc.{g}.{i}.gamma"],
                                    self.params[f"enc.{g}.{i}.beta"]))
                h = self._dropout(h, train, rng)
            embeds[g] = h
        fused = silu(add(matmul(concat_cols([embeds[g] for g in self.arch.groups]),
                                self.params["fuse.W"]), self.params["fuse.b"]))
        fused = self._dropout(fused, train, rng)
        return fused, embeds

    def refine(self, z: Tensor, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        for i in range(self.arch.n_refine_blocks):
            pre = add(matmul(z, self.params[f"refine.{i}.W"]),
                      self.params[f"refine.{i}.b"])
            blk = silu(layer_norm(pre, self.params[f"refine.{i}.gamma"],
                                  self.params[f"refine.{i}.beta"]))
            z = add(z, self._dropout(blk, train, rng))
        return z

    def embed_rows(self, x: np.ndarray) -> np.ndarray:
        """Refined latent per visit row, eval mode, as a plain array."""
        z, _ = self.encode_rows(x)
        return self.refine(z).data

    @staticmethod
    def _softmax(scores: list[Tensor]) -> list[Tensor]:
        """Stable softmax across a list of (B, 1) score tensors."""
        m = np.max(np.concatenate([s.data for s in scores], axis=1),
                   axis=1, keepdims=True)
        shift = Tensor(m)
        exps = [exp(sub(s, shift)) for s in scores]
        total = exps[0]
        for e in exps[1:]:
            total = add(total, e)
        return [div(e, total) for e in exps]

    def _scaled_score(self, q: Tensor, k: Tensor) -> Tensor:
        return mul(tsum(mul(q, k), axis=1, keepdims=True),
                   1.0 / np.sqrt(self.arch.d_k))

    def temporal_context(self, z_refs: list[Tensor]) -> tuple[Tensor, np.ndarray]:
        """Attention over the window's refined states, query = final state.

        Returns (c_time, alpha) with alpha of shape (B, n_heads, w).
        """
        a = self.arch
        w = len(z_refs)
        B = z_refs[0].data.shape[0]
        z_last = z_refs[-1]
        if self.ablation.no_temporal_attention:
            c = z_refs[0]
            for z in z_refs[1:]:
                c = add(c, z)
            c = mul(c, 1.0 / w)
            return c, np.full((B, a.n_heads, w), 1.0 / w)

        if a.n_heads == 1:
            q = matmul(z_last, self.params["attn_t.q.W"])
            scores = [self._scaled_score(q, matmul(z, self.params["attn_t.k.W"]))
                      for z in z_refs]
            alphas = self._softmax(scores)
            c = mul(z_refs[0], alphas[0])
            for z, al in zip(z_refs[1:], alphas[1:]):
                c = add(c, mul(z, al))
            alpha = np.stack([al.data[:, 0] for al in alphas], axis=1)
            return c, alpha[:, None, :]

        head_outs: list[Tensor] = []
        alpha_all = np.zeros((B, a.n_heads, w))
        for h in range(a.n_heads):
            q = matmul(z_last, self.params[f"attn_t.q{h}.W"])
            scores = [self._scaled_score(q, matmul(z, self.params[f"attn_t.k{h}.W"]))
                      for z in z_refs]
            alphas = self._softmax(scores)
            vals = [matmul(z, self.params[f"attn_t.v{h}.W"]) for z in z_refs]
            out = mul(vals[0], alphas[0])
            for v, al in zip(vals[1:], alphas[1:]):
                out = add(out, mul(v, al))
            head_outs.append(out)
            alpha_all[:, h, :] = np.concatenate([al.data for al in alphas], axis=1)
        c = matmul(concat_cols(head_outs), self.params["attn_t.out.W"])
        return c, alpha_all

    def feature_context(self, z_last: Tensor, embeds: dict[str, Tensor]
                        ) -> tuple[Tensor, np.ndarray]:
        """Attention over the final visit's group embeddings.

        Returns (c_feat, beta) with beta of shape (B, n_groups).
        """
        groups = self.arch.groups
        vals = [matmul(embeds[g], self.params[f"attn_f.val.{g}.W"]) for g in groups]
        if self.ablation.no_feature_attention:
            c = vals[0]
            for v in vals[1:]:
                c = add(c, v)
            c = mul(c, 1.0 / len(groups))
            B = z_last.data.shape[0]
            return c, np.full((B, len(groups)), 1.0 / len(groups))
        v_q = matmul(z_last, self.params["attn_f.q.W"])
        scores = [self._scaled_score(v_q, matmul(embeds[g],
                                                 self.params[f"attn_f.key.{g}.W"]))
                  for g in groups]
        betas = self._softmax(scores)
        c = mul(vals[0], betas[0])
        for v, be in zip(vals[1:], betas[1:]):
            c = add(c, mul(v, be))
        beta = np.concatenate([be.data for be in betas], axis=1)
        return c, beta

    def control(self, z_refs: list[Tensor], embeds_last: dict[str, Tensor]
                ) -> tuple[Tensor, np.ndarray, np.ndarray, np.ndarray]:
        """Gated mix of temporal and feature contexts; (c, alpha, beta, gate)."""
        z_last = z_refs[-1]
        B = z_last.data.shape[0]
        a = self.arch
        if self.ablation.no_control:
            zero = Tensor(np.zeros((B, a.d_z)))
            return (zero, np.full((B, a.n_heads, a.window), 1.0 / a.window),
                    np.full((B, len(a.groups)), 1.0 / len(a.groups)),
                    np.full((B, a.d_z), 0.5))
        c_time, alpha = self.temporal_context(z_refs)
        c_feat, beta = self.feature_context(z_last, embeds_last)
        gin = concat_cols([z_last, c_time])
        gate = sigmoid(add(matmul(gin, self.params["gate.W"]), self.params["gate.b"]))
        ones = Tensor(np.ones_like(gate.data))
        c = add(mul(gate, c_feat), mul(sub(ones, gate), c_time))
        return c, alpha, beta, gate.data.copy()

    def koopman_step(self, z: Tensor, c: Tensor) -> Tensor:
        """z' = K z + c, batched over rows."""
        return add(matmul(z, transpose(self.K)), c)

    def decode(self, z: Tensor, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        h = z
        for i in range(self.arch.n_decoder_blocks):
            pre = add(matmul(h, self.params[f"dec.{i}.W"]),
                      self.params[f"dec.{i}.b"])
            blk = silu(layer_norm(pre, self.params[f"dec.{i}.gamma"],
                                  self.params[f"dec.{i}.beta"]))
            h = add(h, self._dropout(blk, train, rng))
        return add(matmul(h, self.params["dec.head.W"]), self.params["dec.head.b"])

    def forward(self, X: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOut:
        """Windows (B, w, 44) -> next-visit predictions plus diagnostics."""
        X = np.asarray(X, dtype=np.float64)
        a = self.arch
        if X.ndim != 3 or X.shape[1] != a.window or X.shape[2] != schema.N_FEATURES:
            raise ValueError(f"expected windows (B, {a.window}, {schema.N_FEATURES}), "
                             f"got {X.shape}")
        z_refs: list[Tensor] = []
        embeds_last: dict[str, Tensor] = {}
        for t in range(a.window):
            z_enc, embeds = self.encode_rows(X[:, t, :], train=train, rng=rng)
            z_refs.append(self.refine(z_enc, train=train, rng=rng))
            if t == a.window - 1:
                embeds_last = embeds
        c, alpha, beta, gate = self.control(z_refs, embeds_last)
        z_next = self.koopman_step(z_refs[-1], c)
        pred = self.decode(z_next, train=train, rng=rng)
        return ForwardOut(pred, c, z_next, z_refs, alpha, beta, gate)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X).pred.data.copy()

    # ---- spectral control ----------------------------------------------

    def spectral_norm(self, iters: int = 50) -> float:
        return power_iteration_norm(self.K.data, iters=iters)

    def project_spectral(self, rho: float = 0.95) -> None:
        """Hard projection K <- K / max(1, ||K||_2 / rho), exact norm."""
        self.K.data = spectral_scale(self.K.data, rho)


# ---- checkpointing ------------------------------------------------------

def save_checkpoint(model: NkmModel, stem: str,
                    history: list[dict] | None = None,
                    extra: dict | None = None) -> tuple[str, str]:
    """Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian float64,
    declaration order). Returns the two paths."""
    manifest = {
        "format_version": 1,
        "arch": asdict(model.arch),
        "ablation": asdict(model.ablation),
        "seed": model.seed,
        "param_names": model.params.names(),
        "param_shapes": {k: list(t.data.shape) for k, t in model.params.items()},
        "n_values": model.params.n_values(),
        "history": history if history is not None else [],
    }
    if extra:
        manifest.update(extra)
    json_path, bin_path = stem + ".json", stem + ".bin"
    with open(json_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    model.params.to_vector().astype("<f8").tofile(bin_path)
    return json_path, bin_path


def load_checkpoint(stem: str) -> tuple[NkmModel, dict]:
    """Rebuild the model from `<stem>.json` + `<stem>.bin`, bit-exact."""
    json_path, bin_path = stem + ".json", stem + ".bin"
    if not os.path.exists(json_path) or not os.path.exists(bin_path):
        raise FileNotFoundError(f"checkpoint files {json_path} / {bin_path} missing")
    with open(json_path) as fh:
        manifest = json.load(fh)
    arch_d = dict(manifest["arch"])
    arch_d["groups"] = tuple(arch_d["groups"])
    arch_d["group_hidden"] = {k: tuple(v) for k, v in arch_d["group_hidden"].items()}
    arch = ArchConfig(**arch_d)
    model = NkmModel(arch, seed=manifest["seed"],
                     ablation=AblationFlags(**manifest["ablation"]))
    if model.params.names() != manifest["param_names"]:
        raise ValueError("checkpoint parameter names do not match the architecture")
    vec = np.fromfile(bin_path, dtype="<f8")
    if vec.size != manifest["n_values"]:
        raise ValueError(f"checkpoint binary has {vec.size} values, manifest "
                         f"says {manifest['n_values']}")
    model.params.from_vector(vec.astype(np.float64))
    return model, manifest
