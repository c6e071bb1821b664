"""Decoder-only Transformer LM with maskable / factorizable projections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .factorization import FactorizedLayer, densify, refactorize_for_next_target
from .tensor import Tensor

EMBEDDING = "embedding"
ATTENTION = "attention_qkvo"
FFN = "ffn"
OUTPUT = "output_projection"
PROJECTION_KINDS = (EMBEDDING, ATTENTION, FFN, OUTPUT)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if k != "seed" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"num_heads × head_dim = {self.num_heads * self.head_dim} != embed_dim {self.embed_dim}"
            )


@dataclass
class NamedParameter:
    name: str
    tensor: Tensor
    layer_kind: str  # one of PROJECTION_KINDS, or position / norm / bias
    mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.tensor.shape

    def unmasked(self) -> int:
        return int(self.tensor.size if self.mask is None else np.count_nonzero(self.mask))

    def apply_mask_(self) -> None:
        if self.mask is not None:
            self.tensor.data *= self.mask.astype(self.tensor.data.dtype)


class Projection:
    """One prunable linear map in one of three modes.

    ``dense``: ``x @ W`` (W masked element-wise); ``factorized``:
    ``((x @ U) * (D ⊙ M)) @ V``; ``lowrank``: ``x @ U' @ V''`` (densified).
    The embedding is the same map applied to one-hot inputs, i.e. a row
    lookup into ``W`` or ``U``.
    """

    def __init__(self, name: str, kind: str, shape: tuple[int, int], bias: NamedParameter | None):
        self.name = name
        self.kind = kind
        self.shape = shape
        self.bias = bias
        self.mode = "dense"
        self.params: dict[str, NamedParameter] = {}

    @property
    def weight(self) -> NamedParameter:
        return self.params["weight"]

    @property
    def prunable_param(self) -> NamedParameter:
        if self.mode == "dense":
            return self.params["weight"]
        if self.mode == "factorized":
            return self.params["D"]
        raise ConfigError(f"{self.name}: densified layer must be refactorized before pruning")

    def __call__(self, x):
        """``x`` is a Tensor (N, a), or an int array of row ids for the embedding."""
        p = self.params
        lookup = self.kind == EMBEDDING
        if self.mode == "dense":
            w = _masked(p["weight"])
            y = T.embedding(w, x) if lookup else T.matmul(x, w)
        elif self.mode == "factorized":
            u = p["U"].tensor
            h = T.embedding(u, x) if lookup else T.matmul(x, u)
            h = T.mul(h, _masked(p["D"]))
            y = T.matmul(h, p["V"].tensor)
        else:
            u = p["U"].tensor
            h = T.embedding(u, x) if lookup else T.matmul(x, u)
            y = T.matmul(h, p["V"].tensor)
        if self.bias is not None:
            y = T.add(y, self.bias.tensor)
        return y

    def effective_params(self) -> int:
        a, b = self.shape
        if self.mode == "dense":
            return self.weight.unmasked()
        if self.mode == "factorized":
            k = self.params["D"].unmasked()
            return k * (a + b) + k
        k = self.params["U"].shape[1]
        return k * (a + b)

    def inference_rank(self) -> int | None:
        if self.mode == "factorized":
            return self.params["D"].unmasked()
        if self.mode == "lowrank":
            return self.params["U"].shape[1]
        return None


def _masked(p: NamedParameter) -> Tensor:
    return p.tensor if p.mask is None else T.hadamard_mask_apply(p.tensor, p.mask)


class Model:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, NamedParameter] = {}
        self.projections: dict[str, Projection] = {}
        rng = np.random.default_rng(config.seed)
        d, V, F = config.embed_dim, config.vocab_size, config.ffn_dim
        resid_std = 1.0 / math.sqrt(d) / math.sqrt(2 * config.num_blocks)

        self._projection("tok_emb", EMBEDDING, (V, d), rng, std=0.1, bias=False)
        self.pos_emb = self._param("pos_emb", rng.normal(0, 0.02, (config.max_seq_len, d)), "position")
        for i in range(config.num_blocks):
            pre = f"blocks.{i}"
            self._layer_norm(f"{pre}.ln1", d)
            for role in "qkv":
                self._projection(f"{pre}.attn.{role}", ATTENTION, (d, d), rng, std=1 / math.sqrt(d))
            self._projection(f"{pre}.attn.o", ATTENTION, (d, d), rng, std=resid_std)
            self._layer_norm(f"{pre}.ln2", d)
            self._projection(f"{pre}.ffn.up", FFN, (d, F), rng, std=1 / math.sqrt(d))
            self._projection(f"{pre}.ffn.down", FFN, (F, d), rng, std=resid_std * math.sqrt(d / F))
        self._layer_norm("ln_f", d)
        self._projection("out", OUTPUT, (d, V), rng, std=0.02)

    # -- construction helpers
    def _param(self, name, data, kind, mask=None) -> NamedParameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        p = NamedParameter(name, Tensor(np.asarray(data, dtype=np.float32), requires_grad=True), kind, mask)
        self.params[name] = p
        return p

    def _projection(self, name, kind, shape, rng, std, bias=True):
        b = self._param(f"{name}.bias", np.zeros(shape[1]), "bias") if bias else None
        proj = Projection(name, kind, shape, b)
        proj.params["weight"] = self._param(
            f"{name}.weight", rng.normal(0.0, std, shape), kind, mask=np.ones(shape, dtype=np.uint8)
        )
        self.projections[name] = proj

    def _layer_norm(self, name, d):
        self._param(f"{name}.gamma", np.ones(d), "norm")
        self._param(f"{name}.beta", np.zeros(d), "norm")

    # -- registry
    def named_parameters(self) -> Iterator[NamedParameter]:
        return iter(self.params.values())

    def prunable(self) -> list[Projection]:
        return [p for p in self.projections.values() if p.mode != "lowrank"]

    def total_params(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def effective_params(self) -> int:
        fixed = sum(
            p.tensor.size for p in self.params.values() if p.layer_kind not in PROJECTION_KINDS
        )
        return fixed + sum(pr.effective_params() for pr in self.projections.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def apply_masks_(self) -> None:
        for p in self.params.values():
            p.apply_mask_()

    def remove_masks(self) -> None:
        for p in self.params.values():
            p.mask = None

    # -- forward
    def forward(self, inputs: np.ndarray) -> Tensor:
        inputs = np.asarray(inputs, dtype=np.int64)
        B, L = inputs.shape
        cfg = self.config
        if L > cfg.max_seq_len:
            raise IndexError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        if inputs.size and (inputs.min() < 0 or inputs.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        d, H, hd = cfg.embed_dim, cfg.num_heads, cfg.head_dim
        pr = self.projections

        x = pr["tok_emb"](inputs.reshape(-1))
        pos = T.embedding(self.pos_emb.tensor, np.tile(np.arange(L), B))
        x = T.add(x, pos)  # (B*L, d)
        causal = np.triu(np.full((L, L), -1e9, dtype=np.float32), k=1)

        def heads(t):
            t = T.reshape(t, (B, L, H, hd))
            return T.reshape(T.transpose(t, (0, 2, 1, 3)), (B * H, L, hd))

        for i in range(cfg.num_blocks):
            pre = f"blocks.{i}"
            h = self._ln(f"{pre}.ln1", x)
            q, k, v = (heads(pr[f"{pre}.attn.{r}"](h)) for r in "qkv")
            att = T.matmul(q, T.transpose(k, (0, 2, 1)))
            att = T.add_const(T.scale(att, 1.0 / math.sqrt(hd)), causal)
            ctx = T.matmul(T.softmax_rowwise(att), v)  # (B*H, L, hd)
            ctx = T.reshape(T.transpose(T.reshape(ctx, (B, H, L, hd)), (0, 2, 1, 3)), (B * L, d))
            x = T.add(x, pr[f"{pre}.attn.o"](ctx))
            h = self._ln(f"{pre}.ln2", x)
            h = T.gelu(pr[f"{pre}.ffn.up"](h))
            x = T.add(x, pr[f"{pre}.ffn.down"](h))
        x = self._ln("ln_f", x)
        logits = pr["out"](x)
        return T.reshape(logits, (B, L, cfg.vocab_size))

    __call__ = forward

    def _ln(self, name, x):
        return T.layer_norm(x, self.params[f"{name}.gamma"].tensor, self.params[f"{name}.beta"].tensor)

    def loss(self, batch) -> Tensor:
        return T.cross_entropy(self.forward(batch.inputs), batch.targets)

    # -- factorization
    def swap_in_factorized(self, layer_name: str, fl: FactorizedLayer) -> "Model":
        proj = self._get(layer_name)
        a, b = proj.shape
        r = fl.D.shape[0]
        if tuple(fl.origin_shape) != (a, b) or fl.U.shape != (a, r) or fl.V.shape != (r, b):
            raise ConfigError(
                f"{layer_name}: factors {fl.U.shape}/{fl.D.shape}/{fl.V.shape} do not rebuild {(a, b)}"
            )
        self._drop_weights(proj)
        proj.params["U"] = self._param(f"{layer_name}.U", fl.U, proj.kind)
        proj.params["D"] = self._param(
            f"{layer_name}.D", fl.D, proj.kind, mask=np.asarray(fl.M, dtype=np.uint8).copy()
        )
        proj.params["V"] = self._param(f"{layer_name}.V", fl.V, proj.kind)
        proj.mode = "factorized"
        return self

    def factorized_layer(self, layer_name: str) -> FactorizedLayer:
        proj = self._get(layer_name)
        if proj.mode != "factorized":
            raise ConfigError(f"{layer_name} is not factorized")
        p = proj.params
        return FactorizedLayer(
            p["U"].tensor.data.copy(), p["D"].tensor.data.copy(), p["D"].mask.copy(),
            p["V"].tensor.data.copy(), proj.shape,
        )

    def set_diagonal_mask(self, layer_name: str, m: np.ndarray) -> None:
        d = self._get(layer_name).params["D"]
        d.mask = np.asarray(m, dtype=np.uint8).copy()
        d.apply_mask_()

    def densify_layer(self, layer_name: str) -> "Model":
        u, v = densify(self.factorized_layer(layer_name))
        proj = self._get(layer_name)
        self._drop_weights(proj)
        proj.params["U"] = self._param(f"{layer_name}.U", u, proj.kind)
        proj.params["V"] = self._param(f"{layer_name}.V", v, proj.kind)
        proj.mode = "lowrank"
        return self

    def refactorize_layer(self, layer_name: str) -> "Model":
        proj = self._get(layer_name)
        if proj.mode != "lowrank":
            raise ConfigError(f"{layer_name} is not densified")
        fl = refactorize_for_next_target(
            proj.params["U"].tensor.data, proj.params["V"].tensor.data, name=layer_name
        )
        self._drop_weights(proj)
        r = fl.rank
        proj.params["U"] = self._param(f"{layer_name}.U", fl.U, proj.kind)
        proj.params["D"] = self._param(f"{layer_name}.D", fl.D, proj.kind, mask=np.ones(r, np.uint8))
        proj.params["V"] = self._param(f"{layer_name}.V", fl.V, proj.kind)
        proj.mode = "factorized"
        return self

    def _get(self, layer_name: str) -> Projection:
        if layer_name not in self.projections:
            raise ConfigError(f"unknown layer {layer_name!r}")
        return self.projections[layer_name]

    def _drop_weights(self, proj: Projection) -> None:
        for p in proj.params.values():
            del self.params[p.name]
        proj.params = {}

    # -- (de)serialization
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params.values():
            out[p.name] = p.tensor.data
            if p.mask is not None:
                out[f"mask/{p.name}"] = p.mask.astype(np.uint8)
        return out

    def layout(self) -> dict:
        return {
            "config": asdict(self.config),
            "modes": {name: pr.mode for name, pr in self.projections.items()},
        }

    @classmethod
    def from_state(cls, layout: dict, tensors: dict[str, np.ndarray]) -> "Model":
        model = cls(ModelConfig(**layout["config"]))
        for name, mode in layout["modes"].items():
            proj = model.projections[name]
            if mode == "dense":
                continue
            model._drop_weights(proj)
            keys = ("U", "D", "V") if mode == "factorized" else ("U", "V")
            for k in keys:
                model._param(f"{name}.{k}", tensors[f"{name}.{k}"], proj.kind)
                proj.params[k] = model.params[f"{name}.{k}"]
            proj.mode = mode
        for p in model.params.values():
            if p.name not in tensors:
                raise ConfigError(f"checkpoint lacks tensor {p.name}")
            if tensors[p.name].shape != p.shape:
                raise ConfigError(f"{p.name}: shape {tensors[p.name].shape} != {p.shape}")
            p.tensor.data = np.array(tensors[p.name], dtype=T.default_dtype())
            mk = f"mask/{p.name}"
            p.mask = np.array(tensors[mk], dtype=np.uint8) if mk in tensors else None
        return model

    def clone(self) -> "Model":
        return Model.from_state(self.layout(), {k: v.copy() for k, v in self.state_tensors().items()})


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of a freshly built model."""
    V, d, F, L, nb = config.vocab_size, config.embed_dim, config.ffn_dim, config.max_seq_len, config.num_blocks
    block = 4 * (d * d + d) + (d * F + F) + (F * d + d) + 2 * (2 * d)
    return V * d + L * d + nb * block + 2 * d + (d * V + V)
