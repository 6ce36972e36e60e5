"""DeiT-style vision transformer with reducible bottlenecks and growable layers."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from hetscale import tensor as T
from hetscale.cache import SharedInputCache
from hetscale.growth import GrowthBranch, branch_forward
from hetscale.tensor import Tensor

ROLES = ("QKV", "PROJ", "FC1", "FC2", "HEAD", "EMBED")
GROWABLE_ROLES = ("QKV", "PROJ", "FC1", "FC2")
REDUCE_CHOICES = (1, 2, 4)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    fc_reduce: int = 2
    attn_reduce: int = 2
    patch_size: int = 7
    image_size: int = 28
    num_classes: int = 10
    in_chans: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "mlp_ratio" and (not isinstance(getattr(self, f.name), int)
                                          or getattr(self, f.name) <= 0):
                raise ValueError(f"{f.name} must be a positive integer, got {getattr(self, f.name)!r}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.fc_reduce not in REDUCE_CHOICES or self.attn_reduce not in REDUCE_CHOICES:
            raise ValueError(f"fc_reduce/attn_reduce must be in {REDUCE_CHOICES}")
        if self.embed_dim % self.attn_reduce or self.attn_width % self.num_heads:
            raise ValueError(f"reduced attention width {self.embed_dim}/{self.attn_reduce} "
                             f"not divisible by num_heads {self.num_heads}")
        hidden = self.embed_dim * self.mlp_ratio
        if hidden != int(hidden) or int(hidden) % self.fc_reduce:
            raise ValueError(f"MLP width {hidden} not divisible by fc_reduce {self.fc_reduce}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def attn_width(self) -> int:
        return self.embed_dim // self.attn_reduce

    @property
    def head_dim(self) -> int:
        return self.attn_width // self.num_heads

    @property
    def mlp_width(self) -> int:
        return int(self.embed_dim * self.mlp_ratio) // self.fc_reduce

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


def deit_small(fc_reduce: int = 1, attn_reduce: int = 1, num_classes: int = 100) -> ModelConfig:
    """DeiT-S geometry (224px, patch 16, embed 384, 12 blocks, 6 heads)."""
    return ModelConfig(embed_dim=384, depth=12, num_heads=6, mlp_ratio=4.0,
                       fc_reduce=fc_reduce, attn_reduce=attn_reduce, patch_size=16,
                       image_size=224, num_classes=num_classes, in_chans=3)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std)


@dataclass
class LayerTrace:
    """Per-forward record used by the curvature analysis."""

    x: np.ndarray | None = None
    z: np.ndarray | None = None
    post: Tensor | None = None


class GrowableLinear:
    """Affine layer ``W x + b`` plus any growth branches attached to it."""

    def __init__(self, name: str, in_dim: int, out_dim: int, role: str,
                 rng: np.random.Generator | None = None, activation: str | None = None,
                 dtype=np.float32):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.role = role
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_trunc_normal(rng, (out_dim, in_dim)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype)
        self.branches: list[GrowthBranch] = []
        self.probe: Tensor | None = None
        self.trace: LayerTrace | None = None

    @property
    def growable(self) -> bool:
        return self.role in GROWABLE_ROLES

    def __call__(self, x: Tensor, cache: SharedInputCache | None = None) -> Tensor:
        out = T.linear(x, self.weight, self.bias, cache)
        for br in self.branches:
            if br.active:
                out = branch_forward(br, x, out, cache)
        if self.probe is not None:
            out = out + self.probe
        if self.trace is not None:
            self.trace.x = x.data
            self.trace.z = out.data
        if self.activation == "gelu":
            out = T.gelu(out)
            if self.trace is not None:
                self.trace.post = out.retain_grad()
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias
        for k, br in enumerate(self.branches):
            for pname, p in br.named_parameters():
                yield f"{self.name}.branches.{k}.{pname}", p

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def __repr__(self) -> str:
        return (f"GrowableLinear({self.name!r}, {self.in_dim}->{self.out_dim}, {self.role}, "
                f"branches={len(self.branches)})")


class LayerNorm:
    def __init__(self, name: str, dim: int, dtype=np.float32):
        self.name = name
        self.gamma = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def named_parameters(self):
        yield f"{self.name}.weight", self.gamma
        yield f"{self.name}.bias", self.beta


class Block:
    def __init__(self, idx: int, cfg: ModelConfig, rng: np.random.Generator):
        p = f"blocks.{idx}"
        e = cfg.embed_dim
        self.cfg = cfg
        self.norm1 = LayerNorm(f"{p}.norm1", e)
        self.qkv = GrowableLinear(f"{p}.attn.qkv", e, 3 * cfg.attn_width, "QKV", rng)
        self.proj = GrowableLinear(f"{p}.attn.proj", cfg.attn_width, e, "PROJ", rng)
        self.norm2 = LayerNorm(f"{p}.norm2", e)
        self.fc1 = GrowableLinear(f"{p}.mlp.fc1", e, cfg.mlp_width, "FC1", rng, activation="gelu")
        self.fc2 = GrowableLinear(f"{p}.mlp.fc2", cfg.mlp_width, e, "FC2", rng)

    def __call__(self, x: Tensor, cache: SharedInputCache | None) -> Tensor:
        b, n, _ = x.shape
        h, dh = self.cfg.num_heads, self.cfg.head_dim
        qkv = self.qkv(self.norm1(x), cache)
        qkv = qkv.reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (dh ** -0.5)
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, h * dh)
        x = x + self.proj(out, cache)
        x = x + self.fc2(self.fc1(self.norm2(x), cache), cache)
        return x

    def layers(self):
        return (self.qkv, self.proj, self.fc1, self.fc2)

    def named_parameters(self):
        yield from self.norm1.named_parameters()
        yield from self.qkv.named_parameters()
        yield from self.proj.named_parameters()
        yield from self.norm2.named_parameters()
        yield from self.fc1.named_parameters()
        yield from self.fc2.named_parameters()


class Model:
    """Common surface shared by the transformer and the toy MLP."""

    use_cache: bool = True

    def forward(self, x: np.ndarray, cache: bool | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, cache: bool | None = None) -> Tensor:
        return self.forward(x, cache)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def linear_layers(self) -> list[GrowableLinear]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def layer(self, name: str) -> GrowableLinear:
        for lay in self.linear_layers():
            if lay.name == name:
                return lay
        raise KeyError(f"no layer named {name!r}")

    def growable_layers(self) -> list[GrowableLinear]:
        return [lay for lay in self.linear_layers() if lay.growable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def clone(self) -> "Model":
        return self.astype(self.dtype)

    def stages_for(self, layer: GrowableLinear):
        """Optional ``(prefix, suffix)`` split of the forward pass around ``layer``.

        ``prefix(inputs)`` returns the detached activations feeding the
        stage that contains ``layer``; ``suffix(acts)`` finishes the forward
        pass from there. Models without a useful split return None.
        """
        return None

    def _input_cache(self, cache: bool | None) -> SharedInputCache | None:
        use = self.use_cache if cache is None else cache
        return SharedInputCache() if (use and T.is_grad_enabled()) else None


class VisionTransformer(Model):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        e = cfg.embed_dim
        patch_dim = cfg.in_chans * cfg.patch_size ** 2
        self.patch_embed = GrowableLinear("patch_embed", patch_dim, e, "EMBED", rng)
        self.cls_token = Tensor(_trunc_normal(rng, (1, 1, e)), requires_grad=True, dtype=np.float32)
        self.pos_embed = Tensor(_trunc_normal(rng, (1, cfg.seq_len, e)), requires_grad=True,
                                dtype=np.float32)
        self.blocks = [Block(i, cfg, rng) for i in range(cfg.depth)]
        self.norm = LayerNorm("norm", e)
        self.head = GrowableLinear("head", e, cfg.num_classes, "HEAD", rng)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        images = np.asarray(images)
        expect = (cfg.in_chans, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ValueError(f"expected images of shape (B, {expect[0]}, {expect[1]}, {expect[2]}), "
                             f"got {images.shape}")
        b, c, hgt, wid = images.shape
        p = cfg.patch_size
        x = images.reshape(b, c, hgt // p, p, wid // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (hgt // p) * (wid // p), c * p * p)

    def _embed(self, images: np.ndarray, store) -> Tensor:
        patches = Tensor(self.patchify(images), dtype=self.dtype)
        x = self.patch_embed(patches, store)
        cls = T.broadcast_to(self.cls_token, (x.shape[0], 1, self.cfg.embed_dim))
        return T.concat([cls, x], axis=1) + self.pos_embed

    def _run_from(self, x: Tensor, start: int, store) -> Tensor:
        for blk in self.blocks[start:]:
            x = blk(x, store)
        x = self.norm(x)
        return self.head(x[:, 0], store)

    def forward(self, images: np.ndarray, cache: bool | None = None) -> Tensor:
        store = self._input_cache(cache)
        return self._run_from(self._embed(images, store), 0, store)

    def stages_for(self, layer: GrowableLinear):
        start = next((i for i, blk in enumerate(self.blocks) if layer in blk.layers()), None)
        if start is None:
            return None

        def prefix(images: np.ndarray) -> np.ndarray:
            with T.no_grad():
                x = self._embed(images, None)
                for blk in self.blocks[:start]:
                    x = blk(x, None)
            return x.data

        def suffix(acts: np.ndarray) -> Tensor:
            store = self._input_cache(None)
            return self._run_from(Tensor(acts, dtype=self.dtype), start, store)

        return prefix, suffix

    def named_parameters(self):
        yield from self.patch_embed.named_parameters()
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for blk in self.blocks:
            yield from blk.named_parameters()
        yield from self.norm.named_parameters()
        yield from self.head.named_parameters()

    def linear_layers(self) -> list[GrowableLinear]:
        out = [self.patch_embed]
        for blk in self.blocks:
            out.extend(blk.layers())
        out.append(self.head)
        return out

    def tokens_per_sample(self, layer: GrowableLinear) -> int:
        if layer.role == "HEAD":
            return 1
        if layer.role == "EMBED":
            return self.cfg.num_patches
        return self.cfg.seq_len


class MLPClassifier(Model):
    """Two-layer GeLU network ``fc2(gelu(fc1(x)))`` on flat inputs."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int, seed: int = 0,
                 init_std: float = 0.5):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.fc1 = GrowableLinear("fc1", in_dim, hidden, "FC1", rng, activation="gelu")
        self.fc2 = GrowableLinear("fc2", hidden, num_classes, "FC2", rng)
        for lay in (self.fc1, self.fc2):
            lay.weight.data = rng.normal(0.0, init_std, size=lay.weight.shape).astype(np.float32)
            lay.bias.data = rng.normal(0.0, init_std, size=lay.bias.shape).astype(np.float32)

    def forward(self, x: np.ndarray, cache: bool | None = None) -> Tensor:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (N, {self.in_dim}) inputs, got {x.shape}")
        store = self._input_cache(cache)
        h = self.fc1(Tensor(x, dtype=self.dtype), store)
        return self.fc2(h, store)

    def named_parameters(self):
        yield from self.fc1.named_parameters()
        yield from self.fc2.named_parameters()

    def linear_layers(self):
        return [self.fc1, self.fc2]

    def tokens_per_sample(self, layer: GrowableLinear) -> int:
        return 1


def build_model(cfg: ModelConfig, seed: int = 0) -> VisionTransformer:
    return VisionTransformer(cfg, seed=seed)


def param_count(model: Model) -> int:
    """Exact trainable-parameter count, branches included."""
    return int(sum(p.size for _, p in model.named_parameters()))


def flop_estimate(model: VisionTransformer, cfg: ModelConfig | None = None) -> int:
    """Multiply-accumulate count of one forward pass over one image.

    Counts every matmul (patch embedding, QKV, attention scores and
    weighting, projection, MLP, head) and the two added neurons per
    selected neuron of each growth branch. One multiply-add counts as one
    FLOP, the convention behind published ViT GFLOP figures.
    """
    cfg = cfg or model.cfg
    n = cfg.seq_len
    total = cfg.num_patches * model.patch_embed.in_dim * cfg.embed_dim
    attn = 2 * cfg.num_heads * n * n * cfg.head_dim
    for blk in model.blocks:
        total += attn
        for lay in blk.layers():
            total += n * lay.in_dim * lay.out_dim
    total += cfg.embed_dim * cfg.num_classes
    for lay in model.linear_layers():
        tokens = model.tokens_per_sample(lay)
        for br in lay.branches:
            total += 2 * tokens * lay.in_dim * len(br.selected)
    return int(total)


def count_table(cfg: ModelConfig) -> dict:
    """Parameter and FLOP figures for a freshly built configuration."""
    model = build_model(cfg)
    return {"params": param_count(model), "flops": flop_estimate(model, cfg)}
