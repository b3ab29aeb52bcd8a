"""The denoising network: multi-scale point embedding with local point
attention, sparse positional encoding, a Pre-LN transformer encoder stack,
and a residual densely-connected output head.

The network maps an (N, 3) patch in its local unit-sphere frame to (N, 3)
denoised coordinates with row i of the output corresponding to row i of the
input. With the final head projection at zero the whole network is exactly
the identity.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ContractError, FormatError, NumericError
from .spatial import KdTree

ENCODING_MODES = ("sparse", "coordinate", "none")

_SPARSE_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    k_scales: tuple[int, int, int] = (8, 16, 24)
    layers_per_unit: int = 4
    feat_width: int = 32
    d_model: int = 128
    n_heads: int = 4
    ffn_hidden: int = 256
    n_encoder_layers: int = 6
    sparse_k: int = 3
    head_hidden: int = 128
    head_layers: int = 4
    encoding_mode: str = "sparse"
    lpa_enabled: bool = True
    attention_enabled: bool = True
    embed_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "k_scales", tuple(int(k) for k in self.k_scales))
        if len(self.k_scales) != 3 or any(
            a >= b for a, b in zip(self.k_scales, self.k_scales[1:])
        ):
            raise ArgumentError(f"k_scales must be 3 strictly increasing ints, got {self.k_scales}")
        if self.d_model % self.n_heads != 0:
            raise ArgumentError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.sparse_k < 1:
            raise ArgumentError(f"sparse_k must be >= 1, got {self.sparse_k}")
        for name in ("layers_per_unit", "feat_width", "d_model", "ffn_hidden",
                     "n_encoder_layers", "head_hidden", "head_layers"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.encoding_mode not in ENCODING_MODES:
            raise ArgumentError(
                f"unknown encoding_mode '{self.encoding_mode}' (one of {ENCODING_MODES})"
            )

    @property
    def min_points(self) -> int:
        """Smallest patch the network accepts (strict: N > max k used)."""
        k = max(self.k_scales)
        if self.encoding_mode == "sparse":
            k = max(k, self.sparse_k)
        return k + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_scales"] = list(self.k_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["k_scales"] = tuple(d["k_scales"])
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Small profile sized for laptop-scale training and tests."""
    base = dict(
        k_scales=(4, 6, 8), feat_width=8, d_model=32, n_heads=2,
        ffn_hidden=64, n_encoder_layers=2, head_hidden=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def full_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Canonical (name, shape, init) list; serialization order follows it."""
    specs: list[tuple[str, tuple[int, ...], str]] = []
    fw = cfg.feat_width

    def lin(prefix, d_in, d_out, init="fanin"):
        specs.append((f"{prefix}.weight", (d_in, d_out), init))
        specs.append((f"{prefix}.bias", (d_out,), "zeros"))

    for u in range(3):
        d_in = 3
        for l in range(cfg.layers_per_unit):
            p = f"embed.u{u}.l{l}"
            if cfg.lpa_enabled:
                specs.append((f"{p}.gate", (2 * d_in, 2 * d_in), "fanin"))
            lin(p, 2 * d_in, fw)
            if cfg.embed_norm:
                specs.append((f"{p}.norm_gain", (fw,), "ones"))
                specs.append((f"{p}.norm_bias", (fw,), "zeros"))
            d_in = fw
    lin("fuse.l0", 3 * cfg.layers_per_unit * fw, cfg.d_model)
    lin("fuse.l1", cfg.d_model, cfg.d_model)
    if cfg.encoding_mode == "sparse":
        lin("enc.l0", 4, cfg.d_model)
        lin("enc.l1", cfg.d_model, cfg.d_model)
    elif cfg.encoding_mode == "coordinate":
        lin("enc.coord", 3, cfg.d_model)
    for i in range(cfg.n_encoder_layers):
        p = f"encoder.l{i}"
        specs.append((f"{p}.ln1_gain", (cfg.d_model,), "ones"))
        specs.append((f"{p}.ln1_bias", (cfg.d_model,), "zeros"))
        if cfg.attention_enabled:
            for proj in ("q", "k", "v", "o"):
                lin(f"{p}.{proj}", cfg.d_model, cfg.d_model)
        else:
            lin(f"{p}.conv", cfg.d_model, cfg.d_model)
        specs.append((f"{p}.ln2_gain", (cfg.d_model,), "ones"))
        specs.append((f"{p}.ln2_bias", (cfg.d_model,), "zeros"))
        lin(f"{p}.ffn0", cfg.d_model, cfg.ffn_hidden)
        lin(f"{p}.ffn1", cfg.ffn_hidden, cfg.d_model)
    d_in = cfg.d_model
    for m in range(cfg.head_layers):
        lin(f"head.l{m}", d_in, cfg.head_hidden)
        d_in += cfg.head_hidden
    lin("head.final", d_in, 3, init="zeros")
    return specs


class ModelWeights:
    """All learnable arrays of the network, in canonical order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ModelWeights":
        out = {}
        for name, t in self.params.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[name] = c
        return ModelWeights(self.config, out)


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Uniform fan-in init; the final head projection starts at zero so the
    freshly initialized network is exactly the identity."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in param_specs(cfg):
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelWeights(cfg, params)


_MAGIC = b"NTRW"
_VERSION = 1


def save_weights(weights: ModelWeights, path) -> None:
    """Versioned binary: magic, version, config json, f32 arrays, crc32."""
    cfg_blob = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [_MAGIC, _VERSION.to_bytes(4, "little"),
             len(cfg_blob).to_bytes(4, "little"), cfg_blob]
    for name, shape, _ in param_specs(weights.config):
        t = weights[name]
        if t.shape != shape:
            raise ContractError(f"parameter '{name}' has shape {t.shape}, expected {shape}")
        parts.append(t.data.astype("<f4").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(payload + crc)


def load_weights(path, expect_config: ModelConfig | None = None) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a weights file (bad magic)")
    if zlib.crc32(blob[:-4]) != int.from_bytes(blob[-4:], "little"):
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    version = int.from_bytes(blob[4:8], "little")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    cfg_len = int.from_bytes(blob[8:12], "little")
    cfg = ModelConfig.from_dict(json.loads(blob[12:12 + cfg_len].decode("utf-8")))
    if expect_config is not None:
        for key, val in cfg.to_dict().items():
            want = expect_config.to_dict()[key]
            if val != want:
                raise ContractError(
                    f"{path}: weights config field '{key}' is {val}, expected {want}"
                )
    pos = 12 + cfg_len
    params: dict[str, Tensor] = {}
    for name, shape, _ in param_specs(cfg):
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(blob) - 4:
            raise FormatError(f"{path}: parameter block '{name}' truncated")
        arr = np.frombuffer(blob[pos:end], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(ad.default_dtype()), requires_grad=True)
        pos = end
    if pos != len(blob) - 4:
        raise FormatError(f"{path}: {len(blob) - 4 - pos} trailing bytes")
    return ModelWeights(cfg, params)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def build_graphs(coords: np.ndarray, cfg: ModelConfig) -> dict:
    """Exclude-self KNN graphs reused by every layer of one forward pass."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n < cfg.min_points:
        raise ArgumentError(
            f"patch has {n} points but the model needs at least {cfg.min_points} "
            f"(raise the patch size above max(k_scales)={max(cfg.k_scales)})"
        )
    tree = KdTree(coords)
    graphs: dict = {}
    for k in set(cfg.k_scales):
        idx, _ = tree.query(coords, k, exclude_self=True)
        graphs[("knn", k)] = idx
    if cfg.encoding_mode == "sparse":
        idx, d2 = tree.query(coords, cfg.sparse_k, exclude_self=True)
        graphs["sparse"] = (idx, d2)
    return graphs


def feature_layer(feats: Tensor, neighbors: np.ndarray, weights: ModelWeights,
                  prefix: str) -> Tensor:
    """One edge-feature aggregation layer: pair features [f_i || f_j - f_i],
    optional sigmoid gate, shared linear + norm + relu, max over neighbours."""
    cfg = weights.config
    n, d = feats.shape
    k = neighbors.shape[1]
    if k == 0:
        raise ArgumentError("feature_layer needs at least one neighbour")
    fj = ad.gather_rows(feats, neighbors)                      # (N, k, d)
    fi = ad.broadcast_to(ad.reshape(feats, (n, 1, d)), (n, k, d))
    e = ad.concat([fi, ad.sub(fj, fi)], axis=2)                # (N, k, 2d)
    if cfg.lpa_enabled:
        gate = ad.sigmoid(ad.matmul(e, weights[f"{prefix}.gate"]))
        e = ad.mul(e, gate)
    h = ad.linear(e, weights[f"{prefix}.weight"], weights[f"{prefix}.bias"])
    if cfg.embed_norm:
        h = ad.layer_norm(h, weights[f"{prefix}.norm_gain"], weights[f"{prefix}.norm_bias"])
    h = ad.relu(h)
    return ad.reduce_max(h, axis=1)


def feature_extraction_unit(coords: Tensor, neighbors: np.ndarray,
                            weights: ModelWeights, unit: int) -> Tensor:
    """Stack of feature layers at one neighbourhood scale; the outputs of all
    layers are concatenated."""
    cfg = weights.config
    outs = []
    f = coords
    for l in range(cfg.layers_per_unit):
        f = feature_layer(f, neighbors, weights, f"embed.u{unit}.l{l}")
        outs.append(f)
    return ad.concat(outs, axis=1)


def point_embedding(coords: Tensor, graphs: dict, weights: ModelWeights) -> Tensor:
    """Three scales of local features fused by a shared two-layer MLP."""
    cfg = weights.config
    units = [
        feature_extraction_unit(coords, graphs[("knn", k)], weights, u)
        for u, k in enumerate(cfg.k_scales)
    ]
    cat = ad.concat(units, axis=1)
    h = ad.relu(ad.linear(cat, weights["fuse.l0.weight"], weights["fuse.l0.bias"]))
    return ad.linear(h, weights["fuse.l1.weight"], weights["fuse.l1.bias"])


def sparse_encoding(coords_np: np.ndarray, graphs: dict, weights: ModelWeights) -> Tensor:
    """Positional signal from neighbour offsets and inverse squared distances,
    summed over neighbours so the result is permutation invariant."""
    idx, d2 = graphs["sparse"]
    xi = coords_np[:, None, :]
    xj = coords_np[idx]
    inv = 1.0 / np.maximum(d2, _SPARSE_EPS)
    u = np.concatenate([xi - xj, inv[:, :, None]], axis=2)  # (N, k, 4)
    h = ad.relu(ad.linear(Tensor(u), weights["enc.l0.weight"], weights["enc.l0.bias"]))
    h = ad.linear(h, weights["enc.l1.weight"], weights["enc.l1.bias"])
    return ad.reduce_sum(h, axis=1)


def _multihead_attention(h: Tensor, weights: ModelWeights, prefix: str,
                         cfg: ModelConfig) -> Tensor:
    n, d = h.shape
    nh = cfg.n_heads
    dh = d // nh

    def split_heads(x):
        return ad.transpose(ad.reshape(x, (n, nh, dh)), (1, 0, 2))  # (H, N, dh)

    q = split_heads(ad.linear(h, weights[f"{prefix}.q.weight"], weights[f"{prefix}.q.bias"]))
    k = split_heads(ad.linear(h, weights[f"{prefix}.k.weight"], weights[f"{prefix}.k.bias"]))
    v = split_heads(ad.linear(h, weights[f"{prefix}.v.weight"], weights[f"{prefix}.v.bias"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=2)                     # (H, N, N)
    o = ad.matmul(att, v)                                # (H, N, dh)
    o = ad.reshape(ad.transpose(o, (1, 0, 2)), (n, d))
    return ad.linear(o, weights[f"{prefix}.o.weight"], weights[f"{prefix}.o.bias"])


def encoder_layer(f: Tensor, weights: ModelWeights, layer: int) -> Tensor:
    """Pre-LN block: F += MSA(LN(F)); F += MLP(LN(F)). With attention ablated
    the MSA is a shared per-point linear layer."""
    cfg = weights.config
    p = f"encoder.l{layer}"
    h = ad.layer_norm(f, weights[f"{p}.ln1_gain"], weights[f"{p}.ln1_bias"])
    if cfg.attention_enabled:
        mixed = _multihead_attention(h, weights, p, cfg)
    else:
        mixed = ad.linear(h, weights[f"{p}.conv.weight"], weights[f"{p}.conv.bias"])
    f = ad.add(f, mixed)
    h2 = ad.layer_norm(f, weights[f"{p}.ln2_gain"], weights[f"{p}.ln2_bias"])
    m = ad.linear(ad.gelu(ad.linear(h2, weights[f"{p}.ffn0.weight"], weights[f"{p}.ffn0.bias"])),
                  weights[f"{p}.ffn1.weight"], weights[f"{p}.ffn1.bias"])
    return ad.add(f, m)


def output_header(f: Tensor, x: Tensor, weights: ModelWeights) -> Tensor:
    """Densely connected GELU MLP; the final projection is zero-initialized so
    Y = X at a fresh network."""
    cfg = weights.config
    feats = [f]
    for m in range(cfg.head_layers):
        inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
        h = ad.gelu(ad.linear(inp, weights[f"head.l{m}.weight"], weights[f"head.l{m}.bias"]))
        feats.append(h)
    delta = ad.linear(ad.concat(feats, axis=1),
                      weights["head.final.weight"], weights["head.final.bias"])
    return ad.add(delta, x)


def forward(coords, weights: ModelWeights, graphs: dict | None = None) -> Tensor:
    """Denoise one locally-normalized patch; returns an (N, 3) Tensor."""
    cfg = weights.config
    coords_np = np.asarray(coords, dtype=ad.default_dtype())
    if coords_np.ndim != 2 or coords_np.shape[1] != 3:
        raise ArgumentError(f"coords must be (N, 3), got {coords_np.shape}")
    if graphs is None:
        graphs = build_graphs(coords_np, cfg)
    x = Tensor(coords_np)
    emb = point_embedding(x, graphs, weights)
    if cfg.encoding_mode == "sparse":
        f = ad.add(emb, sparse_encoding(coords_np, graphs, weights))
    elif cfg.encoding_mode == "coordinate":
        f = ad.add(emb, ad.linear(x, weights["enc.coord.weight"], weights["enc.coord.bias"]))
    else:
        f = emb
    for i in range(cfg.n_encoder_layers):
        f = encoder_layer(f, weights, i)
    y = output_header(f, x, weights)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("non-finite values in network output")
    return y
