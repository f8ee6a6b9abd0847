"""Hypernetwork architectures that map a dataset to downstream-network weights.

Four meta-predictor variants share the same building blocks:

* ``PBH``        set encoder -> Gaussian latent message -> decoder;
* ``SCH_MINUS``  attention sample compressor -> reconstructor;
* ``SCH_PLUS``   sample compressor + binary message compressor -> reconstructor;
* ``PBSCH``      sample compressor + Gaussian message encoder -> reconstructor.

The downstream parameters depend on the input dataset only through the
bottleneck (selected rows, message), which is what the certificates charge
for.  Set-valued inputs are canonically sorted (lexicographically by row)
before any encoding, so every architecture is exactly permutation invariant,
bit for bit.

Tasks arrive at wildly different locations and scales, and the networks use
no batch normalization, so each set-consuming module standardizes its own
input view: the compressor and message networks standardize the support
features they receive, and the reconstructor standardizes the compression
rows by the rows' own statistics, folding the inverse affine map into the
first downstream layer it emits.  Every statistic is a function of the
module's own legitimate input (the full support set for the compressors, the
compression rows alone for the reconstructor), so the information-bottleneck
separation is preserved exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import kaiming_uniform_init
from .rng import Rng

ARCHITECTURES = ("PBH", "SCH_MINUS", "SCH_PLUS", "PBSCH")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DeepSetConfig:
    input_dim: int
    hidden: tuple[int, ...]
    embed_dim: int
    n_classes: int = 2

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


@dataclass(frozen=True)
class HypernetConfig:
    architecture: str
    c: int = 0
    b: int = 0
    input_dim: int = 2
    mlp1: tuple[int, ...] = (100,)   # trunk hidden sizes (keys, message, reconstructor)
    mlp2: tuple[int, ...] = (100,)   # DeepSet per-example network hidden sizes
    mlp3: tuple[int, ...] = (5,)     # downstream predictor hidden sizes
    deepset_dim: int = 16
    attention_dim: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.c < 0 or self.b < 0:
            raise ValueError("c and b must be >= 0")
        arch = self.architecture
        if arch == "PBH" and not (self.c == 0 and self.b >= 1):
            raise ValueError("PBH requires c = 0 and b >= 1")
        if arch == "SCH_MINUS" and not (self.c >= 1 and self.b == 0):
            raise ValueError("SCH_MINUS requires c >= 1 and b = 0")
        if arch == "SCH_PLUS" and not (self.c >= 1 and self.b >= 1):
            raise ValueError("SCH_PLUS requires c >= 1 and b >= 1")
        if arch == "PBSCH" and self.b < 1:
            raise ValueError("PBSCH requires b >= 1")
        object.__setattr__(self, "mlp1", tuple(self.mlp1))
        object.__setattr__(self, "mlp2", tuple(self.mlp2))
        object.__setattr__(self, "mlp3", tuple(self.mlp3))

    @property
    def has_gaussian_message(self) -> bool:
        return self.architecture in ("PBH", "PBSCH")

    @property
    def has_binary_message(self) -> bool:
        return self.architecture == "SCH_PLUS"

    @property
    def has_message(self) -> bool:
        return self.architecture != "SCH_MINUS"

    def deepset_config(self) -> DeepSetConfig:
        return DeepSetConfig(self.input_dim, self.mlp2, self.deepset_dim)


@dataclass
class CompressionArtifacts:
    """Per-task bottleneck output: the only channel from data to gamma."""

    indices: tuple[int, ...]                 # distinct, ascending, into the input set
    binary_message: np.ndarray | None        # values in {-1, +1}, or None
    gaussian_mean: np.ndarray | None         # posterior mean mu, or None
    gamma: np.ndarray                        # flat downstream weights
    mlp3_shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("compression indices must be distinct")
        if self.binary_message is not None and self.gaussian_mean is not None:
            raise ValueError("at most one of binary message / Gaussian mean may be set")
        expected = downstream_param_count(self.mlp3_shapes)
        if self.gamma.size != expected:
            raise ValueError(f"gamma has {self.gamma.size} entries, expected {expected}")

    @property
    def c_effective(self) -> int:
        return len(self.indices)


class HypernetParams:
    """Named parameter store; insertion order is the canonical order."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self.tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self.tensors):
            raise ValueError("snapshot names do not match parameter store")
        for name, arr in snap.items():
            self.tensors[name].data = np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# construction


def _init_mlp(params: HypernetParams, prefix: str, sizes: list[int], rng: Rng) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}.w{i}", kaiming_uniform_init((fan_in, fan_out), fan_in, rng))
        params.add(f"{prefix}.b{i}", Tensor(np.zeros((1, fan_out)), requires_grad=True))


def _mlp_layer_count(params: HypernetParams, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in params:
        n += 1
    return n


def mlp_forward(params: HypernetParams, prefix: str, x: Tensor) -> Tensor:
    """Feedforward pass, ReLU between layers, linear output."""
    n_layers = _mlp_layer_count(params, prefix)
    if n_layers == 0:
        raise KeyError(f"no parameters under prefix {prefix!r}")
    for i in range(n_layers):
        x = ad.add(ad.matmul(x, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def _init_deepset(params: HypernetParams, prefix: str, ds: DeepSetConfig,
                  rng: Rng) -> None:
    _init_mlp(params, prefix, [ds.input_dim, *ds.hidden, ds.embed_dim], rng)


def init_hypernet_params(cfg: HypernetConfig, rng: Rng) -> HypernetParams:
    """Create all parameters in a fixed order from a single stream."""
    params = HypernetParams()
    d, dp = cfg.input_dim, cfg.deepset_dim
    ds = cfg.deepset_config()
    if cfg.c > 0:
        _init_deepset(params, "compressor.deepset", ds, rng)
        _init_mlp(params, "compressor.keys", [d, *cfg.mlp1, cfg.attention_dim], rng)
        for h in range(cfg.c):
            _init_mlp(params, f"compressor.query{h}", [dp, cfg.attention_dim], rng)
    if cfg.has_message:
        _init_deepset(params, "message.deepset", ds, rng)
        _init_mlp(params, "message.trunk", [dp, *cfg.mlp1, cfg.b], rng)
    if cfg.c > 0:
        _init_deepset(params, "recon.deepset", ds, rng)
    else:
        params.add("recon.const", kaiming_uniform_init((1, dp), dp, rng))
    trunk_in = dp + (cfg.b if cfg.has_message else 0)
    gamma_size = downstream_param_count(downstream_shapes(d, cfg.mlp3))
    _init_mlp(params, "recon.trunk", [trunk_in, *cfg.mlp1, gamma_size], rng)
    return params


# ---------------------------------------------------------------------------
# set encoding

# Scale floors for per-set standardization: absolute, and relative to the
# widest coordinate (bounds the anisotropy of near-collinear sets).
_STD_FLOOR_ABS = 1e-2
_STD_FLOOR_REL = 0.05


def set_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and floored standard deviation of a point set.

    A single point gets unit scale (centering only).
    """
    feats = np.asarray(features, dtype=np.float64)
    mean = feats.mean(axis=0)
    if feats.shape[0] < 2:
        return mean, np.ones_like(mean)
    std = feats.std(axis=0)
    floor = max(_STD_FLOOR_ABS, _STD_FLOOR_REL * float(std.max()))
    return mean, np.maximum(std, floor)


def _standardize(features: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    m = features.data.shape[0]
    centered = ad.sub(features, ad.constant(np.tile(mean, (m, 1))))
    return ad.mul_elem(centered, np.tile(1.0 / std, (m, 1)))


def canonical_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Lexicographic row order of [features | labels]; ties keep input order.

    Encoding a set through this order makes every aggregation exactly
    permutation invariant, including the floating-point summation order.
    """
    joined = np.column_stack([features, np.asarray(labels).reshape(len(features), -1)])
    return np.lexsort(tuple(joined[:, j] for j in reversed(range(joined.shape[1]))))


def deepset_embed(params: HypernetParams, prefix: str, features: Tensor,
                  labels: Tensor, n_classes: int = 2) -> Tensor:
    """Permutation-invariant set embedding.

    Binary path: z = (1/m) M^T y with M the per-row network outputs and y the
    +-1 label column.  Multiclass path: one-hot labels are appended to the
    per-row outputs and aggregated against the all-ones vector.
    """
    m = features.data.shape[0]
    if m == 0:
        raise ValueError("cannot embed an empty set")
    order = canonical_order(features.data, labels.data)
    xs = ad.row_select(features, order)
    ys = ad.row_select(labels, order)
    rows = mlp_forward(params, prefix, xs)
    if n_classes == 2:
        pooled = ad.matmul(ad.transpose(rows), ys)          # (d', 1)
    else:
        if labels.data.shape[1] != n_classes:
            raise ValueError("multiclass labels must be one-hot rows")
        rows = ad.concat([rows, ys], axis=1)
        pooled = ad.matmul(ad.transpose(rows), ad.constant(np.ones((m, 1))))
    return ad.mul_scalar(ad.transpose(pooled), 1.0 / m)     # (1, d' [+ n_classes])


def _sorted_standardized(features: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
    """Canonically ordered view with standardized features.

    Statistics are taken over the sorted rows so that they, too, are exactly
    permutation invariant (float summation order included).
    """
    order = canonical_order(features.data, labels.data)
    xs = ad.row_select(features, order)
    ys = ad.row_select(labels, order)
    mean, std = set_statistics(xs.data)
    return _standardize(xs, mean, std), ys


def pb_encode(params: HypernetParams, features: Tensor, labels: Tensor) -> Tensor:
    """Gaussian posterior mean mu = tanh(trunk(deepset(S))), each entry in (-1, 1)."""
    xs, ys = _sorted_standardized(features, labels)
    z = deepset_embed(params, "message.deepset", xs, ys)
    return ad.tanh(mlp_forward(params, "message.trunk", z))


def msg_compress(params: HypernetParams, features: Tensor, labels: Tensor,
                 soft: bool = False) -> Tensor:
    """Binary message in {-1, +1}^b; straight-through sign on the same trunk."""
    xs, ys = _sorted_standardized(features, labels)
    z = deepset_embed(params, "message.deepset", xs, ys)
    return ad.sign_st(mlp_forward(params, "message.trunk", z), soft=soft)


def sample_compress(params: HypernetParams, cfg: HypernetConfig, features: Tensor,
                    labels: Tensor, soft: bool = False) -> tuple[tuple[int, ...], Tensor]:
    """Select ``cfg.c`` rows with independent scaled dot-product attention heads.

    Queries are per-head projections of the set embedding, keys come from a
    shared feedforward network over the (standardized) features, and the
    values are the raw (feature, label) rows themselves.  Each head
    contributes its argmax row through a straight-through selection; heads
    may agree, in which case the duplicate rows are dropped so the output
    depends on the distinct selected set only.

    Returns (distinct selected indices in the input's coordinates, ascending;
    selected rows, one per distinct index).
    """
    m = features.data.shape[0]
    if cfg.c > m:
        raise ValueError(f"compression size {cfg.c} exceeds set size {m}")
    order = canonical_order(features.data, labels.data)
    xs = ad.row_select(features, order)
    ys = ad.row_select(labels, order)
    values = ad.concat([xs, ys], axis=1)
    mean, std = set_statistics(xs.data)
    xs_std = _standardize(xs, mean, std)
    keys = mlp_forward(params, "compressor.keys", xs_std)
    z = deepset_embed(params, "compressor.deepset", xs_std, ys)
    scale = 1.0 / math.sqrt(cfg.attention_dim)
    chosen: dict[int, tuple[int, Tensor]] = {}  # canonical pos -> (orig idx, row)
    soft_rows: list[Tensor] = []
    for h in range(cfg.c):
        query = mlp_forward(params, f"compressor.query{h}", z)      # (1, d_k)
        logits = ad.mul_scalar(ad.matmul(keys, ad.transpose(query)), scale)
        probs = ad.softmax(logits, axis=0)
        pos = int(np.argmax(probs.data[:, 0]))                      # ties -> lowest index
        row = ad.hard_select_st(probs, values, soft=soft)
        soft_rows.append(row)
        if pos not in chosen:
            chosen[pos] = (int(order[pos]), row)
    indices = tuple(sorted(chosen[pos][0] for pos in chosen))
    if soft:
        # surrogate twin: every head's mixture row, no deduplication (the
        # mixtures vary continuously, so there is nothing discrete to merge)
        return indices, ad.concat(soft_rows, axis=0)
    # rows in canonical content order, so they are permutation invariant too
    rows = ad.concat([chosen[pos][1] for pos in sorted(chosen)], axis=0)
    return indices, rows


def reconstruct(params: HypernetParams, cfg: HypernetConfig,
                rows: Tensor | None, message: Tensor | None,
                soft: bool = False) -> Tensor:
    """Emit downstream weights gamma from (compression rows, message).

    The rows are standardized by their own mean and scale before the set
    embedding, and the trunk's first-layer weights are emitted in those
    standardized coordinates; the inverse affine map is folded back into
    the returned gamma, so the downstream network still consumes raw
    features.  Both statistics are functions of the compression rows alone.

    The statistics are stop-gradients on the production path (rescaling
    gradients of order var^-3/2 destabilize the selection heads); the soft
    twin (``soft=True``) computes them with graph ops instead, so the whole
    surrogate graph is exactly finite-difference checkable.

    With no compression rows (c = 0) the set-embedding branch is a learned
    constant vector, so the architecture degenerates gracefully to a pure
    encoder-decoder and gamma is the trunk output unchanged.
    """
    if rows is None and message is None:
        raise ValueError("reconstruct needs compression rows or a message")
    shapes = downstream_shapes(cfg.input_dim, cfg.mlp3)
    if rows is None:
        emb = params["recon.const"]
        trunk_in = emb if message is None else ad.concat([emb, message], axis=1)
        return mlp_forward(params, "recon.trunk", trunk_in)
    d = cfg.input_dim
    row_order = canonical_order(rows.data[:, :d], rows.data[:, d:])
    rows_sorted = ad.row_select(rows, row_order)
    feats = ad.slice_cols(rows_sorted, 0, d)
    labs = ad.slice_cols(rows_sorted, d, d + 1)
    n = feats.data.shape[0]
    if soft:
        # differentiable statistics; scale = sqrt(var + floor^2) smooths the floor
        row_mean = ad.constant(np.full((1, n), 1.0 / n))
        ones_col = ad.constant(np.ones((n, 1)))
        mu = ad.matmul(row_mean, feats)                              # (1, d)
        centered = ad.sub(feats, ad.matmul(ones_col, mu))
        var = ad.matmul(row_mean, ad.mul(centered, centered))
        inv_scale = ad.power_scalar(
            ad.add(var, ad.constant(np.full((1, d), _STD_FLOOR_ABS ** 2))), -0.5)
        feats_std = ad.mul(centered, ad.matmul(ones_col, inv_scale))
    else:
        mean_np, std_np = set_statistics(feats.data)
        mu = ad.constant(mean_np.reshape(1, -1))
        inv_scale = ad.constant((1.0 / std_np).reshape(1, -1))
        feats_std = _standardize(feats, mean_np, std_np)
    emb = deepset_embed(params, "recon.deepset", feats_std, labs)
    trunk_in = emb if message is None else ad.concat([emb, message], axis=1)
    raw = mlp_forward(params, "recon.trunk", trunk_in)
    # Fold x -> (x - mu)/scale into the first downstream layer: with W~, b~
    # emitted for standardized inputs, W1 = diag(1/scale) W~ and
    # b1 = b~ - (mu/scale) W~ give the identical predictor on raw features.
    fan_in, fan_out = shapes[0]
    w_tilde = ad.reshape(ad.slice_cols(raw, 0, fan_in * fan_out), (fan_in, fan_out))
    b_tilde = ad.slice_cols(raw, fan_in * fan_out, fan_in * fan_out + fan_out)
    w1 = ad.mul(w_tilde, ad.matmul(ad.transpose(inv_scale),
                                   ad.constant(np.ones((1, fan_out)))))
    b1 = ad.sub(b_tilde, ad.matmul(ad.mul(mu, inv_scale), w_tilde))
    rest = ad.slice_cols(raw, fan_in * fan_out + fan_out, raw.data.shape[1])
    return ad.concat([ad.reshape(w1, (1, fan_in * fan_out)), b1, rest], axis=1)


# ---------------------------------------------------------------------------
# downstream predictor


def downstream_shapes(input_dim: int, mlp3) -> tuple[tuple[int, int], ...]:
    sizes = [input_dim, *mlp3, 1]
    return tuple(zip(sizes[:-1], sizes[1:]))


def downstream_param_count(shapes) -> int:
    return sum(a * b + b for a, b in shapes)


def downstream_forward(gamma: Tensor, shapes, features: Tensor) -> Tensor:
    """Evaluate the MLP whose weights are unpacked from ``gamma``.

    Layout per layer, in order: fan_in x fan_out weight block (row-major),
    then fan_out biases.  Hidden activations are ReLU, output is one logit.
    """
    expected = downstream_param_count(shapes)
    if gamma.data.shape != (1, expected):
        raise ValueError(f"gamma shape {gamma.data.shape} does not match "
                         f"{expected} downstream parameters")
    h = features
    offset = 0
    for layer, (fan_in, fan_out) in enumerate(shapes):
        w = ad.reshape(ad.slice_cols(gamma, offset, offset + fan_in * fan_out),
                       (fan_in, fan_out))
        offset += fan_in * fan_out
        bias = ad.slice_cols(gamma, offset, offset + fan_out)
        offset += fan_out
        h = ad.add(ad.matmul(h, w), bias)
        if layer < len(shapes) - 1:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# full forward


def hypernet_forward(params: HypernetParams, cfg: HypernetConfig,
                     features: np.ndarray, labels: np.ndarray,
                     rng: Rng | None = None, eps: np.ndarray | None = None,
                     soft: bool = False) -> tuple[Tensor, CompressionArtifacts]:
    """Run the architecture on a task sample; returns (gamma, bottleneck).

    Architectures with a Gaussian message add noise ``eps`` to the posterior
    mean; pass ``eps`` explicitly (e.g. zeros for the deterministic decoder)
    or supply ``rng`` to sample it.
    """
    x_t = ad.constant(np.asarray(features, dtype=np.float64))
    y_t = ad.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    indices: tuple[int, ...] = ()
    rows = None
    if cfg.c > 0:
        indices, rows = sample_compress(params, cfg, x_t, y_t, soft=soft)

    message = None
    binary_message = None
    gaussian_mean = None
    if cfg.has_binary_message:
        message = msg_compress(params, x_t, y_t, soft=soft)
        binary_message = message.data.reshape(-1).copy()
    elif cfg.has_gaussian_message:
        mu = pb_encode(params, x_t, y_t)
        gaussian_mean = mu.data.reshape(-1).copy()
        if eps is None:
            if rng is None:
                raise ValueError(f"{cfg.architecture} samples a message; pass rng or eps")
            eps = rng.normal(cfg.b)
        message = ad.add(mu, ad.constant(np.asarray(eps, dtype=np.float64).reshape(1, -1)))

    gamma = reconstruct(params, cfg, rows, message, soft=soft)
    shapes = downstream_shapes(cfg.input_dim, cfg.mlp3)
    artifacts = CompressionArtifacts(indices, binary_message, gaussian_mean,
                                     gamma.data.reshape(-1).copy(), shapes)
    return gamma, artifacts


def decode_gamma(params: HypernetParams, cfg: HypernetConfig,
                 features: np.ndarray, labels: np.ndarray,
                 indices, message: np.ndarray | None) -> Tensor:
    """Rebuild gamma from stored bottleneck artifacts (no set encoding).

    The compression rows are reassembled from the task data at ``indices``;
    the result matches the original forward bit for bit, which is exactly
    the property the certificates rely on.
    """
    rows = None
    if len(indices) > 0:
        idx = np.asarray(sorted(indices), dtype=np.intp)
        data = np.column_stack([features[idx], np.asarray(labels, dtype=np.float64)[idx]])
        rows = ad.constant(data)
    msg_t = None if message is None else ad.constant(np.asarray(message, dtype=np.float64).reshape(1, -1))
    return reconstruct(params, cfg, rows, msg_t)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: HypernetConfig, params: HypernetParams,
                    master_seed: int) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": cfg.architecture,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(cfg).items()},
        "master_seed": int(master_seed),
        "params": {
            name: {"shape": list(t.data.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[HypernetConfig, HypernetParams, int]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    raw = dict(doc["config"])
    for key in ("mlp1", "mlp2", "mlp3"):
        raw[key] = tuple(raw[key])
    cfg = HypernetConfig(**raw)
    params = HypernetParams()
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params.add(name, Tensor(arr, requires_grad=True))
    return cfg, params, int(doc["master_seed"])
