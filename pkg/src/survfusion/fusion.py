"""The two-stage multimodal risk network.

Stage 1 fuses concatenated patch features through a variational
autoencoder; the latent patch matrix is pooled into one patient embedding
by scaled dot-product self-attention with sum pooling.  Stage 2 projects
the patient embedding and the gene vector into token sequences, runs
bidirectional co-attention, refines it with a two-stage cross-attention
(token sequences re-attend to the originals), encodes the concatenated
tokens with a post-norm transformer encoder, and predicts a scalar risk
through a four-layer FC stack that concatenates the clinical vector at
the third layer (late fusion).

Parameter checkpoints are a single file: one JSON header line (config
echo plus a tensor manifest of names/shapes/offsets) followed by raw
little-endian float32 payload; round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import (
    Tensor,
    concat,
    exp,
    layer_norm,
    log,
    matmul,
    relu,
    reshape,
    softmax_rows,
    tensor_mean,
    tensor_sum,
    transpose,
)

CHECKPOINT_FORMAT = "svf-ckpt"

__all__ = [
    "FusionConfig",
    "VaeParams",
    "EncoderLayerParams",
    "ModelParams",
    "concat_patch_features",
    "init_vae_params",
    "init_model_params",
    "vae_encode",
    "vae_decode",
    "reparameterize",
    "vae_loss",
    "self_attention_pool",
    "project_tokens",
    "co_attention",
    "dual_cross_attention",
    "transformer_encode",
    "risk_head",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_count",
]


@dataclass(frozen=True)
class FusionConfig:
    """Architecture dimensions; defaults follow the full-size network."""

    feat_dim_per_extractor: int = 384
    n_extractors: int = 3
    latent_dim: int = 256
    patches_per_patient: int = 500
    gene_dim: int = 138
    clinical_dim: int = 4
    n_image_tokens: int = 8
    n_gene_tokens: int = 8
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    ffn_hidden: int | None = None  # defaults to 4 x d_model
    pool_attn_dim: int = 64
    fc_stack_dims: tuple = (256, 128, 64, 32)
    vae_beta: float = 1.0

    def __post_init__(self):
        for name in (
            "feat_dim_per_extractor", "n_extractors", "latent_dim",
            "patches_per_patient", "gene_dim", "clinical_dim",
            "n_image_tokens", "n_gene_tokens", "d_model", "n_heads",
            "n_encoder_layers", "pool_attn_dim",
        ):
            if name == "n_encoder_layers":
                if getattr(self, name) < 0:
                    raise ConfigError(f"{name} must be >= 0")
            elif getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_image_tokens != self.n_gene_tokens:
            # the first cross-refinement stage multiplies its n_i x n_g
            # attention map back onto the co-attended sequence itself, which
            # is only defined for equal token counts
            raise ConfigError(
                f"token counts must match: {self.n_image_tokens} image vs "
                f"{self.n_gene_tokens} gene"
            )
        if len(self.fc_stack_dims) != 4:
            raise ConfigError("fc_stack_dims must list the four FC layer widths")
        if self.vae_beta < 0:
            raise ConfigError("vae_beta must be >= 0")

    @property
    def concat_dim(self) -> int:
        return self.n_extractors * self.feat_dim_per_extractor

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fc_stack_dims"] = list(self.fc_stack_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        if "fc_stack_dims" in d:
            d["fc_stack_dims"] = tuple(d["fc_stack_dims"])
        return cls(**d)


def concat_patch_features(f_a, f_b, f_c) -> np.ndarray:
    """Ordered concatenation of the three extractor outputs for one patch."""
    parts = []
    width = None
    for name, f in (("a", f_a), ("b", f_b), ("c", f_c)):
        arr = np.asarray(f, dtype=np.float64).ravel()
        if width is None:
            width = len(arr)
        if len(arr) != width:
            raise ShapeError(f"extractor outputs differ in length: slot {name} has {len(arr)}")
        parts.append(arr)
    return np.concatenate(parts)


# -- parameters ----------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def _param(arr, trainable=True):
    return Tensor(arr, requires_grad=trainable)


@dataclass
class VaeParams:
    """Encoder heads (mean and log-sigma) and decoder of the patch VAE."""

    enc_w_mu: Tensor
    enc_b_mu: Tensor
    enc_w_logsigma: Tensor
    enc_b_logsigma: Tensor
    dec_w: Tensor
    dec_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def init_vae_params(config: FusionConfig, rng, dtype=np.float64,
                    trainable: bool = True) -> VaeParams:
    d_in, d_lat = config.concat_dim, config.latent_dim
    return VaeParams(
        enc_w_mu=_param(_glorot(rng, d_in, d_lat, dtype), trainable),
        enc_b_mu=_param(np.zeros(d_lat, dtype=dtype), trainable),
        enc_w_logsigma=_param(_glorot(rng, d_in, d_lat, dtype), trainable),
        enc_b_logsigma=_param(np.zeros(d_lat, dtype=dtype), trainable),
        dec_w=_param(_glorot(rng, d_lat, d_in, dtype), trainable),
        dec_b=_param(np.zeros(d_in, dtype=dtype), trainable),
    )


@dataclass
class EncoderLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    """All stage-2 trainable parameters."""

    pool_q: Tensor
    pool_k: Tensor
    pool_v: Tensor
    img_token_w: Tensor
    img_token_b: Tensor
    gene_token_w: Tensor
    gene_token_b: Tensor
    co_q_img: Tensor
    co_k_img: Tensor
    co_v_img: Tensor
    co_q_gene: Tensor
    co_k_gene: Tensor
    co_v_gene: Tensor
    encoder_layers: list[EncoderLayerParams]
    fc_w1: Tensor
    fc_b1: Tensor
    fc_w2: Tensor
    fc_b2: Tensor
    fc_w3: Tensor
    fc_b3: Tensor
    fc_w4: Tensor
    fc_b4: Tensor
    out_w: Tensor
    out_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        named = {}
        for f in dataclasses.fields(self):
            if f.name == "encoder_layers":
                for i, layer in enumerate(self.encoder_layers):
                    for lf in dataclasses.fields(layer):
                        named[f"encoder{i}.{lf.name}"] = getattr(layer, lf.name)
            else:
                named[f.name] = getattr(self, f.name)
        return named


def init_model_params(config: FusionConfig, rng, dtype=np.float64,
                      trainable: bool = True) -> ModelParams:
    d = config.d_model
    lat = config.latent_dim
    ffn = config.ffn_width
    fc1, fc2, fc3, fc4 = config.fc_stack_dims
    layers = []
    for _ in range(config.n_encoder_layers):
        layers.append(
            EncoderLayerParams(
                w_q=_param(_glorot(rng, d, d, dtype), trainable),
                w_k=_param(_glorot(rng, d, d, dtype), trainable),
                w_v=_param(_glorot(rng, d, d, dtype), trainable),
                w_o=_param(_glorot(rng, d, d, dtype), trainable),
                ln1_gain=_param(np.ones(d, dtype=dtype), trainable),
                ln1_bias=_param(np.zeros(d, dtype=dtype), trainable),
                ffn_w1=_param(_glorot(rng, d, ffn, dtype), trainable),
                ffn_b1=_param(np.zeros(ffn, dtype=dtype), trainable),
                ffn_w2=_param(_glorot(rng, ffn, d, dtype), trainable),
                ffn_b2=_param(np.zeros(d, dtype=dtype), trainable),
                ln2_gain=_param(np.ones(d, dtype=dtype), trainable),
                ln2_bias=_param(np.zeros(d, dtype=dtype), trainable),
            )
        )
    return ModelParams(
        pool_q=_param(_glorot(rng, lat, config.pool_attn_dim, dtype), trainable),
        pool_k=_param(_glorot(rng, lat, config.pool_attn_dim, dtype), trainable),
        pool_v=_param(_glorot(rng, lat, lat, dtype), trainable),
        img_token_w=_param(_glorot(rng, lat, config.n_image_tokens * d, dtype), trainable),
        img_token_b=_param(np.zeros(config.n_image_tokens * d, dtype=dtype), trainable),
        gene_token_w=_param(_glorot(rng, config.gene_dim, config.n_gene_tokens * d, dtype), trainable),
        gene_token_b=_param(np.zeros(config.n_gene_tokens * d, dtype=dtype), trainable),
        co_q_img=_param(_glorot(rng, d, d, dtype), trainable),
        co_k_img=_param(_glorot(rng, d, d, dtype), trainable),
        co_v_img=_param(_glorot(rng, d, d, dtype), trainable),
        co_q_gene=_param(_glorot(rng, d, d, dtype), trainable),
        co_k_gene=_param(_glorot(rng, d, d, dtype), trainable),
        co_v_gene=_param(_glorot(rng, d, d, dtype), trainable),
        encoder_layers=layers,
        fc_w1=_param(_glorot(rng, d, fc1, dtype), trainable),
        fc_b1=_param(np.zeros(fc1, dtype=dtype), trainable),
        fc_w2=_param(_glorot(rng, fc1, fc2, dtype), trainable),
        fc_b2=_param(np.zeros(fc2, dtype=dtype), trainable),
        fc_w3=_param(_glorot(rng, fc2 + config.clinical_dim, fc3, dtype), trainable),
        fc_b3=_param(np.zeros(fc3, dtype=dtype), trainable),
        fc_w4=_param(_glorot(rng, fc3, fc4, dtype), trainable),
        fc_b4=_param(np.zeros(fc4, dtype=dtype), trainable),
        out_w=_param(_glorot(rng, fc4, 1, dtype), trainable),
        out_b=_param(np.zeros(1, dtype=dtype), trainable),
    )


def parameter_count(params) -> int:
    return sum(t.size for t in params.named_tensors().values())


# -- stage 1 ------------------------------------------------------------------------


def vae_encode(x: Tensor, vae: VaeParams) -> tuple[Tensor, Tensor]:
    """Map P x concat_dim features to latent (mu, sigma); sigma = exp(log-sigma)
    is strictly positive by construction."""
    mu = matmul(x, vae.enc_w_mu) + vae.enc_b_mu
    sigma = exp(matmul(x, vae.enc_w_logsigma) + vae.enc_b_logsigma)
    return mu, sigma


def vae_decode(z: Tensor, vae: VaeParams) -> Tensor:
    return matmul(z, vae.dec_w) + vae.dec_b


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """z = mu + sigma * eps with externally drawn standard-normal eps."""
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.data.dtype))
    if eps_t.shape != mu.shape:
        raise ShapeError(f"eps shape {eps_t.shape} != mu shape {mu.shape}")
    return mu + sigma * eps_t


def vae_loss(x: Tensor, x_hat: Tensor, mu: Tensor, sigma: Tensor, beta: float) -> Tensor:
    """Reconstruction MSE (mean over elements) plus beta times the KL of
    N(mu, sigma^2) from N(0, I), summed over latent dims and averaged over
    patches."""
    if np.any(sigma.data <= 0):
        raise NumericError("vae_loss requires strictly positive sigma")
    diff = x_hat - x
    mse = tensor_mean(diff * diff)
    var = sigma * sigma
    kl_per_patch = tensor_sum(var + mu * mu - 1.0 - log(var), axis=1) * 0.5
    return mse + beta * tensor_mean(kl_per_patch)


def self_attention_pool(z: Tensor, params: ModelParams) -> Tensor:
    """Scaled dot-product self-attention over patches, then sum pooling.

    Returns the 1 x latent_dim patient embedding.
    """
    q = matmul(z, params.pool_q)
    k = matmul(z, params.pool_k)
    v = matmul(z, params.pool_v)
    d_k = q.shape[1]
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(d_k))
    attended = matmul(softmax_rows(scores), v)
    return tensor_sum(attended, axis=0, keepdims=True)


# -- stage 2 ------------------------------------------------------------------------


def project_tokens(vec: Tensor, w: Tensor, b: Tensor, n_tokens: int, d_model: int) -> Tensor:
    """Linear embedding of a 1 x dim vector into an n_tokens x d_model sequence."""
    flat = matmul(vec, w) + b
    return reshape(flat, (n_tokens, d_model))


def co_attention(img_tokens: Tensor, gene_tokens: Tensor, params: ModelParams):
    """Bidirectional attention: each modality queries the other's keys/values."""
    d_k = params.co_k_img.shape[1]
    scale = 1.0 / math.sqrt(d_k)
    q_i = matmul(img_tokens, params.co_q_img)
    k_i = matmul(img_tokens, params.co_k_img)
    v_i = matmul(img_tokens, params.co_v_img)
    q_g = matmul(gene_tokens, params.co_q_gene)
    k_g = matmul(gene_tokens, params.co_k_gene)
    v_g = matmul(gene_tokens, params.co_v_gene)
    a_ig = matmul(softmax_rows(matmul(q_i, transpose(k_g)) * scale), v_g)
    a_gi = matmul(softmax_rows(matmul(q_g, transpose(k_i)) * scale), v_i)
    return a_ig, a_gi


def dual_cross_attention(a_ig: Tensor, a_gi: Tensor, img_tokens: Tensor,
                         gene_tokens: Tensor, d_k: int | None = None):
    """Two-stage projection-free refinement.

    Stage one lets the co-attended sequences attend to each other; stage
    two re-attends the results to the original token sequences.  With a
    single token per side every softmax collapses to 1 and the originals
    are returned exactly.  Both sides must carry the same number of
    tokens: the stage-one map is n_i x n_g but multiplies the co-attended
    sequence itself.
    """
    if a_ig.shape[0] != a_gi.shape[0]:
        raise ShapeError(
            f"cross refinement needs equal token counts, got {a_ig.shape[0]} and {a_gi.shape[0]}"
        )
    if d_k is None:
        d_k = a_ig.shape[1]
    scale = 1.0 / math.sqrt(d_k)
    c_ig = matmul(softmax_rows(matmul(a_ig, transpose(a_gi)) * scale), a_ig)
    c_gi = matmul(softmax_rows(matmul(a_gi, transpose(a_ig)) * scale), a_gi)
    d_ig = matmul(softmax_rows(matmul(c_ig, transpose(img_tokens)) * scale), img_tokens)
    d_gi = matmul(softmax_rows(matmul(c_gi, transpose(gene_tokens)) * scale), gene_tokens)
    return d_ig, d_gi


def _multi_head_self_attention(x: Tensor, layer: EncoderLayerParams, n_heads: int) -> Tensor:
    d_model = x.shape[1]
    if d_model % n_heads != 0:
        raise ConfigError(f"width {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    q = matmul(x, layer.w_q)
    k = matmul(x, layer.w_k)
    v = matmul(x, layer.w_v)
    scale = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(n_heads):
        cols = slice(h * d_head, (h + 1) * d_head)
        q_h, k_h, v_h = q[:, cols], k[:, cols], v[:, cols]
        weights = softmax_rows(matmul(q_h, transpose(k_h)) * scale)
        heads.append(matmul(weights, v_h))
    return matmul(concat(heads, axis=1), layer.w_o)


def transformer_encode(t_cat: Tensor, params: ModelParams, n_heads: int) -> Tensor:
    """Stack of identical post-norm layers: self-attention and position-wise
    FFN sublayers, each wrapped residual-then-layer-norm.  Zero layers is
    the identity."""
    x = t_cat
    for layer in params.encoder_layers:
        attended = _multi_head_self_attention(x, layer, n_heads)
        x = layer_norm(x + attended, layer.ln1_gain, layer.ln1_bias)
        hidden = relu(matmul(x, layer.ffn_w1) + layer.ffn_b1)
        ffn_out = matmul(hidden, layer.ffn_w2) + layer.ffn_b2
        x = layer_norm(x + ffn_out, layer.ln2_gain, layer.ln2_bias)
    return x


def risk_head(encoded: Tensor, clinical: Tensor, params: ModelParams) -> Tensor:
    """Mean over tokens, then FC1 -> FC2 -> concat clinical -> FC3 -> FC4 ->
    linear scalar, with ReLU between the FC layers."""
    if clinical.data.ndim != 2 or clinical.shape[0] != 1:
        raise ShapeError(f"clinical must be 1 x clinical_dim, got {clinical.shape}")
    if clinical.shape[1] + params.fc_w2.shape[1] != params.fc_w3.shape[0]:
        raise ShapeError(
            f"clinical width {clinical.shape[1]} incompatible with FC3 input {params.fc_w3.shape[0]}"
        )
    pooled = tensor_mean(encoded, axis=0, keepdims=True)
    h = relu(matmul(pooled, params.fc_w1) + params.fc_b1)
    h = relu(matmul(h, params.fc_w2) + params.fc_b2)
    h = concat([h, clinical], axis=1)
    h = relu(matmul(h, params.fc_w3) + params.fc_b3)
    h = relu(matmul(h, params.fc_w4) + params.fc_b4)
    out = matmul(h, params.out_w) + params.out_b
    return reshape(out, ())


def _stage(name, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(f"stage '{name}': {exc}") from exc


def forward(bundle, vae: VaeParams, model: ModelParams, config: FusionConfig,
            gene_scaler=None, mask_genes: bool = False,
            mask_clinical: bool = False) -> Tensor:
    """Deterministic full forward pass (z = mu at inference) to a scalar risk.

    Numeric failures propagate with the failing stage's label.  The mask
    flags zero a modality's input for ablation runs.
    """
    patches = np.asarray(bundle.patch_features, dtype=np.float64)
    if patches.shape != (config.patches_per_patient, config.concat_dim):
        raise ShapeError(
            f"patient {bundle.id}: patch matrix {patches.shape} != "
            f"({config.patches_per_patient}, {config.concat_dim})"
        )
    genes = np.asarray(bundle.genes, dtype=np.float64)
    if genes.shape != (config.gene_dim,):
        raise ShapeError(f"patient {bundle.id}: gene vector {genes.shape} != ({config.gene_dim},)")
    if gene_scaler is not None:
        from .data import apply_gene_scaler

        genes = apply_gene_scaler(genes, gene_scaler)
    if mask_genes:
        genes = np.zeros_like(genes)
    clinical = np.asarray(bundle.clinical, dtype=np.float64)
    if clinical.shape != (config.clinical_dim,):
        raise ShapeError(
            f"patient {bundle.id}: clinical vector {clinical.shape} != ({config.clinical_dim},)"
        )
    if mask_clinical:
        clinical = np.zeros_like(clinical)

    mu, _ = _stage("vae_encode", lambda: vae_encode(Tensor(patches), vae))
    return forward_from_latent(mu, genes, clinical, model, config)


def forward_from_latent(mu: Tensor, genes: np.ndarray, clinical: np.ndarray,
                        model: ModelParams, config: FusionConfig) -> Tensor:
    """Stage-2 path from the latent patch matrix (mu) to the scalar risk."""
    pooled = _stage("patch_pool", lambda: self_attention_pool(mu, model))
    img_tokens = _stage(
        "token_projection",
        lambda: project_tokens(pooled, model.img_token_w, model.img_token_b,
                               config.n_image_tokens, config.d_model),
    )
    gene_tokens = _stage(
        "token_projection",
        lambda: project_tokens(Tensor(genes[None, :]), model.gene_token_w,
                               model.gene_token_b, config.n_gene_tokens, config.d_model),
    )
    a_ig, a_gi = _stage("co_attention", lambda: co_attention(img_tokens, gene_tokens, model))
    d_ig, d_gi = _stage(
        "dual_cross_attention",
        lambda: dual_cross_attention(a_ig, a_gi, img_tokens, gene_tokens),
    )
    t_cat = concat([d_ig, d_gi], axis=0)
    encoded = _stage(
        "transformer_encoder",
        lambda: transformer_encode(t_cat, model, config.n_heads),
    )
    return _stage(
        "risk_head",
        lambda: risk_head(encoded, Tensor(clinical[None, :]), model),
    )


# -- checkpoints ----------------------------------------------------------------------


def build_checkpoint_blob(named_arrays: dict, config_echo: dict) -> bytes:
    """Header line (JSON manifest) followed by the float32 payload."""
    manifest = []
    payload = bytearray()
    for name, value in named_arrays.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr32.tobytes())
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "version": 1, "config": config_echo,
         "tensors": manifest},
        sort_keys=True,
    )
    return header.encode("utf-8") + b"\n" + bytes(payload)


def save_checkpoint(path, named_arrays: dict, config_echo: dict) -> int:
    """Write a single-file checkpoint; returns the byte size written."""
    blob = build_checkpoint_blob(named_arrays, config_echo)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back into (config echo, name -> float64 array)."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ShapeError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeError(f"{path}: malformed checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != 1:
        raise ShapeError(f"{path}: not a version-1 {CHECKPOINT_FORMAT} checkpoint")
    payload = blob[newline + 1:]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(payload):
            raise ShapeError(f"{path}: tensor {entry['name']} exceeds payload")
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(shape).astype(np.float64)
    return header["config"], arrays


def vae_params_from_arrays(arrays: dict, trainable: bool = False) -> VaeParams:
    kwargs = {f.name: _param(arrays[f.name], trainable)
              for f in dataclasses.fields(VaeParams)}
    return VaeParams(**kwargs)


def model_params_from_arrays(arrays: dict, trainable: bool = False) -> ModelParams:
    layer_indices = sorted(
        {int(name.split(".")[0][len("encoder"):])
         for name in arrays if name.startswith("encoder")}
    )
    layers = []
    for i in layer_indices:
        kwargs = {f.name: _param(arrays[f"encoder{i}.{f.name}"], trainable)
                  for f in dataclasses.fields(EncoderLayerParams)}
        layers.append(EncoderLayerParams(**kwargs))
    kwargs = {}
    for f in dataclasses.fields(ModelParams):
        if f.name == "encoder_layers":
            kwargs[f.name] = layers
        else:
            kwargs[f.name] = _param(arrays[f.name], trainable)
    return ModelParams(**kwargs)
