"""Tiny Llama-type decoder whose linear layers run through a CompressionSpec.

Pre-norm residual blocks, rotary attention, SwiGLU MLP, no biases, untied
embedding and output head. Embeddings, the head and the attention math stay
full precision; only the q/k/v/o and MLP projections are compressed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from effscale import core
from effscale.compressors import DENSE, CompressionSpec, QuantSpec, compress_weight, quantize_ste
from effscale.core import Tensor

NORM_EPS = 1e-6
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    seq_len: int
    rope_theta: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        dims = (self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.seq_len)
        if min(dims) < 1 or self.n_layers < 0:
            raise ValueError(f"invalid model dimensions in {self}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Tensor names and shapes in the fixed checkpoint order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = [("tok_emb", (v, d))]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "mlp_norm", (d,)),
            (p + "w_gate", (d, f)),
            (p + "w_up", (d, f)),
            (p + "w_down", (f, d)),
        ]
    shapes += [("final_norm", (d,)), ("head", (d, v))]
    return shapes


def param_count(config: ModelConfig) -> dict[str, int]:
    counts = {"total": 0, "embedding_and_head": 0, "compressible": 0}
    for name, shape in param_shapes(config):
        n = int(np.prod(shape))
        counts["total"] += n
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "head"):
            counts["embedding_and_head"] += n
        elif leaf in _LAYER_MATRICES:
            counts["compressible"] += n
    return counts


class ModelParams:
    """Ordered name -> Tensor mapping holding the full-precision masters."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ValueError("parameter names do not match the config")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: Tensor(a, requires_grad=True) for k, a in arrays.items()})


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Normal(0, init_std^2) matrices, unit norm gains.

    Every tensor draws from its own Philox stream keyed by (seed, index), so
    values do not depend on how many tensors precede it.
    """
    arrays = {}
    for idx, (name, shape) in enumerate(param_shapes(config)):
        if len(shape) == 1:
            arrays[name] = np.ones(shape)
        else:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, idx])))
            arrays[name] = rng.normal(0.0, config.init_std, size=shape)
    return ModelParams.from_arrays(config, arrays)


def _linear(x: Tensor, w: Tensor, spec: CompressionSpec) -> Tensor:
    wc = spec.weight_compression
    if wc is not None:
        if isinstance(wc, QuantSpec) and wc.granularity == "per_tensor":
            w = compress_weight(w, spec)
        else:
            # rows of the transposed [out, in] view are per-output groups
            w = core.transpose(compress_weight(core.transpose(w), spec))
    if spec.activation_quantization is not None:
        x = quantize_ste(x, spec.activation_quantization)
    return core.matmul(x, w)


def forward_logits(params: ModelParams, inputs: np.ndarray, spec: CompressionSpec = DENSE) -> Tensor:
    cfg = params.config
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise ValueError("inputs must be [batch, seq]")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= cfg.vocab_size):
        raise IndexError("token id out of range")
    b, t = inputs.shape
    h, dh = cfg.n_heads, cfg.head_dim
    x = core.embedding(params["tok_emb"], inputs)

    def heads(z):
        return core.transpose(core.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        hn = core.rmsnorm(x, params[p + "attn_norm"], NORM_EPS)
        q = heads(_linear(hn, params[p + "wq"], spec))
        k = heads(_linear(hn, params[p + "wk"], spec))
        v = heads(_linear(hn, params[p + "wv"], spec))
        a = core.causal_attention(q, k, v, cfg.rope_theta)
        a = core.reshape(core.transpose(a, (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = core.add(x, _linear(a, params[p + "wo"], spec))
        hn = core.rmsnorm(x, params[p + "mlp_norm"], NORM_EPS)
        gate = core.silu(_linear(hn, params[p + "w_gate"], spec))
        up = _linear(hn, params[p + "w_up"], spec)
        x = core.add(x, _linear(core.mul(gate, up), params[p + "w_down"], spec))
    x = core.rmsnorm(x, params["final_norm"], NORM_EPS)
    return core.matmul(x, params["head"])


def forward_loss(params: ModelParams, tokens: np.ndarray, spec: CompressionSpec = DENSE) -> Tensor:
    """Mean next-token cross-entropy of a ``[batch, seq + 1]`` token block."""
    tokens = np.asarray(tokens)
    logits = forward_logits(params, tokens[:, :-1], spec)
    return core.cross_entropy(logits, tokens[:, 1:])


# ---------------------------------------------------------------------------
# Checkpoints: raw little-endian float32 in param_shapes order + JSON sidecar

def save_checkpoint(path, params: ModelParams, seed: int, spec: CompressionSpec = DENSE) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        for name, _ in param_shapes(params.config):
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "seed": seed,
        "spec": str(spec),
        "dtype": "<f4",
        "tensors": [[n, list(s)] for n, s in param_shapes(params.config)],
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig(**header["config"])
    flat = np.fromfile(path, dtype="<f4")
    arrays, offset = {}, 0
    for name, shape in param_shapes(config):
        n = int(np.prod(shape))
        if offset + n > flat.size:
            raise ValueError("checkpoint file is truncated")
        arrays[name] = flat[offset:offset + n].reshape(shape)
        offset += n
    if offset != flat.size:
        raise ValueError("checkpoint file has trailing data")
    with core.precision(32):
        params = ModelParams.from_arrays(config, arrays)
    return params, header
