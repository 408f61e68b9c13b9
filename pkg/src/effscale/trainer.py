"""Deterministic AdamW training runs, Chinchilla-ratio sweeps and LR sweeps.

Hyper-parameters are chosen per model size and shared by every compression
spec at that size; a sweep has no way to give a compressed run its own
learning rate or batch size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from effscale import __version__, core
from effscale.compressors import CompressionSpec, parse_spec
from effscale.data import TokenStream, batches, validation_blocks
from effscale.model import ModelConfig, ModelParams, forward_loss, init_params, param_count

log = logging.getLogger(__name__)

RECORD_SCHEMA = 1
CHINCHILLA_RATIO = 20.0


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-2
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    total_tokens: int = 0
    eval_tokens: int = 65536
    seed: int = 0
    curve_points: int = 32
    # smoothed train loss above this multiple of ln(vocab) counts as diverged
    divergence_factor: float = 1.5

    def steps(self, seq_len: int) -> int:
        return self.total_tokens // (self.batch_size * seq_len)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * peak_lr``."""
    warm = min(cfg.warmup_steps, total_steps)
    if step < warm:
        return cfg.peak_lr * (step + 1) / warm
    span = max(total_steps - warm, 1)
    frac = min((step - warm) / span, 1.0)
    floor = cfg.min_lr_ratio
    return cfg.peak_lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class RunRecord:
    digest: str
    model_config: dict
    n_params: int
    tokens: int
    spec: str
    tokens_per_param: float
    val_loss: float
    diverged: bool
    loss_curve: list
    hparams: dict
    seed: int
    wallclock: float
    data_id: str = ""
    artifact_version: str = __version__
    schema_version: int = RECORD_SCHEMA

    @property
    def config_digest(self) -> str:
        return ModelConfig(**self.model_config).digest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema_version") != RECORD_SCHEMA:
            raise ValueError(f"unsupported run record schema {d.get('schema_version')}")
        return cls(**d)


def run_digest(model_config: ModelConfig, train_config: TrainConfig, spec: CompressionSpec,
               data_id: str = "") -> str:
    key = {
        "model": asdict(model_config),
        "train": asdict(train_config),
        "spec": str(spec),
        "data": data_id,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:20]


class RunStore:
    """Append-only JSON-lines file of RunRecords; writes are serialized."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: RunRecord) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(record.to_json() + "\n")

    def load(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def digests(self) -> set[str]:
        return {r.digest for r in self.load()}


class AdamW:
    """AdamW over a ModelParams; weight decay applies to matrices only."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> float:
        cfg = self.cfg
        grads = {k: t.grad for k, t in self.params.items()}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        clip = min(1.0, cfg.grad_clip_norm / (norm + 1e-6)) if cfg.grad_clip_norm > 0 else 1.0
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k] * clip if clip < 1.0 else grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if p.data.ndim > 1 and cfg.weight_decay:
                p.data *= 1 - lr * cfg.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)
        return norm


def evaluate(params: ModelParams, stream: TokenStream, spec: CompressionSpec,
             batch_size: int, eval_tokens: int) -> float:
    total, count = 0.0, 0
    seq = params.config.seq_len
    for block in validation_blocks(stream, batch_size, seq, eval_tokens):
        loss = forward_loss(params, block, spec)
        n = block.shape[0] * (block.shape[1] - 1)
        total += loss.item() * n
        count += n
    return total / count


def train(model_config: ModelConfig, train_config: TrainConfig, stream: TokenStream,
          spec: CompressionSpec, data_id: str = "") -> RunRecord:
    """One training run; divergence is recorded, not raised."""
    if stream.vocab_size != model_config.vocab_size:
        raise ValueError("stream vocab does not match model vocab")
    seq = model_config.seq_len
    steps = train_config.steps(seq)
    tokens = steps * train_config.batch_size * seq
    if tokens > stream.n_train:
        raise ValueError(f"run needs {tokens} training tokens, stream has {stream.n_train}")
    n_params = param_count(model_config)["total"]
    start = time.perf_counter()
    with core.precision(32):
        params = init_params(model_config, train_config.seed)
        opt = AdamW(params, train_config)
        it = batches(stream, train_config.batch_size, seq, train_config.seed)
        limit = train_config.divergence_factor * math.log(model_config.vocab_size)
        every = max(1, steps // max(train_config.curve_points, 1))
        curve: list = []
        ema = None
        diverged = False
        for step in range(steps):
            block = next(it)
            try:
                # overflow surfaces as FloatingPointError from the finite checks
                with np.errstate(over="ignore", invalid="ignore"), core.Tape() as tape:
                    loss = forward_loss(params, block, spec)
                    tape.backward(loss)
                value = loss.item()
                opt.step(lr_at(step, steps, train_config))
                for t in params.values():
                    if not np.isfinite(t.data).all():
                        raise FloatingPointError("non-finite parameter after update")
            except FloatingPointError as exc:
                log.warning("run diverged at step %d: %s", step, exc)
                diverged = True
                curve.append([step, float("inf")])
                break
            ema = value if ema is None else 0.9 * ema + 0.1 * value
            if step % every == 0 or step == steps - 1:
                curve.append([step, value])
            if step >= train_config.warmup_steps and ema > limit:
                log.warning("run diverged at step %d: smoothed loss %.3f", step, ema)
                diverged = True
                break
        val = float("inf")
        if not diverged:
            try:
                val = evaluate(params, stream, spec, train_config.batch_size, train_config.eval_tokens)
            except FloatingPointError:
                diverged = True
    return RunRecord(
        digest=run_digest(model_config, train_config, spec, data_id),
        model_config=asdict(model_config),
        n_params=n_params,
        tokens=tokens,
        spec=str(spec),
        tokens_per_param=tokens / n_params,
        val_loss=val,
        diverged=diverged,
        loss_curve=curve,
        hparams=asdict(train_config),
        seed=train_config.seed,
        wallclock=time.perf_counter() - start,
        data_id=data_id,
    )


# ---------------------------------------------------------------------------
# Size presets and sweeps

# name -> (d_model, n_layers, n_heads, d_ff); totals assume vocab 256
SIZE_PRESETS: dict[str, tuple[int, int, int, int]] = {
    "0.2M": (64, 3, 2, 192),
    "0.5M": (96, 4, 3, 256),
    "1.1M": (128, 5, 4, 384),
    "2.4M": (192, 5, 6, 512),
}
ANCHOR_D_MODEL = 64
MAX_EMBEDDING_FRACTION = 0.3


def preset(name: str, vocab_size: int, seq_len: int = 64) -> ModelConfig:
    try:
        d, n_layers, heads, d_ff = SIZE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown size preset {name!r}; choose from {sorted(SIZE_PRESETS)}") from None
    cfg = ModelConfig(vocab_size, d, n_layers, heads, d_ff, seq_len)
    counts = param_count(cfg)
    if counts["embedding_and_head"] > MAX_EMBEDDING_FRACTION * counts["total"]:
        raise ValueError(f"preset {name} with vocab {vocab_size} is embedding-dominated")
    return cfg


def size_train_config(model_config: ModelConfig, base: TrainConfig, ratio: float) -> TrainConfig:
    """Hyper-parameters for one size: D = ratio * N rounded to whole batches,
    peak LR scaled by 1/sqrt(d_model) from the anchor width."""
    n = param_count(model_config)["total"]
    per_step = base.batch_size * model_config.seq_len
    steps = max(1, round(ratio * n / per_step))
    lr = base.peak_lr * math.sqrt(ANCHOR_D_MODEL / model_config.d_model)
    warm = min(base.warmup_steps, max(1, steps // 10))
    return replace(base, total_tokens=steps * per_step, peak_lr=lr, warmup_steps=warm)


def _train_job(args):
    model_config, train_config, stream, spec_text, data_id = args
    return train(model_config, train_config, stream, parse_spec(spec_text), data_id)


def _run_jobs(jobs: list, n_workers: int, store: RunStore | None) -> list[RunRecord]:
    records = []
    if n_workers <= 1:
        for job in jobs:
            rec = _train_job(job)
            if store is not None:
                store.append(rec)
            records.append(rec)
        return records
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        # results are consumed in submission order so the store is deterministic
        for rec in pool.map(_train_job, jobs):
            if store is not None:
                store.append(rec)
            records.append(rec)
    return records


def chinchilla_sweep(size_presets: Sequence[ModelConfig], ratio: float,
                     spec_list: Sequence[CompressionSpec | str], base_train_config: TrainConfig,
                     stream: TokenStream, store: RunStore | None = None, jobs: int = 1,
                     data_id: str = "") -> list[RunRecord]:
    """Train every (size, spec) cell with D = ratio * N.

    Cells whose digest is already in ``store`` are skipped, so a rerun resumes.
    Returns the newly produced records.
    """
    if len(size_presets) < 3:
        raise ValueError("a scaling sweep needs at least 3 model sizes")
    specs = [s if isinstance(s, CompressionSpec) else parse_spec(s) for s in spec_list]
    done = store.digests() if store is not None else set()
    work = []
    for cfg in size_presets:
        tc = size_train_config(cfg, base_train_config, ratio)
        for spec in specs:
            if run_digest(cfg, tc, spec, data_id) in done:
                continue
            work.append((cfg, tc, stream, str(spec), data_id))
    return _run_jobs(work, jobs, store)


@dataclass
class LrSweepResult:
    rows: list[tuple[str, float, float, bool]] = field(default_factory=list)

    def losses(self, spec: str) -> dict[float, float]:
        return {lr: loss for s, lr, loss, _ in self.rows if s == spec}

    def diverged(self, spec: str) -> list[float]:
        return [lr for s, lr, _, div in self.rows if s == spec and div]

    def argmin(self, spec: str) -> float:
        cells = [(loss, lr) for s, lr, loss, div in self.rows if s == spec and not div]
        if not cells:
            raise ValueError(f"every cell diverged for {spec}")
        return min(cells)[1]


def lr_sweep(model_config: ModelConfig, stream: TokenStream, spec_list: Iterable[CompressionSpec | str],
             lr_grid: Sequence[float], base_train_config: TrainConfig, store: RunStore | None = None,
             data_id: str = "") -> LrSweepResult:
    """One short run per (spec, lr); every spec sees the same configs."""
    if not lr_grid:
        raise ValueError("empty learning-rate grid")
    specs = [s if isinstance(s, CompressionSpec) else parse_spec(s) for s in spec_list]
    result = LrSweepResult()
    for spec in specs:
        for lr in lr_grid:
            rec = train(model_config, replace(base_train_config, peak_lr=lr), stream, spec, data_id)
            if store is not None:
                store.append(rec)
            result.rows.append((str(spec), lr, rec.val_loss, rec.diverged))
    return result
