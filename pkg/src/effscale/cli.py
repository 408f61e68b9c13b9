"""Command-line entry point: ``effscale <command> [flags]``.

Experiments are described by a JSON :class:`ExperimentConfig`; any flag given
on the command line overrides the matching field of the file. Every command
either writes a new output file or appends to a run store, so reruns never
modify existing records.

Exit codes: 0 ok, 2 configuration error, 3 numeric or fit failure,
4 a sweep whose new runs all diverged. Failures also print one JSON line
``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from effscale import analysis, lawfit
from effscale.compressors import parse_spec
from effscale.data import TokenStream, load_tokens, save_tokens, synth_corpus
from effscale.model import ModelConfig, param_count
from effscale.trainer import (CHINCHILLA_RATIO, SIZE_PRESETS, RunStore, TrainConfig, chinchilla_sweep,
                              preset, size_train_config, train)

log = logging.getLogger("effscale")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4
STORE_NAME = "runs.jsonl"


class ConfigError(ValueError):
    """Invalid configuration, flags or input files."""


# ---------------------------------------------------------------------------
# Experiment config

@dataclass
class DataConfig:
    path: str | None = None  # raw u32 token file; synthetic corpus when None
    vocab_size: int = 256
    length: int | None = None  # synthetic length; sized to the sweep when None
    val_fraction: float = 0.05


@dataclass
class ExperimentConfig:
    # preset names, or dicts with d_model, n_layers, n_heads, d_ff
    sizes: list = field(default_factory=lambda: ["0.2M", "0.5M", "1.1M"])
    ratios: list = field(default_factory=lambda: [CHINCHILLA_RATIO])
    specs: list = field(default_factory=lambda: ["dense", "w8", "w4", "w2", "w1"])
    seq_len: int = 64
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = _strict(DataConfig, self.data, "data")
        known = {f.name for f in fields(TrainConfig)} - {"seed", "total_tokens"}
        unknown = set(self.train) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}; seed and total_tokens are set "
                              "by the top-level seed and the ratios")
        if not self.sizes or not self.specs or not self.ratios:
            raise ConfigError("sizes, specs and ratios must be non-empty")
        if any(not r > 0 for r in self.ratios):
            raise ConfigError("ratios must be positive")
        for s in self.specs:
            try:
                parse_spec(s)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _strict(cls, raw, "experiment")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def train_config(self) -> TrainConfig:
        return replace(TrainConfig(**self.train), seed=self.seed)

    def model_configs(self) -> list[ModelConfig]:
        out = []
        for s in self.sizes:
            if isinstance(s, str):
                out.append(preset(s, self.data.vocab_size, self.seq_len))
            elif isinstance(s, dict):
                dims = dict(s)
                dims.setdefault("vocab_size", self.data.vocab_size)
                dims.setdefault("seq_len", self.seq_len)
                out.append(_strict(ModelConfig, dims, "size"))
            else:
                raise ConfigError(f"size must be a preset name or a dict, got {s!r}")
        return out


def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} section must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from None


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {}
    for name in ("sizes", "ratios", "specs", "seq_len", "out_dir", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    cfg = replace(cfg, **over)
    data = {k: getattr(args, k) for k in ("vocab_size", "length") if getattr(args, k, None) is not None}
    if getattr(args, "data", None) is not None:
        data["path"] = args.data
    if data:
        cfg = replace(cfg, data=replace(cfg.data, **data))
    if getattr(args, "lr", None) is not None:
        cfg = replace(cfg, train={**cfg.train, "peak_lr": args.lr})
    return cfg


# ---------------------------------------------------------------------------
# Helpers

def _needed_length(cfg: ExperimentConfig, jobs: list[tuple[ModelConfig, TrainConfig]]) -> int:
    train_tokens = max(tc.total_tokens for _, tc in jobs) + cfg.seq_len + 1
    tc = jobs[0][1]
    val_tokens = tc.eval_tokens + tc.batch_size * (cfg.seq_len + 1)
    vf = cfg.data.val_fraction
    n = math.ceil(train_tokens / (1 - vf))
    if vf > 0:
        n = max(n, math.ceil(val_tokens / vf))
    return n + 1024


def _stream(cfg: ExperimentConfig, jobs) -> tuple[TokenStream, str]:
    d = cfg.data
    if d.path is not None:
        path = Path(d.path)
        if not path.exists():
            raise ConfigError(f"token file {path} does not exist")
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        return load_tokens(path, d.vocab_size, d.val_fraction), f"file:{digest}"
    length = d.length if d.length is not None else _needed_length(cfg, jobs)
    stream = synth_corpus(d.vocab_size, length, cfg.seed, d.val_fraction)
    return stream, f"markov:v{d.vocab_size}:n{length}:s{cfg.seed}:f{d.val_fraction}"


def _store(args, cfg: ExperimentConfig | None = None) -> RunStore:
    if getattr(args, "store", None):
        return RunStore(args.store)
    return RunStore(Path(cfg.out_dir if cfg else "runs") / STORE_NAME)


def _records(args):
    path = Path(args.store)
    if not path.exists():
        raise ConfigError(f"run store {path} does not exist")
    try:
        return RunStore(path).load()
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"corrupt run store {path}: {exc}") from None


def _law(path) -> lawfit.LawParams:
    try:
        raw = json.loads(Path(path).read_text())
        raw = raw.get("law", raw)
        return lawfit.LawParams(**{k: float(raw[k]) for k in "abcde"})
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read law parameters from {path}: {exc}") from None


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _by_spec(records) -> dict[str, list]:
    out: dict[str, list] = {}
    for r in records:
        out.setdefault(r.spec, []).append(r)
    return out


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_data(args) -> int:
    if args.length is None:
        raise ConfigError("gen-data needs --tokens")
    stream = synth_corpus(args.vocab_size, args.length, args.seed)
    save_tokens(args.out, stream.tokens)
    print(json.dumps({"path": str(args.out), "tokens": int(stream.tokens.size),
                      "vocab_size": args.vocab_size, "entropy_rate": stream.source.entropy_rate()}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    if len(cfg.sizes) != 1 or len(cfg.specs) != 1 or len(cfg.ratios) != 1:
        raise ConfigError("train runs one (size, spec, ratio) cell; use sweep for more")
    model_cfg = cfg.model_configs()[0]
    tc = size_train_config(model_cfg, cfg.train_config(), cfg.ratios[0])
    stream, data_id = _stream(cfg, [(model_cfg, tc)])
    rec = train(model_cfg, tc, stream, parse_spec(cfg.specs[0]), data_id)
    _store(args, cfg).append(rec)
    print(json.dumps({"digest": rec.digest, "spec": rec.spec, "n_params": rec.n_params, "tokens": rec.tokens,
                      "val_loss": rec.val_loss, "diverged": rec.diverged}))
    return EXIT_DIVERGED if rec.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    models = cfg.model_configs()
    base = cfg.train_config()
    jobs = [(m, size_train_config(m, base, r)) for m in models for r in cfg.ratios]
    stream, data_id = _stream(cfg, jobs)
    store = _store(args, cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "experiment.json").write_text(cfg.to_json() + "\n")
    new = []
    for ratio in cfg.ratios:
        new += chinchilla_sweep(models, ratio, cfg.specs, base, stream, store, args.jobs, data_id)
    n_div = sum(r.diverged for r in new)
    print(json.dumps({"store": str(store.path), "new_records": len(new), "diverged": n_div}))
    return EXIT_DIVERGED if new and n_div == len(new) else EXIT_OK


def cmd_fit(args) -> int:
    records = [r for r in _records(args) if r.spec == "dense"]
    law = lawfit.fit_dense(records)
    n, d, loss = lawfit._records_arrays(records)
    out = {"law": asdict(law), "records": [r.digest for r in records],
           "residuals": lawfit._residual_summary(law, n, d, loss, 1.0)}
    _emit(json.dumps(out, indent=2, sort_keys=True), args.out)
    return EXIT_OK


def cmd_epm(args) -> int:
    law = _law(args.law)
    groups = _by_spec(_records(args))
    specs = [str(parse_spec(s)) for s in args.spec] if args.spec else sorted(groups)
    out = {}
    for spec in specs:
        if spec not in groups:
            raise ConfigError(f"no records for spec {spec}")
        recs = groups[spec]
        if args.ratio is not None:
            recs = [r for r in recs if abs(r.tokens_per_param - args.ratio) <= 0.01 * args.ratio]
        out[spec] = asdict(lawfit.fit_epm(recs, law))
    _emit(json.dumps(out, indent=2, sort_keys=True), args.out)
    return EXIT_OK


def cmd_check_independence(args) -> int:
    law = _law(args.law)
    try:
        raw = json.loads(Path(args.epm).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {args.epm}: {exc}") from None
    spec = str(parse_spec(args.spec))
    entry = raw.get(spec, raw)
    try:
        epm = lawfit.EpmEstimate(**entry)
    except TypeError as exc:
        raise ConfigError(f"{args.epm} holds no estimate for {spec}: {exc}") from None
    fitted = epm.ratios
    recs = [r for r in _records(args) if r.spec == spec
            and not any(abs(r.tokens_per_param - q) <= 0.01 * q for q in fitted)]
    report = lawfit.data_independence_check(recs, law, epm)
    out = dataclasses.asdict(report)
    out["passed"] = report.passed(args.tol)
    _emit(json.dumps(out, indent=2, sort_keys=True), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    records = _records(args)
    fit = None
    try:
        fit = lawfit.fit_all(records)
    except (lawfit.FitError, ValueError) as exc:
        log.warning("no fit available, plotting raw records: %s", exc)
    csv_path, svg_path = analysis.emit_report(records, fit, args.out_dir)
    summary = {"csv": str(csv_path), "svg": str(svg_path)}
    if fit is not None:
        table = {s: e.eff for s, e in fit.epm.items()}
        Path(args.out_dir, "fit.json").write_text(fit.to_json() + "\n")
        summary["eff"] = table
        summary["pareto"] = {c: [asdict(p) for p in analysis.pareto_points(table, c)]
                             for c in analysis.COUNTINGS}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        law = lawfit.LawParams(args.a, args.b, args.c, args.d, args.e)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.flops is not None:
        n, d = lawfit.compute_optimal_allocation(law, args.eff, args.flops)
        out = {"N": n, "D": d, "loss": lawfit.predict_loss(law, n, d, args.eff)}
    else:
        if args.n is None or args.d_tokens is None:
            raise ConfigError("predict needs --n and --d-tokens, or --flops")
        out = {"loss": lawfit.predict_loss(law, args.n, args.d_tokens, args.eff)}
    print(json.dumps(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def _experiment_flags(p: argparse.ArgumentParser, single: bool) -> None:
    p.add_argument("--config", help="ExperimentConfig JSON file")
    if single:
        p.add_argument("--size", dest="sizes", type=lambda s: [s], help=f"preset: {', '.join(SIZE_PRESETS)}")
        p.add_argument("--spec", dest="specs", type=lambda s: [s])
        p.add_argument("--ratio", dest="ratios", type=lambda s: [float(s)], help="tokens per parameter")
    else:
        p.add_argument("--sizes", nargs="+")
        p.add_argument("--specs", nargs="+")
        p.add_argument("--ratios", nargs="+", type=float)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate at the anchor width")
    p.add_argument("--data", help="raw u32 token file (default: synthetic corpus)")
    p.add_argument("--vocab", "--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--tokens", "--length", dest="length", type=int, help="synthetic corpus length")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--store", help=f"run store (default: OUT_DIR/{STORE_NAME})")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic token file")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", "--vocab-size", dest="vocab_size", type=int, default=256)
    p.add_argument("--tokens", "--length", dest="length", type=int, help="corpus length in tokens")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one cell and append its record")
    _experiment_flags(p, single=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train every size x spec x ratio cell not yet in the store")
    _experiment_flags(p, single=False)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit the dense law constants")
    p.add_argument("--store", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("epm", help="fit the effective parameter multiplier of each spec")
    p.add_argument("--store", required=True)
    p.add_argument("--law", required=True, help="JSON written by fit")
    p.add_argument("--spec", action="append", help="repeatable; default: every spec in the store")
    p.add_argument("--ratio", type=float, help="only use records at this tokens-per-parameter ratio")
    p.add_argument("--out")
    p.set_defaults(func=cmd_epm)

    p = sub.add_parser("check-independence", help="predict records at unseen ratios from a fitted multiplier")
    p.add_argument("--store", required=True)
    p.add_argument("--law", required=True)
    p.add_argument("--epm", required=True, help="JSON written by epm")
    p.add_argument("--spec", required=True)
    p.add_argument("--tol", type=float, default=0.005)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_independence)

    p = sub.add_parser("analyze", help="write report.csv and loss_vs_n.svg")
    p.add_argument("--store", required=True)
    p.add_argument("--out-dir", dest="out_dir", default="report")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("predict", help="evaluate the law, or the compute-optimal (N, D) with --flops")
    for name in "abcde":
        p.add_argument(f"--{name}", type=float, required=True)
    p.add_argument("--eff", type=float, default=1.0)
    p.add_argument("--n", type=float)
    p.add_argument("--d-tokens", dest="d_tokens", type=float)
    p.add_argument("--flops", type=float)
    p.set_defaults(func=cmd_predict)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (lawfit.FitError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
