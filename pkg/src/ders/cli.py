"""Command-line pipeline driver.

Subcommands chain through fixed artifact names inside ``--out``:

    pretrain-dense      dense.ckpt
    upcycle             moe.ckpt          (reads dense.ckpt)
    train               trained.ckpt, metrics.csv (reads moe.ckpt)
    compress            compressed.ckpt, compression_report.json (reads trained.ckpt)
    eval                eval.json         (newest checkpoint, or --ckpt)
    report-params       params.json|csv   (newest checkpoint, or --ckpt)
    analyze-similarity  similarity.csv|json (newest checkpoint, or --ckpt)
    sweep               sweep.csv         (drop rates / bit widths on trained.ckpt,
                                           ranks re-upcycled from dense.ckpt)

The JSON config is validated before any compute: unknown keys are rejected
with their full field path, and the top-level ``seed`` is mandatory (it is
the default seed for every stage that does not set its own). Exit codes:
0 success, 2 config error, 3 state error, 4 numeric error. ``DERS_THREADS``
caps evaluation batch parallelism; results do not depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace

from .accounting import count_report, report_to_csv, report_to_json
from .analysis import cosine_report, similarity_to_csv, similarity_to_json
from .checkpoint import load_model, save_model
from .compress import CompressionSpec, compression_report, ders_compress
from .errors import ConfigError, DersError, DimensionError, NumericError, StateError
from .moe import Model, build_dense_model
from .train import TrainConfig, evaluate, make_task, train_loop
from .upcycle import UpcycleConfig, upcycle

SUBCOMMANDS = (
    "pretrain-dense",
    "upcycle",
    "train",
    "compress",
    "eval",
    "report-params",
    "analyze-similarity",
    "sweep",
)

_CKPT_CHAIN = ("compressed.ckpt", "trained.ckpt", "moe.ckpt", "dense.ckpt")

_METHOD_ALIASES = {
    "vanilla": "vanilla",
    "ders-sm": "ders_sm",
    "ders-lm": "ders_lm",
    "ders_sm": "ders_sm",
    "ders_lm": "ders_lm",
}

_TRAIN_KEYS = frozenset(
    (
        "steps",
        "batch_size",
        "lr",
        "optimizer",
        "beta1",
        "beta2",
        "eps",
        "aux_loss_coeff",
        "schedule",
        "eval_every",
        "seed",
    )
)

_SCHEMA: dict[str, frozenset | None] = {
    "seed": None,
    "model": frozenset(("d", "d_h", "depth", "activation")),
    "task": frozenset(("kind", "seed", "params")),
    "pretrain": _TRAIN_KEYS,
    "train": _TRAIN_KEYS,
    "upcycle": frozenset(
        (
            "n_experts",
            "topk_count",
            "method",
            "sparse_rate",
            "rank",
            "layer_pattern",
            "parallel_universal",
            "extended",
            "freeze_shared",
            "seed",
        )
    ),
    "compress": frozenset(("technique", "drop_rate", "bit_width", "extended", "seed")),
    "sweep": frozenset(("drop_rates", "bit_widths", "ranks")),
}


# ---------------------------------------------------------------------------
# Config loading and the per-stage views over it
# ---------------------------------------------------------------------------


def _validate_keys(data: dict) -> None:
    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigError(
                f"unknown config key '{key}'; allowed: {sorted(_SCHEMA)}"
            )
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{key}' must be a JSON object")
        for sub in value:
            if sub not in allowed:
                raise ConfigError(
                    f"unknown config key '{key}.{sub}'; allowed: {sorted(allowed)}"
                )


def load_config(path: str | None) -> dict:
    if path is None:
        raise ConfigError("--config is required for this subcommand")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _validate_keys(data)
    if "seed" not in data:
        raise ConfigError("config field 'seed' is required")
    if not isinstance(data["seed"], int):
        raise ConfigError("config field 'seed' must be an integer")
    return data


class Experiment:
    """A validated config plus the command-line overrides applied to it."""

    def __init__(self, raw: dict, seed_override: int | None = None):
        self.raw = raw
        self.seed = seed_override if seed_override is not None else raw["seed"]

    def _section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def task(self):
        section = self._section("task")
        if not section:
            raise ConfigError("config section 'task' is required for this subcommand")
        if "kind" not in section:
            raise ConfigError("config field 'task.kind' is required")
        return make_task(
            section["kind"], dict(section.get("params") or {}), section.get("seed", self.seed)
        )

    def model_dims(self) -> dict:
        section = self._section("model")
        for field in ("d", "d_h", "depth"):
            if field not in section:
                raise ConfigError(f"config field 'model.{field}' is required")
        section.setdefault("activation", "gelu")
        return section

    def train_config(self, name: str) -> TrainConfig:
        section = self._section(name)
        if not section:
            raise ConfigError(f"config section '{name}' is required for this subcommand")
        section.setdefault("seed", self.seed)
        try:
            cfg = TrainConfig(**section)
        except TypeError as exc:
            raise ConfigError(f"config section '{name}': {exc}") from exc
        cfg.validate()
        return cfg

    def upcycle_config(self, args) -> UpcycleConfig:
        section = self._section("upcycle")
        section.setdefault("seed", self.seed)
        if args.method is not None:
            section["method"] = _METHOD_ALIASES[args.method]
        if args.drop_rate is not None:
            section["sparse_rate"] = args.drop_rate
        if args.rank is not None:
            section["rank"] = args.rank
        if args.extended is not None:
            section["extended"] = args.extended
            section.setdefault("parallel_universal", True)
        if args.freeze_shared is not None:
            section["freeze_shared"] = args.freeze_shared
        for field in ("n_experts", "topk_count"):
            if field not in section:
                raise ConfigError(f"config field 'upcycle.{field}' is required")
        try:
            cfg = UpcycleConfig(**section)
        except TypeError as exc:
            raise ConfigError(f"config section 'upcycle': {exc}") from exc
        cfg.validate()
        return cfg

    def compression_spec(self, args) -> CompressionSpec:
        section = self._section("compress")
        section.setdefault("seed", self.seed)
        technique = section.get("technique")
        if args.drop_rate is not None:
            section["drop_rate"] = args.drop_rate
            if technique is None and args.bit_width is None:
                technique = "sparsify"
        if args.bit_width is not None:
            section["bit_width"] = args.bit_width
            if technique is None and args.drop_rate is None:
                technique = "quantize"
        if technique is None:
            raise ConfigError(
                "compression technique unspecified: set 'compress.technique' or pass "
                "exactly one of --drop-rate / --bit-width"
            )
        section["technique"] = technique
        if args.extended is not None:
            section["extended"] = args.extended
        try:
            spec = CompressionSpec(**section)
        except TypeError as exc:
            raise ConfigError(f"config section 'compress': {exc}") from exc
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Artifact plumbing
# ---------------------------------------------------------------------------


def _write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_ckpt(path: str) -> tuple[Model, dict]:
    if not os.path.exists(path):
        raise StateError(
            f"checkpoint {path} not found: run the earlier pipeline stage first"
        )
    return load_model(path)


def _resolve_ckpt(out: str, explicit: str | None) -> str:
    if explicit is not None:
        return explicit
    for name in _CKPT_CHAIN:
        path = os.path.join(out, name)
        if os.path.exists(path):
            return path
    raise StateError(f"no checkpoint found in {out}")


def _env_threads() -> int:
    raw = os.environ.get("DERS_THREADS")
    if raw is None:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"DERS_THREADS must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"DERS_THREADS must be a positive integer, got {raw!r}")
    return threads


def _float_cell(value) -> str:
    return repr(float(value))


def _metrics_csv(trace: list[dict]) -> str:
    lines = ["step,loss,aux_loss,eval_metric"]
    for row in trace:
        metric = row["eval_metric"]
        lines.append(
            ",".join(
                [
                    str(row["step"]),
                    _float_cell(row["loss"]),
                    _float_cell(row["aux_loss"]),
                    "" if metric == "" else _float_cell(metric),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _json_text(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_pretrain(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    task = exp.task()
    dims = exp.model_dims()
    model = build_dense_model(
        d=dims["d"],
        d_h=dims["d_h"],
        depth=dims["depth"],
        in_width=task.in_width,
        out_width=task.target_width,
        seed=exp.seed,
        activation=dims["activation"],
    )
    result = train_loop(model, task, exp.train_config("pretrain"))
    save_model(
        result.model,
        os.path.join(out, "dense.ckpt"),
        meta={"stage": "pretrain-dense", "seed": exp.seed, "best_metric": result.best_metric},
    )
    return 0


def _cmd_upcycle(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    dense, _ = _load_ckpt(os.path.join(out, "dense.ckpt"))
    cfg = exp.upcycle_config(args)
    moe = upcycle(dense, cfg)
    save_model(
        moe,
        os.path.join(out, "moe.ckpt"),
        meta={"stage": "upcycle", "method": cfg.method, "seed": cfg.seed},
    )
    return 0


def _cmd_train(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    task = exp.task()
    moe, _ = _load_ckpt(os.path.join(out, "moe.ckpt"))
    result = train_loop(moe, task, exp.train_config("train"))
    save_model(
        result.model,
        os.path.join(out, "trained.ckpt"),
        meta={"stage": "train", "seed": exp.seed, "best_metric": result.best_metric},
    )
    _write_text(os.path.join(out, "metrics.csv"), _metrics_csv(result.trace))
    return 0


def _cmd_compress(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    trained, _ = _load_ckpt(os.path.join(out, "trained.ckpt"))
    spec = exp.compression_spec(args)
    compressed = ders_compress(trained, spec)
    save_model(
        compressed,
        os.path.join(out, "compressed.ckpt"),
        meta={"stage": "compress", "technique": spec.technique, "seed": spec.seed},
    )
    report = compression_report(trained, compressed, spec)
    _write_text(os.path.join(out, "compression_report.json"), _json_text(report))
    return 0


def _cmd_eval(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    task = exp.task()
    path = _resolve_ckpt(out, args.ckpt)
    model, meta = _load_ckpt(path)
    threads = _env_threads()
    metric = evaluate(model, task, threads)
    x, _ = task.eval_set()
    _write_text(
        os.path.join(out, "eval.json"),
        _json_text(
            {
                "eval_metric": metric,
                "task_kind": task.kind,
                "eval_size": int(x.shape[0]),
                "checkpoint": os.path.basename(path),
                "stage": meta.get("stage"),
            }
        ),
    )
    return 0


def _cmd_report_params(args, out: str) -> int:
    model, _ = _load_ckpt(_resolve_ckpt(out, args.ckpt))
    report = count_report(model)
    fmt = args.format or "json"
    if fmt == "json":
        _write_text(os.path.join(out, "params.json"), report_to_json(report) + "\n")
    else:
        _write_text(os.path.join(out, "params.csv"), report_to_csv(report))
    return 0


def _cmd_analyze_similarity(args, out: str) -> int:
    model, _ = _load_ckpt(_resolve_ckpt(out, args.ckpt))
    report = cosine_report(model)
    fmt = args.format or "csv"
    if fmt == "csv":
        _write_text(os.path.join(out, "similarity.csv"), similarity_to_csv(report))
    else:
        _write_text(os.path.join(out, "similarity.json"), similarity_to_json(report) + "\n")
    return 0


def _sweep_row(kind, value, metric, stored_values="", stored_bits="", trainable=""):
    return {
        "kind": kind,
        "value": value,
        "eval_metric": metric,
        "stored_values": stored_values,
        "stored_bits": stored_bits,
        "trainable_values": trainable,
    }


def _cmd_sweep(args, out: str) -> int:
    exp = Experiment(load_config(args.config), args.seed)
    section = exp._section("sweep")
    drop_rates = section.get("drop_rates") or []
    bit_widths = section.get("bit_widths") or []
    ranks = section.get("ranks") or []
    if not (drop_rates or bit_widths or ranks):
        raise ConfigError(
            "config section 'sweep' must list at least one of drop_rates/bit_widths/ranks"
        )
    task = exp.task()
    threads = _env_threads()
    rows = []

    if drop_rates or bit_widths:
        trained, _ = _load_ckpt(os.path.join(out, "trained.ckpt"))
        base = count_report(trained)
        rows.append(
            _sweep_row(
                "baseline",
                "",
                evaluate(trained, task, threads),
                base.totals.stored_values,
                base.totals.stored_bits,
                base.totals.trainable_values,
            )
        )
        base_spec = exp._section("compress")
        seed = base_spec.get("seed", exp.seed)
        for p in drop_rates:
            spec = CompressionSpec("sparsify", drop_rate=float(p), seed=seed)
            spec.validate()
            compressed = ders_compress(trained, spec)
            totals = compression_report(trained, compressed, spec)["totals"]
            rows.append(
                _sweep_row(
                    "drop_rate",
                    p,
                    evaluate(compressed, task, threads),
                    totals["stored_values_after"],
                    totals["stored_bits_after"],
                )
            )
        for k in bit_widths:
            spec = CompressionSpec("quantize", bit_width=int(k), seed=seed)
            spec.validate()
            compressed = ders_compress(trained, spec)
            totals = compression_report(trained, compressed, spec)["totals"]
            rows.append(
                _sweep_row(
                    "bit_width",
                    k,
                    evaluate(compressed, task, threads),
                    totals["stored_values_after"],
                    totals["stored_bits_after"],
                )
            )

    if ranks:
        dense, _ = _load_ckpt(os.path.join(out, "dense.ckpt"))
        train_cfg = exp.train_config("train")
        for r in ranks:
            cfg = replace(exp.upcycle_config(args), method="ders_lm", rank=int(r))
            cfg.validate()
            result = train_loop(upcycle(dense, cfg), task, train_cfg)
            report = count_report(result.model)
            rows.append(
                _sweep_row(
                    "rank",
                    r,
                    evaluate(result.model, task, threads),
                    report.totals.stored_values,
                    report.totals.stored_bits,
                    report.totals.trainable_values,
                )
            )

    lines = ["kind,value,eval_metric,stored_values,stored_bits,trainable_values"]
    for row in rows:
        lines.append(
            ",".join(
                [
                    row["kind"],
                    str(row["value"]),
                    _float_cell(row["eval_metric"]),
                    str(row["stored_values"]),
                    str(row["stored_bits"]),
                    str(row["trainable_values"]),
                ]
            )
        )
    _write_text(os.path.join(out, "sweep.csv"), "\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "pretrain-dense": _cmd_pretrain,
    "upcycle": _cmd_upcycle,
    "train": _cmd_train,
    "compress": _cmd_compress,
    "eval": _cmd_eval,
    "report-params": _cmd_report_params,
    "analyze-similarity": _cmd_analyze_similarity,
    "sweep": _cmd_sweep,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ders",
        description="Desk-scale mixture-of-experts upcycling, training, and delta compression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="path to the JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=".", help="artifact directory")
        sp.add_argument("--method", choices=sorted(_METHOD_ALIASES), default=None)
        sp.add_argument("--drop-rate", dest="drop_rate", type=float, default=None)
        sp.add_argument("--bit-width", dest="bit_width", type=int, default=None)
        sp.add_argument("--rank", type=int, default=None)
        sp.add_argument("--extended", action="store_const", const=True, default=None)
        sp.add_argument("--freeze-shared", dest="freeze_shared", action="store_const", const=True, default=None)
        sp.add_argument("--format", choices=("csv", "json"), default=None)
        sp.add_argument("--ckpt", default=None, help="explicit checkpoint path for eval/report stages")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        return _COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DersError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
