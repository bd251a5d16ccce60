"""Command-line entry point: ``fisher-sam toy|bench|verify``.

Every subcommand reads an optional strict JSON config, applies ``--key value``
overrides (values are parsed as JSON when possible, else taken as strings),
writes its artifacts into ``--out`` and echoes the fully resolved config as
``resolved_config.json``.  Re-running with that file reproduces the outputs
byte for byte.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 property failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import mlp_bench, toy2d, verify
from .optim import VARIANTS, trajectory_csv
from .params import NumericError

log = logging.getLogger("fisher_sam")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROPERTY = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ToyCommandConfig:
    components: list = field(default_factory=lambda: [list(c) for c in toy2d.REFERENCE_SPEC.components])
    variant: str = "all"
    start: object = "all"
    starts: dict = field(default_factory=lambda: {"A": list(toy2d.START_A), "B": list(toy2d.START_B)})
    gamma: dict = field(default_factory=lambda: {"sgd": 0.0, "sam": 0.05, "asam": 0.05, "fsam": 0.3})
    lr: float = 50.0
    momentum: float = 0.9
    iterations: int = 1000
    mu_range: list = field(default_factory=lambda: [-60.0, 60.0])
    sigma_range: list = field(default_factory=lambda: [1.0, 60.0])
    resolution: list = field(default_factory=lambda: [121, 60])


COMMAND_CONFIGS = {
    "toy": ToyCommandConfig,
    "bench": mlp_bench.BenchConfig,
    "verify": verify.VerifyConfig,
}


def _check_type(name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, dict, str)):
        ok = isinstance(value, type(default))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"field '{name}': expected {type(default).__name__}, "
                          f"got {type(value).__name__} ({value!r})")
    return value


def resolve_config(cls, data):
    """Build ``cls`` from a dict, rejecting unknown keys and mistyped values."""
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(known))}")
    # fields annotated ``object`` accept several JSON shapes and are checked by the command
    loose = {f.name for f in dataclasses.fields(cls) if f.type in (object, "object")}
    values = {k: v if k in loose else _check_type(k, v, getattr(defaults, k))
              for k, v in data.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def parse_overrides(tokens):
    """``['--lr', '0.1', '--variant', 'sam']`` -> ``{'lr': 0.1, 'variant': 'sam'}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            raw = tokens[i + 1]
            i += 2
        else:
            raise ConfigError(f"override --{key} has no value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out_dir, name, text):
    (out_dir / name).write_text(text)


def _select(value, options, what):
    if value == "all":
        return list(options)
    if isinstance(value, str):
        if value not in options:
            raise ConfigError(f"field '{what}': unknown choice {value!r}; expected one of "
                              f"{', '.join(options)} or 'all'")
        return [value]
    raise ConfigError(f"field '{what}': expected a string")


def cmd_toy(cfg, out_dir):
    try:
        spec = toy2d.ToyLossSpec(tuple(tuple(c) for c in cfg.components))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'components': {exc}") from exc
    variants = _select(cfg.variant, VARIANTS, "variant")
    if isinstance(cfg.start, list):
        starts = {"custom": cfg.start}
    elif cfg.start != "all" and cfg.start not in cfg.starts:
        raise ConfigError(f"field 'start': unknown start {cfg.start!r}; expected one of "
                          f"{', '.join(cfg.starts)}, 'all' or [mu, sigma]")
    else:
        starts = {k: cfg.starts[k] for k in _select(cfg.start, list(cfg.starts), "start")}
    for label, st in starts.items():
        if not (isinstance(st, list) and len(st) == 2
                and all(isinstance(x, (int, float)) for x in st) and st[1] > 0):
            raise ConfigError(f"start {label!r} must be [mu, sigma] with sigma > 0")

    minima = toy2d.find_minima(spec)
    _write(out_dir, "minima.json", _dump({"minima": [m.to_dict() for m in minima]}))
    labelled = toy2d.label_minima(minima)

    summaries = []
    for variant in variants:
        opt = toy2d.toy_config(variant, cfg.gamma.get(variant), cfg.lr, cfg.momentum)
        lines = []
        for label, st in starts.items():
            res = toy2d.basin_experiment(spec, st, opt, cfg.iterations, labelled)
            summaries.append(dict(res.summary(), start_label=label))
            body = trajectory_csv(res.records).splitlines()
            if not lines:
                lines.append("start," + body[0])
            lines.extend(f"{label},{row}" for row in body[1:])
        _write(out_dir, f"trajectory_{variant}.csv", "\n".join(lines) + "\n")
    _write(out_dir, "summary.json", _dump({"runs": summaries}))

    grid = toy2d.contour_grid(spec, cfg.mu_range, cfg.sigma_range, cfg.resolution)
    _write(out_dir, "contour.csv", grid.to_csv())
    return EXIT_OK


def cmd_bench(cfg, out_dir):
    try:
        for v in cfg.variants:
            cfg.optim_config(v)
        cfg.mlp_spec()
        mlp_bench.gen_blobs(0, cfg.n_train, cfg.classes, cfg.dim, cfg.spread)
        mlp_bench.gen_blobs(0, cfg.n_test, cfg.classes, cfg.dim, cfg.spread)
        for r in cfg.noise_rates:
            if not 0 <= r <= 1:
                raise ValueError(f"noise rate {r} outside [0, 1]")
        if any(a < 0 for a in cfg.alphas):
            raise ValueError("alphas must be non-negative")
        if cfg.epochs < 1 or cfg.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rows = mlp_bench.run_benchmark(cfg)
    _write(out_dir, "results.csv", mlp_bench.rows_to_csv(rows))
    return EXIT_OK


def cmd_verify(cfg, out_dir):
    passed, results = verify.run_suite(cfg)
    report = {
        "passed": passed,
        "families": verify.families(results),
        "checks": [r.to_dict() for r in results],
        "failed": [f"{r.family}/{r.name}" for r in results if not r.passed],
    }
    _write(out_dir, "verify_report.json", _dump(_jsonable(report)))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.family}/{r.name}")
    return EXIT_OK if passed else EXIT_PROPERTY


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


COMMANDS = {"toy": cmd_toy, "bench": cmd_bench, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(
        prog="fisher-sam",
        description="Toy-landscape experiments, MLP robustness benchmark and property checks.",
        epilog="Any config key may be overridden with --key value (JSON-parsed).")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (strict: unknown keys are errors)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args, rest = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cls = COMMAND_CONFIGS[args.command]
    try:
        data = load_config_file(args.config) if args.config else {}
        data.update(parse_overrides(rest))
        cfg = resolve_config(cls, data)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out_dir)
        _write(out_dir, "resolved_config.json", _dump(dataclasses.asdict(cfg)))
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
