"""Command-line entry point.

Every command is a pure function of its flags, config file and seed.
Outputs are written once each, atomically, under ``--out``.  Exit codes:
0 success, 2 configuration error, 3 data or contract error; errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .bench import MeasurementError, characterize, curve_to_csv, trace_to_csv
from .daq import AcquisitionConfig, frames_from_csv, frames_to_csv, get_layout
from .forest import ForestModel, ForestParams
from .perception import ContractError, Dataset, confusion_to_csv, evaluate, train
from .scenario import (
    generate_contact_dataset,
    generate_recognition_dataset,
    grasp_lift_sequence,
    load_catalog,
    probe_detector,
    run_probe_suite,
    suite_to_csv,
)
from .substrate import DomainError, default_substrates, load_substrates, substrate_by_name
from .wire import CorruptFrame, Gap, StreamParser, encode_frames

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- io helpers ---------------------------------------------------------------


def write_atomic(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _models(args):
    try:
        return load_substrates(args.substrates) if args.substrates else default_substrates()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load substrates: {exc}") from exc


def _substrate(args, name):
    try:
        return substrate_by_name(name, _models(args))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"unknown substrate {name!r}") from exc


def _layout(args, default):
    try:
        return get_layout(args.layout or default)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load layout {args.layout!r}: {exc}") from exc


def _read_input(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_output(path: str | None, data) -> None:
    if path is None or path == "-":
        out = data.encode() if isinstance(data, str) else data
        sys.stdout.buffer.write(out)
        sys.stdout.buffer.flush()
    else:
        write_atomic(Path(path), data)


# -- commands -----------------------------------------------------------------


def cmd_characterize(args) -> int:
    models = _models(args)
    if args.all or args.material is None:
        selected = models
    else:
        selected = [_substrate(args, args.material)]
    out = Path(args.out)
    rows = []
    for model in selected:
        summary, trace, curve = characterize(model, seed=args.seed, trials=args.trials,
                                             cycles=args.cycles)
        rows.append(summary)
        name = model.name.value
        write_atomic(out / f"{name}_step.csv", trace_to_csv(trace))
        if args.sweep:
            write_atomic(out / f"{name}_sweep.csv", curve_to_csv(curve))
        print(f"{name:16s} hysteresis {summary['hysteresis_pct']:6.2f} %  "
              f"rise {summary['rise_time_s'] * 1e3:6.1f} ms  "
              f"fall {summary['fall_time_s'] * 1e3:6.1f} ms")
    write_atomic(out / "summary.json", _json({"seed": args.seed, "substrates": rows}))
    return EXIT_OK


def cmd_dataset(args) -> int:
    out = Path(args.out)
    if args.kind == "contact":
        model = _substrate(args, args.substrate or "ld")
        layout = _layout(args, "palm34")
        data = generate_contact_dataset(model, layout, n_frames=args.frames, seed=args.seed)
    else:
        model = _substrate(args, args.substrate or "ld")
        layout = _layout(args, "grid5x4")
        catalog = load_catalog(args.catalog) if args.catalog else load_catalog()
        data = generate_recognition_dataset(catalog.recognition, trials=args.trials,
                                            n_samples=args.samples, layout=layout,
                                            substrate=model, seed=args.seed)
    path = out / f"{args.kind}_dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    # the CSV and its sidecar are built in a scratch dir then moved into place
    with tempfile.TemporaryDirectory(dir=path.parent) as tmp:
        scratch = Path(tmp) / path.name
        data.to_csv(scratch)
        write_atomic(path.with_suffix(".json"), scratch.with_suffix(".json").read_bytes())
        write_atomic(path, scratch.read_bytes())
    print(f"{len(data)} rows, {data.n_features} features, "
          f"{len(data.label_names)} classes -> {path}")
    return EXIT_OK


def _load_dataset(path: str) -> Dataset:
    if not Path(path).exists():
        raise ConfigError(f"no such dataset: {path}")
    return Dataset.from_csv(path)


def cmd_train(args) -> int:
    data = _load_dataset(args.data)
    train_set, _ = data.split(args.test_fraction)
    params = ForestParams(n_trees=args.trees, max_depth=args.max_depth,
                          min_leaf=args.min_leaf, seed=args.seed)
    model = train(train_set, params)
    path = write_atomic(Path(args.out) / "model.json", model.dumps())
    print(f"trained {model.n_trees} trees on {len(train_set)} rows -> {path}")
    print(f"sha256 {model.digest()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _load_dataset(args.data)
    try:
        model = ForestModel.loads(Path(args.model).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read model: {exc}") from exc
    test = data.split(args.test_fraction)[1] if args.test_fraction > 0 else data
    result = evaluate(model, test)
    out = Path(args.out)
    write_atomic(out / "metrics.json", _json(result))
    write_atomic(out / "confusion.csv", confusion_to_csv(result))
    print(f"accuracy {result['accuracy']:.3f} on {result['n']} rows")
    print(f"chance   {result['chance']:.3f}")
    print(f"macro-f1 {result['macro_f1']:.3f}")
    return EXIT_OK


def cmd_probe_suite(args) -> int:
    labels = ["LD", "HD"] if args.substrate == "both" else [args.substrate.upper()]
    layout = _layout(args, "palm34")
    catalog = load_catalog(args.catalog) if args.catalog else load_catalog()
    substrates = {lab: _substrate(args, lab.lower()) for lab in labels}
    params = ForestParams(n_trees=args.trees, max_depth=30, seed=args.seed)
    detectors = {
        lab: probe_detector(m, layout, confirm_frames=args.confirm, n_frames=args.frames,
                            params=params, seed=args.seed)
        for lab, m in substrates.items()
    }
    rows = run_probe_suite(substrates, detectors, catalog, layout, seed=args.seed,
                           approach_speed=args.speed, stop_latency_frames=args.latency)
    out = Path(args.out)
    write_atomic(out / "probe_suite.csv", suite_to_csv(rows))
    write_atomic(out / "probe_suite.json", _json(rows))
    for lab in labels:
        mine = [r for r in rows if r["substrate"] == lab]
        hits = sum(r["detected"] for r in mine)
        print(f"{lab}: detected {hits}/{len(mine)}")
    return EXIT_OK


def cmd_grasp(args) -> int:
    catalog = load_catalog(args.catalog) if args.catalog else load_catalog()
    if args.object not in catalog.probe:
        raise ConfigError(f"unknown object {args.object!r}")
    seq = grasp_lift_sequence(catalog.probe_object(args.object), lift_shift=tuple(args.shift),
                              force=args.force, substrate=_substrate(args, args.substrate),
                              layout=_layout(args, "palm34"), seed=args.seed)
    out = Path(args.out)
    write_atomic(out / "grasp_frames.csv", frames_to_csv(seq.frames))
    phases = [{"phase": n, "start": s, "end": e,
               "active_taxels": sorted(seq.active_set(n))} for n, s, e in seq.phases]
    write_atomic(out / "grasp_phases.json", _json(phases))
    print(f"{len(seq.frames)} frames, phases " + ", ".join(f"{n}[{s}:{e}]" for n, s, e in seq.phases))
    return EXIT_OK


def cmd_stream(args) -> int:
    raw = _read_input(args.input)
    if args.action == "encode":
        frames = frames_from_csv(raw.decode())
        _write_output(args.output, encode_frames(frames))
        return EXIT_OK
    parser = StreamParser(taxel_count=args.taxel_count, scan_rate=args.scan_rate)
    events = parser.feed(raw) + parser.close()
    frames = [e for e in events if not isinstance(e, (CorruptFrame, Gap))]
    if not frames:
        print(json.dumps({"summary": parser.stats}, sort_keys=True), file=sys.stderr)
        raise ContractError("no valid frames in stream")
    _write_output(args.output, frames_to_csv(frames))
    print(json.dumps({"summary": parser.stats}, sort_keys=True), file=sys.stderr)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--substrates", help="substrate parameter JSON (default: bundled)")
    p.add_argument("--layout", help="palm34, grid5x4 or a layout JSON file")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--config", help="JSON file of option overrides; wins over flags")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="piezoskin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("characterize", parents=[common], help="bench characterization")
    p.add_argument("material", nargs="?", help="ld, hd, wearic, eeontex (default: all)")
    p.add_argument("--all", action="store_true")
    p.add_argument("--sweep", action="store_true", help="also write sensitivity sweep CSVs")
    p.add_argument("--trials", type=int, default=15)
    p.add_argument("--cycles", type=int, default=20)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("dataset", parents=[common], help="generate a labelled dataset")
    p.add_argument("kind", choices=["contact", "recognition"])
    p.add_argument("--substrate", help="material (default ld)")
    p.add_argument("--frames", type=int, default=57_334, help="contact: number of frames")
    p.add_argument("--samples", type=int, default=1172, help="recognition: number of samples")
    p.add_argument("--trials", type=int, default=3, help="recognition: collection trials")
    p.add_argument("--catalog", help="object catalog JSON (default: bundled)")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train a forest on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=30)
    p.add_argument("--min-leaf", type=int, default=2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on held-out rows")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="held-out share used at training time; 0 evaluates every row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-suite", parents=[common], help="motion-arrest probe table")
    p.add_argument("--substrate", choices=["ld", "hd", "both"], default="both")
    p.add_argument("--frames", type=int, default=20_000, help="detector training frames")
    p.add_argument("--trees", type=int, default=25, help="detector forest size")
    p.add_argument("--speed", type=float, default=50.0, help="approach speed, mm/s")
    p.add_argument("--latency", type=int, default=3, help="stop latency, frames")
    p.add_argument("--confirm", type=int, default=2,
                   help="consecutive positive frames required to halt")
    p.add_argument("--catalog", help="object catalog JSON (default: bundled)")
    p.set_defaults(func=cmd_probe_suite)

    p = sub.add_parser("grasp", parents=[common], help="reach/grasp/lift frame sequence")
    p.add_argument("object", help="probe catalog object name")
    p.add_argument("--shift", type=float, nargs=2, default=(0.0, 0.0), metavar=("DX", "DY"))
    p.add_argument("--force", type=float, default=2.0, help="grasp force, N")
    p.add_argument("--substrate", default="ld")
    p.add_argument("--catalog", help="object catalog JSON (default: bundled)")
    p.set_defaults(func=cmd_grasp)

    p = sub.add_parser("stream", parents=[common], help="frame CSV <-> wire bytes")
    p.add_argument("action", choices=["encode", "decode"])
    p.add_argument("input", nargs="?", default="-", help="input file or - for stdin")
    p.add_argument("-o", "--output", help="output file (default stdout)")
    p.add_argument("--taxel-count", type=int, help="decode: reject frames with another K")
    p.add_argument("--scan-rate", type=float, default=AcquisitionConfig().scan_rate)
    p.set_defaults(func=cmd_stream)
    return parser


def _apply_config(args):
    if not getattr(args, "config", None):
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func", "config") or not hasattr(args, dest):
            raise ConfigError(f"config key {key!r} does not apply to {args.command}")
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args)
        return args.func(args)
    except ConfigError as exc:
        _report("config", exc)
        return EXIT_CONFIG
    except (ContractError, DomainError, MeasurementError, ValueError, KeyError) as exc:
        _report("data", exc)
        return EXIT_DATA


def _report(kind: str, exc: Exception) -> None:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(msg)}),
          file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
