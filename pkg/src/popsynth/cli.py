"""Command-line front end: ``popsynth {synth,validate,errmap,check}``.

Exit codes: 0 success, 1 input error, 2 quality gate (``--require-exact``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PopSynthError
from .privacy import DpConfig, error_map
from .schema import GeoId, build_predicate_space, geo_parent, parse_predicate, parse_schema
from .solver import SolveConfig, solve_all, summary_csv, total_objective
from .synthesis import counts_of, expand, read_persons, write_persons
from .tables import CensusTable, aggregate, build_query_matrix, check_consistency, load_tables
from .validation import external_validate, internal_validate, load_microdata

log = logging.getLogger("popsynth")

EXIT_OK, EXIT_INPUT, EXIT_GATE = 0, 1, 2


class InputError(Exception):
    """Bad configuration or input file; reported and mapped to exit code 1."""


@dataclass
class RunConfig:
    schema_path: Path
    tables_path: Path
    output_dir: Path
    solve: SolveConfig = field(default_factory=SolveConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    validation_groups: dict | None = None
    log_level: str = "INFO"
    # the config as written, with overrides applied; paths kept as given
    raw: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
        base = path.parent
    raw = json.loads(json.dumps(raw))
    solve = dict(raw.get("solve", {}))
    dp = dict(raw.get("dp", {}))
    # flat overrides; paths from the command line stay relative to cwd
    cli_paths = {}
    for key in ("schema", "tables", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
            cli_paths[key] = Path(value)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.log_level is not None:
        raw["log_level"] = args.log_level
    if getattr(args, "epsilon", None) is not None:
        dp["epsilon"] = args.epsilon
    if getattr(args, "runs", None) is not None:
        dp["runs"] = args.runs
    seed = raw.get("seed", 0)
    solve.setdefault("rng_seed", seed)
    dp.setdefault("seed", seed)
    raw["solve"], raw["dp"] = solve, dp

    def resolve(key, default=None):
        if key in cli_paths:
            return cli_paths[key]
        value = raw.get(key, default)
        if value is None:
            raise InputError(f"missing required setting {key!r} (config file or --{key.replace('_', '-')})")
        return base / value

    try:
        solve_cfg = SolveConfig(**solve)
        dp_cfg = DpConfig(**dp)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None
    return RunConfig(
        schema_path=resolve("schema"),
        tables_path=resolve("tables"),
        output_dir=resolve("output_dir", "out"),
        solve=solve_cfg,
        dp=dp_cfg,
        validation_groups=raw.get("validation_groups"),
        log_level=raw.get("log_level", "INFO"),
        raw=raw,
    )


def _read(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _load_inputs(cfg: RunConfig):
    schema = parse_schema(_read(cfg.schema_path))
    space = build_predicate_space(schema)
    tables = load_tables(_read(cfg.tables_path), schema, source=str(cfg.tables_path))
    return schema, space, tables


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _manifest(cfg: RunConfig, command: str, inputs: dict[str, Path], outputs: list[Path], extra=None):
    doc = {
        "command": command,
        "config": cfg.raw,
        "config_sha256": cfg.digest(),
        "seeds": {"solve": cfg.solve.rng_seed, "dp": cfg.dp.seed},
        "versions": {
            "popsynth": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    _write(cfg.output_dir / f"{command}_manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, cfg: RunConfig) -> int:
    schema, space, tables = _load_inputs(cfg)
    x, results = solve_all(tables, space, cfg.solve, threads=args.threads)
    people = expand(x, schema)
    persons_path = cfg.output_dir / "persons.csv"
    persons_path.parent.mkdir(parents=True, exist_ok=True)
    with open(persons_path, "w", encoding="utf-8", newline="") as fh:
        write_persons(people, fh)
    summary_path = _write(cfg.output_dir / "solver_summary.csv", summary_csv(x.blocks, results))
    objective = total_objective(tables, x)
    inexact = sum(not r.converged_to_zero for r in results)
    _manifest(
        cfg, "synth",
        {"schema": cfg.schema_path, "tables": cfg.tables_path},
        [persons_path, summary_path],
        {"persons": len(people), "blocks": len(x.blocks), "objective": objective,
         "inexact_blocks": inexact},
    )
    print(f"synth: {len(people)} persons in {len(x.blocks)} blocks, objective {objective}, "
          f"{inexact} block(s) without an exact fit")
    if args.require_exact and inexact:
        print(f"synth: --require-exact: {inexact} block(s) did not reach objective 0", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def _persons_path(args, cfg: RunConfig) -> Path:
    return Path(args.persons) if args.persons else cfg.output_dir / "persons.csv"


def _infer_county(people) -> GeoId:
    lengths = people.schema.geo_prefix_lengths
    counties = sorted({geo_parent(GeoId(b, "block"), "county", lengths).code for b in people.blocks})
    if len(counties) != 1:
        raise InputError(f"persons span {len(counties)} counties; pass --county")
    return GeoId(counties[0], "county")


def cmd_validate(args, cfg: RunConfig) -> int:
    schema, space, tables = _load_inputs(cfg)
    ppath = _persons_path(args, cfg)
    people = read_persons(_read(ppath), space, source=str(ppath))
    x = counts_of(people, blocks=tables[0].blocks)
    report = internal_validate(x, tables, cfg.validation_groups, keep_scatter=args.scatter)
    outputs = [_write(cfg.output_dir / "internal_validation.csv", report.to_csv())]
    if args.scatter:
        outputs.append(_write(cfg.output_dir / "internal_scatter.csv", report.scatter_csv()))
    for g in [*report.groups, report.overall]:
        shown = "undefined" if g.r is None else f"{g.r:.12f}"
        print(f"internal {g.group}: n={g.n_points} r={shown}")
    inputs = {"schema": cfg.schema_path, "tables": cfg.tables_path, "persons": ppath}
    if args.microdata:
        mpath = Path(args.microdata)
        sample = load_microdata(_read(mpath), space, source=str(mpath))
        county = GeoId(args.county, "county") if args.county else _infer_county(people)
        pairs: dict = {}
        r = external_validate(people, sample, county, keep_scatter=pairs)
        text = f"group,n_points,r\n{county.code},{len(space)},{r!r}\n"
        outputs.append(_write(cfg.output_dir / "external_validation.csv", text))
        if args.scatter:
            syn, ref = pairs[county.code]
            rows = "".join(f"{county.code},{s!r},{t!r}\n" for s, t in zip(syn.tolist(), ref.tolist()))
            outputs.append(_write(cfg.output_dir / "external_scatter.csv",
                                  "group,synthetic,reference\n" + rows))
        inputs["microdata"] = mpath
        print(f"external {county.code}: n={len(space)} r={r:.6f}")
    _manifest(cfg, "validate", inputs, outputs)
    return EXIT_OK


def cmd_errmap(args, cfg: RunConfig) -> int:
    schema, space, tables = _load_inputs(cfg)
    try:
        target = parse_predicate(args.target, schema)
    except (PopSynthError, ValueError) as exc:
        raise InputError(f"bad --target {args.target!r}: {exc}") from None
    if target.is_universal:
        raise InputError("--target must fix at least one attribute")
    inputs = {"schema": cfg.schema_path, "tables": cfg.tables_path}
    if args.persons:
        ppath = Path(args.persons)
        people = read_persons(_read(ppath), space, source=str(ppath))
        x = counts_of(people, blocks=tables[0].blocks)
        tables = [
            CensusTable(t.definition, x.blocks, aggregate(build_query_matrix(t.definition, space), x))
            for t in tables
        ]
        inputs["persons"] = ppath
    emap = error_map(tables, target, cfg.dp, schema, level=args.level, threads=args.threads)
    outputs = [
        _write(cfg.output_dir / "error_map.csv", emap.to_csv()),
        _write(cfg.output_dir / "empty_tracts.csv", emap.empty_csv()),
    ]
    summary = emap.summary()
    _manifest(cfg, "errmap", inputs, outputs,
              {"target": str(target), "level": args.level, "notes": emap.notes, "summary": summary})
    rho = summary["spearman"]
    if emap.rows:
        print(f"errmap {target}: {summary['tracts']} tracts, SMAPE min {summary['min']:.4f} "
              f"median {summary['median']:.4f} max {summary['max']:.4f}")
    else:
        print(f"errmap {target}: no non-empty tracts")
    print(f"rank correlation (true percentage vs SMAPE): {'undefined' if rho is None else f'{rho:.4f}'}")
    print(f"note: {emap.notes[0]}")
    return EXIT_OK


def cmd_check(args, cfg: RunConfig) -> int:
    schema, space, tables = _load_inputs(cfg)
    report = check_consistency(tables)
    out = _write(cfg.output_dir / "consistency.csv", report.to_csv())
    _manifest(cfg, "check", {"schema": cfg.schema_path, "tables": cfg.tables_path}, [out])
    if report.is_consistent:
        print(f"check: {len(tables)} tables agree on all {len(report.blocks)} block totals")
    else:
        print(f"check: {len(report.discrepancies)} inconsistent (block, table pair) entries, "
              f"max discrepancy {report.max_discrepancy}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--schema", help="schema JSON (overrides config)")
    common.add_argument("--tables", help="tables CSV (overrides config)")
    common.add_argument("--output-dir", dest="output_dir", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="seed for the solver restarts and the DP noise")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (does not change results)")
    common.add_argument("--log-level", dest="log_level")

    parser = argparse.ArgumentParser(prog="popsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="fit counts and write person records")
    p.add_argument("--require-exact", action="store_true",
                   help="exit 2 unless every block reaches objective 0")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", parents=[common], help="internal and external validation")
    p.add_argument("--persons", help="persons CSV (default: <output_dir>/persons.csv)")
    p.add_argument("--microdata", help="microdata sample CSV for external validation")
    p.add_argument("--county", help="county code for external validation")
    p.add_argument("--scatter", action="store_true", help="also write scatter-pair CSVs")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("errmap", parents=[common], help="per-tract SMAPE under DP noise")
    p.add_argument("--target", required=True, help="target predicate, e.g. race=black")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--level", default="tract", choices=["county", "tract", "block_group"])
    p.add_argument("--persons", help="derive tables from a persons CSV instead of the tables file")
    p.set_defaults(func=cmd_errmap)

    p = sub.add_parser("check", parents=[common], help="report table consistency")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        logging.basicConfig(level=cfg.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise InputError("--threads must be at least 1")
        return args.func(args, cfg)
    except (InputError, PopSynthError) as exc:
        print(f"popsynth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
