"""Command line surface: probe | plan | evict | diagnose | simulate | ablate | cost.

Every command writes its reports plus ``manifest.json`` (config echo and
sha256 of every input and output) into the output directory. Files are
written to a temporary name and renamed into place. ``KVCURATE_OUT_DIR``, when
set, replaces the output directory of every command.

Exit codes: 0 success, 2 validation failure, 3 runtime failure. Failures
print one JSON object to standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
import tempfile
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, config_from_json, policy_from_json, variant_name
from .diagnostics import DiagnosticsError, diagnose
from .kvcache import CacheError, CostConfig, KvCache, apply_plan, cost_rows_to_csv, cost_sweep
from .policy import PolicyError, make_plan
from .probe import ProbeError, score_turns
from .qkio import DumpError, read_dump
from .sequence import BlockKind, SequenceError, load_sequence
from .synthlab import DegradationProxy, SynthConfig, SynthError, default_run_config, preset, run_horizon

OUT_DIR_ENV = "KVCURATE_OUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

_VALIDATION_ERRORS = (ConfigError, SequenceError, DumpError, SynthError, PolicyError, ProbeError,
                      CacheError, DiagnosticsError, FileNotFoundError, IsADirectoryError, KeyError)

RUN_FIELDS = ("ell_grd", "ell_syn", "k_grd", "k_img", "policy", "discard", "query_anchor", "score_mode", "seed")


class UsageError(ValueError):
    """Bad command-line usage; reported as a validation failure."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- io helpers --------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None


def _strict_keys(obj, allowed, what):
    if not isinstance(obj, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {sorted(unknown)}")
    return obj


class Outputs:
    """Collects written reports so the manifest can hash them."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: list[Path] = []

    def write(self, name: str, data: bytes | str) -> Path:
        path = self.dir / name
        write_atomic(path, data)
        self.files.append(path)
        return path

    def manifest(self, command: str, config, inputs: list[str]) -> dict:
        man = {
            "command": command,
            "version": __version__,
            "config": config,
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "outputs": {p.name: sha256_file(p) for p in self.files},
        }
        write_atomic(self.dir / "manifest.json", dumps_json(man))
        return man


def verify_manifest(out_dir: str | Path) -> list[str]:
    """Names of inputs/outputs whose current hash differs from the manifest (empty if traceable)."""
    out_dir = Path(out_dir)
    man = json.loads((out_dir / "manifest.json").read_text())
    bad = [p for p, h in man["inputs"].items() if not Path(p).exists() or sha256_file(p) != h]
    bad += [n for n, h in man["outputs"].items() if sha256_file(out_dir / n) != h]
    return bad


# -- RunConfig flags ---------------------------------------------------------

def _json_or_name(text: str, key: str):
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"--{key}: invalid JSON: {e}") from None
    return {"variant": text} if key == "policy" else {"kind": text}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("RunConfig overrides (take precedence over --config)")
    for name in ("ell_grd", "ell_syn", "k_grd", "k_img", "seed"):
        g.add_argument(f"--{name}", f"--{name.replace('_', '-')}", dest=name, type=int)
    g.add_argument("--policy", help="variant name or policy JSON object")
    g.add_argument("--discard", help="'drop' or discard JSON object, e.g. {\"kind\":\"compress\",\"rate\":8}")
    g.add_argument("--query_anchor", "--query-anchor", dest="query_anchor",
                   help="'mean_vae' or anchor JSON object")
    g.add_argument("--score_mode", "--score-mode", dest="score_mode", choices=("pre_softmax", "post_softmax"))


def resolve_run_config(args) -> RunConfig:
    base = _read_json(args.config) if getattr(args, "config", None) else {}
    _strict_keys(base, RUN_FIELDS, "RunConfig")
    obj = dict(base)
    for name in RUN_FIELDS:
        v = getattr(args, name, None)
        if v is None:
            continue
        obj[name] = _json_or_name(v, name) if name in ("policy", "discard", "query_anchor") else v
    return config_from_json(obj)


# -- commands ----------------------------------------------------------------

def _load_inputs(args):
    return read_dump(args.dump), load_sequence(args.seq)


def cmd_probe(args, out: Outputs):
    cfg = resolve_run_config(args)
    dump, seq = _load_inputs(args)
    reports = [score_turns(dump, seq, BlockKind.TEXT, cfg.ell_grd, cfg).to_json(),
               score_turns(dump, seq, BlockKind.VAE, cfg.ell_syn, cfg).to_json()]
    out.write("relevance.json", dumps_json({"reports": reports}))
    return cfg.to_json(), [args.dump, args.seq] + ([args.config] if args.config else [])


def cmd_plan(args, out: Outputs):
    cfg = resolve_run_config(args)
    dump, seq = _load_inputs(args)
    plan = make_plan(cfg.policy, dump, seq, cfg)
    out.write("plan.json", dumps_json(plan.to_json(seq)))
    return cfg.to_json(), [args.dump, args.seq] + ([args.config] if args.config else [])


def cmd_evict(args, out: Outputs):
    cfg = resolve_run_config(args)
    dump, seq = _load_inputs(args)
    plan = make_plan(cfg.policy, dump, seq, cfg)
    cache = KvCache.from_dump(dump, seq.history_end, seed=cfg.seed)
    curated = apply_plan(cache, plan)
    layers = []
    for i, kv in enumerate(curated.layers):
        h = hashlib.sha256()
        for a in (kv.token_index, kv.keys, kv.values):
            h.update(a.tobytes())
        layers.append({"layer": i, "entries": len(kv), "compressed": kv.n_compressed,
                       "content_sha256": h.hexdigest()})
    total = cache.source_tokens * cache.layer_count
    report = {
        "variant": plan.variant,
        "history_tokens": cache.source_tokens,
        "visible_entries": curated.visible_tokens(),
        "kv_fraction": curated.visible_tokens() / total if total else 0.0,
        "layers": layers,
    }
    out.write("evict.json", dumps_json(report))
    return cfg.to_json(), [args.dump, args.seq] + ([args.config] if args.config else [])


def cmd_diagnose(args, out: Outputs):
    dump, seq = _load_inputs(args)
    rep = diagnose(dump, seq, reference_turn=args.reference_turn)
    out.write("diagnostics.json", dumps_json(rep.to_json()))
    for name, text in rep.figure_csvs().items():
        out.write(name, text)
    return {"reference_turn": args.reference_turn}, [args.dump, args.seq]


# -- sweeps ------------------------------------------------------------------

PROXY_COLUMNS = tuple(f.name for f in fields(DegradationProxy))
SWEEP_FIELDS = ("preset", "synth", "grid", "seeds", "policies", "run_config", "slots")
ABLATION_FIELDS = ("preset", "synth", "seeds", "slots", "run_config", "rows")
ROW_FIELDS = ("id", "label", "config")


def _base_synth(spec: dict) -> SynthConfig:
    base = preset(spec["preset"]) if "preset" in spec else SynthConfig()
    return _synth_with(base, spec.get("synth", {}))


def _synth_with(base: SynthConfig, overrides: dict) -> SynthConfig:
    return SynthConfig.from_json(base.to_json() | overrides)


def _seeds(spec: dict) -> list[int]:
    seeds = spec.get("seeds", [0])
    if isinstance(seeds, dict):
        _strict_keys(seeds, ("start", "count"), "seeds")
        seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a nonempty list of nonnegative integers or {start, count}")
    return seeds


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _run_config_for(synth: SynthConfig, partial: dict) -> RunConfig:
    base = default_run_config(synth).to_json()
    _strict_keys(partial, RUN_FIELDS, "run_config")
    return config_from_json(base | partial)


def simulate_rows(spec: dict) -> tuple[list[str], list[list[str]]]:
    """Rows for a sweep manifest: one per (grid point, policy, seed, slot)."""
    _strict_keys(spec, SWEEP_FIELDS, "sweep manifest")
    base = _base_synth(spec)
    grid = _strict_keys(spec.get("grid", {}), [f.name for f in fields(SynthConfig)], "grid")
    keys = sorted(grid)
    policies = [policy_from_json(p) for p in spec.get("policies", [{"variant": "dense_kv"}])]
    header = ["config_id", *keys, "policy", "seed", *PROXY_COLUMNS]
    rows = []
    for cid, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, values))
        for policy in policies:
            for seed in _seeds(spec):
                synth = _synth_with(base, point | {"seed": seed})
                run_cfg = _run_config_for(synth, spec.get("run_config", {}) | {"seed": seed})
                run_cfg = replace(run_cfg, policy=policy)
                for p in run_horizon(synth, policy, run_cfg, slots=spec.get("slots")):
                    rows.append([str(cid), *map(_fmt, values), variant_name(policy), str(seed),
                                 *(_fmt(getattr(p, c)) for c in PROXY_COLUMNS)])
    return header, rows


def ablation_rows(spec: dict) -> tuple[list[str], list[list[str]]]:
    """Rows for an ablation manifest: one per (variant row, seed, image index)."""
    _strict_keys(spec, ABLATION_FIELDS, "ablation manifest")
    base = _base_synth(spec)
    if not spec.get("rows"):
        raise ConfigError("ablation manifest needs a nonempty 'rows' list")
    header = ["row_id", "label", "policy", "discard", "seed", *PROXY_COLUMNS]
    out = []
    for row in spec["rows"]:
        _strict_keys(row, ROW_FIELDS, "ablation row")
        for seed in _seeds(spec):
            synth = replace(base, seed=seed)
            partial = spec.get("run_config", {}) | row.get("config", {}) | {"seed": seed}
            run_cfg = _run_config_for(synth, partial)
            discard = run_cfg.to_json()["discard"]
            discard_s = discard["kind"] if discard["kind"] == "drop" else \
                f"{discard['kind']}x{discard['rate']}:{discard['interp']}"
            for p in run_horizon(synth, run_cfg.policy, run_cfg, slots=spec.get("slots")):
                out.append([row["id"], row.get("label", row["id"]), variant_name(run_cfg.policy), discard_s,
                            str(seed), *(_fmt(getattr(p, c)) for c in PROXY_COLUMNS)])
    return header, out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_simulate(args, out: Outputs):
    spec = _read_json(args.config)
    header, rows = simulate_rows(spec)
    out.write("simulate.csv", _csv(header, rows))
    return spec, [args.config]


def cmd_ablate(args, out: Outputs):
    spec = _read_json(args.manifest)
    header, rows = ablation_rows(spec)
    out.write("ablation.csv", _csv(header, rows))
    return spec, [args.manifest]


def cmd_cost(args, out: Outputs):
    cfg = CostConfig.from_json(_read_json(args.config)) if args.config else CostConfig()
    if args.repeats is not None:
        cfg = replace(cfg, repeats=args.repeats)
    out.write("cost.csv", cost_rows_to_csv(cost_sweep(cfg)))
    return cfg.to_json(), [args.config] if args.config else []


COMMANDS = {
    "probe": cmd_probe, "plan": cmd_plan, "evict": cmd_evict, "diagnose": cmd_diagnose,
    "simulate": cmd_simulate, "ablate": cmd_ablate, "cost": cmd_cost,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvcurate", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out-dir", "--out_dir", dest="out_dir", default="out",
                        help=f"output directory (overridden by ${OUT_DIR_ENV})")
        return sp

    for name, help_ in (("probe", "rank history turns by relevance at ell_grd (text) and ell_syn (image)"),
                        ("plan", "build the per-layer curation plan for the configured policy"),
                        ("evict", "apply the plan to a KV cache built from the dump")):
        sp = add(name, help_)
        sp.add_argument("--dump", required=True)
        sp.add_argument("--seq", required=True)
        sp.add_argument("--config")
        _add_run_flags(sp)
    sp = add("diagnose", "attention diagnostics and per-figure CSVs")
    sp.add_argument("--dump", required=True)
    sp.add_argument("--seq", required=True)
    sp.add_argument("--reference-turn", "--reference_turn", dest="reference_turn", type=int)
    sp = add("simulate", "synthetic horizon sweep from a sweep manifest")
    sp.add_argument("--config", required=True)
    sp = add("ablate", "policy ablation grid from an ablation manifest")
    sp.add_argument("--manifest", required=True)
    sp = add("cost", "attention runtime scaling, dense vs curated")
    sp.add_argument("--config")
    sp.add_argument("--repeats", type=int)
    return p


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    err = {"error": {"type": type(exc).__name__, "message": str(msg), "exit_code": code,
                     "command": command}}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        out = Outputs(Path(os.environ.get(OUT_DIR_ENV) or args.out_dir))
        config, inputs = COMMANDS[command](args, out)
        out.manifest(command, config, inputs)
    except (UsageError, *_VALIDATION_ERRORS) as e:
        return _fail(EXIT_VALIDATION, e, command)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        return _fail(EXIT_RUNTIME, e, command)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
