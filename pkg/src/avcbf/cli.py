"""Command-line front end: ``run``, ``compare``, ``validate`` and ``selftest``.

Scenario files are INI documents with the sections ``[plant]``, ``[method]``,
``[bounds]``, ``[run]`` and ``[output]``::

    [method]
    name = avcbf
    preset = fig1

    [bounds]
    kind = linear_ramp
    c_start = 0.4
    c_end = 0.2

Exit codes: 0 feasible to the horizon, 2 configuration error, 3 an infeasible
QP was met, 4 integration failure (including the speed leaving v > 0).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import re
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import acc as models
from . import report
from .acc import AccParams, BoundProfile, PlantState, Scenario
from .cbf import METHODS, MethodParams
from .integrate import IntegrationError, IntegratorConfig
from .sim import run_closed_loop

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INTEGRATION = 0, 2, 3, 4

_ACC_KEYS = {f.name for f in dataclasses.fields(AccParams)}
_PARAM_KEYS = {f.name for f in dataclasses.fields(MethodParams)}
_AUX_KEYS = {"a1", "pi12", "p1", "p2"}
ALLOWED = {
    "plant": _ACC_KEYS | {"z0", "v0"},
    "method": _PARAM_KEYS | _AUX_KEYS | {"name", "preset"},
    "bounds": {"kind", "c", "c_start", "c_end", "t_start", "t_end", "points", "c_a"},
    "run": {"T", "dt", "integrator", "atol", "rtol", "substep"},
    "output": {"dir", "csv", "summary", "substep_log"},
}


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    method: str
    preset: str | None
    params: dict
    aux: dict
    acc: AccParams
    z0: float
    v0: float | None
    bounds: BoundProfile | None
    T: float = 50.0
    dt: float = 0.1
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    out_dir: str = "."
    csv_name: str | None = None
    summary_name: str | None = None
    substep_log: bool = False
    name: str = "run"

    def scenario(self, method: str | None = None, dt: float | None = None) -> Scenario:
        method = method or self.method
        if self.preset is not None:
            base = models.make_scenario(
                self.preset, method, self.bounds, acc=self.acc, T=self.T,
                dt=self.dt if dt is None else dt, integrator=self.integrator, z0=self.z0, v0=self.v0,
                **self.params,
            )
        else:
            base = Scenario(
                method=method,
                params=MethodParams(**self.params),
                acc=self.acc,
                bounds=self.bounds or BoundProfile.constant(0.4),
                plant0=PlantState(self.z0, 6.0 if self.v0 is None else self.v0),
                aux0=models.DEFAULT_AUX[method],
                T=self.T,
                dt=self.dt if dt is None else dt,
                integrator=self.integrator,
            )
        aux = {k: v for k, v in self.aux.items() if k in _aux_names(method)}
        name = f"{self.name}-{method}"
        return dataclasses.replace(base, aux0=dataclasses.replace(base.aux0, **aux), name=name)


def _aux_names(method: str) -> set[str]:
    return {"avcbf": {"a1", "pi12"}, "pacbf": {"p1", "p2"}}.get(method, set())


def _line_index(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = no
        elif section is not None and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            where[(section, key)] = no
    return where


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file; errors name the key and its line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    lines = _line_index(text)

    def where(section, key=""):
        return f"{path}:{lines.get((section, key), '?')}"

    for section in cp.sections():
        if section not in ALLOWED:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        for key in cp[section]:
            if key not in ALLOWED[section]:
                raise ConfigError(f"{where(section, key)}: unknown key '{key}' in [{section}]")

    def get(section, key, conv=float, default=None):
        if not cp.has_option(section, key):
            return default
        raw = cp[section][key]
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{where(section, key)}: bad value for '{key}': {raw!r}") from exc

    def build(section, ctor, kwargs):
        try:
            return ctor(**kwargs)
        except (ValueError, TypeError) as exc:
            msg = str(exc)
            hits = [(m.start(), k) for k in kwargs if (m := re.search(rf"\b{re.escape(k)}\b", msg))]
            key = min(hits)[1] if hits else ""
            raise ConfigError(f"{where(section, key)}: invalid '{key or section}': {msg}") from exc

    # [plant]
    acc_kw = {k: get("plant", k) for k in _ACC_KEYS if cp.has_option("plant", k)}
    acc = build("plant", AccParams, acc_kw)
    z0 = get("plant", "z0", default=100.0)
    v0 = get("plant", "v0")
    if v0 is not None and not v0 > 0:
        raise ConfigError(f"{where('plant', 'v0')}: invalid 'v0': must be positive")

    # [method]
    if not cp.has_option("method", "name"):
        raise ConfigError(f"{where('method')}: [method] needs 'name'")
    method = cp["method"]["name"].strip()
    if method not in METHODS:
        raise ConfigError(f"{where('method', 'name')}: unknown method '{method}' (expected one of {', '.join(METHODS)})")
    preset = cp["method"].get("preset")
    if preset is not None:
        preset = preset.strip()
        if preset not in models.PRESETS:
            raise ConfigError(f"{where('method', 'preset')}: unknown preset '{preset}'")
    params = {k: get("method", k) for k in _PARAM_KEYS if cp.has_option("method", k)}
    base = models.PRESETS[preset][method] if preset else {}
    build("method", MethodParams, {**base, **params})
    aux = {k: get("method", k) for k in _AUX_KEYS if cp.has_option("method", k)}

    # [bounds]
    bounds = None
    if cp.has_section("bounds") and len(cp["bounds"]):
        kind = cp["bounds"].get("kind", "constant").strip()
        kw = {k: get("bounds", k) for k in ("c", "c_start", "c_end", "t_start", "t_end", "c_a") if cp.has_option("bounds", k)}
        if cp.has_option("bounds", "points"):
            kw["points"] = get("bounds", "points", conv=_parse_points)
        bounds = build("bounds", BoundProfile, {"kind": kind, **kw})

    # [run]
    T = get("run", "T", default=50.0)
    dt = get("run", "dt", default=0.1)
    for key, val in (("T", T), ("dt", dt)):
        if not val > 0:
            raise ConfigError(f"{where('run', key)}: invalid '{key}': must be positive")
    integ_kw = {"method": cp["run"].get("integrator", "rkf45").strip()} if cp.has_section("run") else {}
    for k in ("atol", "rtol", "substep"):
        if cp.has_option("run", k):
            integ_kw[k] = get("run", k)
    integ = build("run", IntegratorConfig, integ_kw)

    # [output]
    out = cp["output"] if cp.has_section("output") else {}
    try:
        substep_log = cp.getboolean("output", "substep_log", fallback=False)
    except ValueError as exc:
        raise ConfigError(f"{where('output', 'substep_log')}: bad value for 'substep_log'") from exc

    cfg = ScenarioConfig(
        method=method, preset=preset, params=params, aux=aux, acc=acc, z0=z0, v0=v0, bounds=bounds,
        T=T, dt=dt, integrator=integ, out_dir=out.get("dir", "."), csv_name=out.get("csv"),
        summary_name=out.get("summary"), substep_log=substep_log, name=path.stem,
    )
    try:
        cfg.scenario()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def load_scenario(path) -> Scenario:
    return load_config(path).scenario()


def _parse_points(raw: str) -> tuple[tuple[float, float], ...]:
    pts = []
    for item in raw.split(","):
        t, c = item.split(":")
        pts.append((float(t), float(c)))
    return tuple(pts)


def _exit_code(traj) -> int:
    return {"horizon": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(traj.stop_cause, EXIT_INTEGRATION)


def _simulate(scenario, substep_log=False):
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        traj = run_closed_loop(scenario, substep_log=substep_log)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return traj, report.summarize(traj, time.perf_counter() - t0)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    scenario = cfg.scenario(dt=args.dt)
    out = Path(args.out or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        traj, summary = _simulate(scenario, args.substep_log or cfg.substep_log)
        report.write_csv(traj, out / (cfg.csv_name or f"{cfg.name}.csv"))
        (out / (cfg.summary_name or f"{cfg.name}.summary.json")).write_text(summary.to_json() + "\n")
    except IntegrationError as exc:
        print(f"integration failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    print(summary.to_json())
    return _exit_code(traj)


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"--methods: unknown method(s) {bad or methods}")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, codes = [], []
    for m in methods:
        try:
            traj, summary = _simulate(cfg.scenario(method=m))
        except IntegrationError as exc:
            print(f"[{m}] integration failure: {exc}", file=sys.stderr)
            codes.append(EXIT_INTEGRATION)
            continue
        report.write_csv(traj, out / f"{cfg.name}-{m}.csv")
        rows.append(report.compare_row(traj, summary))
        codes.append(_exit_code(traj))
    table = report.format_table(rows)
    (out / f"{cfg.name}-comparison.txt").write_text(table + "\n")
    (out / f"{cfg.name}-comparison.csv").write_text(report.rows_csv(rows))
    (out / f"{cfg.name}-comparison.json").write_text(json.dumps([r.flat() for r in rows], indent=2) + "\n")
    print(table)
    return max(codes, default=EXIT_OK)


def cmd_validate(args) -> int:
    s = load_scenario(args.config)
    print(f"ok: {s.name} method={s.method} T={s.T} dt={s.dt} steps={s.steps}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selfcheck import run_all

    ok, lines = run_all()
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_INTEGRATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avcbf", description="Adaptive CBF cruise-control benchmark")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--dt", type=float)
    r.add_argument("--substep-log", action="store_true")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="run several methods on one scenario")
    c.add_argument("config")
    c.add_argument("--methods", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    s = sub.add_parser("selftest", help="QP oracle and derivative checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "dt", None) is not None and not args.dt > 0:
        print("config error: --dt must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
