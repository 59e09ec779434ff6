"""Command-line entry points.

Subcommands: simulate, fit, ml, scan, report. Each takes a JSON config
(validated against CONFIG_SCHEMA; violations name the offending field) plus
a few overriding flags. Exit codes: 0 success, 1 usage error, 2 numerical
failure, 3 data error. Failures emit one machine-readable JSON object on
stderr. All file writes are write-temp-then-rename.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .dataio import DataError, PanelDataset, ingest_csv, preprocess, serialize_dataset
from .distributions import DegenerateTruncationError
from .gibbs import ChainError, McmcConfig, PosteriorStore, run_chain
from .marglik import estimate_log_ml, format_scan_table, ml_model_scan
from .model import ModelSpec, default_prior
from .simulate import DgpConfig, generate_mdfm


class UsageError(Exception):
    exit_code = 1


class NumericalError(Exception):
    exit_code = 2


_ENUM = {"volatility": ["none", "common-sv", "outlier", "fat-tail"],
         "idio": ["kronecker-cross", "exact-diagonal"],
         "factor_scale": ["free", "unit"]}

_PRIOR_SCALARS = ["nu_r", "nu_c", "s_r_scale", "s_c_scale", "v_load",
                  "rho0", "v_rho", "nu_lambda", "s_lambda", "phi0", "v_phi",
                  "nu_h", "s_h", "a_po", "b_po", "df_l"]

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p1": {"type": "integer", "minimum": 1},
                "p2": {"type": "integer", "minimum": 1},
                "q": {"type": "integer", "minimum": 1},
                "volatility": {"enum": _ENUM["volatility"]},
                "idio": {"enum": _ENUM["idio"]},
                "factor_scale": {"enum": _ENUM["factor_scale"]},
            },
        },
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: {"type": "number"} for name in _PRIOR_SCALARS},
        },
        "mcmc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "burn_in": {"type": "integer", "minimum": 0},
                "draws": {"type": "integer", "minimum": 1},
                "thin": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "init": {"enum": ["prior-draw", "vdfm-warm-start",
                                  "user-supplied"]},
                "factor_step": {"enum": ["joint", "per-t"]},
                "store_factors": {"type": "boolean"},
            },
        },
        "is": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_draws": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "n_batches": {"type": "integer", "minimum": 2},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv": {"type": "string"},
                "layout": {"type": "object"},
                "layout_path": {"type": "string"},
                "preprocess": {"type": "array", "items": {"type": "string"}},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "T": {"type": "integer", "minimum": 1},
                "p1": {"type": "integer", "minimum": 1},
                "p2": {"type": "integer", "minimum": 1},
                "q": {"type": "integer", "minimum": 1},
                "volatility": {"enum": _ENUM["volatility"]},
                "idio": {"enum": _ENUM["idio"]},
                "seed": {"type": "integer"},
                "loading_law": {"enum": ["uniform", "normal"]},
                "loading_lo": {"type": "number"},
                "loading_hi": {"type": "number"},
                "loading_sd": {"type": "number"},
                "rho_lo": {"type": "number"},
                "rho_hi": {"type": "number"},
                "sigma_r_law": {"enum": ["scaled-identity", "inverse-wishart"]},
                "sigma_c_law": {"enum": ["scaled-identity", "inverse-wishart"]},
                "sigma_r_scale": {"type": "number"},
                "sigma_c_scale": {"type": "number"},
                "lambda2": {"type": "number"},
                "sv_phi": {"type": "number"},
                "sv_sigma_h2": {"type": "number"},
            },
        },
        "scan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p1_max": {"type": "integer", "minimum": 1},
                "p2_max": {"type": "integer", "minimum": 1},
                "candidates": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "integer"},
                              "minItems": 2, "maxItems": 2},
                },
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}")
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        field = ".".join(str(p) for p in e.absolute_path) or "(top level)"
        err = UsageError(f"config field '{field}': {e.message}")
        err.field = field
        raise err


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    tmp.rename(path)


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.rename(path)


def _out_dir(cfg, args) -> Path:
    d = getattr(args, "out", None) or cfg.get("output", {}).get("dir")
    if d is None:
        raise UsageError("no output directory: set output.dir or pass --out")
    return Path(d)


def _load_panel(cfg, args) -> PanelDataset:
    data_cfg = cfg.get("data", {})
    csv_path = getattr(args, "data", None) or data_cfg.get("csv")
    if csv_path is None:
        raise UsageError("no input data: set data.csv or pass --data")
    layout = data_cfg.get("layout")
    if layout is None:
        lp = data_cfg.get("layout_path") or f"{csv_path}.meta.json"
        try:
            layout = json.loads(Path(lp).read_text())
        except FileNotFoundError:
            raise DataError(f"layout descriptor not found: {lp}")
    ds = ingest_csv(csv_path, layout)
    ops = data_cfg.get("preprocess", [])
    if ops:
        ds = preprocess(ds, ops)
    return ds


def _model_spec(cfg, ds: PanelDataset) -> ModelSpec:
    m = cfg.get("model", {})
    if "p1" not in m or "p2" not in m:
        raise UsageError("config field 'model': p1 and p2 are required")
    T, n, k = ds.values.shape
    return ModelSpec(n=n, k=k, T=T, p1=m["p1"], p2=m["p2"], q=m.get("q", 1),
                     volatility=m.get("volatility", "none"),
                     idio=m.get("idio", "kronecker-cross"),
                     factor_scale=m.get("factor_scale", "free"))


def _prior_for(spec: ModelSpec, cfg):
    prior = default_prior(spec)
    p = dict(cfg.get("prior", {}))
    if not p:
        return prior
    kw = {}
    if "s_r_scale" in p:
        kw["S_r"] = p.pop("s_r_scale") * np.eye(spec.n)
    if "s_c_scale" in p:
        kw["S_c"] = p.pop("s_c_scale") * np.eye(spec.k)
    if "v_load" in p:
        v = p.pop("v_load")
        kw["V_A"] = v * np.eye(spec.p1)
        kw["V_B"] = v * np.eye(spec.p2)
    kw.update(p)
    return dataclasses.replace(prior, **kw)


def _mcmc_config(cfg, args) -> McmcConfig:
    m = dict(cfg.get("mcmc", {}))
    for name in ("burn_in", "draws", "thin"):
        v = getattr(args, name, None)
        if v is not None:
            m[name] = v
    if getattr(args, "seed", None) is not None:
        m["seed"] = args.seed
    return McmcConfig(**m)


def _is_settings(cfg, args):
    s = cfg.get("is", {})
    n_draws = getattr(args, "n_is", None) or s.get("n_draws", 2000)
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = s.get("seed", 0)
    return n_draws, seed, s.get("n_batches", 20)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = dict(cfg.get("simulate", {}))
    if getattr(args, "seed", None) is not None:
        sim["seed"] = args.seed
    out = _out_dir(cfg, args)
    spec_fields = {f: sim.pop(f) for f in ("n", "k", "T", "p1", "p2", "q",
                                           "volatility", "idio") if f in sim}
    missing = [f for f in ("n", "k", "T", "p1", "p2") if f not in spec_fields]
    if missing:
        raise UsageError(f"config field 'simulate': missing {missing[0]}")
    spec = ModelSpec(**spec_fields)
    dgp = DgpConfig(spec=spec, **sim)
    Y, truth, path = generate_mdfm(dgp)
    T, n, k = Y.shape
    ds = PanelDataset(values=Y,
                      row_labels=[f"r{i}" for i in range(n)],
                      col_labels=[f"c{j}" for j in range(k)],
                      time_index=list(range(T)))
    out.mkdir(parents=True, exist_ok=True)
    serialize_dataset(ds, out / "dataset.csv")
    tmp = out / "factors.npy.tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, path.f)
    tmp.rename(out / "factors.npy")
    _write_json(out / "truth.json", {
        "A": truth.loadings.A.tolist(), "B": truth.loadings.B.tolist(),
        "sigma_r": truth.idio.sigma_r.tolist(),
        "sigma_c": truth.idio.sigma_c.tolist(),
        "rho": truth.dynamics.rho.tolist(),
        "lambda2": truth.dynamics.lambda2.tolist(),
        "volatility": truth.vol.variant,
        "dgp": {**{f: getattr(spec, f) for f in
                   ("n", "k", "T", "p1", "p2", "q", "volatility", "idio")},
                **sim}})
    print(f"wrote dataset ({T} x {n} x {k}) to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    ds = _load_panel(cfg, args)
    spec = _model_spec(cfg, ds)
    prior = _prior_for(spec, cfg)
    mcmc = _mcmc_config(cfg, args)
    out = _out_dir(cfg, args)
    store = run_chain(spec, prior, mcmc, ds.values)
    store.save(out)
    rows = [{"parameter": name, "z": z} for name, z in store.geweke.items()]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["parameter", "z"])  # names contain commas
    w.writeheader()
    w.writerows(rows)
    _write_text(out / "geweke.csv", buf.getvalue())
    n_flag = sum(1 for r in rows if abs(r["z"]) > 1.96)
    print(f"chain finished: {store.n_draws} draws retained, "
          f"{n_flag}/{len(rows)} Geweke |z| > 1.96; saved to {out}")
    return 0


def cmd_ml(args) -> int:
    cfg = load_config(args.config)
    store = PosteriorStore.load(args.store)
    ds = _load_panel(cfg, args)
    if ds.values.shape != (store.spec.T, store.spec.n, store.spec.k):
        raise DataError(
            f"data shape {ds.values.shape} does not match the fitted model "
            f"({store.spec.T}, {store.spec.n}, {store.spec.k})")
    n_draws, seed, n_batches = _is_settings(cfg, args)
    est = estimate_log_ml(store.spec, store.prior, ds.values, store=store,
                          n_draws=n_draws, seed=seed, n_batches=n_batches)
    out = _out_dir(cfg, args)
    _write_json(out / "ml.json", {
        "log_ml": est.log_ml, "nse": est.nse, "ess": est.ess,
        "n_draws": est.n_draws, "max_weight_share": est.max_weight_share,
        "degenerate": est.degenerate,
        "model": {"p1": store.spec.p1, "p2": store.spec.p2,
                  "volatility": store.spec.volatility, "idio": store.spec.idio}})
    print(f"log-ML {est}  (ESS {est.ess:.1f} of {est.n_draws})")
    return 0


def cmd_scan(args) -> int:
    cfg = load_config(args.config)
    ds = _load_panel(cfg, args)
    sc = cfg.get("scan", {})
    if "candidates" in sc:
        candidates = [tuple(c) for c in sc["candidates"]]
    else:
        candidates = [(i, j) for i in range(1, sc.get("p1_max", 4) + 1)
                      for j in range(1, sc.get("p2_max", 4) + 1)]
    m = cfg.get("model", {})
    mcmc = _mcmc_config(cfg, args)
    n_draws, seed, _ = _is_settings(cfg, args)
    scan = ml_model_scan(ds.values, candidates,
                         volatility=m.get("volatility", "none"),
                         idio=m.get("idio", "kronecker-cross"),
                         q=m.get("q", 1),
                         factor_scale=m.get("factor_scale", "free"),
                         config=mcmc, n_is=n_draws, seed=seed)
    out = _out_dir(cfg, args)
    _write_json(out / "scan.json", scan.to_dict())
    table = format_scan_table(scan)
    _write_text(out / "scan.txt", table + "\n")
    print(table)
    return 0


def cmd_report(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    if not inputs:
        raise UsageError("report needs at least one input JSON artifact")
    rows = []
    for p in inputs:
        try:
            obj = json.loads(p.read_text())
        except FileNotFoundError:
            raise DataError(f"input not found: {p}")
        except json.JSONDecodeError as e:
            raise DataError(f"{p} is not valid JSON: {e}")
        if "candidates" in obj:            # a scan artifact: one row each
            for c in obj["candidates"]:
                rows.append({"source": str(p), "kind": "scan-candidate",
                             **_flatten(c)})
        else:
            rows.append({"source": str(p), "kind": "artifact", **_flatten(obj)})
    out = Path(args.out or "report.csv")
    keys = ["source", "kind"] + sorted({k for r in rows for k in r}
                                       - {"source", "kind"})
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    tmp.rename(out)
    print(f"aggregated {len(rows)} rows from {len(inputs)} artifacts to {out}")
    return 0


def _flatten(obj, prefix="") -> dict:
    flat = {}
    for key, val in obj.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(_flatten(val, prefix=f"{name}."))
        elif isinstance(val, (list, tuple)):
            flat[name] = json.dumps(val)
        else:
            flat[name] = val
    return flat


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matrixdfm",
                     description="Bayesian dynamic factor models for "
                                 "matrix-valued time series")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override every configured seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the Gibbs sampler on a dataset")
    common(p)
    p.add_argument("--data", default=None, help="input CSV (overrides config)")
    p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ml", help="estimate the marginal likelihood of a fit")
    common(p)
    p.add_argument("--store", required=True, help="posterior store directory")
    p.add_argument("--data", default=None)
    p.add_argument("--n-is", dest="n_is", type=int, default=None,
                   help="importance-sampling draws")
    p.set_defaults(func=cmd_ml)

    p = sub.add_parser("scan", help="rank factor dimensions by marginal "
                                    "likelihood")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--n-is", dest="n_is", type=int, default=None)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("report", help="aggregate result JSONs into one CSV")
    p.add_argument("inputs", nargs="*", help="scan/ml/experiment JSON files")
    p.add_argument("--out", default=None, help="output CSV path")
    p.set_defaults(func=cmd_report)

    return parser


def _emit_error(exc, code: int):
    payload = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": code}
    field = getattr(exc, "field", None)
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        _emit_error(e, 1)
        return 1
    except DataError as e:
        _emit_error(e, 3)
        return 3
    except (ChainError, NumericalError, DegenerateTruncationError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        _emit_error(e, 2)
        return 2
    except ValueError as e:
        # invalid spec/config combinations surfaced by the library
        _emit_error(e, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
