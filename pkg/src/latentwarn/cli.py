"""Command-line pipeline driver.

Every subcommand reads one JSON config (validated against
``config.schema.json``) and reads/writes plain CSV and JSON files in the
output directory, so stages can be rerun individually::

    latentwarn run-all --config cfg.json --out results/
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import diffusion, indicators, ingest, sde, synthetic

log = logging.getLogger("latentwarn")

STAGES = ("synth", "split", "density", "transition")

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "preprocess": {"block": 16, "lo": -0.5, "hi": 0.5, "rescale": True},
    "embedding": {
        "epsilon": 1.0,
        "directed": True,
        "compare": False,
        "n_components": 10,
        "dimension": "auto",
        "max_dimension": 5,
    },
    "sde": {
        "drift_degree": 3,
        "diffusion_degree": 0,
        "train_fraction": 0.8,
        "rescale": True,
        "max_iter": 50000,
        "tol": 1e-8,
        "bins": 30,
    },
    "indicators": {
        "window": 300,
        "stride": 1,
        "sampen": {"m": 5, "p": 10, "q": 1, "r": 2.0},
        "split": -0.75,
        "ensemble_size": 100,
        "tp_mode": "observed",
        "threshold": 0.5,
    },
}


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    text = resources.files("latentwarn").joinpath("config.schema.json").read_text("utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Schema-check a config and fill in defaults."""
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    if "input" in raw and "synthetic" in raw:
        raise ConfigError("config may name either 'input' or 'synthetic', not both")
    return _merge(DEFAULTS, raw)


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = validate_config(raw)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    base = path.resolve().parent
    for section in ("input", "extend"):
        if section in cfg and not Path(cfg[section]["path"]).is_absolute():
            cfg[section]["path"] = str(base / cfg[section]["path"])
    return cfg


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the top-level seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1)[0])


def _out(cfg) -> Path:
    p = Path(cfg["output_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", "utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else ("Infinity" if v == math.inf else v)
    return obj


def _read_json(path: Path, hint: str) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run '{hint}' first")
    return json.loads(path.read_text("utf-8"))


# --- synth / preprocess ----------------------------------------------------------


def _synthetic_spec(cfg) -> tuple[synthetic.SyntheticSpec, Optional[dict]]:
    opts = dict(cfg["synthetic"])
    forced = opts.pop("forced_transition", None)
    if forced is not None and "drift" not in opts:
        base = synthetic.transition_spec(seed=stage_seed(cfg["seed"], "synth"))
        spec = synthetic.SyntheticSpec.from_dict({**base.to_dict(), **opts, "seed": base.seed})
    else:
        spec = synthetic.SyntheticSpec.from_dict({**opts, "seed": stage_seed(cfg["seed"], "synth")})
    return spec, forced


def cmd_synth(cfg) -> dict:
    if "synthetic" not in cfg:
        raise ConfigError("'synth' needs a 'synthetic' section in the config")
    out = _out(cfg)
    spec, forced = _synthetic_spec(cfg)
    meta = {"spec": spec.to_dict(), "sample_rate": 1.0 / spec.dt}
    if forced is not None:
        ft = synthetic.forced_transition(
            spec,
            forced["t_star"],
            forced.get("shift", 1.5),
            forced.get("diffusion_gain", 1.5),
        )
        latent, observed = ft.latent, ft.observed
        meta["forced_transition"] = {"t_star": ft.t_star, **ft.info}
    else:
        latent, observed = synthetic.generate(spec)
    ingest.write_matrix(observed.data, out / "synthetic_observed.csv")
    ingest.write_matrix(latent.data, out / "synthetic_latent.csv")
    _write_json(meta, out / "synthetic.json")
    log.info("synthetic data: %d points, %d channels", observed.n_points, observed.n_dims)
    return meta


def _load_source(cfg) -> ingest.RawRecording:
    if "input" in cfg:
        src = cfg["input"]
        return ingest.load_csv(src["path"], src["sample_rate"], src.get("transpose", False))
    if "synthetic" in cfg:
        out = _out(cfg)
        if not (out / "synthetic.json").exists():
            cmd_synth(cfg)
        meta = _read_json(out / "synthetic.json", "synth")
        return ingest.load_csv(out / "synthetic_observed.csv", meta["sample_rate"])
    raise ConfigError("config needs an 'input' or a 'synthetic' section")


def cmd_preprocess(cfg) -> ingest.TimeSeriesMatrix:
    out = _out(cfg)
    pp = cfg["preprocess"]
    rec = _load_source(cfg)
    ts = ingest.preprocess(rec, pp["block"], pp["lo"], pp["hi"], pp["rescale"])
    ingest.save_csv(ts, out / "data.csv")
    _write_json(
        {
            "dt": ts.dt,
            "origin": ts.origin,
            "n_points": ts.n_points,
            "n_dims": ts.n_dims,
            "sample_rate": rec.sample_rate,
            "block": pp["block"],
            "rescale": pp["rescale"],
            "bounds": [pp["lo"], pp["hi"]],
            "channel_names": None if ts.channel_names is None else list(ts.channel_names),
        },
        out / "data.json",
    )
    log.info("preprocessed %d x %d, dt = %g", ts.n_points, ts.n_dims, ts.dt)
    return ts


def _load_data(out: Path) -> ingest.TimeSeriesMatrix:
    meta = _read_json(out / "data.json", "preprocess")
    return ingest.load_series(out / "data.csv", meta["dt"], meta["origin"])


# --- embed --------------------------------------------------------------------


def _kind(directed: bool) -> str:
    return "directed" if directed else "isotropic"


def _embed_one(ts, cfg, directed: bool, out: Path) -> dict:
    emb_cfg = cfg["embedding"]
    kcfg = diffusion.KernelConfig(emb_cfg["epsilon"], directed)
    drift = diffusion.estimate_drift(ts) if directed else None
    K = diffusion.kernel_matrix(ts, kcfg, drift)
    P, degrees = diffusion.markov_normalize(K)
    n_comp = min(emb_cfg["n_components"], ts.n_points - 1)
    emb = diffusion.spectral_embedding(P, n_comp, kcfg, degrees, ts)
    summary = diffusion.kernel_summary(K, P, emb)
    nontrivial = emb.nontrivial_eigenvalues
    if emb_cfg["dimension"] == "auto":
        dim = diffusion.spectral_gap_dimension(nontrivial, emb_cfg["max_dimension"])
        log.info("%s: spectral gap chooses dimension %d", _kind(directed), dim)
        how = "spectral-gap"
    else:
        dim = int(emb_cfg["dimension"])
        how = "override"
    if dim > emb.n_coordinates:
        raise ConfigError(f"dimension {dim} exceeds the {emb.n_coordinates} computed coordinates")
    kind = _kind(directed)
    ingest.write_matrix(emb.coordinates, out / f"embedding_{kind}_coordinates.csv")
    ingest.write_matrix(emb.eigenvectors, out / f"embedding_{kind}_eigenvectors.csv")
    header = {
        "kind": kind,
        "config": kcfg.to_dict(),
        "eigenvalues": emb.eigenvalues,
        "offset": emb.offset,
        "dimension": dim,
        "dimension_rule": how,
        "kernel": summary,
        "kernel_degrees": degrees,
        "training_data": "data.csv",
        "dt": ts.dt,
        "coordinates_file": f"embedding_{kind}_coordinates.csv",
        "eigenvectors_file": f"embedding_{kind}_eigenvectors.csv",
    }
    _write_json(header, out / f"embedding_{kind}.json")
    log.info("%s embedding: lambda_1 = %.12f", kind, summary["lambda_1"])
    return header


def cmd_embed(cfg) -> dict:
    out = _out(cfg)
    ts = _load_data(out)
    primary = cfg["embedding"]["directed"]
    kinds = [primary, not primary] if cfg["embedding"]["compare"] else [primary]
    headers = {}
    for directed in kinds:
        try:
            headers[_kind(directed)] = _embed_one(ts, cfg, directed, out)
        except diffusion.EigenSolveError as exc:
            raise RuntimeError(
                f"{_kind(directed)} eigensolve failed at pair {exc.pair_index}: {exc}"
            ) from exc
    return headers


def load_embedding(out: Path, kind: str) -> diffusion.DiffusionEmbedding:
    header = _read_json(out / f"embedding_{kind}.json", "embed")
    ts = _load_data(out)
    coords, _ = ingest.read_matrix(out / header["coordinates_file"])
    vecs, _ = ingest.read_matrix(out / header["eigenvectors_file"])
    return diffusion.DiffusionEmbedding(
        eigenvalues=np.asarray(header["eigenvalues"], dtype=float),
        eigenvectors=vecs,
        coordinates=coords,
        config=diffusion.KernelConfig(**header["config"]),
        training_data=ts,
        kernel_degrees=np.asarray(header["kernel_degrees"], dtype=float),
        offset=int(header["offset"]),
    )


def _latent(out: Path, cfg) -> tuple[np.ndarray, float]:
    kind = _kind(cfg["embedding"]["directed"])
    header = _read_json(out / f"embedding_{kind}.json", "embed")
    coords, _ = ingest.read_matrix(out / header["coordinates_file"])
    return coords[:, : header["dimension"]], header["dt"]


# --- fit-sde ------------------------------------------------------------------------


def cmd_fit_sde(cfg) -> sde.LatentSde:
    out = _out(cfg)
    opts = cfg["sde"]
    z, dt = _latent(out, cfg)
    snaps = sde.make_snapshots(
        z, dt, opts["train_fraction"], stage_seed(cfg["seed"], "split"), opts["rescale"]
    )
    settings = sde.FitSettings(max_iter=opts["max_iter"], tol=opts["tol"])
    model = sde.fit(snaps, opts["drift_degree"], opts["diffusion_degree"], settings)
    if not model.converged:
        log.warning("SDE fit did not converge within %d iterations", opts["max_iter"])
    _write_json(model.to_dict(), out / "model.json")
    report = {"converged": model.converged}
    if snaps.test_index.size:
        dens = sde.validate_density(model, snaps, stage_seed(cfg["seed"], "density"), opts["bins"])
        report.update(dens.to_dict())
    _write_json(report, out / "density_report.json")
    log.info("drift %s, |eta| %s", model.drift_coeffs.tolist(), np.abs(model.diff_coeffs).tolist())
    return model


# --- indicators -----------------------------------------------------------------


def _regions(cfg, dim: int) -> indicators.RegionSpec:
    opts = cfg["indicators"]
    if "region_a" in opts:
        bounds = opts["region_a"]
        if len(bounds) != dim:
            raise ConfigError(f"region_a has {len(bounds)} intervals for a {dim}-d latent space")
        lo = tuple(-math.inf if b[0] is None else b[0] for b in bounds)
        hi = tuple(math.inf if b[1] is None else b[1] for b in bounds)
        return indicators.RegionSpec(indicators.Box(lo, hi, True, True), None)
    return indicators.RegionSpec.split(opts["split"], dim)


def _write_series(series: indicators.IndicatorSeries, path: Path) -> None:
    ingest.write_matrix(
        np.column_stack([series.times, series.values]), path.with_suffix(".csv"),
        ["time_index", "value"],
    )
    _write_json({"kind": series.kind, "params": series.params, "flags": list(series.flags)},
                path.with_suffix(".json"))


def compute_indicators(z_model: np.ndarray, model: sde.LatentSde, dt: float, cfg, out: Path) -> dict:
    """All four indicator series plus the warning summary, written under `out`."""
    opts = cfg["indicators"]
    l = opts["window"]
    stride = opts["stride"]
    sp = opts["sampen"]
    series = {}
    summary = {}
    try:
        series["om_ratio"] = indicators.om_ratio_series(z_model, model, l, dt, stride)
    except ValueError as exc:
        summary["om_ratio_error"] = str(exc)
    try:
        params = indicators.SampEnParams(sp["m"], sp["p"], sp["q"], sp["r"], l)
        series["sample_entropy"] = indicators.sample_entropy_series(z_model, params, stride)
    except ValueError as exc:
        summary["sample_entropy_error"] = str(exc)
    regions = _regions(cfg, z_model.shape[1])
    try:
        if opts["tp_mode"] == "monte-carlo":
            tp = indicators.transition_probability_series(
                z_model, regions, opts["ensemble_size"], sde=model, dt=dt,
                seed=stage_seed(cfg["seed"], "transition"),
            )
        else:
            tp = indicators.transition_probability_series(z_model, regions, opts["ensemble_size"])
        series["transition_probability"] = tp
    except ValueError as exc:
        summary["transition_probability_error"] = str(exc)
    series["std_baseline"] = indicators.std_baseline(z_model, min(l, z_model.shape[0]), stride)

    for name, s in series.items():
        _write_series(s, out / f"indicator_{name}")
    nan_only = sorted(name for name, s in series.items() if s.all_nan)
    summary["nan_only_series"] = nan_only
    for name in nan_only:
        log.warning("indicator %s is undefined everywhere", name)
    if "transition_probability" in series:
        summary["tp_warning_time"] = indicators.warning_time(
            series["transition_probability"], opts["threshold"]
        )
        summary["tp_threshold"] = opts["threshold"]
    for name in ("om_ratio", "sample_entropy", "std_baseline"):
        s = series.get(name)
        if s is not None and not s.all_nan:
            summary[f"{name}_argmax_time"] = int(s.times[int(np.nanargmax(s.values))])
    _write_json(summary, out / "warnings.json")
    return summary


def _load_model(out: Path) -> sde.LatentSde:
    return sde.LatentSde.from_dict(_read_json(out / "model.json", "fit-sde"))


def _to_model_coords(model: sde.LatentSde, z: np.ndarray) -> np.ndarray:
    return z if model.transform is None else model.transform.apply(z)


def cmd_indicators(cfg) -> dict:
    out = _out(cfg)
    model = _load_model(out)
    z, dt = _latent(out, cfg)
    return compute_indicators(_to_model_coords(model, z), model, dt, cfg, out)


# --- extend -------------------------------------------------------------------------


def cmd_extend(cfg, path: Optional[str] = None) -> np.ndarray:
    out = _out(cfg)
    opts = dict(cfg.get("extend", {}))
    if path is not None:
        opts["path"] = path
    if "path" not in opts:
        raise ConfigError("extend needs a data path (config 'extend.path' or --data)")
    meta = _read_json(out / "data.json", "preprocess")
    kind = _kind(cfg["embedding"]["directed"])
    emb = load_embedding(out, kind)
    if opts.get("preprocessed", False):
        ts = ingest.load_series(opts["path"], meta["dt"])
    else:
        rate = opts.get("sample_rate", meta["sample_rate"])
        rec = ingest.load_csv(opts["path"], rate, opts.get("transpose", False))
        pp = cfg["preprocess"]
        ts = ingest.preprocess(rec, pp["block"], pp["lo"], pp["hi"], pp["rescale"])
    if ts.n_dims != emb.training_data.n_dims:
        raise ValueError(
            f"new data has {ts.n_dims} channels, the embedding was trained on {emb.training_data.n_dims}"
        )
    coords = diffusion.extend(emb, ts)
    ingest.write_matrix(coords, out / "extended_coordinates.csv")
    if opts.get("chain_indicators", False):
        header = _read_json(out / f"embedding_{kind}.json", "embed")
        model = _load_model(out)
        sub = out / "extended"
        sub.mkdir(exist_ok=True)
        z = _to_model_coords(model, coords[:, : header["dimension"]])
        compute_indicators(z, model, ts.dt, cfg, sub)
    return coords


def cmd_run_all(cfg) -> dict:
    if "synthetic" in cfg:
        cmd_synth(cfg)
    cmd_preprocess(cfg)
    cmd_embed(cfg)
    cmd_fit_sde(cfg)
    return cmd_indicators(cfg)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "embed": cmd_embed,
    "fit-sde": cmd_fit_sde,
    "indicators": cmd_indicators,
    "extend": cmd_extend,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentwarn",
        description="Diffusion-map embedding, latent SDE identification and early-warning indicators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON pipeline config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "extend":
            p.add_argument("--data", default=None, help="CSV with the new samples")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "extend":
            cmd_extend(cfg, args.data)
        else:
            COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ingest.ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
