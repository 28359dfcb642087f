"""Command-line orchestration: gen-data, train, sample, eval, sweep, plot.

Every command is driven by a JSON config (see config.SCHEMA), is idempotent
given identical config + seed (byte-identical outputs, manifests embed the
config hash), and honors the global flags --config/--seed/--out/--threads.
Environment overrides use the SFGLAB_ prefix (SFGLAB_SEED, SFGLAB_OUT,
SFGLAB_THREADS) and sit between the config file and the CLI flags.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, svg
from .config import ConfigError, MissingArtifact, NumericFailure, config_hash, load_config
from .datasets import (FractalSpec, LabeledPointSet, make_fractal, make_outlier_gmm,
                       make_saddle_gmm, make_simplex_gmm, make_two_gaussian, sample_gmm)
from .guidance import GuidanceSpec
from .model import (TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train)
from .oracle import smooth
from .rng import derive_seed, generator
from .sampler import attach_guidance, euler_flow_sample, flow_time_schedule, heun_sample, sigma_schedule


# ---------------------------------------------------------------------------
# task plumbing

def task_specs(cfg: dict) -> dict:
    """Instantiate the task's generative objects from the config."""
    task = cfg["task"]
    data = cfg["data"]
    if task == "simplex":
        s = data["simplex"]
        base = make_simplex_gmm(s["n_components"], s["ambient_dim"], s["scale"])
        return {"base": base, "saddle": make_saddle_gmm(base), "outlier": make_outlier_gmm(base)}
    if task == "two_gaussian":
        s = data["two_gaussian"]
        return {"base": make_two_gaussian(s["separation"], s["base_variance"], s["ambient_dim"])}
    s = dict(data["fractal"])
    s.setdefault("n_classes", 2 if s["depth"] > 1 else 1)
    return {"fractal": make_fractal(FractalSpec(**s))}


def _train_config(cfg: dict, model_cfg: dict) -> TrainConfig:
    merged = dict(cfg["train"])
    merged.update(model_cfg.get("train", {}))
    merged["seed"] = cfg["seed"]
    return TrainConfig(**merged)


def _ensure_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".writable"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_manifest(path: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    # threads is execution machinery, not run identity: outputs must be
    # byte-identical for any thread count, manifests included
    identity = {k: v for k, v in cfg.items() if k != "threads"}
    doc = {"command": command, "version": __version__, "seed": cfg["seed"],
           "config_hash": config_hash(identity), "config": identity}
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _guidance_tag(specs: list[GuidanceSpec]) -> str:
    return "+".join(s.kind for s in specs) or "none"


def _read_csv_rows(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            row = {}
            for k, v in zip(header, vals):
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict) -> int:
    out = _ensure_out(cfg)
    specs = task_specs(cfg)
    seed = cfg["seed"]
    n_train = cfg["data"]["n_train"]
    n_test = cfg["data"]["n_test"]
    files = {}
    if cfg["task"] == "fractal":
        train_set = specs["fractal"].sample(n_train, derive_seed(seed, 100))
        train_set.to_csv(out / "train.csv")
        files["train.csv"] = len(train_set)
    else:
        train_set = sample_gmm(specs["base"], n_train, derive_seed(seed, 100))
        train_set.to_csv(out / "train.csv")
        files["train.csv"] = len(train_set)
        if cfg["task"] == "simplex":
            for i, region in enumerate(("mode", "saddle", "outlier")):
                spec = specs["base"] if region == "mode" else specs[region]
                pts = sample_gmm(spec, n_test, derive_seed(seed, 101 + i))
                tagged = LabeledPointSet(pts.points, pts.labels, [region] * len(pts))
                tagged.to_csv(out / f"test_{region}.csv")
                files[f"test_{region}.csv"] = len(tagged)
    _write_manifest(out / "gen_data_manifest.json", "gen-data", cfg, {"files": files})
    print(f"gen-data: wrote {sorted(files)} to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    out = _ensure_out(cfg)
    train_csv = out / "train.csv"
    if not train_csv.exists():
        raise MissingArtifact(f"{train_csv} not found; run gen-data first")
    dataset = LabeledPointSet.from_csv(train_csv)
    models = cfg.get("models")
    if not models:
        raise ConfigError("train needs a models section")
    for name in sorted(models):
        mcfg = models[name]
        tcfg = _train_config(cfg, mcfg)
        name_key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": derive_seed(cfg["seed"], name_key)})
        try:
            model = train(dataset, mcfg["hidden"], tcfg, conditional=mcfg.get("conditional", False))
        except TrainingDiverged as exc:
            if exc.last_good is not None:
                save_checkpoint(exc.last_good, out / f"{name}_lastgood.ckpt")
            raise NumericFailure(f"training {name!r} diverged at batch {exc.batch} "
                                 f"(loss {exc.loss}); last good checkpoint saved") from exc
        save_checkpoint(model, out / f"{name}.ckpt")
        with open(out / f"{name}_loss.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("batch,lr,loss\n")
            for b, lr, loss in model.loss_history:
                fh.write(f"{b},{lr:.9g},{loss:.9g}\n")
        print(f"train: {name} final loss {model.loss_history[-1][2]:.6g} -> {name}.ckpt")
    _write_manifest(out / "train_manifest.json", "train", cfg)
    return 0


def _load_models(cfg: dict, out: Path, names) -> dict:
    table = {}
    for name in names:
        path = out / f"{name}.ckpt"
        if not path.exists():
            raise MissingArtifact(f"checkpoint {path} not found; run train first")
        table[name], _ = load_checkpoint(path)
    return table


def _guidance_specs(cfg: dict) -> list[GuidanceSpec]:
    try:
        return [GuidanceSpec.from_dict(d) for d in cfg["guidance"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad guidance spec: {exc}") from exc


def _class_ids_for(cfg: dict, model, n_samples: int):
    choice = cfg["sample"].get("class_id")
    if choice is None or not model.conditional:
        return None
    if choice == "random":
        return np.asarray([int(generator(derive_seed(cfg["seed"], i), 2).integers(model.n_classes))
                           for i in range(n_samples)])
    return int(choice)


def _run_sampler(cfg: dict, provider, n_samples: int, class_ids, record_sfg=True):
    sch_cfg = cfg["schedule"]
    threads = cfg["threads"]
    chunk = cfg["sample"]["chunk_size"]
    if sch_cfg["kind"] == "sigma":
        sch = sigma_schedule(sch_cfg["n_steps"], sch_cfg["sigma_min"], sch_cfg["sigma_max"], sch_cfg["rho"])
        return heun_sample(provider, sch, n_samples, cfg["seed"], class_ids=class_ids,
                           chunk_size=chunk, threads=threads, record_sfg=record_sfg), sch
    sch = flow_time_schedule(sch_cfg["n_steps"], sch_cfg["sigma_min"], sch_cfg["sigma_max"], sch_cfg["rho"])
    return euler_flow_sample(provider, sch, n_samples, cfg["seed"], class_ids=class_ids,
                             chunk_size=chunk, threads=threads, record_sfg=record_sfg), sch


def cmd_sample(cfg: dict) -> int:
    out = _ensure_out(cfg)
    specs = _guidance_specs(cfg)
    names = {cfg["sample"]["model"]} | {s.companion for s in specs if s.companion}
    table = _load_models(cfg, out, sorted(names))
    table["main"] = table[cfg["sample"]["model"]]
    mode = "eps" if cfg["schedule"]["kind"] == "sigma" else "flow"
    gmm = task_specs(cfg).get("base") if cfg["task"] != "fractal" else None
    provider = attach_guidance(table, specs, mode=mode, gmm=gmm)
    n_samples = cfg["sample"]["n_samples"]
    class_ids = _class_ids_for(cfg, table["main"], n_samples)
    trajs, sch = _run_sampler(cfg, provider, n_samples, class_ids)
    if trajs.n_failed == n_samples:
        raise NumericFailure("all trajectories became non-finite")
    tag = cfg["sample"].get("tag") or _guidance_tag(specs)
    trajs.to_point_set().to_csv(out / f"samples_{tag}.csv")
    extra = {"tag": tag, "n_failed": trajs.n_failed, "n_samples": n_samples}
    if trajs.sfg_trace is not None:
        extra["sfg_stats"] = evaluation.sfg_stats(trajs.sfg_trace)
        with open(out / f"sfg_trace_{tag}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,level,gate_fraction,lambda_mean,lambda_min,lambda_max,alpha_mean\n")
            lam = trajs.sfg_trace["lambda"]
            gate = trajs.sfg_trace["gate"]
            alpha = trajs.sfg_trace["alpha"]
            for k in range(lam.shape[0]):
                fh.write(f"{k},{sch.steps[k]:.9g},{gate[k].mean():.9g},{lam[k].mean():.9g},"
                         f"{lam[k].min():.9g},{lam[k].max():.9g},{alpha[k].mean():.9g}\n")
    _write_manifest(out / f"sample_manifest_{tag}.json", "sample", cfg, extra)
    print(f"sample: {n_samples - trajs.n_failed} ok ({trajs.n_failed} failed) -> samples_{tag}.csv")
    return 0


def _default_sigmas() -> list:
    return list(np.geomspace(0.02, 10.0, 12))


def _reference_points(cfg: dict, specs: dict, n: int):
    if cfg["task"] == "fractal":
        return specs["fractal"].sample(n, derive_seed(cfg["seed"], 999)).points
    return sample_gmm(specs["base"], n, derive_seed(cfg["seed"], 999)).points


def cmd_eval(cfg: dict) -> int:
    out = _ensure_out(cfg)
    specs = task_specs(cfg)
    ecfg = cfg["eval"]
    report = evaluation.EvalReport()
    tables = {}

    model_path = out / f"{cfg['sample']['model']}.ckpt"
    if cfg["task"] == "simplex" and model_path.exists():
        model, _ = load_checkpoint(model_path)
        region_specs = {"mode": specs["base"], "saddle": specs["saddle"], "outlier": specs["outlier"]}
        sigmas = ecfg.get("sigmas") or _default_sigmas()
        report.esm_rows = evaluation.esm_by_region(model, region_specs, sigmas,
                                                   ecfg["n_per_region"], cfg["seed"])
        evaluation.sweep_to_csv(report.esm_rows, out / "esm_rows.csv")
        tables["esm_rows.csv"] = len(report.esm_rows)

    samples_file = ecfg.get("samples_file")
    if samples_file is None:
        default = out / f"samples_{_guidance_tag(_guidance_specs(cfg))}.csv"
        samples_file = str(default) if default.exists() else None
    if samples_file:
        spath = Path(samples_file)
        if not spath.is_absolute():
            spath = out / spath
        if not spath.exists():
            raise MissingArtifact(f"samples file {spath} not found")
        samples = LabeledPointSet.from_csv(spath)
        if cfg["task"] == "fractal":
            frac = specs["fractal"]
            threshold = ecfg["outlier_threshold"] or 3.0 * frac.spec.jitter_sigma
            report.outlier_rate = evaluation.outlier_rate(samples, frac, threshold)
            report.coverage_entropy = evaluation.coverage_entropy(samples, frac)
            ref = specs["fractal"].sample(ecfg["frechet_reference_n"], derive_seed(cfg["seed"], 999))
            report.frechet = evaluation.gaussian_frechet(samples, ref)
        else:
            base = specs["base"]
            threshold = ecfg["outlier_threshold"] or 4.0
            report.outlier_rate = evaluation.outlier_rate(samples, base, threshold)
            report.coverage_entropy = evaluation.coverage_entropy(samples, base)
            ref = _reference_points(cfg, specs, ecfg["frechet_reference_n"])
            report.frechet = evaluation.gaussian_frechet(samples, ref)
        manifest = out / f"sample_manifest_{Path(samples_file).stem.replace('samples_', '')}.json"
        if manifest.exists():
            stats = json.loads(manifest.read_text()).get("extra", {}).get("sfg_stats")
            report.sfg_stats = stats

    if cfg["task"] == "two_gaussian" and "field" in ecfg:
        fcfg = ecfg["field"]
        grid = evaluation.make_grid(fcfg.get("grid_lo", -4.0), fcfg.get("grid_hi", 4.0),
                                    fcfg.get("grid_n", 21))
        for var in fcfg.get("variances", [4.0, 2.0, 0.5]):
            g = smooth(specs["base"], float(np.sqrt(var)))
            rows = evaluation.curvature_field(g, grid)
            fname = f"field_var{var:g}.csv"
            evaluation.field_to_csv(rows, out / fname)
            tables[fname] = len(rows)

    report.to_json(out / "eval_report.json")
    _write_manifest(out / "eval_manifest.json", "eval", cfg, {"tables": tables})
    print(f"eval: report -> {out / 'eval_report.json'}")
    return 0


def _sweep_guidance(cfg: dict, weight, alpha, h) -> list[GuidanceSpec]:
    sw = cfg["sweep"]
    kind = sw["kind"]
    kw = {"kind": kind, "weight": float(weight)}
    if kind in ("cfg", "interval_cfg", "autoguidance"):
        kw["companion"] = sw["companion"]
    if kind == "interval_cfg":
        kw["interval"] = tuple(sw["interval"])
    if kind == "sfg":
        if alpha is not None:
            kw["alpha0"] = float(alpha)
        if h is not None:
            kw["h"] = float(h)
    if kind == "classifier":
        kw["classifier_class"] = cfg["guidance"][0].get("classifier_class", 0) \
            if cfg.get("guidance") else 0
    return [GuidanceSpec(**kw)]


def cmd_sweep(cfg: dict) -> int:
    out = _ensure_out(cfg)
    sw = cfg.get("sweep")
    if not sw:
        raise ConfigError("sweep needs a sweep section")
    specs = task_specs(cfg)
    names = {cfg["sample"]["model"]} | ({sw["companion"]} if sw.get("companion") else set())
    table = _load_models(cfg, out, sorted(names))
    table["main"] = table[cfg["sample"]["model"]]
    mode = "eps" if cfg["schedule"]["kind"] == "sigma" else "flow"
    gmm = specs.get("base")
    n_samples = cfg["sample"]["n_samples"]
    class_ids = _class_ids_for(cfg, table["main"], n_samples)

    def sample_fn(weight, alpha, h):
        gspecs = _sweep_guidance(cfg, weight, alpha, h)
        provider = attach_guidance(table, gspecs, mode=mode, gmm=gmm)
        trajs, _ = _run_sampler(cfg, provider, n_samples, class_ids, record_sfg=False)
        if trajs.n_failed == n_samples:
            raise NumericFailure("all trajectories became non-finite")
        return trajs.to_point_set()

    metric_fns = {}
    ref = _reference_points(cfg, specs, cfg["eval"]["frechet_reference_n"])
    manifold = specs["fractal"] if cfg["task"] == "fractal" else specs["base"]
    if cfg["task"] == "fractal":
        threshold = cfg["eval"]["outlier_threshold"] or 3.0 * specs["fractal"].spec.jitter_sigma
    else:
        threshold = cfg["eval"]["outlier_threshold"] or 4.0
    available = {
        "frechet": lambda s: evaluation.gaussian_frechet(s, ref),
        "outlier_rate": lambda s: evaluation.outlier_rate(s, manifold, threshold),
        "coverage_entropy": lambda s: evaluation.coverage_entropy(s, manifold),
    }
    for name in sw.get("metrics", ["frechet"]):
        if name not in available:
            raise ConfigError(f"unknown sweep metric {name!r}; have {sorted(available)}")
        metric_fns[name] = available[name]

    rows = evaluation.sweep(sample_fn, metric_fns, sw["weights"],
                            alphas=sw.get("alphas"), h_values=sw.get("h_values"))
    evaluation.sweep_to_csv(rows, out / "sweep.csv")
    _write_manifest(out / "sweep_manifest.json", "sweep", cfg, {"rows": len(rows)})
    print(f"sweep: {len(rows)} rows -> {out / 'sweep.csv'}")
    return 0


def cmd_plot(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise MissingArtifact(f"plot input {p} not found")
    if args.kind == "scatter":
        panels = []
        for p in inputs:
            ps = LabeledPointSet.from_csv(p)
            if len(ps) and ps.dim != 2:
                raise ConfigError(f"{p}: {ps.dim}-dimensional points; project to 2D before plotting")
            panels.append((ps.points, ps.labels, p.stem))
        doc = svg.scatter_svg(panels)
    elif args.kind == "field":
        if len(inputs) != 1:
            raise ConfigError("field plots take exactly one input table")
        rows = _read_csv_rows(inputs[0])
        doc = svg.field_svg(rows)
    elif args.kind == "sweep":
        if len(inputs) != 1:
            raise ConfigError("sweep plots take exactly one input table")
        rows = _read_csv_rows(inputs[0])
        if rows and args.x not in rows[0]:
            raise ConfigError(f"x column {args.x!r} not in {sorted(rows[0])}")
        for y in args.y:
            if rows and y not in rows[0]:
                raise ConfigError(f"y column {y!r} not in {sorted(rows[0])}")
        doc = svg.line_chart_svg(rows, args.x, args.y, group_key=args.group)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(doc)
    print(f"plot: -> {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--threads", type=int, default=None, help="trajectory worker threads")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfglab",
                                     description="guidance laboratory for score-based toy models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sample", "eval", "sweep"):
        _add_common(sub.add_parser(name))
    plot = sub.add_parser("plot")
    plot.add_argument("--kind", required=True, choices=["scatter", "field", "sweep"])
    plot.add_argument("--inputs", nargs="+", required=True)
    plot.add_argument("--out", dest="out_file", required=True, help="output SVG path")
    plot.add_argument("--x", default="weight")
    plot.add_argument("--y", nargs="+", default=["frechet"])
    plot.add_argument("--group", default=None)
    return parser


def _apply_overrides(cfg: dict, args) -> dict:
    env_seed = os.environ.get("SFGLAB_SEED")
    env_out = os.environ.get("SFGLAB_OUT")
    env_threads = os.environ.get("SFGLAB_THREADS")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    if env_out is not None:
        cfg["out"] = env_out
    if env_threads is not None:
        cfg["threads"] = int(env_threads)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.threads is not None:
        cfg["threads"] = args.threads
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = _apply_overrides(load_config(args.config), args)
        dispatch = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "sample": cmd_sample,
            "eval": cmd_eval,
            "sweep": cmd_sweep,
        }
        return dispatch[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except (NumericFailure, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
