"""Command-line pipeline: generate -> train -> calibrate -> evaluate -> bo-step.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bayesopt, calibration, data, gpr, metrics
from .config import RunConfig
from .ensemble import Ensemble, EnsembleConfig, predict_batch, train_ensemble
from .errors import (
    ConfigurationError,
    DomainError,
    IllConditionedKernelError,
    TrainingDivergedError,
)

log = logging.getLogger("deuq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def _load_dataset(cfg: RunConfig, parts) -> data.Dataset:
    d = Path(cfg.paths.data_dir)
    if not (d / "manifest.json").exists():
        raise ConfigurationError(f"no dataset in {d}; run `deuq generate` first")
    return data.Dataset.load(d, parts)


def _model_dir(cfg: RunConfig, m: int) -> Path:
    return Path(cfg.paths.model_dir) / f"de{m}"


def _ensemble_config(cfg: RunConfig, m: int) -> EnsembleConfig:
    e = cfg.ensemble
    return EnsembleConfig(members=m, epochs=e.epochs, batch_size=e.batch_size, lr=e.lr,
                          hidden=tuple(e.hidden), seed=e.seed, slope=e.slope)


def _trained_sizes(cfg: RunConfig) -> list[int]:
    sizes = [m for m in cfg.ensemble.models if (_model_dir(cfg, m) / "manifest.json").exists()]
    if not sizes:
        raise ConfigurationError(f"no trained ensembles in {cfg.paths.model_dir}; run `deuq train` first")
    return sizes


def _scaling_grid(cfg: RunConfig) -> calibration.ScalingGrid:
    c = cfg.calibration
    return calibration.ScalingGrid(c.lo, c.hi, c.n, c.include_identity)


def _run_manifest(cfg: RunConfig, command: str, extra=None) -> None:
    doc = {"command": command, "config": cfg.to_dict(),
           "seeds": {"data": cfg.data.seed, "ensemble": cfg.ensemble.seed, "bo": cfg.bo.seed,
                     "gridsearch": cfg.gridsearch.seed}}
    if extra:
        doc.update(extra)
    _write_json(Path(cfg.paths.report_dir) / f"run_{command}.json", doc)


def cmd_generate(cfg: RunConfig) -> None:
    ds = data.make_dataset(tuple(cfg.data.levels), cfg.data.noise, cfg.data.seed,
                           tuple(cfg.data.ratios))
    ds.save(cfg.paths.data_dir)
    sizes = ds.manifest()["sizes"]
    print(f"wrote {len(ds.X_raw)} rows to {cfg.paths.data_dir} "
          f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")


def cmd_train(cfg: RunConfig) -> None:
    ds = _load_dataset(cfg, ("train",))
    X, Y = ds.part("train")
    timings = {}
    sizes = sorted({int(m) for m in cfg.ensemble.models})
    if cfg.ensemble.nested:
        big = train_ensemble(_ensemble_config(cfg, sizes[-1]), X, Y, cfg.ensemble.n_jobs)
        per_member = big.train_seconds / big.size
        for m in sizes:
            ens = big.subset(m)
            ens.train_seconds = per_member * m
            ens.save(_model_dir(cfg, m))
            timings[f"de{m}"] = ens.train_seconds
    else:
        for m in sizes:
            ens = train_ensemble(_ensemble_config(cfg, m), X, Y, cfg.ensemble.n_jobs)
            ens.save(_model_dir(cfg, m))
            timings[f"de{m}"] = ens.train_seconds
            print(f"DE-{m}: {ens.train_seconds:.1f} s")
    if cfg.gpr.enabled:
        g = cfg.gpr
        model = gpr.gpr_fit(X, Y, g.rounds, g.points, g.max_search_points, cfg.data.seed,
                            g.include_noise)
        model.save(Path(cfg.paths.model_dir) / "gpr.json")
        timings["gpr"] = model.train_seconds
        print(f"GPR: {model.train_seconds:.1f} s")
    _write_json(Path(cfg.paths.model_dir) / "train_summary.json", {"train_seconds": timings})
    _run_manifest(cfg, "train", {"train_seconds": timings})


def cmd_calibrate(cfg: RunConfig) -> None:
    ds = _load_dataset(cfg, ("val",))
    Xv, Yv = ds.part("val")
    grid = _scaling_grid(cfg)
    reports = {}
    for m in _trained_sizes(cfg):
        path = _model_dir(cfg, m)
        ens = Ensemble.load(path)
        calibrated, rep = calibration.calibrate(ens, Xv, Yv, grid)
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["scales"] = calibrated.scales.tolist()
        _write_json(path / "manifest.json", manifest)
        reports[f"de{m}"] = rep.to_dict()
        print(f"DE-{m}: mean s = {rep.scales.mean():.3f}")
    _write_json(Path(cfg.paths.report_dir) / "calibration.json",
                {"outputs": list(data.OUTPUT_NAMES), "models": reports})
    _run_manifest(cfg, "calibrate")


def _evaluate_one(cfg, mu, var, Yt, out_dir, stem):
    m = cfg.metrics
    rep = metrics.report(mu, var, Yt, tuple(m.levels), m.bins, data.OUTPUT_NAMES, m.sort_by)
    rep.write(out_dir, stem)
    return rep.to_dict()


def cmd_evaluate(cfg: RunConfig) -> None:
    ds = _load_dataset(cfg, ("test",))
    Xt, Yt = ds.part("test")
    out = Path(cfg.paths.report_dir)
    summary = {}
    for m in _trained_sizes(cfg):
        ens = Ensemble.load(_model_dir(cfg, m))
        before = predict_batch(calibration.apply_scaling(ens, 1.0), Xt)
        after = predict_batch(ens, Xt)
        summary[f"de{m}"] = {
            "before": _evaluate_one(cfg, before.mu_hat, before.var_total, Yt, out, f"de{m}_before")["Avg"],
            "after": _evaluate_one(cfg, after.mu_hat, after.var_total, Yt, out, f"de{m}_after")["Avg"],
            "scales": ens.scales.tolist(),
        }
    gpath = Path(cfg.paths.model_dir) / "gpr.json"
    if cfg.gpr.enabled and gpath.exists():
        model = gpr.GprModel.load(gpath)
        mu, var = gpr.gpr_predict(model, Xt)
        summary["gpr"] = {"before": _evaluate_one(cfg, mu, var, Yt, out, "gpr")["Avg"]}
    _write_json(out / "summary.json", summary)
    for name, row in summary.items():
        line = f"{name:>6}: AUCE {row['before']['AUCE']:.4f} ENCE {row['before']['ENCE']:.4f}"
        if "after" in row:
            line += f" -> calibrated AUCE {row['after']['AUCE']:.4f} ENCE {row['after']['ENCE']:.4f}"
        print(line)
    _run_manifest(cfg, "evaluate")


def cmd_bo_step(cfg: RunConfig) -> None:
    ds = _load_dataset(cfg, ("train",))
    _, Y = ds.part("train")
    sizes = _trained_sizes(cfg)
    m = cfg.bo.model or max(sizes)
    if m not in sizes:
        raise ConfigurationError(f"DE-{m} has not been trained")
    after = Ensemble.load(_model_dir(cfg, m))
    before = calibration.apply_scaling(after, 1.0)
    names = list(data.OUTPUT_NAMES)
    try:
        objectives = tuple(names.index(o) for o in cfg.bo.objectives)
    except ValueError as exc:
        raise ConfigurationError(f"unknown objective in {cfg.bo.objectives}") from exc
    spec = bayesopt.acquisition_spec_from_training(Y, objectives)
    space = data.InputSpace()
    lo = ds.standardize_x(np.asarray(space.lower))
    hi = ds.standardize_x(np.asarray(space.upper))
    b = cfg.bo
    nsga = bayesopt.Nsga2Config(tuple(lo), tuple(hi), b.pop_size, b.generations, b.crossover_prob,
                                b.crossover_eta, None, b.mutation_eta, b.seed)
    result = bayesopt.bo_step(before, after, spec, nsga, data.INPUT_NAMES, data.OUTPUT_NAMES)
    result.write(Path(cfg.paths.report_dir) / "bo")
    mx = result.max_ei()
    print(f"DE-{m} max EI before {mx['before']} after {mx['after']}")
    _run_manifest(cfg, "bo-step", {"model": m, "max_ei": mx})


def cmd_gridsearch(cfg: RunConfig) -> None:
    ds = _load_dataset(cfg, ("train", "val"))
    X, Y = ds.part("train")
    Xv, Yv = ds.part("val")
    g = cfg.gridsearch
    rows = []
    for n_layer in g.layers:
        for n_node in g.nodes:
            for batch in g.batch_sizes:
                ec = EnsembleConfig(members=1, epochs=g.epochs, batch_size=batch, lr=g.lr,
                                    hidden=(n_node,) * n_layer, seed=g.seed, slope=cfg.ensemble.slope)
                t0 = time.perf_counter()
                ens = train_ensemble(ec, X, Y)
                secs = time.perf_counter() - t0
                d = predict_batch(ens, Xv)
                nll = float(np.mean(metrics.gaussian_nll(d.mu_hat, d.var_total, Yv)))
                rmse = float(np.mean(np.sqrt(np.mean((Yv - d.mu_hat) ** 2, axis=0))))
                rows.append({"layers": n_layer, "nodes": n_node, "batch": batch, "NLL": nll,
                             "RMSE": rmse, "seconds": secs, "params": ens.members[0].n_params()})
                print(f"{n_layer} x {n_node}, batch {batch}: NLL {nll:.3f} RMSE {rmse:.4f} ({secs:.1f} s)")
    best = select_best(rows)
    for i, r in enumerate(rows):
        r["best"] = i == best
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gridsearch.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "gridsearch.json", {"rows": rows, "best": best})
    _run_manifest(cfg, "gridsearch")


def select_best(rows) -> int:
    """Index of the lowest-RMSE row, ties broken by NLL."""
    return min(range(len(rows)), key=lambda i: (rows[i]["RMSE"], rows[i]["NLL"]))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "bo-step": cmd_bo_step,
    "gridsearch": cmd_gridsearch,
}


def _apply_models(cfg: RunConfig, models: str) -> None:
    sizes = []
    use_gpr = False
    for tok in filter(None, (t.strip().lower() for t in models.split(","))):
        if tok == "gpr":
            use_gpr = True
        elif tok.startswith("de") and tok[2:].isdigit() and int(tok[2:]) >= 1:
            sizes.append(int(tok[2:]))
        else:
            raise ConfigurationError(f"unknown model {tok!r}; expected deN or gpr")
    if not sizes and not use_gpr:
        raise ConfigurationError("--models selected nothing")
    cfg.ensemble.models = sizes
    cfg.gpr.enabled = use_gpr


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deuq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="TOML run configuration")
        s.add_argument("--seed", type=int, help="override every seed in the config")
        s.add_argument("--models", help="comma list such as de2,de4,de8,de16,gpr")
        s.add_argument("--out", type=Path, help="root directory for data/, models/ and reports/")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.out:
            cfg.with_out(args.out)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        if args.models:
            _apply_models(cfg, args.models)
        cfg.validate()
        COMMANDS[args.command](cfg)
    except (TrainingDivergedError, IllConditionedKernelError, DomainError, FloatingPointError) as exc:
        print(f"deuq: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, FileNotFoundError, PermissionError, NotADirectoryError) as exc:
        print(f"deuq: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
