"""Command-line entry point: ``gdis <subcommand>``.

Exit codes: 0 success, 1 invalid input (config, files, arguments), 2 runtime failure.
Set ``GDIS_LOG=debug`` (or info/warning) for log output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import (GdisRegressor, LinearMediator, NoNetworkBaseline, estimate_effects,
                        fit_mediator, flip_rate_experiment)
from .exposure import compute_exposures
from .graph import GraphFormatError, load_network, partition_graph, save_network
from .scm import EffectQuery
from .simulator import (ConfigError, SimConfig, generate_network, ground_truth_effects,
                        simulate_outcomes)

log = logging.getLogger("gdis")

CHECKPOINT_VERSION = 1
PARTITIONER = "seeded balanced BFS growth (stand-in for METIS)"


class UsageError(ValueError):
    """Bad user input; maps to exit code 1."""


# -- run configuration ------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    sim: SimConfig
    fractions: tuple = (0.6, 0.2, 0.2)
    model: dict = dataclasses.field(default_factory=dict)
    contrast: dict | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict, seed: int | None = None) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {"sim", "partition", "model", "contrast", "seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = int(data.get("seed", 0) if seed is None else seed)
        sim = dict(data.get("sim", {}))
        sim["seed"] = seed
        part = data.get("partition", {})
        fractions = tuple(float(f) for f in part.get("fractions", (0.6, 0.2, 0.2)))
        model = dict(data.get("model", {}))
        bad = set(model) - set(GdisRegressor().get_params())
        if bad:
            raise ConfigError(f"unknown model hyperparameters: {sorted(bad)}")
        model["random_state"] = seed
        contrast = data.get("contrast")
        if contrast is not None and set(contrast) - {"w_t", "w_t_prime"}:
            raise ConfigError("contrast accepts only w_t and w_t_prime")
        return cls(SimConfig.from_dict(sim), fractions, model, contrast, seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "sim": self.sim.resolved().to_dict(),
                "partition": {"fractions": list(self.fractions)},
                "model": GdisRegressor(**self.model).get_params(),
                "contrast": self.contrast}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def query(self):
        if not self.contrast:
            return None
        return EffectQuery(w_t=float(self.contrast["w_t"]),
                           w_t_prime=float(self.contrast["w_t_prime"]))


def load_config(path, seed=None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({}, seed)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be an object")
    try:
        return RunConfig.from_dict(data, seed)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{p}: {exc}") from None


# -- helpers ----------------------------------------------------------------

def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _write_manifest(out: Path, cfg: RunConfig, command: str):
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "partitioner": PARTITIONER,
        "graph_generator": f"networkx {cfg.sim.graph_model}",
        "version": __version__,
    })


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


class _Run:
    """Everything derived deterministically from a run config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.net, self.trace = simulate_outcomes(generate_network(cfg.sim), cfg.sim)
        self.truth = ground_truth_effects(self.net, cfg.sim, cfg.query())
        self.exposures = compute_exposures(self.net, cfg.sim.smoothing)
        self.partition = partition_graph(self.net, cfg.fractions, seed=cfg.seed)


def _save_checkpoint(path: Path, cfg: RunConfig, model: GdisRegressor, med: LinearMediator):
    _write_json(path, {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "model": model.state_dict(),
        "mediator": {"intercept": med.intercept_, "coef": med.coef_.tolist(),
                     "ridge_fallback": med.ridge_fallback_,
                     "validation_r2": med.validation_r2_},
    })


def _load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    try:
        state = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid checkpoint JSON ({exc})") from None
    if state.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"{p}: unsupported checkpoint version {state.get('version')!r}")
    saved = state["config"]
    cfg = RunConfig.from_dict({"sim": saved["sim"], "partition": saved["partition"],
                               "model": saved["model"], "contrast": saved["contrast"],
                               "seed": saved["seed"]})
    if cfg.digest() != state["config_hash"]:
        raise UsageError(f"{p}: config hash mismatch; checkpoint was edited or is corrupt")
    model = GdisRegressor(**cfg.model).load_state_dict(state["model"])
    med = LinearMediator()
    med.intercept_ = float(state["mediator"]["intercept"])
    med.coef_ = np.asarray(state["mediator"]["coef"], dtype=float)
    med.ridge_fallback_ = state["mediator"]["ridge_fallback"]
    med.validation_r2_ = state["mediator"]["validation_r2"]
    return cfg, model, med


# -- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    run = _Run(cfg)
    save_network(run.net, out)
    _write_json(out / "ground_truth.json", run.truth.to_json())
    _write_json(out / "partition.json", run.partition.to_json())
    _write_manifest(out, cfg, "generate")
    print(f"wrote {run.net.node_count} nodes, {len(run.net.edges)} edges to {out}")
    return 0


def cmd_expose(args) -> int:
    data = Path(args.data)
    units = data / "units.csv"
    net = load_network(data / "edges.txt", data / "features.csv",
                       units if units.exists() else None)
    exp = compute_exposures(net, args.eps)
    out = _outdir(args.out)
    rows = []
    for i in range(net.node_count):
        row = {"node": i, "w_t": exp.treatment_exposure[i]}
        if exp.contagion_exposure is not None:
            row["w_y"] = exp.contagion_exposure[i]
        row.update({f"w_x{j}": v for j, v in enumerate(exp.feature_exposure[i])})
        rows.append(row)
    _write_csv(out / "exposures.csv", rows)
    w = exp.weights.tocoo()
    _write_csv(out / "weights.csv", [{"i": int(a), "j": int(b), "w": float(c)}
                                     for a, b, c in zip(w.row, w.col, w.data)])
    print(f"wrote exposures for {net.node_count} nodes to {out}")
    return 0


def cmd_oracle_check(args) -> int:
    from .scm import (OverlapError, identified_pde, identified_pie, identified_ste,
                      nested_counterfactual_mean, observational_joint, random_summary_scm,
                      summary_dag, verify_sequential_ignorability, WX)

    t0 = time.perf_counter()
    check = verify_sequential_ignorability(summary_dag(), {WX})
    blocked = all(ok for _, _, ok in check.paths)
    ok_ign = check.mediator_outcome and check.exposure and blocked
    print(f"{'PASS' if ok_ign else 'FAIL'} sequential ignorability with {{W_x}}: "
          f"{len(check.paths)} backdoor paths, all blocked={blocked}")
    rng = np.random.default_rng(args.seed)
    q = EffectQuery()
    worst = 0.0
    for _ in range(args.trials):
        scm = random_summary_scm(rng)
        joint = observational_joint(scm)
        try:
            pairs = [(identified_pde(joint, q), nested_counterfactual_mean(scm, q, "pde")),
                     (identified_pie(joint, q), nested_counterfactual_mean(scm, q, "pie")),
                     (identified_ste(joint, q), nested_counterfactual_mean(scm, q, "ste"))]
        except OverlapError as exc:
            print(f"FAIL overlap: {exc}")
            return 2
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    ok_id = worst <= 1e-10
    print(f"{'PASS' if ok_id else 'FAIL'} identification vs enumeration over {args.trials} "
          f"random SCMs: max abs diff {worst:.3g} ({time.perf_counter() - t0:.2f}s)")
    return 0 if ok_ign and ok_id else 2


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    run = _Run(cfg)
    t0 = time.perf_counter()
    model = GdisRegressor(**cfg.model).fit(run.net, run.exposures, run.partition)
    med = fit_mediator(run.exposures, run.partition)
    log.info("trained in %.1fs, best epoch %d", time.perf_counter() - t0, model.best_epoch_)
    _save_checkpoint(out / "model.json", cfg, model, med)
    _write_csv(out / "loss_trace.csv", model.loss_trace_)
    _write_manifest(out, cfg, "train")
    print(f"best epoch {model.best_epoch_}, val MSE "
          f"{model.loss_trace_[model.best_epoch_]['val_mse']:.4f}; checkpoint {out / 'model.json'}")
    return 0


def _evaluate(cfg, model, med, run):
    est = estimate_effects(model, med, run.net, run.exposures, cfg.query(),
                           support=(float(run.exposures.treatment_exposure.min()),
                                    float(run.exposures.treatment_exposure.max())))
    factual = (model.predict(run.net, run.exposures), run.net.outcomes)
    metrics = est.score(run.truth, run.partition, factual)
    base = NoNetworkBaseline().fit(run.net, run.partition)
    base_est = estimate_effects(base, med, run.net, run.exposures, cfg.query())
    base_metrics = base_est.score(run.truth, run.partition,
                                  (base.predict(run.net), run.net.outcomes))
    return est, {"gdis": metrics, "no_network_baseline": base_metrics,
                 "mediator_validation_r2": med.validation_r2_}


def cmd_evaluate(args) -> int:
    cfg, model, med = _load_checkpoint(args.checkpoint)
    out = _outdir(args.out or Path(args.checkpoint).parent)
    run = _Run(cfg)
    est, metrics = _evaluate(cfg, model, med, run)
    metrics["config_hash"] = cfg.digest()
    _write_json(out / "metrics.json", metrics)
    part = run.partition.assignment
    _write_csv(out / "effects.csv", [
        {"node": i, "part": part[i],
         **{k: float(getattr(est, k)[i]) for k in ("pde", "pie", "ste", "total_peer")},
         **{f"true_{k}": float(getattr(run.truth, k)[i])
            for k in ("pde", "pie", "ste", "total_peer")}}
        for i in range(run.net.node_count)])
    oos = metrics["gdis"]["out_of_sample"]
    print(f"out-of-sample PEHE total_peer {oos['pehe_total_peer']:.4f}, "
          f"avg STE {oos['avg_ste']:.4f}, MSE {oos['mse']:.4f}")
    return 0


def _parse_rates(text: str) -> list[float]:
    try:
        rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--rates must be comma-separated numbers, got {text!r}") from None
    if not rates or any(not 0 <= r <= 1 for r in rates):
        raise UsageError(f"--rates must be non-empty and within [0, 1], got {text!r}")
    return rates


def cmd_flip(args) -> int:
    rates = _parse_rates(args.rates)
    cfg, model, med = _load_checkpoint(args.checkpoint)
    out = _outdir(args.out or Path(args.checkpoint).parent)
    run = _Run(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    rows = flip_rate_experiment(model, run.net, cfg.sim, rates, run.partition, seed=seed)
    _write_csv(out / "flip.csv", rows)
    for r in rows:
        print(f"{r['part']:>14} rate {r['flip_rate']:.2f} ({r['pct_flipped']:.1f}% flipped): "
              f"MSE {r['mse']:.4f}")
    return 0


def cmd_report(args) -> int:
    d = Path(args.out)
    metrics_path, flip_path = d / "metrics.json", d / "flip.csv"
    if not metrics_path.exists() and not flip_path.exists():
        raise UsageError(f"no metrics.json or flip.csv in {d}")
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
        print("| model | part | PEHE pde | PEHE pie | PEHE ste | PEHE total | avg STE | MSE |")
        print("|---|---|---|---|---|---|---|---|")
        for name in ("gdis", "no_network_baseline"):
            for part, m in metrics[name].items():
                print(f"| {name} | {part} | {m['pehe_pde']:.4f} | {m['pehe_pie']:.4f} | "
                      f"{m['pehe_ste']:.4f} | {m['pehe_total_peer']:.4f} | "
                      f"{m['avg_ste']:.4f} | {m.get('mse', float('nan')):.4f} |")
    if flip_path.exists():
        with open(flip_path) as fh:
            rows = list(csv.DictReader(fh))
        print()
        print("| part | flip rate | % flipped | MSE |")
        print("|---|---|---|---|")
        for r in rows:
            print(f"| {r['part']} | {float(r['flip_rate']):.2f} | "
                  f"{float(r['pct_flipped']):.1f} | {float(r['mse']):.4f} |")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gdis {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config JSON (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("generate", help="simulate a network with ground truth"))
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("expose", help="compute influence weights and exposures")
    p.add_argument("--data", required=True, help="directory with edges.txt, features.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_expose)
    p = sub.add_parser("oracle-check", help="identification checks on random discrete SCMs")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)
    p = common(sub.add_parser("train", help="train gDIS and the mediator"))
    p.set_defaults(func=cmd_train)
    for name, func, hlp in (("evaluate", cmd_evaluate, "effect estimates and metrics"),
                            ("flip", cmd_flip, "counterfactual MSE vs treatment flip rate")):
        p = common(sub.add_parser(name, help=hlp), config=False)
        p.add_argument("--checkpoint", required=True)
        if name == "flip":
            p.add_argument("--rates", default="0.25,0.5,0.75,1")
        p.set_defaults(func=func)
    p = sub.add_parser("report", help="print metrics and flip tables from a run directory")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("GDIS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    needs_out = args.command in ("generate", "train")
    if needs_out and not args.out:
        print(f"gdis {args.command}: --out is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError, GraphFormatError) as exc:
        print(f"gdis {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("traceback", exc_info=True)
        print(f"gdis {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
