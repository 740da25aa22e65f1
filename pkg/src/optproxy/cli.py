"""Command-line entry point: ``optproxy {gen,solve,train,eval,risk,report}``.

Every command resolves its configuration from built-in defaults, then an
optional ``--config`` JSON file, then explicit flags. The resolved config is
written next to the outputs as ``config.json``; timestamps and the git
revision go to a ``meta.json`` sidecar so primary artifacts stay
byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from optproxy.grid import GridError, resolve_network

log = logging.getLogger("optproxy")

OUT_ENV = "OPTPROXY_OUT"
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3
PRIMAL_MODELS = ("naive", "deepopf", "dc3", "e2elr")
MODELS = PRIMAL_MODELS + ("doplp", "pdl-scopf")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- defaults ------------------------------------------------------------------

DEFAULTS = {
    "gen": {"network": "case30", "kind": "ed", "n": 100, "seed": 0, "label": True},
    "solve": {"network": "case30", "kind": "ed", "instance": None, "dataset": None, "index": 0},
    "train": {
        "network": "case30",
        "dataset": None,
        "model": "e2elr",
        "regime": "ssl",
        "epochs": 100,
        "batch": 64,
        "lr": 1e-3,
        "seed": 0,
        "penalties": {},
        "pdl": {},
    },
    "eval": {"network": "case30", "dataset": None, "checkpoint": None, "split": "test", "dual": False},
    "risk": {
        "network": "case30",
        "engine": "oracle",
        "checkpoint": None,
        "scenario_file": None,
        "scenarios": 20,
        "horizon": 288,
        "seed": 0,
        "compare_oracle": False,
        "congest": None,
        "workers": 1,
    },
    "report": {"runs": []},
}


def _add_common(p):
    p.add_argument("--config", help="JSON file with keys for this command")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser():
    parser = _Parser(prog="optproxy", description="Optimization proxies for power dispatch.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="sample instances and label them with the oracle")
    g.add_argument("--network")
    g.add_argument("--kind", choices=("ed", "dcopf", "scopf"))
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-label", dest="label", action="store_false", default=None)

    s = sub.add_parser("solve", help="solve one instance exactly")
    s.add_argument("--network")
    s.add_argument("--kind", choices=("ed", "dcopf", "scopf"))
    s.add_argument("--instance", help="instance JSON file")
    s.add_argument("--dataset", help="dataset directory; pairs with --index")
    s.add_argument("--index", type=int)

    t = sub.add_parser("train", help="train a proxy")
    t.add_argument("--network")
    t.add_argument("--dataset")
    t.add_argument("--model", choices=MODELS)
    t.add_argument("--regime", choices=("sl", "ld", "ssl"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or 'replay') on a labeled split")
    e.add_argument("--network")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--dual", action="store_true", default=None, help="require a dual (doplp) checkpoint")

    r = sub.add_parser("risk", help="Monte-Carlo adverse-event probabilities over a horizon")
    r.add_argument("--network")
    r.add_argument("--engine", choices=("oracle", "model", "replay"))
    r.add_argument("--checkpoint", help="model checkpoint, or recorded dispatch JSON for replay")
    r.add_argument("--scenario-file", dest="scenario_file")
    r.add_argument("--scenarios", type=int)
    r.add_argument("--horizon", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--compare-oracle", dest="compare_oracle", action="store_true", default=None)
    r.add_argument("--congest", help="LINE:FMAX, re-rate one line to force thermal events")
    r.add_argument("--workers", type=int)

    rp = sub.add_parser("report", help="merge run summaries into tables and plots")
    rp.add_argument("runs", nargs="*")

    for p in (g, s, t, e, r, rp):
        _add_common(p)
    return parser


def resolve_config(args):
    """Defaults, then the config file, then flags that were given explicitly."""
    cmd = args.command
    cfg = json.loads(json.dumps(DEFAULTS[cmd]))
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
        cfg.update(doc)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and not (key == "runs" and val == []):
            cfg[key] = val
    return cfg


def output_dir(args):
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def git_revision():
    try:
        res = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- loading helpers -----------------------------------------------------------


def _network(ref):
    try:
        return resolve_network(ref)
    except (OSError, GridError, json.JSONDecodeError) as exc:
        raise DataError(f"network {ref!r}: {exc}") from exc


def _dataset(path):
    from optproxy.instances import load_dataset

    if not path:
        raise ConfigError("a dataset directory is required")
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"dataset {path}: {exc}") from exc


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{what} {path}: {exc}") from exc


def load_checkpoint(net, path):
    from optproxy.dual import DualProxy
    from optproxy.nn import Mlp
    from optproxy.primal import ProxyModel

    doc = _read_json(path, "checkpoint")
    arch = doc.get("arch")
    if doc.get("network") not in (None, net.digest()):
        raise DataError(f"checkpoint {path} was trained on a different network")
    if arch in PRIMAL_MODELS:
        return ProxyModel.from_dict(net, doc)
    if arch == "doplp":
        return DualProxy.from_dict(net, doc)
    if arch == "pdl-scopf":
        from optproxy.pdl import ScopfProblem

        prob = doc["problem"]
        problem = ScopfProblem(net, gen_ks=prob["gen_ks"], line_ks=prob["line_ks"], bs_iters=prob["bs_iters"])
        return problem, Mlp.from_dict(doc["mlp"])
    raise DataError(f"checkpoint {path}: unknown arch {arch!r}")


# -- commands ------------------------------------------------------------------


def cmd_gen(cfg, out):
    from optproxy.instances import SamplerConfig, build_dataset, label_dataset, save_dataset

    if int(cfg["n"]) < 1:
        raise ConfigError("--n must be at least 1")
    net = _network(cfg["network"])
    ds = build_dataset(net, int(cfg["n"]), SamplerConfig.for_kind(cfg["kind"]), int(cfg["seed"]), cfg["kind"])
    if cfg["label"]:
        ds = label_dataset(ds, net)
    save_dataset(ds, out)
    return {"instances": len(ds), "dropped": ds.config.get("dropped", 0), "kind": ds.kind}


def cmd_solve(cfg, out):
    from optproxy.instances import Instance
    from optproxy.solver.models import label_solver

    net = _network(cfg["network"])
    if cfg["instance"]:
        try:
            inst = Instance.from_dict(_read_json(cfg["instance"], "instance"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"instance {cfg['instance']}: {exc}") from exc
    elif cfg["dataset"]:
        ds = _dataset(cfg["dataset"])
        if not 0 <= cfg["index"] < len(ds):
            raise ConfigError(f"index {cfg['index']} outside dataset of {len(ds)}")
        inst = ds.instances[cfg["index"]]
    else:
        raise ConfigError("solve needs --instance or --dataset")
    if inst.loads.size != net.n_bus:
        raise DataError("instance does not match the network's bus count")
    disp = label_solver(cfg["kind"])(net, inst)
    _dump(out / "solution.json", disp.to_dict())
    return {"objective": float(disp.objective)}


def _train_primal(cfg, net, ds, out):
    from optproxy.primal import ProxyModel, TrainConfig, evaluate, train

    inst, labels = ds.subset("train")
    model = ProxyModel(net, cfg["model"], seed=int(cfg["seed"]))
    tc = TrainConfig(cfg["regime"], int(cfg["epochs"]), int(cfg["batch"]), float(cfg["lr"]), int(cfg["seed"]),
                     penalties=cfg["penalties"])
    history = train(model, inst, labels if cfg["regime"] != "ssl" else None, tc)
    _dump(out / "model.json", model.to_dict(cfg))
    summary = {"model": cfg["model"], "regime": cfg["regime"], "final_loss": history[-1]["loss"]}
    test, test_labels = ds.subset("test")
    if test and test_labels:
        summary.update(evaluate(model, test, test_labels).summary())
    return history, summary


def _train_dual(cfg, net, ds, out):
    from optproxy.dual import DualProxy, DualTrainConfig, eval_dual_gap, train_doplp

    inst, _ = ds.subset("train")
    model = DualProxy(net, seed=int(cfg["seed"]))
    history = train_doplp(model, inst, DualTrainConfig(int(cfg["epochs"]), int(cfg["batch"]), float(cfg["lr"]),
                                                      int(cfg["seed"])))
    _dump(out / "model.json", model.to_dict(cfg))
    summary = {"model": "doplp", "final_mean_dual": history[-1]["mean_dual"]}
    test, test_labels = ds.subset("test")
    if test and test_labels:
        rep = eval_dual_gap(model, test, test_labels)
        summary.update({k: v for k, v in rep.items() if k != "ratios"})
    return history, summary


def _train_pdl(cfg, net, ds, out):
    from optproxy.pdl import PdlConfig, ScopfProblem, pdl_scopf_eval, pdl_train

    opts = dict(cfg["pdl"])
    bs_grad = opts.pop("bs_grad", "implicit")
    pc = PdlConfig(**{"lr": float(cfg["lr"]), **opts})
    problem = ScopfProblem(net, bs_grad=bs_grad)
    state = pdl_train(problem, pc, int(cfg["seed"]))
    doc = {
        "arch": "pdl-scopf",
        "network": net.digest(),
        "problem": {"gen_ks": problem.gen_ks, "line_ks": problem.line_ks, "bs_iters": problem.bs_iters},
        "mlp": state.primal.to_dict(cfg),
    }
    _dump(out / "model.json", doc)
    summary = {"model": "pdl-scopf", "final_rho": state.rho, "final_violation": state.v}
    if ds is not None:
        test, test_labels = ds.subset("test")
        if test and test_labels:
            rep = pdl_scopf_eval(problem, state.primal, test, test_labels)
            summary.update({k: v for k, v in rep.items() if k not in ("gaps", "inference_seconds")})
    return state.history, summary


def cmd_train(cfg, out):
    if int(cfg["epochs"]) < 1 or int(cfg["batch"]) < 1 or not float(cfg["lr"]) > 0:
        raise ConfigError("epochs and batch must be positive and lr above zero")
    net = _network(cfg["network"])
    model = cfg["model"]
    if model == "pdl-scopf":
        ds = _dataset(cfg["dataset"]) if cfg["dataset"] else None
        history, summary = _train_pdl(cfg, net, ds, out)
    else:
        ds = _dataset(cfg["dataset"])
        if cfg["regime"] != "ssl" and ds.labels is None:
            raise DataError(f"regime {cfg['regime']} needs a labeled dataset")
        fn = _train_dual if model == "doplp" else _train_primal
        history, summary = fn(cfg, net, ds, out)
    for rec in history:
        rec.pop("seconds", None)
    _dump(out / "history.json", history)
    _dump(out / "summary.json", summary)
    return summary


def cmd_eval(cfg, out):
    net = _network(cfg["network"])
    ds = _dataset(cfg["dataset"])
    inst, labels = ds.subset(cfg["split"])
    if not labels:
        raise DataError("evaluation needs a labeled split")
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint (a model file or 'replay')")
    from optproxy.dual import DualProxy

    if cfg["dual"] and cfg["checkpoint"] == "replay":
        raise ConfigError("--dual needs a doplp checkpoint, not 'replay'")
    if cfg["checkpoint"] == "replay":
        from optproxy.primal import evaluate_dispatch

        p = np.array([lb["p"] for lb in labels])
        rep = evaluate_dispatch(net, inst, labels, p, "replay")
        summary, gaps = rep.summary(), rep.gaps
    else:
        model = load_checkpoint(net, cfg["checkpoint"])
        if cfg["dual"] and not isinstance(model, DualProxy):
            raise ConfigError("--dual needs a doplp checkpoint")
        if isinstance(model, tuple):
            from optproxy.pdl import pdl_scopf_eval

            rep = pdl_scopf_eval(model[0], model[1], inst, labels)
            gaps = np.array(rep.pop("gaps"))
            rep.pop("inference_seconds")
            summary = {"arch": "pdl-scopf", **rep}
        elif isinstance(model, DualProxy):
            from optproxy.dual import eval_dual_gap

            rep = eval_dual_gap(model, inst, labels)
            gaps = np.array(rep.pop("ratios"))
            summary = {"arch": "doplp", **rep}
        else:
            from optproxy.primal import evaluate

            rep = evaluate(model, inst, labels)
            summary, gaps = rep.summary(), rep.gaps
    _write_csv(out / "gaps.csv", ["index", "gap"], [[i, repr(float(g))] for i, g in enumerate(gaps)])
    _dump(out / "summary.json", summary)
    return summary


def _parse_congest(text):
    try:
        line, fmax = text.split(":")
        return int(line), float(fmax)
    except ValueError as exc:
        raise ConfigError(f"--congest expects LINE:FMAX, got {text!r}") from exc


def cmd_risk(cfg, out):
    from optproxy.risk import ScenarioConfig, ScenarioSet, congested_network, generate_scenarios, run_risk

    if int(cfg["scenarios"]) < 1 or int(cfg["horizon"]) < 1:
        raise ConfigError("scenarios and horizon must be positive")
    net = _network(cfg["network"])
    if cfg["congest"]:
        line, fmax = _parse_congest(cfg["congest"])
        if not 0 <= line < net.n_line:
            raise ConfigError(f"line {line} outside 0..{net.n_line - 1}")
        net = congested_network(net, line, fmax)
    if cfg["scenario_file"]:
        try:
            scen = ScenarioSet.load(cfg["scenario_file"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"scenario file {cfg['scenario_file']}: {exc}") from exc
        if scen.loads.shape[2] != net.n_bus:
            raise DataError("scenario loads do not match the network's bus count")
    else:
        scen = generate_scenarios(net, ScenarioConfig(int(cfg["scenarios"]), int(cfg["horizon"]), int(cfg["seed"])))
    kw = {}
    if cfg["engine"] == "model":
        if not cfg["checkpoint"]:
            raise ConfigError("the model engine needs --checkpoint")
        kw["model"] = load_checkpoint(net, cfg["checkpoint"])
        from optproxy.primal import ProxyModel

        if not isinstance(kw["model"], ProxyModel):
            raise ConfigError("the model engine needs a primal ED proxy")
    elif cfg["engine"] == "replay":
        if not cfg["checkpoint"]:
            raise ConfigError("the replay engine needs --checkpoint pointing at recorded dispatches")
        kw["dispatch"] = np.asarray(_read_json(cfg["checkpoint"], "dispatch file")["p"], dtype=float)
    report = run_risk(net, scen, cfg["engine"], compare_oracle=bool(cfg["compare_oracle"]),
                      workers=int(cfg["workers"]), **kw)
    names = [ln.id for ln in net.lines]
    _write_csv(out / "risk.csv", report.columns(names), report.rows())
    summary = report.summary()
    timing = {k: summary.pop(k) for k in list(summary) if k.endswith("seconds_per_scenario")}
    _dump(out / "risk.json", summary)
    plot_risk(report, names, out / "risk.svg")
    return summary, timing


def plot_risk(report, names, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "optproxy"
    hours = np.arange(report.horizon) * 24.0 / report.horizon
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(hours, report.balance, label="balance")
    lines = np.flatnonzero(report.thermal.max(axis=0) > 0)
    for k in lines:
        ax.plot(hours, report.thermal[:, k], label=f"thermal {names[k]}")
    if report.has_oracle:
        for k in lines:
            ax.plot(hours, report.oracle_thermal[:, k], "--", label=f"oracle thermal {names[k]}")
    ax.set_xlabel("hour")
    ax.set_ylabel("event probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(cfg, out):
    runs = cfg["runs"]
    if not runs:
        raise ConfigError("report needs at least one run directory")
    rows = []
    for run in runs:
        run = Path(run)
        found = [p for p in (run / "summary.json", run / "risk.json") if p.exists()]
        if not found:
            raise DataError(f"{run}: no summary.json or risk.json")
        for path in found:
            doc = _read_json(path, "summary")
            if not isinstance(doc, dict):
                raise DataError(f"{path}: summary must be a JSON object")
            rows.append({"run": str(run), "source": path.name, **{k: v for k, v in doc.items() if np.isscalar(v)}})
    header = ["run", "source"] + sorted({k for r in rows for k in r} - {"run", "source"})
    _write_csv(out / "report.csv", header, [[r.get(k, "") for k in header] for r in rows])
    curves = [Path(r) / "risk.csv" for r in runs if (Path(r) / "risk.csv").exists()]
    if curves:
        merge_risk_curves(curves, out / "risk_curves.csv")
    return {"rows": len(rows), "columns": len(header)}


def merge_risk_curves(paths, dest):
    """Stack the balance columns of several risk.csv files side by side, one row per step."""
    cols, names = [], []
    for path in paths:
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or "t" not in rd.fieldnames or "balance" not in rd.fieldnames:
                raise DataError(f"{path}: risk table lacks the t/balance columns")
            recs = list(rd)
        cols.append([r["balance"] for r in recs])
        names.append(f"{Path(path).parent.name}_balance")
        thermal = [c for c in rd.fieldnames if c.startswith("thermal_")]
        if thermal:
            cols.append([max(float(r[c]) for c in thermal) for r in recs])
            names.append(f"{Path(path).parent.name}_max_thermal")
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise DataError("risk tables have different horizons")
    _write_csv(dest, ["t"] + names, [[t] + [c[t] for c in cols] for t in range(n)])


COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "risk": cmd_risk,
    "report": cmd_report,
}


def _fail(code, kind, exc):
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None):
    from optproxy.nn import DivergenceDetected
    from optproxy.repair import InfeasibleLoad
    from optproxy.solver.lp import SolverError

    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        out = output_dir(args)
        started = _dt.datetime.now(_dt.timezone.utc)
        t0 = time.perf_counter()
        _dump(out / "config.json", {"command": args.command, **cfg})
        result = COMMANDS[args.command](cfg, out)
        timing = {}
        if isinstance(result, tuple):
            result, timing = result
        _dump(
            out / "meta.json",
            {
                "git": git_revision(),
                "started": started.isoformat(),
                "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "seconds": time.perf_counter() - t0,
                "argv": list(sys.argv[1:] if argv is None else argv),
                **timing,
            },
        )
        print(json.dumps(result, sort_keys=True))
        return 0
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except DataError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (SolverError, DivergenceDetected, FloatingPointError, InfeasibleLoad) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)


if __name__ == "__main__":
    sys.exit(main())
