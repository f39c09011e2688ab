"""Command-line entry point: ``pancal <command> [options]``.

Commands follow the pipeline order

    sample -> gen-data -> pretrain -> indicator -> validate -> synth-dic
    -> transfer -> report

Every command writes ``manifest_<command>.json`` into ``--out-dir``.  A TOML
file given with ``--config`` supplies defaults: top-level keys for the
global options and a ``[command]`` table per command (dashes as
underscores, e.g. ``[gen_data]``).
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import io as pio

log = logging.getLogger("pancal")


def _path(args, name):
    return name if os.path.isabs(name) else os.path.join(args.out_dir, name)


def _config_of(args):
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


# ---------------------------------------------------------------------------
# commands

def cmd_sample(args):
    from .sampling import SaConfig, SamplerConfig, lhs_defgrads, select_triplets

    cfg = SamplerConfig(n_cloud=args.n_cloud, delta=args.delta, k_select=args.k)
    sa = SaConfig(I_max=args.sa_iters, I_stall=args.sa_stall)
    cloud = lhs_defgrads(cfg, args.seed)
    sel = select_triplets(cloud, cfg, sa, args.seed)
    out = _path(args, args.out)
    pio.write_triplets_csv(out, sel.T, sel.F)
    stats = {"d_min": sel.d_min, "d_nn": sel.d_nn, "n_cloud": len(cloud)}
    print(f"selected {len(sel.T)} triplets: d_min={sel.d_min:.4f} mean_nn={sel.d_nn:.4f}")
    return [out], stats


def cmd_gen_data(args):
    from .materials import normalize
    from .sampling import label_with

    model = normalize(pio.load_model(args.material))
    T = pio.read_triplets_csv(args.triplets)
    samples = label_with(model, T)
    out = _path(args, args.out)
    pio.write_labeled_csv(out, samples)
    print(f"wrote {len(samples)} labeled samples to {out}")
    return [out], {}


def cmd_pretrain(args):
    from .l0 import TrainSchedule, pretrain
    from .pann import IcnnConfig, IcnnPotential, model_to_dict

    data = pio.read_labeled_csv(args.data)
    cfg = IcnnConfig(layers=args.layers, hidden=args.hidden, variant=args.variant)
    sched = TrainSchedule() if args.epochs == 2800 else TrainSchedule.scaled(args.epochs)
    tel = _path(args, args.telemetry)
    net = pretrain(cfg, data, sched, seed=args.seed, use_input_penalty=not args.no_input_penalty,
                   telemetry_path=tel)
    doc = model_to_dict(IcnnPotential(net.effective_weights()))
    doc["params"] = net.weights.to_dict()
    doc["gates"] = {k: v.tolist() for k, v in net.gates.log_alpha.items()}
    doc["sparse_form"] = net.sparse_form.to_dict()
    out = _path(args, args.out)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
    last = net.telemetry[-1] if net.telemetry else {}
    print(f"test R2={last.get('r2_test', float('nan')):.4f} "
          f"surviving={net.sparse_form.n_surviving}/{net.sparse_form.n_initial}")
    return [out, tel], {"r2_test": last.get("r2_test"), "n_surviving": net.sparse_form.n_surviving,
                        "closed_fraction": net.gate_fraction_closed()}


def cmd_indicator(args):
    from .materials import normalize
    from .polyconvexity import indicator_batch

    model = normalize(pio.load_model(args.model))
    T = pio.read_triplets_csv(args.data)
    g1, g2, gj = indicator_batch(model, T[:, 0], T[:, 1], T[:, 2])
    out = _path(args, args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["I1", "I2", "J", "g1", "g2", "gJ"])
        for row in zip(T[:, 0], T[:, 1], T[:, 2], g1, g2, gj):
            w.writerow([repr(float(x)) for x in row])
    frac = {k: float(np.mean(g < -1e-9)) for k, g in (("g1", g1), ("g2", g2), ("gJ", gj))}
    print("violation fractions: " + ", ".join(f"{k}={v:.2f}" for k, v in frac.items()))
    return [out], {"violations": frac}


def cmd_validate(args):
    from .materials import normalize
    from .matpoint import run_validation, uniaxial_curve

    model = normalize(pio.load_model(args.model))
    truth = normalize(pio.load_model(args.truth))
    rep = run_validation(model, truth, n=args.n)
    paths = rep.write(args.out_dir, prefix=args.prefix)
    lams = np.linspace(1.0, args.max_stretch, args.n)
    s_m, l_m, _ = uniaxial_curve(model, lams)
    s_t, l_t, _ = uniaxial_curve(truth, lams)
    p = os.path.join(args.out_dir, f"{args.prefix}_uniaxial_nr.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "S11_true", "S11_pred", "lambda2_true", "lambda2_pred"])
        for row in zip(lams, s_t, s_m, l_t, l_m):
            w.writerow([repr(float(x)) for x in row])
    for mode, r in rep.r2_table().items():
        print(f"{mode}: R2 inside={r['inside']:.4f} outside={r['outside']:.4f}")
    return paths + [p], {"r2": rep.r2_table()}


def cmd_synth_dic(args):
    from .fem import LoadSchedule, Mesh2D, plate_with_holes, synth_dic
    from .materials import normalize

    mesh = Mesh2D.load(args.mesh) if args.mesh else plate_with_holes(nx=args.nx, ny=args.ny)
    mesh_out = _path(args, "mesh.json")
    mesh.save(mesh_out)
    model = normalize(pio.load_model(args.material))
    sched = LoadSchedule(total=args.total, increments=args.increments)
    ds = synth_dic(mesh, model, sched, noise=args.noise, seed=args.seed)
    out = _path(args, args.out)
    ds.save(out)
    print(f"{len(ds.steps)} recorded steps; forces " + " ".join(f"{s.force:.4g}" for s in ds.steps))
    return [mesh_out, out], {"n_elements": len(mesh.elements)}


def cmd_transfer(args):
    from .adjoint import CalibrationProblem, calibrate, write_history
    from .fem import DicDataset, Mesh2D, plate_with_holes
    from .pann import model_to_dict

    mesh = Mesh2D.load(args.mesh) if args.mesh else plate_with_holes()
    dic = DicDataset.load(args.dic)
    model = pio.load_model(args.model)
    alpha1 = args.alpha1 if args.alpha1 == "auto" else float(args.alpha1)
    prob = CalibrationProblem(mesh, model, dic, alpha1=alpha1, alpha2=args.alpha2,
                              indicator_weight=args.indicator_weight, max_iter=args.max_iter)
    res = calibrate(prob)
    hist = _path(args, args.history)
    write_history(hist, res.history)
    doc = model_to_dict(model.with_params(res.theta))
    doc["calibration"] = {"status": res.status, "objective": res.objective,
                          "iterations": len(res.history) - 1, "alpha1": prob.alpha1,
                          "alpha2": prob.alpha2}
    out = _path(args, args.out)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
    h0, h1 = res.history[0], res.history[-1]
    print(f"{res.status}: disp misfit {h0['disp']:.4g} -> {h1['disp']:.4g} "
          f"in {len(res.history) - 1} iterations")
    return [out, hist], {"disp_reduction": h0["disp"] / max(h1["disp"], 1e-300)}


def cmd_report(args):
    run = args.run_dir
    rows, md = [], ["# Run report", ""]
    for p in sorted(glob.glob(os.path.join(run, "*_r2.csv"))):
        md += [f"## R² ({os.path.basename(p)})", "", "| mode | inside | outside |", "|---|---|---|"]
        with open(p) as fh:
            for r in csv.DictReader(fh):
                md.append(f"| {r['mode']} | {float(r['r2_inside']):.4f} | {float(r['r2_outside']):.4f} |")
                rows.append((os.path.basename(p), r["mode"] + "_r2_inside", r["r2_inside"]))
                rows.append((os.path.basename(p), r["mode"] + "_r2_outside", r["r2_outside"]))
        md.append("")
    for p in sorted(glob.glob(os.path.join(run, "*indicator*.csv"))):
        with open(p) as fh:
            data = list(csv.DictReader(fh))
        if not data or "g1" not in data[0]:
            continue
        md += [f"## Indicator violations ({os.path.basename(p)})", ""]
        for k in ("g1", "g2", "gJ"):
            frac = float(np.mean([float(r[k]) < -1e-9 for r in data]))
            md.append(f"- {k}: {frac:.3f} of {len(data)} points")
            rows.append((os.path.basename(p), f"violation_{k}", frac))
        md.append("")
    for p in sorted(glob.glob(os.path.join(run, "*history*.csv"))):
        with open(p) as fh:
            data = list(csv.DictReader(fh))
        if not data or "disp" not in data[0]:
            continue
        d0, d1 = float(data[0]["disp"]), float(data[-1]["disp"])
        md += [f"## Calibration ({os.path.basename(p)})", "",
               f"- iterations: {len(data) - 1}",
               f"- displacement misfit: {d0:.4g} -> {d1:.4g}", ""]
        rows += [(os.path.basename(p), "iterations", len(data) - 1),
                 (os.path.basename(p), "disp_initial", d0), (os.path.basename(p), "disp_final", d1)]
    for p in sorted(glob.glob(os.path.join(run, "*telemetry*.csv"))):
        with open(p) as fh:
            data = list(csv.DictReader(fh))
        if not data:
            continue
        last = data[-1]
        md += [f"## Pre-training ({os.path.basename(p)})", "",
               f"- epochs: {len(data)}", f"- test R²: {float(last['r2_test']):.4f}",
               f"- active gates: {last['active']}", ""]
        rows += [(os.path.basename(p), "r2_test", last["r2_test"]),
                 (os.path.basename(p), "active_gates", last["active"])]
    out_md = os.path.join(args.out_dir, "report.md")
    out_csv = os.path.join(args.out_dir, "report.csv")
    with open(out_md, "w") as fh:
        fh.write("\n".join(md) + "\n")
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "metric", "value"])
        w.writerows(rows)
    print(f"wrote {out_md}")
    return [out_md, out_csv], {}


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="pancal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", default=None, help="TOML file with default option values")
    p.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    subs = {}

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        subs[name] = sp
        return sp

    s = add("sample", cmd_sample, "sample deformation gradients and select invariant triplets")
    s.add_argument("--n-cloud", type=int, default=50000)
    s.add_argument("--delta", type=float, default=0.2)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--sa-iters", type=int, default=20000)
    s.add_argument("--sa-stall", type=int, default=5000)
    s.add_argument("--out", default="triplets.csv")

    s = add("gen-data", cmd_gen_data, "label triplets with stresses of an analytic material")
    s.add_argument("--triplets", required=True)
    s.add_argument("--material", default="gent_gent")
    s.add_argument("--out", default="data.csv")

    s = add("pretrain", cmd_pretrain, "train a gated network potential on labeled data")
    s.add_argument("--variant", choices=("polyconvex", "relaxed", "unconstrained"), default="polyconvex")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=2800)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--hidden", type=int, default=200)
    s.add_argument("--no-input-penalty", action="store_true")
    s.add_argument("--out", default="model.json")
    s.add_argument("--telemetry", default="telemetry.csv")

    s = add("indicator", cmd_indicator, "evaluate the polyconvexity indicator at data points")
    s.add_argument("--model", required=True, help="model file, set1/set2/set3 or a material name")
    s.add_argument("--data", required=True, help="CSV with I1,I2,J columns")
    s.add_argument("--out", default="indicator.csv")

    s = add("validate", cmd_validate, "compare a model with a reference material along canonical paths")
    s.add_argument("--model", required=True)
    s.add_argument("--truth", default="gent_gent")
    s.add_argument("--n", type=int, default=81)
    s.add_argument("--max-stretch", type=float, default=1.4)
    s.add_argument("--prefix", default="validation")

    s = add("synth-dic", cmd_synth_dic, "generate a synthetic full-field dataset")
    s.add_argument("--material", default="neo_hookean")
    s.add_argument("--mesh", default=None, help="mesh JSON (default: holed plate)")
    s.add_argument("--nx", type=int, default=8)
    s.add_argument("--ny", type=int, default=13)
    s.add_argument("--noise", type=float, default=0.005, help="noise relative to max displacement")
    s.add_argument("--total", type=float, default=2.5)
    s.add_argument("--increments", type=int, default=25)
    s.add_argument("--out", default="dic.json")

    s = add("transfer", cmd_transfer, "calibrate a sparse model against a full-field dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--dic", required=True)
    s.add_argument("--mesh", default=None)
    s.add_argument("--alpha1", default="auto")
    s.add_argument("--alpha2", type=float, default=1e-4)
    s.add_argument("--indicator-weight", type=float, default=0.0)
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--out", default="calibrated.json")
    s.add_argument("--history", default="history.csv")

    s = add("report", cmd_report, "collate run outputs into report.md and report.csv")
    s.add_argument("--run-dir", default=None, help="directory to scan (default: --out-dir)")
    return p, subs


def _apply_config(parser, subs, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    cfg = pio.load_config(known.config)
    top = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    parser.set_defaults(**top)
    for name, sp in subs.items():
        section = cfg.get(name.replace("-", "_"), cfg.get(name, {}))
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser, subs = build_parser()
    try:
        _apply_config(parser, subs, argv)
    except (OSError, ValueError) as err:
        parser.error(f"cannot read config: {err}")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "run_dir", "unset") is None:
        args.run_dir = args.out_dir
    os.makedirs(args.out_dir, exist_ok=True)
    outputs, extra = args.func(args)
    pio.write_manifest(os.path.join(args.out_dir, f"manifest_{args.command.replace('-', '_')}.json"),
                       args.command, _config_of(args), args.seed, outputs, {"summary": extra})
    return 0


if __name__ == "__main__":
    sys.exit(main())
