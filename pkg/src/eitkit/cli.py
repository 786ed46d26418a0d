"""Command-line front end: mesh/simulate/recon/eval, sweeps, and plots.

Every run directory receives a resolved config snapshot (config.json);
rerunning a command from its snapshot reproduces the numeric outputs
byte-for-byte.  Result files are written to a temp name and renamed, so a
crash never leaves a partial file.  Exit codes: 0 success, 2 bad or missing
inputs, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .forward import (
    ForwardError,
    Measurement,
    default_patterns,
    load_measurement,
    save_measurement,
)
from .mesh import MeshError, MeshSpec, generate_disk_mesh, load_mesh, save_mesh
from .metrics import MetricsError, fbc, piecewise_fit, psnr, rasterize, spectrum_export, ssim
from .optim import OptimError
from .phantom import PhantomError, case_spec, distance_sweep_spec, rasterize_phantom, simulate_measurements
from .recon import (
    NEURAL_METHODS,
    ReconConfig,
    ReconError,
    ReconResult,
    ReconState,
    barycentric_sample,
    crossmesh_evaluate,
    initial_sensitivity_map,
    load_result,
    reconstruct,
    save_result,
)
from .sensitivity import SensitivityError, default_level_map

DISTANCES_DEFAULT = (0.16, 0.20, 0.24, 0.28, 0.32, 0.36, 0.40, 0.44)
MESH_LADDER_DEFAULT = (484, 1145, 2000, 3154, 4400, 5833)

CONFIG_ERRORS = (MeshError, PhantomError, ReconError, MetricsError, SensitivityError, KeyError, ValueError)
NUMERIC_ERRORS = (ForwardError, OptimError, np.linalg.LinAlgError)


def write_json(path, payload) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def write_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = json.load(f)
    return data


def _resolve(args, file_config: dict, defaults: dict) -> dict:
    """defaults < config file < explicit CLI flags."""
    resolved = dict(defaults)
    resolved.update({k: v for k, v in file_config.items() if k in defaults or k == "command"})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _fbc_json(values, defined):
    return [float(v) if ok else None for v, ok in zip(values, defined)]


def cmd_mesh(args) -> int:
    defaults = {"target_nodes": 1145, "n_electrodes": 16, "electrode_coverage": 0.5, "seed": 0}
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "mesh"
    os.makedirs(args.out, exist_ok=True)
    mesh = generate_disk_mesh(
        MeshSpec(
            target_nodes=int(resolved["target_nodes"]),
            n_electrodes=int(resolved["n_electrodes"]),
            electrode_coverage=float(resolved["electrode_coverage"]),
        )
    )
    save_mesh(mesh, os.path.join(args.out, "mesh.json"))
    write_json(os.path.join(args.out, "config.json"), resolved)
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_elements} elements -> {args.out}/mesh.json")
    return 0


def cmd_simulate(args) -> int:
    defaults = {
        "case": "case1",
        "distance": None,
        "seed": 0,
        "snr_db": 60.0,
        "fine_nodes": 5833,
        "coarse_nodes": 1145,
        "n_electrodes": 16,
        "n_injections": 54,
    }
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "simulate"
    os.makedirs(args.out, exist_ok=True)
    snr = resolved["snr_db"]
    snr = None if snr in (None, "off") else float(snr)
    mesh_kwargs = dict(
        snr_db=snr,
        sim_mesh=MeshSpec(int(resolved["fine_nodes"]), int(resolved["n_electrodes"])),
        inv_mesh=MeshSpec(int(resolved["coarse_nodes"]), int(resolved["n_electrodes"])),
    )
    if resolved["distance"] is not None:
        spec = distance_sweep_spec(float(resolved["distance"]), **mesh_kwargs)
    else:
        spec = case_spec(resolved["case"], **mesh_kwargs)
    fine_mesh = generate_disk_mesh(spec.sim_mesh)
    coarse_mesh = generate_disk_mesh(spec.inv_mesh)
    patterns = default_patterns(int(resolved["n_electrodes"]), int(resolved["n_injections"]))
    sigma_true = rasterize_phantom(spec, fine_mesh)
    meas = simulate_measurements(spec, patterns, fine_mesh, seed=int(resolved["seed"]))

    save_mesh(fine_mesh, os.path.join(args.out, "fine_mesh.json"))
    save_mesh(coarse_mesh, os.path.join(args.out, "coarse_mesh.json"))
    write_json(
        os.path.join(args.out, "ground_truth.json"),
        {"mesh": "fine_mesh.json", "sigma": [float(v) for v in sigma_true], "phantom": spec.name},
    )
    save_measurement(meas, os.path.join(args.out, "measurements.json"))
    write_json(os.path.join(args.out, "config.json"), resolved)
    print(f"simulate[{spec.name}]: {len(meas.voltages)} voltages -> {args.out}")
    return 0


def _recon_defaults() -> dict:
    base = ReconConfig().to_dict()
    base.update({"mesh": None, "measurements": None, "iters": None})
    return base


def cmd_recon(args) -> int:
    defaults = _recon_defaults()
    file_config = _load_config_file(args.config)
    resolved = _resolve(args, file_config, defaults)
    resolved["command"] = "recon"
    if getattr(args, "iters", None) is not None:
        resolved["total_iters"] = int(args.iters)
    resolved.pop("iters", None)
    # method-tuned defaults fill anything not set explicitly
    explicit = set(file_config) | {
        k for k in defaults if getattr(args, k, None) is not None
    }
    from .recon import METHOD_DEFAULTS

    for key, value in METHOD_DEFAULTS.get(resolved["method"], {}).items():
        if key not in explicit:
            resolved[key] = value
    if not resolved["mesh"] or not resolved["measurements"]:
        raise FileNotFoundError("recon requires --mesh and --measurements")
    os.makedirs(args.out, exist_ok=True)
    mesh = load_mesh(resolved["mesh"])
    meas = load_measurement(resolved["measurements"])
    config = ReconConfig.from_dict(resolved)
    result = reconstruct(mesh, meas, config)
    save_result(result, os.path.join(args.out, "result.json"))
    if result.state is not None:
        result.state.save(os.path.join(args.out, "state.npz"))
    write_json(os.path.join(args.out, "config.json"), resolved)
    tail = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"recon[{config.method}]: final loss {tail:.3e} -> {args.out}")
    if result.aborted_at is not None:
        print(f"warning: non-finite loss at iteration {result.aborted_at}; kept last finite state",
              file=sys.stderr)
        return 3
    return 0


def _evaluate(result: ReconResult, recon_mesh, truth_dir: str, resolution: int):
    fine_mesh = load_mesh(os.path.join(truth_dir, "fine_mesh.json"))
    with open(os.path.join(truth_dir, "ground_truth.json")) as f:
        gt = json.load(f)
    sigma_true = np.asarray(gt["sigma"], dtype=float)
    if result.method in NEURAL_METHODS and result.field is not None:
        sigma_eval = crossmesh_evaluate(result, fine_mesh, training_mesh=recon_mesh)
    elif np.ndim(result.sigma) and len(result.sigma) == fine_mesh.n_nodes:
        sigma_eval = result.sigma
    else:
        sigma_eval = barycentric_sample(recon_mesh, result.sigma, fine_mesh.nodes)
    truth_raster = rasterize(fine_mesh, sigma_true, resolution, provenance="ground_truth")
    recon_raster = rasterize(fine_mesh, sigma_eval, resolution, provenance=result.method)
    values, defined = fbc(recon_raster, truth_raster)
    notes = []
    if not np.all(defined):
        notes.append(f"undefined fbc bands: {list(np.flatnonzero(~defined))}")
    if truth_raster.fallback_pixels or recon_raster.fallback_pixels:
        notes.append(
            f"raster fallback pixels: truth={truth_raster.fallback_pixels}, "
            f"recon={recon_raster.fallback_pixels}"
        )
    return {
        "psnr": psnr(truth_raster, recon_raster),
        "ssim": ssim(truth_raster, recon_raster),
        "fbc": _fbc_json(values, defined),
        "notes": notes,
    }


def _load_run(run_dir: str) -> tuple[ReconResult, object]:
    result = load_result(os.path.join(run_dir, "result.json"))
    with open(os.path.join(run_dir, "config.json")) as f:
        run_cfg = json.load(f)
    mesh = load_mesh(run_cfg["mesh"])
    state_path = os.path.join(run_dir, "state.npz")
    if result.method in NEURAL_METHODS and os.path.exists(state_path):
        result.field = ReconState.load(state_path).field
    return result, mesh


def cmd_eval(args) -> int:
    defaults = {"run": None, "truth": None, "resolution": 128, "seed": 0}
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "eval"
    if not resolved["run"] or not resolved["truth"]:
        raise FileNotFoundError("eval requires --run and --truth directories")
    os.makedirs(args.out, exist_ok=True)
    result, mesh = _load_run(resolved["run"])
    report = _evaluate(result, mesh, resolved["truth"], int(resolved["resolution"]))
    write_json(os.path.join(args.out, "report.json"), report)
    write_json(os.path.join(args.out, "config.json"), resolved)
    print(f"eval[{result.method}]: psnr {report['psnr']:.2f} dB ssim {report['ssim']:.4f}")
    return 0


def _run_cell(spec, patterns, fine_mesh, inv_mesh, sigma_true, method, seed, iters, cell_dir, resolution):
    """Simulate-once data is shared; this reconstructs and scores one cell."""
    os.makedirs(cell_dir, exist_ok=True)
    meas = simulate_measurements(spec, patterns, fine_mesh, seed=seed)
    config = ReconConfig.for_method(method, seed=seed, total_iters=iters)
    result = reconstruct(inv_mesh, meas, config)
    save_result(result, os.path.join(cell_dir, "result.json"))
    truth_raster = rasterize(fine_mesh, sigma_true, resolution)
    if method in NEURAL_METHODS:
        sigma_eval = crossmesh_evaluate(result, fine_mesh, training_mesh=inv_mesh)
    else:
        sigma_eval = barycentric_sample(inv_mesh, result.sigma, fine_mesh.nodes)
    recon_raster = rasterize(fine_mesh, sigma_eval, resolution)
    values, defined = fbc(recon_raster, truth_raster)
    return {
        "psnr": psnr(truth_raster, recon_raster),
        "ssim": ssim(truth_raster, recon_raster),
        "fbc": _fbc_json(values, defined),
    }


def cmd_sweep_distance(args) -> int:
    defaults = {
        "methods": "phync",
        "seeds": "1,2,3",
        "distances": ",".join(str(d) for d in DISTANCES_DEFAULT),
        "iters": 1000,
        "fine_nodes": 5833,
        "coarse_nodes": 1145,
        "snr_db": 60.0,
        "resolution": 128,
        "seed": 0,
    }
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "sweep-distance"
    os.makedirs(args.out, exist_ok=True)
    methods = str(resolved["methods"]).split(",")
    seeds = [int(s) for s in str(resolved["seeds"]).split(",")]
    distances = [float(d) for d in str(resolved["distances"]).split(",")]
    iters = int(resolved["iters"])
    resolution = int(resolved["resolution"])

    rows = []
    scores = {}
    patterns = default_patterns(16)
    for d in distances:
        spec = distance_sweep_spec(
            d,
            snr_db=float(resolved["snr_db"]),
            sim_mesh=MeshSpec(int(resolved["fine_nodes"])),
            inv_mesh=MeshSpec(int(resolved["coarse_nodes"])),
        )
        fine_mesh = generate_disk_mesh(spec.sim_mesh)
        inv_mesh = generate_disk_mesh(spec.inv_mesh)
        sigma_true = rasterize_phantom(spec, fine_mesh)
        for method in methods:
            for seed in seeds:
                cell = os.path.join(args.out, "cells", f"{method}_d{d:g}_s{seed}")
                report = _run_cell(
                    spec, patterns, fine_mesh, inv_mesh, sigma_true,
                    method, seed, iters, cell, resolution,
                )
                rows.append([method, d, seed, report["psnr"], report["ssim"],
                             *[v if v is not None else "" for v in report["fbc"]]])
                scores.setdefault(method, {}).setdefault(d, []).append(report["psnr"])
                print(f"  {method} d={d:g} seed={seed}: psnr {report['psnr']:.2f}", flush=True)

    header = ["method", "distance", "seed", "psnr", "ssim"] + [f"fbc{i+1}" for i in range(5)]
    write_csv(os.path.join(args.out, "sweep.csv"), header, rows)

    summary = {}
    for method in methods:
        med = [float(np.median(scores[method][d])) for d in distances]
        fit = piecewise_fit(np.asarray(distances), np.asarray(med), segments=3)
        summary[method] = {
            "median_psnr": med,
            "breakpoints": fit.breakpoints,
            "slopes": fit.slopes,
            "rss": fit.rss,
        }
    write_json(os.path.join(args.out, "summary.json"), {"distances": distances, "methods": summary})
    write_json(os.path.join(args.out, "config.json"), resolved)
    for method, s in summary.items():
        print(f"sweep-distance[{method}]: breakpoints {[round(b, 3) for b in s['breakpoints']]}")
    return 0


def cmd_sweep_mesh(args) -> int:
    defaults = {
        "methods": "phync",
        "seeds": "1,2,3",
        "node_counts": ",".join(str(n) for n in MESH_LADDER_DEFAULT),
        "case": "case1",
        "sim_nodes": 8000,
        "iters": 1000,
        "snr_db": 60.0,
        "resolution": 128,
        "seed": 0,
    }
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "sweep-mesh"
    os.makedirs(args.out, exist_ok=True)
    methods = str(resolved["methods"]).split(",")
    seeds = [int(s) for s in str(resolved["seeds"]).split(",")]
    counts = [int(c) for c in str(resolved["node_counts"]).split(",")]
    iters = int(resolved["iters"])
    resolution = int(resolved["resolution"])

    rows = []
    scores = {}
    patterns = default_patterns(16)
    base_spec = case_spec(
        resolved["case"],
        snr_db=float(resolved["snr_db"]),
        sim_mesh=MeshSpec(int(resolved["sim_nodes"])),
        inv_mesh=MeshSpec(int(counts[0])),
    )
    fine_mesh = generate_disk_mesh(base_spec.sim_mesh)
    sigma_true = rasterize_phantom(base_spec, fine_mesh)
    for count in counts:
        inv_mesh = generate_disk_mesh(MeshSpec(count))
        for method in methods:
            for seed in seeds:
                cell = os.path.join(args.out, "cells", f"{method}_n{count}_s{seed}")
                report = _run_cell(
                    base_spec, patterns, fine_mesh, inv_mesh, sigma_true,
                    method, seed, iters, cell, resolution,
                )
                rows.append([method, count, seed, report["psnr"], report["ssim"],
                             *[v if v is not None else "" for v in report["fbc"]]])
                scores.setdefault(method, {}).setdefault(count, []).append(report["psnr"])
                print(f"  {method} n={count} seed={seed}: psnr {report['psnr']:.2f}", flush=True)

    header = ["method", "nodes", "seed", "psnr", "ssim"] + [f"fbc{i+1}" for i in range(5)]
    write_csv(os.path.join(args.out, "sweep.csv"), header, rows)
    summary = {}
    for method in methods:
        med = [float(np.median(scores[method][c])) for c in counts]
        fit = piecewise_fit(np.asarray(counts, dtype=float), np.asarray(med), segments=2)
        summary[method] = {
            "median_psnr": med,
            "breakpoints": fit.breakpoints,
            "slopes": fit.slopes,
            "rss": fit.rss,
        }
    write_json(os.path.join(args.out, "summary.json"), {"node_counts": counts, "methods": summary})
    write_json(os.path.join(args.out, "config.json"), resolved)
    for method, s in summary.items():
        print(f"sweep-mesh[{method}]: breakpoint {[round(b, 1) for b in s['breakpoints']]}")
    return 0


def _save_raster_figure(raster_values, mask, png_path, csv_path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = np.array(raster_values, dtype=float)
    shown[~mask] = np.nan
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(shown, origin="lower", extent=(-1, 1, -1, 1), cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    write_csv(csv_path, [f"c{i}" for i in range(raster_values.shape[1])],
              [list(map(float, row)) for row in raster_values])


def cmd_plot(args) -> int:
    defaults = {
        "kind": "field",
        "mesh": None,
        "values": None,
        "measurements": None,
        "method": "phync",
        "seed": 0,
        "resolution": 128,
    }
    resolved = _resolve(args, _load_config_file(args.config), defaults)
    resolved["command"] = "plot"
    if not resolved["mesh"]:
        raise FileNotFoundError("plot requires --mesh")
    os.makedirs(args.out, exist_ok=True)
    mesh = load_mesh(resolved["mesh"])
    kind = resolved["kind"]
    resolution = int(resolved["resolution"])

    if kind in ("field", "spectrum"):
        if not resolved["values"]:
            raise FileNotFoundError(f"plot --kind {kind} requires --values")
        with open(resolved["values"]) as f:
            payload = json.load(f)
        sigma = np.asarray(payload["sigma"], dtype=float)
        raster = rasterize(mesh, sigma, resolution)
        if kind == "field":
            _save_raster_figure(
                raster.values, raster.mask,
                os.path.join(args.out, "field.png"), os.path.join(args.out, "field.csv"),
                "conductivity",
            )
        else:
            spec, radii, profile = spectrum_export(raster)
            _save_raster_figure(
                np.log10(spec + 1e-12), np.ones_like(spec, dtype=bool),
                os.path.join(args.out, "spectrum.png"), os.path.join(args.out, "spectrum.csv"),
                "log10 |F|",
            )
            write_csv(os.path.join(args.out, "spectrum_radial.csv"), ["radius", "magnitude"],
                      [[int(r), float(p)] for r, p in zip(radii, profile)])
    elif kind == "levels":
        lmap = default_level_map(mesh)
        lmap.save(os.path.join(args.out, "levelmap.json"))
        raster = rasterize(mesh, lmap.level, resolution)
        _save_raster_figure(
            raster.values, raster.mask,
            os.path.join(args.out, "levels.png"), os.path.join(args.out, "levels.csv"),
            "encoding level",
        )
    elif kind == "sensitivity":
        if not resolved["measurements"]:
            raise FileNotFoundError("plot --kind sensitivity requires --measurements")
        meas = load_measurement(resolved["measurements"])
        config = ReconConfig.from_dict(
            {**ReconConfig().to_dict(), "method": resolved["method"], "seed": int(resolved["seed"])}
        )
        smap = initial_sensitivity_map(mesh, meas, config)
        raster = rasterize(mesh, smap, resolution)
        _save_raster_figure(
            raster.values, raster.mask,
            os.path.join(args.out, "sensitivity.png"), os.path.join(args.out, "sensitivity.csv"),
            f"initial coordinate sensitivity ({resolved['method']})",
        )
    else:
        raise ValueError(f"unknown plot kind '{kind}'")
    write_json(os.path.join(args.out, "config.json"), resolved)
    print(f"plot[{kind}] -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eitkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config (snapshot) to resolve parameters from")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("mesh", help="generate a disk mesh with electrodes")
    add_common(p)
    p.add_argument("--target-nodes", dest="target_nodes", type=int)
    p.add_argument("--electrodes", dest="n_electrodes", type=int)
    p.add_argument("--coverage", dest="electrode_coverage", type=float)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("simulate", help="phantom + forward data generation")
    add_common(p)
    p.add_argument("--case")
    p.add_argument("--distance", type=float)
    p.add_argument("--snr", dest="snr_db")
    p.add_argument("--fine-nodes", dest="fine_nodes", type=int)
    p.add_argument("--coarse-nodes", dest="coarse_nodes", type=int)
    p.add_argument("--injections", dest="n_injections", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recon", help="run one reconstruction")
    add_common(p)
    p.add_argument("--method")
    p.add_argument("--mesh")
    p.add_argument("--measurements")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="rasterize and score a finished run")
    add_common(p)
    p.add_argument("--run", help="recon output directory")
    p.add_argument("--truth", help="simulate output directory")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-distance", help="two-triangle distance sweep")
    add_common(p)
    p.add_argument("--methods")
    p.add_argument("--seeds")
    p.add_argument("--distances")
    p.add_argument("--iters", type=int)
    p.add_argument("--fine-nodes", dest="fine_nodes", type=int)
    p.add_argument("--coarse-nodes", dest="coarse_nodes", type=int)
    p.add_argument("--snr", dest="snr_db")
    p.set_defaults(func=cmd_sweep_distance)

    p = sub.add_parser("sweep-mesh", help="node-density sweep")
    add_common(p)
    p.add_argument("--methods")
    p.add_argument("--seeds")
    p.add_argument("--node-counts", dest="node_counts")
    p.add_argument("--case")
    p.add_argument("--sim-nodes", dest="sim_nodes", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_sweep_mesh)

    p = sub.add_parser("plot", help="figures (PNG) with CSV siblings")
    add_common(p)
    p.add_argument("--kind")
    p.add_argument("--mesh")
    p.add_argument("--values")
    p.add_argument("--measurements")
    p.add_argument("--method")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON input: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
