"""Command line: ``tvic {denoise,learn,synth,exact1d,sweep}``.

Every option can also come from a ``key=value`` file passed with
``--config``; flags given on the command line win. Exit codes: 0 success,
2 I/O error, 3 invalid configuration, 4 solver breakdown.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import exact1d as ex
from ._validation import check_count, check_scalar
from .bilevel import BfgsConfig, CostSpec, learn_parameters, write_iteration_csv
from .denoise import SolverBreakdown, SolverConfig, lower_level_energy, solve_lower_level
from .experiment import (
    NoiseSpec,
    add_noise,
    asymptotic_sweep,
    blocks_image,
    camera_image,
    psnr,
    ssim,
    theta_sweep,
    write_sweep_csv,
    write_theta_csv,
)
from .fidelity import DEFAULT_BOX, FidelityParams, SmoothingParams
from .grid import ImageGrid
from .io import ImageIOError, read_config, read_image, write_image, write_png, write_raw

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_BREAKDOWN = 0, 2, 3, 4
COMMANDS = ("denoise", "learn", "synth", "exact1d", "sweep")
BUILTIN_PREFIX = "builtin:"

logger = logging.getLogger("tvic")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _cost_kind(text: str) -> str:
    kind = str(text).lower()
    if kind not in ("l2", "huber"):
        raise ConfigError(f"cost must be l2 or huber, got {text!r}")
    return kind


def _mode(text: str) -> str:
    mode = str(text).lower()
    if mode not in ("theta", "vanish", "median", "mean"):
        raise ConfigError(f"sweep mode must be theta, vanish, median or mean, got {text!r}")
    return mode


# name -> (type, default, help)
OPTIONS: dict[str, tuple] = {
    "input": (str, None, "input image (PNG, PGM, .raw) or builtin:camera / builtin:blocks"),
    "train": (str, None, "clean training / reference image"),
    "output_dir": (str, ".", "directory for results"),
    "lambda1": (float, 1.0, "L1 weight"),
    "lambda2": (float, 1.0, "L2 weight"),
    "epsilon": (float, 1e-10, "elliptic regularization"),
    "gamma": (float, 1e3, "Huber smoothing parameter"),
    "tol": (float, 1e-6, "lower-level tolerance"),
    "max_iter": (int, 35, "lower-level iteration cap"),
    "eta": (float, 1e-4, "Armijo parameter of the outer line search"),
    "tol_outer": (float, 1e-6, "outer stopping tolerance"),
    "max_outer": (int, 60, "outer iteration cap"),
    "cost": (_cost_kind, "l2", "upper-level cost: l2 or huber"),
    "sigma2": (float, 0.005, "Gaussian noise variance"),
    "density": (float, 0.1, "salt-and-pepper density"),
    "theta": (float, None, "mixing weight: variance theta*sigma2, density (1-theta)*density"),
    "thetas": (_floats, "0,0.25,0.5,0.75,1", "theta values for the sweep"),
    "seed": (int, 0, "random seed"),
    "box_l1": (float, DEFAULT_BOX[0], "upper bound for lambda1"),
    "box_l2": (float, DEFAULT_BOX[1], "upper bound for lambda2"),
    "initial_lambda": (_floats, "1,1", "starting weights for learning"),
    "size": (int, 128, "side length for builtin images"),
    "height": (float, 1.0, "step height h (exact1d)"),
    "half_width": (float, 1.0, "step half width L (exact1d)"),
    "samples": (int, 1024, "number of 1D samples (exact1d)"),
    "lattice_max": (float, 10.0, "largest weight in the regime lattice (exact1d)"),
    "lattice_n": (int, 100, "points per axis in the regime lattice (exact1d)"),
    "mode": (_mode, "theta", "sweep kind: theta, vanish, median or mean"),
    "steps": (int, 5, "number of schedule steps (asymptotic sweeps)"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, (_, default, text) in OPTIONS.items():
        hint = f" (default {default})" if default is not None else ""
        # keep raw strings; conversion happens after merging with the config file
        common.add_argument("--" + name.replace("_", "-"), dest=name, default=None, help=text + hint)
    parser = _Parser(prog="tvic", description="TV denoising with an L1-L2 infimal-convolution fidelity.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "denoise": "denoise one image at fixed weights",
        "learn": "learn the weights from a noisy/clean pair",
        "synth": "add Gaussian and salt-and-pepper noise",
        "exact1d": "closed-form 1D step solutions and the regime diagram",
        "sweep": "theta sweep or asymptotic parameter sweeps",
    }
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common], help=helps[cmd])
    return parser


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def out(self) -> Path:
        return Path(self.values["output_dir"])

    def fidelity(self) -> FidelityParams:
        return FidelityParams(self.lambda1, self.lambda2, self.box_l1, self.box_l2)

    def smoothing(self) -> SmoothingParams:
        return SmoothingParams(self.epsilon, self.gamma)

    def solver(self) -> SolverConfig:
        return SolverConfig(tol=self.tol, max_iter=self.max_iter)

    def bfgs(self) -> BfgsConfig:
        lam = tuple(self.initial_lambda)
        if len(lam) != 2:
            raise ConfigError("initial-lambda needs two values")
        return BfgsConfig(eta_armijo=self.eta, tol_outer=self.tol_outer, max_outer=self.max_outer,
                          initial_lambda=lam, box=(self.box_l1, self.box_l2))

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma2, self.density, self.theta, self.seed)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and flags; convert and validate values."""
    file_values = read_config(args.config) if args.config else {}
    unknown = set(file_values) - set(OPTIONS) - {"command"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values = {}
    for name, (conv, default, _) in OPTIONS.items():
        raw = getattr(args, name)
        if raw is None:
            raw = file_values.get(name, default)
        if raw is None:
            values[name] = None
            continue
        try:
            values[name] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc
    _validate(values)
    return RunConfig(args.command, values)


def _validate(v: dict) -> None:
    check_scalar(v["epsilon"], "epsilon", lo=0.0)
    check_scalar(v["gamma"], "gamma", lo=0.5, lo_open=True)
    check_scalar(v["tol"], "tol", lo=0.0, lo_open=True)
    check_scalar(v["tol_outer"], "tol-outer", lo=0.0, lo_open=True)
    check_scalar(v["eta"], "eta", lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    check_scalar(v["box_l1"], "box-l1", lo=0.0, lo_open=True)
    check_scalar(v["box_l2"], "box-l2", lo=0.0, lo_open=True)
    check_scalar(v["lambda1"], "lambda1", lo=0.0, hi=v["box_l1"])
    check_scalar(v["lambda2"], "lambda2", lo=0.0, hi=v["box_l2"])
    check_scalar(v["sigma2"], "sigma2", lo=0.0)
    check_scalar(v["density"], "density", lo=0.0, hi=1.0)
    if v["theta"] is not None:
        check_scalar(v["theta"], "theta", lo=0.0, hi=1.0)
    for t in v["thetas"]:
        check_scalar(t, "thetas", lo=0.0, hi=1.0)
    for name in ("max_iter", "max_outer", "size", "steps", "lattice_n"):
        check_count(v[name], name.replace("_", "-"))
    check_count(v["samples"], "samples", minimum=4)
    check_scalar(v["height"], "height", lo=0.0, lo_open=True)
    check_scalar(v["half_width"], "half-width", lo=0.0, lo_open=True)
    check_scalar(v["lattice_max"], "lattice-max", lo=0.0, lo_open=True)


def _load(spec: str | None, what: str, size: int, required: bool = True) -> ImageGrid | None:
    if spec is None:
        if required:
            raise ConfigError(f"--{what} is required")
        return None
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        if name == "camera":
            return camera_image(size)
        if name == "blocks":
            return blocks_image(size)
        raise ConfigError(f"unknown builtin image {name!r}")
    return read_image(spec)


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _dump(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _quality(u: ImageGrid, f: ImageGrid, ref: ImageGrid | None) -> dict:
    if ref is None:
        return {}
    return {"psnr_input": psnr(f, ref), "psnr_output": psnr(u, ref),
            "ssim_input": ssim(f, ref), "ssim_output": ssim(u, ref)}


def cmd_denoise(cfg: RunConfig) -> int:
    params, smoothing, solver = cfg.fidelity(), cfg.smoothing(), cfg.solver()
    f = _load(cfg.input, "input", cfg.size)
    ref = _load(cfg.train, "train", cfg.size, required=False)
    if ref is not None and ref.shape != f.shape:
        raise ConfigError(f"reference shape {ref.shape} differs from input {f.shape}")
    out = _prepare_output(cfg)
    state = solve_lower_level(f, params, smoothing, solver)
    write_image(out / "u.png", state.u)
    # v is signed: the PNG shows (v + 1) / 2, the raw sidecar keeps exact values
    write_png(out / "v.png", state.v.like((state.v.data + 1.0) / 2.0))
    write_raw(out / "v.raw", state.v)
    summary = {
        "lambda1": params.lambda1, "lambda2": params.lambda2,
        "energy": lower_level_energy(state, f, params, smoothing),
        "iterations": state.iterations, "converged": state.converged,
        "stop_reason": state.stop_reason, "residual_norm": state.residual_norm,
        **_quality(state.u, f, ref),
    }
    _dump(out / "summary.json", summary)
    return EXIT_OK


def cmd_learn(cfg: RunConfig) -> int:
    smoothing, solver, bfgs = cfg.smoothing(), cfg.solver(), cfg.bfgs()
    f = _load(cfg.input, "input", cfg.size)
    clean = _load(cfg.train, "train", cfg.size)
    if clean.shape != f.shape:
        raise ConfigError(f"training image shape {clean.shape} differs from input {f.shape}")
    clean = ImageGrid(clean.data, f.mesh_h)
    out = _prepare_output(cfg)
    res = learn_parameters(f, CostSpec(cfg.cost, clean, gamma=cfg.gamma), smoothing, bfgs, solver)
    write_iteration_csv(res, out / "iterations.csv")
    write_image(out / "u.png", res.final_state.u)
    _dump(out / "learn.json", {
        "lambda1": res.lambda_opt[0], "lambda2": res.lambda_opt[1],
        "converged": res.converged, "line_search_failed": res.line_search_failed,
        "iterations": res.iterations, "cost": res.cost_history[-1], "gradient": res.gradient,
        "lower_multipliers": res.multipliers, "upper_multipliers": res.upper_multipliers,
        "cost_history": res.cost_history, **_quality(res.final_state.u, f, clean),
    })
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    noise = cfg.noise()
    clean = _load(cfg.input, "input", cfg.size)
    out = _prepare_output(cfg)
    noisy = add_noise(clean, noise)
    write_image(out / "noisy.png", noisy)
    write_image(out / "clean.png", clean)
    _dump(out / "synth.json", {"variance": noise.variance, "density": noise.density, "seed": noise.seed,
                               "psnr": psnr(noisy, clean), "ssim": ssim(noisy, clean)})
    return EXIT_OK


def cmd_exact1d(cfg: RunConfig) -> int:
    step = ex.StepSignal(cfg.half_width, cfg.height, cfg.samples)
    params = FidelityParams(cfg.lambda1, cfg.lambda2, cfg.box_l1, cfg.box_l2)
    if not (params.lambda1 > 0 and params.lambda2 > 0):
        raise ConfigError("exact1d needs positive lambda1 and lambda2")
    smoothing, solver = cfg.smoothing(), cfg.solver()
    out = _prepare_output(cfg)
    lattice = np.linspace(cfg.lattice_max / cfg.lattice_n, cfg.lattice_max, cfg.lattice_n)
    ex.write_regime_csv(out / "regime_diagram.csv", step, lattice, lattice)
    regime = ex.classify_regime(step, params)
    summary = {"regime": regime.name, "regime_code": int(regime)}
    state = solve_lower_level(step.grid(), params, smoothing, solver)
    u_num = state.u.data.ravel()
    rep_num = ex.verify_optimality(u_num, step, params)
    summary["solver"] = {"iterations": state.iterations, "converged": state.converged,
                         "optimality_passed": rep_num.passed, "worst_violation": rep_num.worst_violation}
    columns = [step.centers, step.values(), u_num]
    header = "x,f,u_solver"
    if regime is not ex.Regime.AMBIGUOUS:
        sol = ex.exact_solution(step, params)
        rep = ex.verify_optimality(sol.representative, step, params)
        member, boundary = sol.contains(u_num, tol=1e-2)
        summary.update({
            "family_params": {k: list(v) for k, v in sol.family_params.items()},
            "exact_optimality_passed": rep.passed, "exact_worst_violation": rep.worst_violation,
            "linf_error": float(np.max(np.abs(u_num - sol.representative))),
            "solver_in_family": member, "on_family_boundary": boundary,
        })
        columns.append(sol.representative)
        header += ",u_exact"
    try:
        np.savetxt(out / "exact1d.csv", np.column_stack(columns), delimiter=",", header=header, comments="")
    except OSError as exc:
        raise ImageIOError(f"cannot write exact1d.csv: {exc}") from exc
    _dump(out / "exact1d.json", summary)
    return EXIT_OK


def _schedule(mode: str, steps: int, lambda1: float, lambda2: float) -> list[tuple[float, float]]:
    ks = range(steps)
    if mode == "vanish":
        return [(10.0**k, lambda2) for k in ks]
    ts = [10.0**-k for k in ks]
    if mode == "median":
        return [(t, t**0.5) for t in ts]
    return [(t**0.5, t) for t in ts]


def cmd_sweep(cfg: RunConfig) -> int:
    smoothing, solver = cfg.smoothing(), cfg.solver()
    if cfg.mode == "theta":
        bfgs = cfg.bfgs()
        clean = _load(cfg.input or "builtin:camera", "input", cfg.size)
        out = _prepare_output(cfg)
        rows = theta_sweep(clean, cfg.sigma2, cfg.density, cfg.thetas, cfg.cost, bfgs, smoothing, solver, cfg.seed)
        write_theta_csv(rows, out / "theta_sweep.csv")
        return EXIT_OK
    f = _load(cfg.input or "builtin:blocks", "input", cfg.size)
    out = _prepare_output(cfg)
    rows = asymptotic_sweep(f, _schedule(cfg.mode, cfg.steps, cfg.lambda1, cfg.lambda2), smoothing, solver)
    write_sweep_csv(rows, out / f"asymptotic_{cfg.mode}.csv")
    return EXIT_OK


HANDLERS = {"denoise": cmd_denoise, "learn": cmd_learn, "synth": cmd_synth,
            "exact1d": cmd_exact1d, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"tvic: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[cfg.command](cfg)
    except (ImageIOError, FileNotFoundError, PermissionError) as exc:
        print(f"tvic: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverBreakdown as exc:
        print(f"tvic: solver breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    except (ValueError, TypeError) as exc:
        print(f"tvic: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
