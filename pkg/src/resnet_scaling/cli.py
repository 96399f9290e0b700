"""Command-line entry point: data generation, depth sweeps, diagnostics and
limit verification driven by a flat key=value config.

Exit codes: 0 success, 1 a verification check failed, 2 invalid config or
input, 3 a stage failed at runtime.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import Dataset, embed_mnist, generate_synthetic, read_idx_file, save_dataset
from .diagnostics import Thresholds, diagnose_networks, report_csv
from .limits import ItoSpec, curved_activation, ito_correction_check, strong_error_sweep, tanh_activation
from .resnet import Architecture, CheckpointError, checkpoint_bytes, init_network, load_checkpoint, sgd_train

log = logging.getLogger("resnet_scaling")

OUT_ENV = "RESNET_SCALING_OUT"
EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
ITO_AGREE_Z = 3.0
ITO_DETECT_Z = 5.0

DATASET_FILE = "data/dataset.rsds"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    command: str
    stages: dict = field(default_factory=dict)  # stage -> {"status", "seconds", ...}
    artifacts: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def atomic_write(path: Path, data) -> None:
    """Write via a temp file in the same directory and rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Workspace:
    """Stages write into ``out/.partial``; files move into ``out`` only when
    every stage has finished, so a failed rerun never clobbers good output."""

    def __init__(self, out: Path):
        self.out = out
        self.partial = out / ".partial"
        if self.partial.exists():
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)
        self.files: list[str] = []

    def write(self, rel: str, data) -> Path:
        p = self.partial / rel
        atomic_write(p, data)
        if rel not in self.files:
            self.files.append(rel)
        return p

    def path(self, rel: str) -> Path:
        return self.partial / rel

    def commit(self) -> list[str]:
        for rel in self.files:
            dst = self.out / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.partial / rel, dst)
        shutil.rmtree(self.partial)
        return sorted(self.files)

    def fail(self, err: StageError, manifest: RunManifest) -> None:
        atomic_write(self.partial / "FAILED", f"{err}\n")
        atomic_write(self.partial / "manifest.json", manifest.to_json())


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# stages ---------------------------------------------------------------

def stage_data(cfg: ExperimentConfig, ws: Workspace) -> Dataset:
    if cfg["dataset.kind"] == "synthetic":
        ds = generate_synthetic(cfg["dataset.seed"], cfg["dataset.n"], cfg["dataset.d"], cfg["dataset.k_steps"])
    else:
        images = read_idx_file(cfg["dataset.images"])
        labels = read_idx_file(cfg["dataset.labels"])
        ds = embed_mnist(images, labels, cfg["dataset.seed"], cfg["dataset.d"])
        n = min(cfg["dataset.n"], ds.n)
        ds = Dataset(ds.inputs[:n], ds.targets[:n], dict(ds.provenance, n=n))
    target = ws.path(DATASET_FILE)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, target)
    ws.files.append(DATASET_FILE)
    return ds


def _train_task(args):
    L, seed, activation, delta_mode, width, X, Y, tc = args
    net = init_network(Architecture(L, width, activation, delta_mode), seed)
    net, hist = sgd_train(net, X, Y, tc)
    return L, seed, checkpoint_bytes(net), hist.updates, hist.final_loss, hist.converged


def stage_train(cfg: ExperimentConfig, ws: Workspace, ds: Dataset, workers: int):
    base = cfg["sweep.seed"]
    tasks = [(L, base + s, cfg["model.activation"], cfg["model.delta_mode"], cfg["model.width"],
              ds.inputs, ds.targets, cfg.train_config(base + s))
             for L in cfg.sweep_depths() for s in range(cfg["sweep.seeds"])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_task, tasks))
    else:
        results = [_train_task(t) for t in tasks]
    rows = ["L,seed,updates,final_loss,converged"]
    ckpts = []
    for L, seed, blob, updates, final, conv in results:
        rel = f"checkpoints/L{L:05d}_seed{seed}.rslb"
        ws.write(rel, blob)
        ckpts.append(ws.path(rel))
        rows.append(f"{L},{seed},{updates},{final!r},{int(conv)}")
        log.info("trained L=%d seed=%d: %d updates, loss %.4g", L, seed, updates, final)
    ws.write("train.csv", "\n".join(rows) + "\n")
    return [load_checkpoint(p) for p in ckpts]


def thresholds_from(cfg: ExperimentConfig) -> Thresholds:
    return Thresholds(cfg["diagnostics.h1_increment_slope"], cfg["diagnostics.h1_noise_fraction"],
                      cfg["diagnostics.h2_min_beta"], cfg["diagnostics.bounded_rss_slope"],
                      cfg["diagnostics.sparse_max_slope"])


def write_report(ws: Workspace, report, prefix: str = "report") -> dict:
    summary = report.summary()
    ws.write(f"{prefix}.csv", report_csv(report))
    ws.write(f"{prefix}.json", dump_json(summary))
    return summary


def stage_diagnose(cfg: ExperimentConfig, ws: Workspace, nets, ds: Dataset) -> dict:
    report = diagnose_networks(nets, ds.inputs, ds.targets, thresholds_from(cfg), cfg.window())
    summary = write_report(ws, report)
    log.info("alpha=%.3f beta=%.3f regime=%s", summary["alpha"], summary["weights"]["beta"], summary["regime"])
    return summary


def ito_spec_from(cfg: ExperimentConfig) -> ItoSpec:
    act = curved_activation(cfg["limits.curvature"]) if cfg["limits.activation"] == "curved" else tanh_activation()
    return ItoSpec.constant(
        cfg["limits.d"], Abar=cfg["limits.Abar"], bbar=cfg["limits.bbar"], U_A=cfg["limits.U_A"],
        U_b=cfg["limits.U_b"], q_A=cfg["limits.q_A"], q_b=cfg["limits.q_b"], alpha=cfg["limits.alpha"],
        beta=cfg["limits.beta"], activation=act, label=cfg.section_fingerprint("limits")[:16])


def stage_limits(cfg: ExperimentConfig, ws: Workspace) -> dict:
    spec = ito_spec_from(cfg)
    x0 = np.full(cfg["limits.d"], cfg["limits.x0"])
    table = strong_error_sweep(spec, list(cfg["limits.depths"]), cfg["limits.paths"], x0, cfg["limits.mode"],
                               cfg["limits.seed"], cfg["limits.L_ref"] or None)
    rate = table.rate
    checks = {"rate_in_bounds": bool(cfg["limits.rate_min"] <= rate <= cfg["limits.rate_max"])}
    if cfg["limits.require_monotone"]:
        checks["monotone"] = table.monotone_decreasing()
    result = {"table": table.summary(), "errors": table.errors, "stderrs": table.stderrs,
              "rate_bounds": [cfg["limits.rate_min"], cfg["limits.rate_max"]],
              "spec_fingerprint": cfg.section_fingerprint("limits")}
    ws.write("limits/convergence.csv", table.to_csv())
    if cfg["limits.ito_check"]:
        ito = ito_correction_check(spec, cfg["limits.ito_depth"], cfg["limits.ito_paths"], x0, cfg["limits.seed"])
        zc, zu = ito.z_corrected(), ito.z_uncorrected()
        checks["ito_corrected_agrees"] = zc < ITO_AGREE_Z
        if spec.activation.second_derivative_at_zero != 0:
            checks["ito_uncorrected_detected"] = zu > ITO_DETECT_Z
        result["ito"] = {"L": ito.L, "paths": ito.n_paths, "mean_discrete": ito.mean_discrete,
                         "mean_em": ito.mean_em, "mean_em_without_correction": ito.mean_em_without_correction,
                         "se_discrete": ito.se_discrete, "se_em": ito.se_em,
                         "se_em_without_correction": ito.se_em_without_correction,
                         "z_corrected": zc, "z_uncorrected": zu}
    result["checks"] = checks
    result["passed"] = all(checks.values())
    ws.write("limits/convergence.json", dump_json(result))
    return result


def limits_line(result: dict) -> str:
    lo, hi = result["rate_bounds"]
    status = "PASS" if result["passed"] else "FAIL"
    parts = [f"verify-limits: {status}", f"mode={result['table']['mode']}",
             f"rate={result['table']['rate']:.3f} bounds=[{lo}, {hi}]"]
    if "monotone" in result["checks"]:
        parts.append(f"monotone={result['checks']['monotone']}")
    if "ito" in result:
        parts.append(f"ito z_corrected={result['ito']['z_corrected']:.2f} "
                     f"z_uncorrected={result['ito']['z_uncorrected']:.2f}")
    return " ".join(parts)


# orchestration --------------------------------------------------------

def resolve_out(cfg: ExperimentConfig, out_flag: str | None) -> Path:
    return Path(out_flag or os.environ.get(OUT_ENV) or cfg["output.dir"])


def execute(cfg: ExperimentConfig, out: Path, stages, workers: int = 1, command: str = "run") -> tuple[int, RunManifest]:
    manifest = RunManifest(cfg.fingerprint(), __version__, command, started=_now())
    ws = Workspace(out)
    ws.write("config.cfg", cfg.serialize())
    ds = nets = None
    code = EXIT_OK
    for stage in stages:
        t0 = time.perf_counter()
        try:
            if stage == "data":
                ds = stage_data(cfg, ws)
                info = {"n": ds.n, "d": ds.d}
            elif stage == "train":
                nets = stage_train(cfg, ws, ds, workers)
                info = {"networks": len(nets)}
            elif stage == "diagnose":
                s = stage_diagnose(cfg, ws, nets, ds)
                info = {"alpha": s["alpha"], "beta": s["weights"]["beta"], "regime": s["regime"]}
            else:
                res = stage_limits(cfg, ws)
                info = {"rate": res["table"]["rate"], "passed": res["passed"]}
                print(limits_line(res))
                if not res["passed"]:
                    code = EXIT_CHECK
        except Exception as exc:  # noqa: BLE001 - reported with stage name
            err = StageError(stage, exc)
            manifest.stages[stage] = {"status": "failed", "seconds": time.perf_counter() - t0, "error": str(err)}
            manifest.status = "failed"
            manifest.finished = _now()
            manifest.artifacts = sorted(ws.files)
            ws.fail(err, manifest)
            log.error("%s", err)
            return EXIT_RUNTIME, manifest
        manifest.stages[stage] = dict(status="ok", seconds=time.perf_counter() - t0, **_jsonable(info))
    manifest.artifacts = ws.commit()
    manifest.status = "ok" if code == EXIT_OK else "check_failed"
    manifest.finished = _now()
    atomic_write(out / "manifest.json", manifest.to_json())
    return code, manifest


def run_diagnose(pattern: str, out: Path, thresholds: Thresholds = Thresholds(), window=None) -> tuple[int, dict]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ConfigError("checkpoints", f"no files match {pattern!r}")
    nets = [load_checkpoint(p) for p in paths]
    report = diagnose_networks(nets, thresholds=thresholds, window=window)
    ws = Workspace(out)
    summary = write_report(ws, report)
    manifest = RunManifest("", __version__, "diagnose", started=_now())
    manifest.stages["diagnose"] = {"status": "ok", "checkpoints": len(paths), "regime": summary["regime"]}
    manifest.artifacts = ws.commit()
    manifest.status = "ok"
    manifest.finished = _now()
    atomic_write(out / "manifest.json", manifest.to_json())
    return EXIT_OK, summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="resnet-scaling",
        description="Depth-scaling experiments for residual networks.",
        epilog=(f"Environment: {OUT_ENV} overrides the output directory from the config "
                "(the --out flag overrides both). Exit codes: 0 ok, 1 verification check failed, "
                "2 invalid config or input, 3 runtime failure. Bundled configs: quickstart, ode, sde."),
    )
    p.add_argument("--quiet", action="store_true", help="only print errors and result lines")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="config file or bundled preset name")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then output.dir)")
        sp.add_argument("--seed", type=int, help="override the dataset, sweep and limits seeds")
        sp.add_argument("--workers", type=int, default=1, help="parallel training processes")
        sp.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    common(sub.add_parser("run", help="run the stages listed in run.stages"))
    common(sub.add_parser("gen-data", help="generate or ingest the dataset only"))
    common(sub.add_parser("verify-limits", help="strong-error sweep and Itô check from the limits section"))
    d = sub.add_parser("diagnose", help="scaling diagnostics from saved checkpoints")
    d.add_argument("checkpoints", help="glob matching checkpoint files (quote it)")
    common(d, config_required=False)
    return p


def _stages_for(command: str, cfg: ExperimentConfig) -> tuple:
    if command == "gen-data":
        return ("data",)
    if command == "verify-limits":
        return ("limits",)
    return cfg.stages


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "diagnose":
            # only the diagnostics and output keys matter here
            cfg = load_config(args.config) if args.config else ExperimentConfig({"run.stages": ("data",)})
            code, summary = run_diagnose(args.checkpoints, resolve_out(cfg, args.out), thresholds_from(cfg),
                                         cfg.window())
            print(f"diagnose: alpha={summary['alpha']:.3f} beta={summary['weights']['beta']:.3f} "
                  f"regime={summary['regime']}")
            return code
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        stages = _stages_for(args.command, cfg)
        cfg = cfg.replace(run__stages=stages)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # mixed architectures, too few depths
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = resolve_out(cfg, args.out)
    code, manifest = execute(cfg, out, stages, args.workers, args.command)
    if manifest.status == "failed":
        print(f"error: see {out / '.partial' / 'FAILED'}", file=sys.stderr)
    elif not args.quiet:
        print(f"wrote {len(manifest.artifacts)} artifacts to {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
