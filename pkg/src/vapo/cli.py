"""Command-line interface: ``vapo {train,sample,interpolate,eval,verify}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os


def _apply_thread_cap():
    # must run before numpy loads its BLAS
    n = os.environ.get("VAPO_THREADS", "0").strip()
    if n.isdigit() and int(n) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n


_apply_thread_cap()

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import re  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import datasets as ds  # noqa: E402
from . import evaluation as ev  # noqa: E402
from . import ode, trainer, verify  # noqa: E402
from .homotopy import HomotopyParams  # noqa: E402
from .potential import init, load_checkpoint, save_checkpoint  # noqa: E402

log = logging.getLogger("vapo")

MANIFEST = "manifest.json"
LOG_HEADER = "step,cov,gradsq,l2,total,grad_norm,wall_ms"
_CKPT_RE = re.compile(r"^step_(\d+)\.vapo$")


class UsageError(Exception):
    pass


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# run context shared by commands that read a checkpoint


class RunContext:
    """A checkpoint plus what its training manifest says about data space."""

    def __init__(self, ckpt):
        ckpt = Path(ckpt)
        if not ckpt.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        self.ckpt = ckpt
        self.model = load_checkpoint(ckpt)
        mpath = ckpt.parent / MANIFEST
        self.manifest = read_json(mpath) if mpath.is_file() else {}
        cfg = self.manifest.get("config", {})
        std = self.manifest.get("standardization")
        self.mean = None if not std else np.array(std["mean"], dtype=np.float64)
        self.scale = None if not std else np.array(std["scale"], dtype=np.float64)
        self.params = HomotopyParams(omega=cfg.get("omega", 1.0), sigma=cfg.get("sigma", 0.01),
                                     eps_sharp=cfg.get("eps_sharp", 1e-4), dim=self.model.dim)

    def to_data(self, z):
        return z if self.mean is None else z * self.scale + self.mean

    def to_model(self, x):
        return x if self.mean is None else (x - self.mean) / self.scale

    def train_points(self):
        name = self.manifest.get("train_data")
        if not name:
            return None
        return ds.read_matrix(self.ckpt.parent / name)


def ode_config(args):
    return ode.OdeConfig(t_end=args.t_end, rtol=args.rtol, atol=args.atol, method=args.method,
                         fixed_step=args.fixed_step, max_steps=args.max_steps)


def write_points(points, path, extra_columns=None):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        ds.write_csv(points, path, dim=points.shape[1], extra_columns=extra_columns)
    else:
        ds.save_matrix(points, path)


# --------------------------------------------------------------------------
# train


def _latest_checkpoint(out: Path):
    best = None
    for p in out.iterdir():
        m = _CKPT_RE.match(p.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), p)
    return best


def cmd_train(args):
    cfg = trainer.TrainConfig()
    if args.config:
        cfg = trainer.parse_config(Path(args.config).read_text(encoding="utf-8"))
    out = Path(args.out)
    if args.toy:
        data = ds.make_toy(args.toy, cfg.n_data, cfg.seed)
        source = {"toy": args.toy, "n": cfg.n_data, "seed": cfg.seed}
    else:
        data = ds.load_points(args.data)
        source = {"path": str(args.data), "sha256": sha256(args.data)}
    if cfg.standardize:
        data = ds.standardize(data)
    dim = data.dim
    config = cfg.to_dict()

    out.mkdir(parents=True, exist_ok=True)
    mpath = out / MANIFEST
    start = None
    if mpath.is_file():
        old = read_json(mpath)
        if old.get("seed") != cfg.seed:
            raise RuntimeError(f"refusing to resume: {mpath} has seed {old.get('seed')}, "
                               f"config has seed {cfg.seed}")
        old_cfg = dict(old.get("config", {}))
        new_cfg = dict(config)
        old_cfg.pop("steps", None)
        new_cfg.pop("steps", None)
        if old_cfg != new_cfg or old.get("data") != source:
            raise RuntimeError(f"refusing to resume: configuration or data differ from {mpath}")
        latest = _latest_checkpoint(out)
        if latest is not None:
            step, path = latest
            opt_path = out / f"step_{step}.optim.npy"
            if not opt_path.is_file():
                raise RuntimeError(f"cannot resume: optimizer state {opt_path} missing")
            model = load_checkpoint(path)
            opt = trainer.OptimizerState.from_arrays(cfg.optimizer, step, np.load(opt_path))
            start = trainer.TrainState(model, opt, step)
            log.info("resuming from %s", path)

    train_name = "train_data.vapd"
    ds.save_matrix(data.raw_points(), out / train_name)
    (out / "config.txt").write_text(trainer.format_config(cfg), encoding="utf-8")

    # key 3: [seed, 0] would alias the plain-seed stream used for data and prior draws
    model = start.model if start else init(cfg.layer_sizes(dim), np.random.default_rng([cfg.seed, 3]),
                                           cfg.activation)
    log_path = out / "train.csv"
    if start is None or not log_path.is_file():
        log_path.write_text(LOG_HEADER + "\n", encoding="utf-8")
    fh = open(log_path, "a", encoding="utf-8")

    def on_step(rec):
        lb = rec.loss
        fh.write(",".join([str(rec.step)] + [ds.format_float(v) for v in (
            lb.cov_term, lb.gradsq_term, lb.l2_term, lb.total, rec.grad_norm)]
            + [f"{rec.wall_ms:.3f}"]) + "\n")
        if rec.step % max(1, cfg.checkpoint_every) == 0:
            log.info("step %d total %.6g", rec.step, lb.total)

    def on_checkpoint(step, m, opt):
        save_checkpoint(m, out / f"step_{step}.vapo")
        np.save(out / f"step_{step}.optim.npy", opt.arrays())

    def manifest(final_step, status):
        ckpts = sorted((p for p in out.iterdir() if _CKPT_RE.match(p.name)),
                       key=lambda p: int(_CKPT_RE.match(p.name).group(1)))
        artifacts = {p.name: sha256(p) for p in ckpts}
        artifacts[train_name] = sha256(out / train_name)
        artifacts["config.txt"] = sha256(out / "config.txt")
        write_json(mpath, {
            "command": "train",
            "version": __version__,
            "seed": cfg.seed,
            "config": config,
            "data": source,
            "dim": dim,
            "layer_sizes": cfg.layer_sizes(dim),
            "standardization": None if not data.standardized else {
                "mean": data.mean.tolist(), "scale": data.scale.tolist()},
            "train_data": train_name,
            "final_step": final_step,
            "final_checkpoint": f"step_{final_step}.vapo" if final_step else None,
            "status": status,
            "artifacts": artifacts,
        })

    if start is None and cfg.steps == 0:
        save_checkpoint(model, out / "step_0.vapo")
    try:
        final, _ = trainer.train(data.points, model, cfg, on_step=on_step,
                                 on_checkpoint=on_checkpoint, start=start)
    except trainer.TrainingError as exc:
        fh.close()
        latest = _latest_checkpoint(out)
        manifest(latest[0] if latest else 0, f"aborted: {exc}")
        raise
    fh.close()
    final_step = max(cfg.steps, start.step if start else 0)
    if start is not None and start.step >= cfg.steps:
        final_step = start.step
    manifest(final_step, "complete")
    print(out / f"step_{final_step}.vapo")
    return 0


# --------------------------------------------------------------------------
# sample / interpolate


def _sample_manifest(path, args, ctx, extra):
    write_json(Path(str(path) + ".manifest.json"), {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "checkpoint": {"path": str(ctx.ckpt), "sha256": sha256(ctx.ckpt)},
        "ode": {"t_end": args.t_end, "rtol": args.rtol, "atol": args.atol, "method": args.method,
                "fixed_step": args.fixed_step, "max_steps": args.max_steps},
        "omega": ctx.params.omega,
        **extra,
        "artifacts": {Path(path).name: sha256(path)},
    })


def cmd_sample(args):
    ctx = RunContext(args.ckpt)
    out = Path(args.out)
    if args.n == 0 and out.suffix.lower() != ".csv":
        raise UsageError("--n 0 is only supported for CSV output")
    X = ode.sample(ctx.model, args.n, ctx.params, ode_config(args), rng=args.seed)
    write_points(ctx.to_data(X), out)
    _sample_manifest(out, args, ctx, {"n": args.n})
    return 0


def cmd_interpolate(args):
    ctx = RunContext(args.ckpt)
    out = Path(args.out)
    # pair p uses rows 2p and 2p+1 of the seed's prior draws, as `sample --n 2K` would
    seeds = ode.prior_draws(ctx.params, 2 * args.pairs, args.seed)
    cfg = ode_config(args)
    paths = [ode.slerp_path(seeds[2 * p], seeds[2 * p + 1], args.points) for p in range(args.pairs)]
    X, _ = ode.integrate_batch(ctx.model, np.concatenate(paths), cfg)
    pair = np.repeat(np.arange(args.pairs), args.points)
    step = np.tile(np.arange(args.points), args.pairs)
    write_points(ctx.to_data(X), out, extra_columns={"pair": pair, "step": step})
    _sample_manifest(out, args, ctx, {"pairs": args.pairs, "points": args.points})
    return 0


# --------------------------------------------------------------------------
# eval


def _heldout(spec, ctx, n, seed):
    if spec in ds.TOYS:
        d = ds.make_toy(spec, n, seed)
        return d.points, d.meta.get("mode_centers"), d.meta.get("mode_std")
    d = ds.load_points(spec)
    return d.points, None, None


def write_histogram(path, edges, counts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{ds.format_float(lo)},{ds.format_float(hi)},{int(c)}\n")


def cmd_eval(args):
    ctx = RunContext(args.ckpt)
    heldout, centers, mode_std = _heldout(args.data, ctx, args.n_heldout, args.seed + 1)
    if heldout.shape[1] != ctx.model.dim:
        raise ValueError(f"data dimension {heldout.shape[1]} does not match model dimension "
                         f"{ctx.model.dim}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = ev.full_report(ctx.model, ctx.to_model, ctx.to_data, ctx.params, heldout,
                            train_points=ctx.train_points(), mode_centers=centers,
                            capture_radius=3 * mode_std if mode_std else args.capture_radius,
                            n_samples=args.n_samples, seed=args.seed, cfg=ode_config(args))
    hist_files = {}
    for key, (edges, counts) in result.pop("histograms").items():
        name = f"energy_hist_{key}.csv"
        write_histogram(out / name, edges, counts)
        hist_files[key] = name
    idx, dist = result.pop("nearest_neighbors")
    with open(out / "nn_audit.csv", "w", encoding="utf-8") as fh:
        k = idx.shape[1]
        fh.write(",".join(["sample"] + [f"nn{j}" for j in range(k)] + [f"dist{j}" for j in range(k)]) + "\n")
        for i in range(len(idx)):
            fh.write(",".join([str(i)] + [str(int(v)) for v in idx[i]]
                              + [ds.format_float(v) for v in dist[i]]) + "\n")
    samples = result.pop("samples")
    write_points(samples, out / "samples.csv")
    cfg = ctx.manifest.get("config", {})
    report = {
        **result,
        "config": {"lambda": cfg.get("lambda"), "eps_sharp": ctx.params.eps_sharp,
                   "omega": ctx.params.omega, "sigma": ctx.params.sigma,
                   "t_end": args.t_end, "seed": args.seed, "n_samples": args.n_samples,
                   "data": args.data, "checkpoint": str(ctx.ckpt), "checkpoint_sha256": sha256(ctx.ckpt)},
        "note": "FID is replaced by MMD, grid KLD and mode coverage for point data",
    }
    write_json(out / "report.json", report)
    artifacts = {p.name: sha256(p) for p in sorted(out.iterdir()) if p.name != MANIFEST}
    write_json(out / MANIFEST, {"command": "eval", "version": __version__, "seed": args.seed,
                                "config": report["config"], "artifacts": artifacts})
    print(json.dumps({k: report[k] for k in ("mmd_rbf", "grid_kld", "mode_coverage", "ood_auroc")}))
    return 0


# --------------------------------------------------------------------------
# verify


def cmd_verify(args):
    ok = True
    for chk in verify.run_suite(args.suite):
        print(chk.line(), flush=True)
        ok &= chk.passed
    print("verify: all checks passed" if ok else "verify: FAILED")
    return 0 if ok else 1


# --------------------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _add_ode_flags(p):
    p.add_argument("--t-end", type=_positive_float, default=1.625)
    p.add_argument("--rtol", type=_positive_float, default=1e-5)
    p.add_argument("--atol", type=_positive_float, default=1e-6)
    p.add_argument("--method", choices=ode.METHODS, default="rk45_adaptive")
    p.add_argument("--fixed-step", type=_positive_float, default=1e-2)
    p.add_argument("--max-steps", type=_positive_int, default=10_000)
    p.add_argument("--seed", type=_nonneg_int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="vapo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a potential on a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CSV or VAPD matrix file")
    src.add_argument("--toy", choices=sorted(ds.TOYS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate samples by integrating the flow")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=_nonneg_int, required=True)
    p.add_argument("--out", required=True)
    _add_ode_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", help="slerp between prior seeds and integrate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", type=_positive_int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_ode_flags(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="metrics, energy histograms, NN audit and OOD AUROC")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="held-out CSV/VAPD file or toy name")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=_positive_int, default=2000)
    p.add_argument("--n-heldout", type=_positive_int, default=2000)
    p.add_argument("--capture-radius", type=_positive_float, default=0.3)
    _add_ode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical oracle suites")
    p.add_argument("--suite", choices=(*verify.SUITES, "all"), default="all")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "interpolate" and args.points < 2:
        parser.error("--points must be at least 2")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"vapo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
