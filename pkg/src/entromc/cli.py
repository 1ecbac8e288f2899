"""Command-line front end.

Subcommands: train (fit a proposal, write checkpoint + log), eval (ESS and
bias protocol on a checkpoint), baseline (classical kernel with step-size
tuning), ablate (train the flow variants side by side), ess (estimator on
existing trace CSVs). Every run writes a directory holding the resolved
config, a run manifest with content hashes, the delimited outputs, and
rendered figures — enough to re-run the experiment bit for bit.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint as checkpoint_mod
from . import config as config_mod
from . import diagnostics, figures, kernels
from .training import train


def _fail(msg):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(2)


def _add_common(p):
    p.add_argument("--preset", help="named preset shipped with the package")
    p.add_argument("--config", dest="config_path", metavar="FILE",
                   help="INI config file (applied after the preset)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="run directory (default: runs/<name>)")
    p.add_argument("--workers", type=int, default=1,
                   help="chain groups evaluated in parallel threads")
    p.add_argument("--data-dir", default="data",
                   help="directory holding the classification CSVs")
    p.add_argument("--quiet", action="store_true")


def _load_cfg(args, extra=()):
    try:
        cfg = config_mod.load_config(preset=args.preset,
                                     path=args.config_path,
                                     overrides=list(extra)
                                     + list(args.overrides))
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        return cfg
    except (ValueError, OSError) as e:
        _fail(e)


def _build_target(args, cfg):
    try:
        return config_mod.build_target(cfg, data_dir=args.data_dir)
    except (ValueError, OSError) as e:
        _fail(e)


def _run_dir(args, cfg, kind):
    out = args.out or cfg.get("run", "out")
    if out is None:
        tag = args.preset or "config"
        out = os.path.join("runs", f"{kind}-{tag}-seed{cfg.get('run', 'seed')}")
    os.makedirs(os.path.join(out, "figures"), exist_ok=True)
    with open(os.path.join(out, "resolved_config.ini"), "w") as fh:
        fh.write(cfg.resolved_ini())
    return out


def _write_manifest(out, payload):
    path = os.path.join(out, "run.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_chain_csvs(out, result):
    """One CSV per chain: step, accept (probability), energy, recorded
    coordinates labeled by their dimension index."""
    chain_dir = os.path.join(out, "chains")
    os.makedirs(chain_dir, exist_ok=True)
    dims = result.record_dims
    header = "step,accept,energy," + ",".join(f"x{j}" for j in dims)
    steps = result.warmup + np.arange(result.trace.shape[1]) * result.thin
    paths = []
    for i in range(result.trace.shape[0]):
        body = np.column_stack([steps, result.accept_trace[i],
                                result.energy_trace[i], result.trace[i]])
        path = os.path.join(chain_dir, f"chain_{i}.csv")
        np.savetxt(path, body, delimiter=",", header=header, comments="",
                   fmt="%.10g")
        paths.append(path)
    return paths


def _emit_ess_outputs(args, cfg, out, target, report, extra):
    _write_chain_csvs(out, report.chain_result)
    with open(os.path.join(out, "ess_report.json"), "w") as fh:
        fh.write(report.to_json(**extra))
        fh.write("\n")
    sigma = getattr(target, "sigma", None)
    dims = report.chain_result.record_dims
    if 0 in dims:
        k = dims.index(0)
        figures.trace_figure(report.chain_result.trace[:, :, k],
                             os.path.join(out, "figures", "trace_x0.png"),
                             sigma=sigma)
    if not args.quiet:
        per_grad = report.ess_per_grad
        print(f"min ESS {report.min_ess:.1f} over dim {report.argmin_dim} "
              f"(T={report.t_len}, {report.n_chains} chains)")
        print(f"ESS/MH {report.ess_per_mh:.4g}"
              + (f"   ESS/grad {per_grad:.4g}" if per_grad is not None
                 else "   (no gradient evaluations)")
              + f"   ESS/5k {report.ess_per_5k:.4g}")
        print(f"accept rate {report.meta['accept_rate']:.3f}")


def _maybe_bias(args, cfg, out, proposer, target, seed):
    bias_steps = cfg.get("eval", "bias_steps")
    if bias_steps <= 0:
        return None
    record_dims = [0] if hasattr(target, "sigma") else None
    rep = diagnostics.bias_test(proposer, target,
                                cfg.get("eval", "bias_chains"), bias_steps,
                                seed, record_dims=record_dims)
    with open(os.path.join(out, "bias_report.json"), "w") as fh:
        fh.write(rep.to_json(kernel=proposer.name, target=target.name,
                             n_steps=bias_steps))
        fh.write("\n")
    if not args.quiet:
        for c in rep.checks:
            print(f"bias {c.name}: {c.value:.4g} vs {c.threshold:.4g} "
                  f"-> {'pass' if c.passed else 'FAIL'}")
    return rep


def cmd_train(args):
    extra = []
    if args.batch is not None:
        extra.append(f"training.batch={args.batch}")
    if args.iters is not None:
        extra.append(f"training.iterations={args.iters}")
    cfg = _load_cfg(args, extra)
    target = _build_target(args, cfg)
    tc = config_mod.build_train_config(cfg)
    out = _run_dir(args, cfg, "train")
    t0 = time.time()

    def on_ck(model, it):
        checkpoint_mod.save_checkpoint(
            os.path.join(out, f"checkpoint_iter{it}.npz"), model,
            extra={"target": target.name, "iteration": it})

    model, log = train(tc, target, on_checkpoint=on_ck,
                       progress_every=0 if args.quiet else
                       max(1, tc.iterations // 10))
    log.to_csv(os.path.join(out, "training_log.csv"))
    sha = checkpoint_mod.save_checkpoint(
        os.path.join(out, "checkpoint.npz"), model,
        extra={"target": target.name, "preset": args.preset,
               "iteration": tc.iterations})
    if log.rows:
        figures.training_figure(log, os.path.join(out, "figures",
                                                  "training.png"))
    summary = {
        "command": "train",
        "preset": args.preset,
        "seed": tc.seed,
        "target": target.name,
        "iterations": tc.iterations,
        "checkpoint_sha256": sha,
        "unstable": log.unstable,
        "skipped_iterations": log.skipped_total,
        "final_accept_ema": log.tail_mean("accept_ema") if log.rows else None,
        "final_entropy_estimate": log.tail_mean("entropy_estimate")
        if log.rows else None,
        "wall_seconds": round(time.time() - t0, 3),
    }
    _write_manifest(out, summary)
    if not args.quiet:
        print(f"checkpoint {os.path.join(out, 'checkpoint.npz')} "
              f"sha256 {sha[:12]}...")
        if log.rows:
            print(f"final accept EMA {summary['final_accept_ema']:.3f}  "
                  f"entropy est. {summary['final_entropy_estimate']:.3f}")
        if log.unstable:
            print(f"warning: {log.skipped_total} of {tc.iterations} "
                  "iterations skipped — run marked unstable")
    return 0


def cmd_eval(args):
    extra = []
    if args.chains is not None:
        extra.append(f"eval.chains={args.chains}")
    if args.steps is not None:
        extra.append(f"eval.steps={args.steps}")
    cfg = _load_cfg(args, extra)
    target = _build_target(args, cfg)
    try:
        model, meta = checkpoint_mod.load_checkpoint(args.checkpoint)
    except (ValueError, OSError) as e:
        _fail(e)
    if model.dim != target.dim:
        _fail(f"checkpoint dimension {model.dim} does not match "
              f"target dimension {target.dim}")
    out = _run_dir(args, cfg, "eval")
    seed = cfg.get("run", "seed")
    proposer = kernels.NeuralProposer(model)
    report = diagnostics.ess_protocol(
        proposer, target, n_chains=cfg.get("eval", "chains"),
        n_steps=cfg.get("eval", "steps"), keep=cfg.get("eval", "keep"),
        seed=seed, workers=args.workers)
    sha = checkpoint_mod.file_sha256(args.checkpoint)
    _emit_ess_outputs(args, cfg, out, target, report,
                      {"checkpoint": args.checkpoint,
                       "checkpoint_sha256": sha,
                       "mode": model.mode, "n_flow_steps": model.n_steps})
    bias = _maybe_bias(args, cfg, out, proposer, target, seed)
    _write_manifest(out, {
        "command": "eval",
        "preset": args.preset,
        "seed": seed,
        "target": target.name,
        "checkpoint": args.checkpoint,
        "checkpoint_sha256": sha,
        "min_ess": report.min_ess,
        "ess_per_mh": report.ess_per_mh,
        "ess_per_grad": report.ess_per_grad,
        "accept_rate": report.meta["accept_rate"],
        "bias_passed": None if bias is None else bias.passed,
        "chain_seeds": [f"SeedSequence({seed}).spawn[{i}]"
                        for i in range(report.n_chains)],
    })
    return 0


def _tuned_baseline(args, cfg, target, seed):
    kernel = cfg.get("baseline", "kernel")
    accept_target = config_mod.baseline_accept_target(cfg)
    step_spec = cfg.get("baseline", "step_size")
    n_leapfrog = cfg.get("baseline", "n_leapfrog")

    def build(step):
        if kernel == "rwm":
            return kernels.RWMProposer(step)
        if kernel == "mala":
            return kernels.MALAProposer(step)
        return kernels.HMCProposer(step, n_leapfrog)

    tuning = {"kernel": kernel, "requested": step_spec}
    if step_spec == "neck":
        sigma = getattr(target, "sigma", None)
        if sigma is None:
            _fail("step_size=neck only applies to funnel targets")
        if kernel != "hmc":
            _fail("step_size=neck is an HMC tuning rule")
        step, grid, passed = kernels.tune_hmc_neck(
            target, sigma, n_leapfrog, seed)
        tuning.update(method="neck-reachability rule",
                      grid=[float(g) for g in grid],
                      passed=[bool(b) for b in passed])
    elif step_spec == "auto":
        init = {"rwm": 0.5, "mala": 0.5, "hmc": 0.2}[kernel]
        prop = build(init)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADA)))
        x0 = kernels.init_chains(target, 16, rng)
        kernels.run_chains(prop, target, x0,
                           1, seed=np.random.SeedSequence((seed, 0xADA, 1)),
                           warmup=cfg.get("baseline", "tune_steps"),
                           adapt_target=accept_target, record=False,
                           stream="pooled")
        step = float(prop.step_size)
        tuning.update(method=f"accept-rate adaptation to {accept_target}",
                      tune_steps=cfg.get("baseline", "tune_steps"))
    else:
        step = float(step_spec)
        tuning.update(method="fixed")
    tuning["step_size"] = step
    return build(step), tuning


def cmd_baseline(args):
    extra = []
    if args.kernel is not None:
        extra.append(f"baseline.kernel={args.kernel}")
    if args.step_size is not None:
        extra.append(f"baseline.step_size={args.step_size}")
    if args.chains is not None:
        extra.append(f"eval.chains={args.chains}")
    cfg = _load_cfg(args, extra)
    target = _build_target(args, cfg)
    out = _run_dir(args, cfg, f"baseline-{cfg.get('baseline', 'kernel')}")
    seed = cfg.get("run", "seed")
    proposer, tuning = _tuned_baseline(args, cfg, target, seed)
    if not args.quiet:
        print(f"{tuning['kernel']} step size {tuning['step_size']:.5g} "
              f"({tuning['method']})")
    n_steps = cfg.get("baseline", "steps") or cfg.get("eval", "steps")
    keep = cfg.get("baseline", "keep") or cfg.get("eval", "keep")
    report = diagnostics.ess_protocol(
        proposer, target, n_chains=cfg.get("eval", "chains"),
        n_steps=n_steps, keep=keep, seed=seed, workers=args.workers)
    _emit_ess_outputs(args, cfg, out, target, report, {"tuning": tuning})
    with open(os.path.join(out, "baseline.json"), "w") as fh:
        json.dump({**tuning, "accept_rate": report.meta["accept_rate"],
                   "min_ess": report.min_ess,
                   "ess_per_mh": report.ess_per_mh,
                   "ess_per_grad": report.ess_per_grad}, fh, indent=2)
        fh.write("\n")
    bias = _maybe_bias(args, cfg, out, proposer, target, seed)
    _write_manifest(out, {
        "command": "baseline",
        "preset": args.preset,
        "seed": seed,
        "target": target.name,
        "kernel": tuning["kernel"],
        "step_size": tuning["step_size"],
        "min_ess": report.min_ess,
        "ess_per_mh": report.ess_per_mh,
        "ess_per_grad": report.ess_per_grad,
        "accept_rate": report.meta["accept_rate"],
        "bias_passed": None if bias is None else bias.passed,
    })
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    target = _build_target(args, cfg)
    out = _run_dir(args, cfg, "ablate")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    t0 = time.time()
    results = {}
    for mode in modes:
        mode_cfg = config_mod.load_config(
            preset=args.preset, path=args.config_path,
            overrides=list(args.overrides) + [f"sampler.mode={mode}"])
        if args.seed is not None:
            mode_cfg.set("run", "seed", args.seed)
        if args.iters is not None:
            mode_cfg.set("training", "iterations", args.iters)
        tc = config_mod.build_train_config(mode_cfg)
        if not args.quiet:
            print(f"training variant {mode} ({tc.iterations} iterations)")
        model, log = train(tc, target.fork(),
                           progress_every=0 if args.quiet else
                           max(1, tc.iterations // 5))
        checkpoint_mod.save_checkpoint(
            os.path.join(out, f"checkpoint_{mode}.npz"), model,
            extra={"target": target.name, "variant": mode})
        results[mode] = {
            "log": log,
            "final_entropy": log.tail_mean("entropy_estimate"),
            "final_accept_ema": log.tail_mean("accept_ema"),
            "grad_evals_per_proposal": model.grad_evals_per_proposal,
            "unstable": log.unstable,
        }
    iters = results[modes[0]]["log"].column("iter")
    cols = [iters] + [results[m]["log"].column("entropy_estimate")
                      for m in modes]
    header = "iter," + ",".join(f"entropy_{m.replace('-', '_')}"
                                for m in modes)
    np.savetxt(os.path.join(out, "ablation_curves.csv"),
               np.column_stack(cols), delimiter=",", header=header,
               comments="", fmt="%.10g")
    figures.ablation_figure(
        {m: (iters, results[m]["log"].column("entropy_estimate"))
         for m in modes},
        os.path.join(out, "figures", "ablation_entropy.png"))
    payload = {
        "command": "ablate",
        "preset": args.preset,
        "seed": cfg.get("run", "seed"),
        "target": target.name,
        "modes": {m: {k: v for k, v in results[m].items() if k != "log"}
                  for m in modes},
        "wall_seconds": round(time.time() - t0, 3),
    }
    if "full" in results and "no-grad" in results:
        payload["full_entropy_ge_no_grad"] = bool(
            results["full"]["final_entropy"]
            >= results["no-grad"]["final_entropy"])
    _write_manifest(out, payload)
    if not args.quiet:
        for m in modes:
            r = results[m]
            print(f"{m}: final entropy {r['final_entropy']:.3f}  "
                  f"accept EMA {r['final_accept_ema']:.3f}  "
                  f"{r['grad_evals_per_proposal']} grads/proposal")
    return 0


def _read_trace_csv(path):
    with open(path) as fh:
        first = fh.readline()
    try:
        float(first.split(",")[0])
        has_header = False
    except ValueError:
        has_header = True
    if has_header:
        data = np.genfromtxt(path, delimiter=",", names=True)
        xcols = sorted((n for n in data.dtype.names
                        if n.startswith("x") and n[1:].isdigit()),
                       key=lambda n: int(n[1:]))
        if not xcols:
            _fail(f"{path}: no x<dim> columns in header")
        return np.column_stack([data[n] for n in xcols])
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def cmd_ess(args):
    chains = [_read_trace_csv(p) for p in args.traces]
    t_len = chains[0].shape[0]
    if any(c.shape != chains[0].shape for c in chains):
        _fail("all trace files must have the same shape")
    trace = np.stack(chains)
    try:
        report = diagnostics.ess(trace, grads_per_step=args.grads_per_step,
                                 meta={"files": list(args.traces)})
    except ValueError as e:
        _fail(e)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ess_report.json"), "w") as fh:
            fh.write(text)
            fh.write("\n")
    print(text)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="entromc",
        description="Train and evaluate entropy-regularized flow proposals "
                    "for MCMC, with classical baselines and ESS diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a proposal, write a checkpoint")
    _add_common(p)
    p.add_argument("--batch", type=int, help="shortcut for training.batch")
    p.add_argument("--iters", type=int,
                   help="shortcut for training.iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ESS + bias protocol on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chains", type=int, help="shortcut for eval.chains")
    p.add_argument("--steps", type=int, help="shortcut for eval.steps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="tuned classical-kernel evaluation")
    _add_common(p)
    p.add_argument("--kernel", choices=config_mod.KERNEL_CHOICES)
    p.add_argument("--step-size",
                   help="auto (adapt), neck (funnel HMC rule), or a number")
    p.add_argument("--chains", type=int, help="shortcut for eval.chains")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate",
                       help="train flow variants on one target and seed")
    _add_common(p)
    p.add_argument("--modes", default="full,no-grad,langevin")
    p.add_argument("--iters", type=int,
                   help="shortcut for training.iterations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ess", help="ESS estimator on existing trace CSVs")
    p.add_argument("traces", nargs="+", metavar="TRACE_CSV")
    p.add_argument("--grads-per-step", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ess)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
