"""Command-line entry point: ``m25d <subcommand> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O error.
Outputs are staged next to ``--out`` and moved in only when the command
finishes, so a failed run leaves nothing half-written behind.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import shutil
import sys
import tempfile

import numpy as np
import tomli

from . import analysis, checks, convops, kvfile, synth, tensor, train
from .config import COMMAND_SECTIONS, ConfigError, RunConfig, describe
from .network import ToyNet
from .rfield import RFieldParams, rf_width

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _say(msg: str) -> None:
    print(msg, flush=True)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr, flush=True)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _resolve_layer(net: ToyNet, layer: int) -> int:
    blocks = net.malleable_blocks()
    if layer == -1:
        if not blocks:
            raise analysis.LayerKindError("checkpoint has no malleable block")
        return blocks[-1]
    return layer


def _report_ordering(net: ToyNet) -> None:
    for i in net.malleable_blocks():
        bad = net.rfield(i).ordering_violations()
        if bad:
            _warn(f"block{i}: receptive-field centres out of order at a[{bad[0]}] >= a[{bad[0] + 1}]")


# ---------------------------------------------------------------- subcommands

def cmd_gradcheck(rc: RunConfig, out: str) -> int:
    cfg = rc.section("gradcheck")
    results = checks.run_gradient_suite(cfg)
    rows = []
    failed = None
    for r in results:
        status = "PASS" if r.worst < cfg.tol else "FAIL"
        _say(f"{r.op:<11} d{r.param:<5} worst relative error {r.worst:.3e}  {status}")
        rows.append([r.op, r.param, _fmt(r.worst), r.trial, r.index, status])
        if status == "FAIL" and failed is None:
            failed = r
    _write_csv(os.path.join(out, "gradcheck.csv"),
               ["op", "param", "worst_rel_error", "trial", "index", "status"], rows)
    if failed:
        _say(f"FAIL op={failed.op} param=d{failed.param} trial={failed.trial} index={failed.index}")
        return EXIT_CHECK
    _say(f"PASS worst={max(r.worst for r in results):.3e}")
    return EXIT_OK


def cmd_oracle(rc: RunConfig, out: str) -> int:
    cfg = rc.section("oracle")
    worst = checks.run_oracle_suite(cfg)
    rows = []
    ok = True
    for op, diff in worst.items():
        status = "PASS" if diff < cfg.tol else "FAIL"
        ok &= status == "PASS"
        _say(f"{op:<11} max |fast - oracle| {diff:.3e}  {status}")
        rows.append([op, _fmt(diff), cfg.trials, status])
    _write_csv(os.path.join(out, "oracle.csv"), ["op", "max_abs_diff", "trials", "status"], rows)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_synth(rc: RunConfig, out: str) -> int:
    cfg = rc.section("scene")
    path = synth.export_dataset(cfg, out)
    _say(f"wrote {cfg.n_scenes} scenes ({cfg.n_train} train / {cfg.n_test} test) -> "
         f"{os.path.basename(path)}")
    return EXIT_OK


def _load_data(rc: RunConfig):
    path = rc.section("data").manifest
    if not path:
        raise ConfigError("data.manifest: a dataset manifest is required")
    m = synth.read_manifest(path)
    trainset = m.load("train")
    testset = m.load("test") if any(s[1] == "test" for s in m.samples) else None
    return m, trainset, testset


def _train_one(net_cfg, tcfg, camera, trainset, testset, directory) -> dict:
    os.makedirs(directory, exist_ok=True)
    net = ToyNet(net_cfg, camera)
    _, state = train.fit(net, trainset, tcfg, log_path=os.path.join(directory, "train_log.csv"))
    train.save_checkpoint(os.path.join(directory, "checkpoint"), net, state)
    _report_ordering(net)
    summary = {"train_acc": train.evaluate(net, trainset)}
    if testset is not None:
        summary["test_acc"] = train.evaluate(net, testset)
    for i in net.malleable_blocks():
        summary[f"block{i}.rf_width"] = rf_width(net.rfield(i))
    kvfile.write_kv(os.path.join(directory, "summary.toml"), summary)
    return summary


def cmd_train(rc: RunConfig, out: str) -> int:
    m, trainset, testset = _load_data(rc)
    summary = _train_one(rc.section("net"), rc.section("train"), m.camera, trainset, testset, out)
    _say(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return EXIT_OK


def cmd_ablate(rc: RunConfig, out: str) -> int:
    m, trainset, testset = _load_data(rc)
    base = rc.section("train")
    rows = []
    for variant in rc.section("ablate").variants:
        groups = [] if variant.strip() in ("", "none") else [g.strip() for g in variant.split(",")]
        try:
            tcfg = dataclasses.replace(base, freeze=groups)
        except ValueError as exc:
            raise ConfigError(f"ablate.variants: {exc}") from exc
        name = "frozen_" + "".join(groups) if groups else "learn_all"
        summary = _train_one(rc.section("net"), tcfg, m.camera, trainset, testset, os.path.join(out, name))
        learnable = ",".join(g for g in train.RFIELD_GROUPS if g not in groups) or "none"
        rows.append([name, learnable, _fmt(summary["train_acc"]), _fmt(summary.get("test_acc", float("nan")))])
        _say(f"{name:<16} learnable={learnable:<6} test_acc={summary.get('test_acc', float('nan')):.4f}")
    _write_csv(os.path.join(out, "ablation.csv"), ["variant", "learnable", "train_acc", "test_acc"], rows)
    return EXIT_OK


def cmd_export_rf(rc: RunConfig, out: str) -> int:
    cfg = rc.section("rf")
    meta = {}
    if cfg.checkpoint:
        net, _ = train.load_checkpoint(cfg.checkpoint)
        layer = _resolve_layer(net, cfg.layer)
        analysis._require_malleable(net, layer)
        params = net.rfield(layer)
        meta = {"layer": layer}
    else:
        params = RFieldParams.init(cfg.kernels)
    curves = analysis.rf_curves(params, cfg.d_min, cfg.d_max, cfg.steps, meta)
    for depth in cfg.compare_depths:
        analysis.add_depthaware(curves, f"{float(depth):g}m", cfg.alpha, float(depth), cfg.focal, cfg.delta_p)
    if cfg.hard:
        analysis.add_hard25d(curves, params.K)
    analysis.write_curves(os.path.join(out, "rf_curves.csv"), curves)
    _say(f"receptive-field width {rf_width(params):.4f} (K={params.K}, t={params.t:.4f})")
    return EXIT_OK


def _checkpoint_and_data(cfg, section: str):
    if not cfg.checkpoint:
        raise ConfigError(f"{section}.checkpoint: a checkpoint directory is required")
    if not cfg.manifest:
        raise ConfigError(f"{section}.manifest: a dataset manifest is required")
    net, _ = train.load_checkpoint(cfg.checkpoint)
    return net, synth.read_manifest(cfg.manifest)


def cmd_assign_hist(rc: RunConfig, out: str) -> int:
    cfg = rc.section("hist")
    net, m = _checkpoint_and_data(cfg, "hist")
    layer = _resolve_layer(net, cfg.layer)
    data = m.load(None if cfg.split == "all" else cfg.split)
    hist = analysis.assignment_histogram(net, data, layer)
    analysis.write_histogram(os.path.join(out, "assign_hist.csv"), hist, {"layer": layer, "split": cfg.split})
    _say(f"block{layer} entropy raw={analysis.entropy(hist.raw_ratio):.4f} "
         f"rebalanced={analysis.entropy(hist.scaled_ratio):.4f}")
    return EXIT_OK


def cmd_dump_features(rc: RunConfig, out: str) -> int:
    cfg = rc.section("dump")
    net, m = _checkpoint_and_data(cfg, "dump")
    layer = _resolve_layer(net, cfg.layer)
    rows = [s for s in m.samples if s[0] == cfg.sample]
    if not rows:
        raise ConfigError(f"dump.sample: no sample {cfg.sample} in manifest")
    data = dataclasses.replace(m, samples=rows).load()
    x, depth, _ = data.batch(np.array([0]))
    paths = analysis.dump_kernel_features(net, x, depth, layer, out)
    h = net.block_input(x, depth, layer)
    y = convops.malleable_forward(h, net.depth_at(depth, layer), net.camera, net.malleable_params(layer))
    tensor.save(os.path.join(out, f"block{layer}_output.t4"), y)
    _say(f"wrote {len(paths)} per-kernel feature maps for block{layer}")
    return EXIT_OK


def cmd_budget(rc: RunConfig, out: str) -> int:
    cfg = rc.section("budget")
    kernel = (cfg.kernel, cfg.kernel)
    hw = (cfg.height, cfg.width)
    descs = [convops.LayerDescriptor("standard", cfg.c_in, cfg.c_out, kernel, 1, cfg.bias, hw),
             convops.LayerDescriptor("depthaware", cfg.c_in, cfg.c_out, kernel, 1, cfg.bias, hw),
             convops.LayerDescriptor("hard25d", cfg.c_in, cfg.c_out, kernel, cfg.kernels, cfg.bias, hw),
             convops.LayerDescriptor("malleable", cfg.c_in, cfg.c_out, kernel, cfg.kernels, cfg.bias, hw)]
    ref_params = convops.count_params(descs[2])
    ref_flops = convops.estimate_flops(descs[2]).total_flops
    rows = []
    for d in descs:
        p = convops.count_params(d)
        f = convops.estimate_flops(d)
        rows.append([d.kind, d.K, p, f.conv_macs, f.mask_macs, f.assign_flops, f.bias_flops, f.total_flops,
                     p - ref_params, _fmt((f.total_flops - ref_flops) / ref_flops)])
        _say(f"{d.kind:<11} K={d.K} params={p} flops={f.total_flops} "
             f"({p - ref_params:+d} params vs hard25d, {100 * (f.total_flops - ref_flops) / ref_flops:+.4f}% flops)")
    _write_csv(os.path.join(out, "budget.csv"),
               ["kind", "K", "params", "conv_macs", "mask_macs", "assign_flops", "bias_flops", "total_flops",
                "params_vs_hard25d", "flops_rel_vs_hard25d"], rows)
    return EXIT_OK


COMMANDS = {
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suites over all operators"),
    "oracle": (cmd_oracle, "fast operators vs brute-force loops"),
    "synth": (cmd_synth, "generate and export a synthetic RGB-D dataset"),
    "train": (cmd_train, "train a ToyNet on a dataset manifest"),
    "ablate": (cmd_ablate, "train once per frozen subset of the receptive-field parameters"),
    "export-rf": (cmd_export_rf, "receptive-field curves as CSV"),
    "assign-hist": (cmd_assign_hist, "raw and rebalanced per-kernel assignment totals"),
    "dump-features": (cmd_dump_features, "per-kernel partial outputs of a malleable block"),
    "budget": (cmd_budget, "parameter and FLOP counts per operator"),
}
assert set(COMMANDS) == set(COMMAND_SECTIONS)


# ---------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m25d", description="Malleable 2.5D convolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=describe(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="PATH", help="key-value (TOML) config file")
        p.add_argument("--seed", type=int, metavar="N", help="sets every seed key of this subcommand")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}", help="output directory (default: %(default)s)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one key; repeatable")
    return parser


def _publish(stage: str, out: str) -> list[str]:
    """Move staged files into ``out`` and return their relative paths."""
    files = sorted(os.path.relpath(os.path.join(d, f), stage) for d, _, fs in os.walk(stage) for f in fs)
    os.makedirs(out, exist_ok=True)
    for entry in sorted(os.listdir(stage)):
        target = os.path.join(out, entry)
        if os.path.isdir(target) and not os.path.islink(target):
            shutil.rmtree(target)
        elif os.path.lexists(target):
            os.remove(target)
        os.replace(os.path.join(stage, entry), target)
    return files


def run(command: str, rc: RunConfig, out: str) -> int:
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=f".{os.path.basename(os.path.abspath(out))}.partial-", dir=parent)
    try:
        kvfile.write_kv(os.path.join(stage, "config.toml"), rc.to_kv())
        code = COMMANDS[command][0](rc, stage)
        files = sorted(os.path.relpath(os.path.join(d, f), stage) for d, _, fs in os.walk(stage) for f in fs)
        with open(os.path.join(stage, "outputs.txt"), "w") as fh:
            fh.write(f"# m25d {command} exit={code}\n")
            fh.write("".join(f"{p}\n" for p in files + ["outputs.txt"]))
        _publish(stage, out)
        return code
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rc = RunConfig.build(args.command, args.config, args.seed, args.overrides)
        return run(args.command, rc, args.out)
    except (ConfigError, analysis.LayerKindError, tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, tensor.TensorFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
