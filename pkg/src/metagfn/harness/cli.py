"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 checkpoint missing or mismatched,
3 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..nn import CheckpointError
from . import experiments as ex
from .config import ConfigError, dumps, load_config, preset
from .motion import gen_motion_path

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("metagfn")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value scenario file")
    common.add_argument("--preset", choices=("full", "desk"), default="full",
                        help="defaults the config file is applied on top of")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    common.add_argument("--checkpoint", type=Path, help="pretrained single-task checkpoint")
    common.add_argument("--threads", type=int, help="worker threads for per-cell work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metagfn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="single-task GFlowNet training")
    mt = sub.add_parser("meta-train", parents=[common], help="meta-train the initialization")
    mt.add_argument("--init", type=Path, help="start from this checkpoint instead of a fresh net")
    hm = sub.add_parser("heatmap", parents=[common], help="SER over the (theta, phi) grid")
    hm.add_argument("--resolution", type=float, help="grid step in degrees")
    me = sub.add_parser("motion-eval", parents=[common], help="secrecy rate along the CU path")
    me.add_argument("--method", action="append",
                    help="native, retrain(N) or meta(K); repeatable (default: all four baselines)")
    me.add_argument("--meta-checkpoint", type=Path)
    oc = sub.add_parser("oracle-check", parents=[common], help="sampler vs R / sum R on a tiny instance")
    oc.add_argument("--samples", type=int, default=100_000)
    oc.add_argument("--tolerance", type=float, default=0.15)
    gc = sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference TB gradients")
    gc.add_argument("--pairs", type=int, default=20)
    gc.add_argument("--corrupt", action="store_true", help="negative control: perturb the analytic gradient")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def resolve_config(args):
    base = preset(args.preset)
    cfg = load_config(args.config, base) if args.config else base
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return cfg.replace(**overrides) if overrides else cfg


def _load(path, cfg, tag):
    if path is None:
        raise CheckpointError(f"a {tag} checkpoint is required (--checkpoint / --meta-checkpoint)")
    if not Path(path).exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return ex.load_run_checkpoint(path, cfg, tag)


def run(args, cfg) -> int:
    out = Path(cfg.out_dir)
    cmd = args.command
    if cmd == "show-config":
        sys.stdout.write(dumps(cfg))
        return EXIT_OK
    ex.write_manifest(out, cfg, sys.argv, command=cmd)
    if cmd == "train":
        _, ckpt = ex.run_train(cfg, out)
        print(ckpt)
    elif cmd == "meta-train":
        init = _load(args.init, cfg, None) if args.init else None
        _, ckpt = ex.run_meta_train(cfg, out, init)
        print(ckpt)
    elif cmd == "heatmap":
        net = _load(args.checkpoint, cfg, None)
        path = out / "heatmap.csv"
        ex.run_heatmap(cfg, net, args.resolution, out_path=path)
        print(path)
    elif cmd == "motion-eval":
        methods = [ex.Method.parse(m) for m in (args.method or
                   ["native", *(f"retrain({n})" for n in cfg.retrain_steps), f"meta({cfg.k_sup})"])]
        pre = _load(args.checkpoint, cfg, "single") if any(m.kind != "meta" for m in methods) else None
        meta = _load(args.meta_checkpoint, cfg, "meta") if any(m.kind == "meta" for m in methods) else None
        path_ = gen_motion_path(cfg.cu, cfg.destination, cfg.n_waypoints, cfg.curvature)
        for m in methods:
            name = str(m).replace("(", "_").replace(")", "")
            p = out / f"motion_{name}.csv"
            ex.run_motion_eval(cfg, m, path_, pre, meta, out_path=p)
            print(p)
    elif cmd == "oracle-check":
        l1, _ = ex.run_oracle_check(cfg, args.samples, out_path=out / "oracle_table.csv")
        ok = l1 < args.tolerance
        print(f"L1 = {l1:.6f} ({'pass' if ok else 'FAIL'}, tolerance {args.tolerance})")
        return EXIT_OK if ok else EXIT_VALIDATION
    elif cmd == "grad-check":
        rep = ex.run_grad_check(cfg.seed, args.pairs, corrupt=args.corrupt)
        (out / "grad_check.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        print(f"max relative error {rep['max_rel_err']:.3e} over {rep['pairs']} pairs: "
              f"{'pass' if rep['passed'] else 'FAIL'}")
        return EXIT_OK if rep["passed"] else EXIT_VALIDATION
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(args, cfg)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
