"""Command-line entry point.

    cpfs3d [--config PATH] [--set key=value ...] [--seed N] [--out DIR] <command> [options]

Commands: gen-data, pretrain, finetune, eval, ablate, grad-check, oracle, plot.
Outputs go under ``--out`` (default ``$CPFS3D_OUT`` or ``./cpfs3d_out``):
``data/`` for the benchmark, ``ckpt/`` and ``metrics_*.jsonl`` for training,
``eval/`` for reports, ``ablation/`` and ``plots/`` for the remaining commands.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure, 3 I/O error.
"""

import argparse
import glob
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("cpfs3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(suppress=False):
    """Global flags.  The copy attached to subcommands suppresses its defaults
    so that a flag given before the command is not reset by the subparser."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="key=value configuration file")
    p.add_argument("--set", action="append", default=d(None), metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, default=d(None), help="training seed")
    p.add_argument("--out", default=d(None), help="output root (default: $CPFS3D_OUT or ./cpfs3d_out)")
    p.add_argument("--data", default=d(None), help="benchmark directory (default: <out>/data)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser():
    parser = _Parser(prog="cpfs3d", description="Contrastive prototypical few-shot 3D detection on synthetic scenes.",
                     parents=[_common()])
    common = _common(suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    p = sub.add_parser("pretrain", parents=[common], help="episodic training on base classes")
    p.add_argument("--no-resume", action="store_true")
    p = sub.add_parser("finetune", parents=[common], help="episodic training on base classes plus the k novel shots")
    p.add_argument("--no-resume", action="store_true")
    p = sub.add_parser("eval", parents=[common], help="detect on test scenes and write the AP report")
    p.add_argument("--ckpt", default=None, help="checkpoint (default: finetune_last, else pretrain_last)")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p = sub.add_parser("ablate", parents=[common], help="run the ablation grids over the configured seeds")
    p.add_argument("--groups", default=None, help="comma list of components,lambda,asymmetric,projection")
    p.add_argument("--seeds", default=None, help="comma list overriding the config seed list")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference and detach checks")
    p.add_argument("--instances", type=int, default=20)
    p = sub.add_parser("oracle", parents=[common], help="compare fast routines with brute-force oracles")
    p = sub.add_parser("plot", parents=[common], help="SVG loss curves, PR curves and scene renders")
    p.add_argument("--scenes", type=int, default=3, help="number of test scenes to render")
    return parser


def output_root(args):
    return args.out or os.environ.get("CPFS3D_OUT") or os.path.join(os.getcwd(), "cpfs3d_out")


def _context(args):
    from .config import load_config
    cfg = load_config(args.config, args.set or (), args.seed)
    out = output_root(args)
    data = args.data or os.path.join(out, "data")
    return cfg, out, data


def _require_data(data):
    if not os.path.isfile(os.path.join(data, "split.json")):
        raise FileNotFoundError(f"no benchmark at {data}; run gen-data first")


def cmd_gen_data(args):
    from .synthdata import read_benchmark, write_benchmark
    from .train import make_benchmark
    cfg, out, data = _context(args)
    bench = make_benchmark(cfg)
    write_benchmark(bench, data)
    bench = read_benchmark(data)
    counts = {}
    for sc in bench.train:
        for b in sc.boxes:
            counts[b.class_id] = counts.get(b.class_id, 0) + 1
    print(f"wrote {len(bench.train)} train / {len(bench.test)} test scenes to {data}")
    print(f"base classes {bench.split.base_class_ids}, novel classes {bench.split.novel_class_ids}, k={bench.split.k_shots}")
    print("annotated train instances per class: " + ", ".join(f"{c}:{counts.get(c, 0)}" for c in bench.split.all_class_ids))
    return EXIT_OK


def _trainer(args):
    from .synthdata import read_benchmark
    from .train import Trainer, set_determinism
    cfg, out, data = _context(args)
    _require_data(data)
    set_determinism()
    return Trainer(cfg, read_benchmark(data), out), cfg


def cmd_pretrain(args):
    tr, cfg = _trainer(args)
    path = tr.run_stage("pretrain", cfg.pretrain_epochs, resume=not args.no_resume)
    print(f"pretrain finished at epoch {tr.epoch}; metrics {path}")
    return EXIT_OK


def cmd_finetune(args):
    tr, cfg = _trainer(args)
    last_ft = tr.ckpt_path("finetune", "last")
    if args.no_resume or not os.path.isfile(last_ft):
        pre = tr.ckpt_path("pretrain", "last")
        if not os.path.isfile(pre):
            raise FileNotFoundError(f"no pretrain checkpoint at {pre}; run pretrain first")
        tr.load(pre)
    path = tr.run_stage("finetune", cfg.finetune_epochs, resume=not args.no_resume)
    print(f"finetune finished at epoch {tr.epoch}; metrics {path}")
    return EXIT_OK


def cmd_eval(args):
    from .synthdata import read_benchmark
    from .train import evaluate_model, model_from_checkpoint, set_determinism, train_mean_size
    cfg, out, data = _context(args)
    _require_data(data)
    set_determinism()
    bench = read_benchmark(data)
    ckpt = args.ckpt
    if ckpt is None:
        for stage in ("finetune", "pretrain"):
            cand = os.path.join(out, "ckpt", f"{stage}_last.ckpt")
            if os.path.isfile(cand):
                ckpt = cand
                break
        else:
            raise FileNotFoundError(f"no checkpoint under {os.path.join(out, 'ckpt')}")
    model = model_from_checkpoint(cfg, ckpt, len(bench.split.all_class_ids))
    scenes = bench.test if args.split == "test" else bench.train
    report = evaluate_model(model, bench, cfg, os.path.join(out, "eval"), scenes)
    fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}"
    print(f"checkpoint {ckpt}")
    print(f"novel AP25 {fmt(report.novel_AP25)}  AP50 {fmt(report.novel_AP50)}")
    print(f"base  AP25 {fmt(report.base_AP25)}  AP50 {fmt(report.base_AP50)}")
    return EXIT_OK


def cmd_ablate(args):
    from .train import run_ablation, set_determinism, summarize_ablation
    cfg, out, data = _context(args)
    set_determinism()
    groups = args.groups.split(",") if args.groups else None
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    from .train import ensure_benchmark
    ensure_benchmark(cfg, data)
    rows = run_ablation(cfg, data, os.path.join(out, "ablation"), groups, seeds)
    for s in summarize_ablation(rows):
        print(f"{s['group']:>10} {s['arm']:<16} novel AP25 {s['novel_AP25']:6.2f}  AP50 {s['novel_AP50']:6.2f}  "
              f"seeds {s['n_seeds']}  {s['status']}")
    print(f"table: {os.path.join(out, 'ablation', 'ablation.csv')}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import check_bank_detached, run_all
    from .train import Trainer, compute_losses, make_benchmark, set_determinism
    cfg, out, _ = _context(args)
    set_determinism()
    ok = True
    for rep in run_all(args.instances):
        print(rep.line())
        ok &= rep.passed
    small = cfg.replace(n_train_scenes=12, n_test_scenes=2, batch_size=2, d=32, proj_dim=16, sa1_widths=(16, 16, 32),
                        nsample=8, n_way=2, k_shot=1, W=16)
    tr = Trainer(small, make_benchmark(small), os.path.join(out, "grad_check"))
    batch = tr.sample_batch("pretrain")
    g = check_bank_detached(tr.model, batch, small)
    print(f"{'PASS' if g == 0.0 else 'FAIL'} bank detached: max |grad| on prototypes {g:.3e}")
    ok &= g == 0.0
    tr.model.zero_grad(set_to_none=True)
    zero = small.replace(lambda1=0.0, lambda2=0.0)
    compute_losses(tr.model, batch, zero)[0].l_total.backward()
    proj = [p.grad for m in (tr.model.proj_s, tr.model.proj_p) for p in m.parameters()]
    worst = max(0.0 if p is None else float(p.abs().max()) for p in proj)
    print(f"{'PASS' if worst == 0.0 else 'FAIL'} projection isolation at lambda=0: max |grad| {worst:.3e}")
    ok &= worst == 0.0
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_oracle(args):
    from .oracles import run_suite
    seed = args.seed if args.seed is not None else 0
    ok = True
    for name, passed, detail in run_suite(seed):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plot(args):
    from . import plots
    from .eval3d import load_detections
    from .synthdata import read_benchmark
    cfg, out, data = _context(args)
    pdir = os.path.join(out, "plots")
    os.makedirs(pdir, exist_ok=True)
    metrics = [p for p in (os.path.join(out, f"metrics_{s}.jsonl") for s in ("pretrain", "finetune"))
               if os.path.isfile(p)]
    if not metrics or not any(plots.read_metrics(p) for p in metrics):
        log.warning("no metrics under %s; loss plot skipped", out)
    else:
        print(plots.plot_losses(metrics, os.path.join(pdir, "losses.svg")))
    det_dir = os.path.join(out, "eval", "detections")
    if os.path.isdir(det_dir) and os.path.isfile(os.path.join(data, "split.json")):
        bench = read_benchmark(data)
        dets = {os.path.basename(p)[:-len(".det.json")]: load_detections(p)
                for p in sorted(glob.glob(os.path.join(det_dir, "*.det.json")))}
        scenes = [s for s in bench.test if s.scene_id in dets]
        if scenes:
            print(plots.plot_pr(dets, scenes, bench.split.novel_class_ids, os.path.join(pdir, "pr_novel.svg")))
            print(plots.plot_pr(dets, scenes, bench.split.base_class_ids, os.path.join(pdir, "pr_base.svg")))
            for sc in scenes[:args.scenes]:
                print(plots.plot_scene(sc, os.path.join(pdir, f"scene_{sc.scene_id}.svg"), dets[sc.scene_id],
                                       score_threshold=0.05))
    else:
        log.warning("no detections under %s; PR and scene plots skipped", det_dir)
    table = os.path.join(out, "ablation", "ablation.csv")
    if os.path.isfile(table):
        print(plots.plot_ablation(table, os.path.join(pdir, "ablation.svg")))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
    "ablate": cmd_ablate, "grad-check": cmd_grad_check, "oracle": cmd_oracle, "plot": cmd_plot,
}


def main(argv=None):
    from .checkpoint import CheckpointError
    from .detector import NonFiniteLoss
    from .synthdata import ConfigurationError, SceneFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, SceneFormatError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
