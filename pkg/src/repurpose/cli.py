"""Command-line interface: make-tasks, metatrain, adapt, sweep, report.

Every output is a pure function of the arguments (no timestamps), so a
rerun with the same arguments or the same sweep manifest reproduces the
files byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .adapt import AdaptConfig, adapt, preset, preset_names
from .bench import SweepConfig, SweepTable, emit, metrics, sweep
from .metatrain import MetaTrainConfig, maml_train, select_checkpoint
from .modelio import conv_spec, load_checkpoint, mlp_spec, save_arrays, save_checkpoint
from .tasks import DomainParams, episode_seed, sample_episode, shifted_domain

log = logging.getLogger("repurpose")


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _domain(args) -> DomainParams:
    base = DomainParams(image_size=args.image_size)
    return shifted_domain(base, args.shift) if getattr(args, "shift", 0.0) else base


def _checkpoint_digest(path: Path) -> str:
    return hashlib.sha256((path / "weights.bin").read_bytes()).hexdigest()


def cmd_make_tasks(args) -> int:
    domain = _domain(args)
    out = Path(args.out)
    for i in range(args.count):
        seed = episode_seed(args.seed, "make-tasks", i)
        ep = sample_episode(domain, args.n_way, args.k_shot, args.q_per_class, seed)
        save_arrays(out / f"episode_{i:04d}",
                    {"support_x": ep.support_x, "support_y": ep.support_y,
                     "query_x": ep.query_x, "query_y": ep.query_y},
                    meta={"task_seed": seed, "n_way": ep.n_way, "k_shot": ep.k_shot,
                          "domain": domain.to_dict()})
    print(f"wrote {args.count} episodes to {out}")
    return 0


def cmd_metatrain(args) -> int:
    spec = (conv_spec if args.arch == "conv" else mlp_spec)(n_way=args.n_way, image_size=args.image_size)
    cfg = MetaTrainConfig(inner_lr=args.inner_lr, inner_steps=args.inner_steps,
                          outer_lr=args.outer_lr, meta_batch=args.meta_batch,
                          iterations=args.iterations, eval_every=args.eval_every,
                          val_episodes=args.val_episodes, n_way=args.n_way, k_shot=args.k_shot,
                          q_per_class=args.q_per_class, seed=args.seed)

    def progress(it, loss, acc):
        if it % max(1, cfg.eval_every // 4) == 0:
            log.info("iteration %d  meta-loss %.4f  meta-acc %.3f", it, loss, acc)

    history = maml_train(spec, _domain(args), cfg, on_iteration=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "train_acc", "val_acc", "checkpoint"])
        for h in history:
            name = f"iter_{h.iteration:06d}"
            save_checkpoint(out / name, spec, h.checkpoint.params, h.checkpoint.meta, args.dtype)
            w.writerow([h.iteration, repr(h.train_accuracy), repr(h.val_accuracy), name])
    chosen = {p: f"iter_{select_checkpoint(history, p).iteration:06d}" for p in ("best_validation", "last")}
    _dump(chosen, out / "selected.json")
    print(json.dumps(chosen, sort_keys=True))
    return 0


def _adapt_config(args) -> AdaptConfig:
    cfg = preset(args.preset) if args.preset else AdaptConfig(optimizer=args.optimizer or "sgd")
    fields = {"alpha": args.alpha, "sigma": args.sigma, "epsilon": args.epsilon, "M": args.M,
              "T": args.T, "lambda_alpha": args.lambda_alpha, "lambda_at": args.lambda_at,
              "lambda_aug": args.lambda_aug, "optimizer": args.optimizer, "seed": args.seed}
    flags = {"enaug": args.enaug, "ufgsm": args.ufgsm, "freeze_bn": args.freeze_bn,
             "inverse_usa": args.inverse_usa, "inverse_ufgsm": args.inverse_ufgsm,
             "clip_inputs": args.clip_inputs}
    changes = {k: v for k, v in fields.items() if v is not None}
    changes.update({k: True for k, v in flags.items() if v})
    return replace(cfg, **changes).validate()


def cmd_adapt(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _adapt_config(args)
    h, w, c = ck.spec.input_shape
    domain = shifted_domain(DomainParams(image_size=h, channels=c), args.shift)
    ep = sample_episode(domain, ck.spec.n_outputs, args.k_shot, args.q_per_class, args.episode_seed)
    result = adapt(ck, ep, cfg).to_dict()
    result["checkpoint_sha256"] = _checkpoint_digest(Path(args.checkpoint))
    result["episode"] = {"task_seed": ep.task_seed, "shift": args.shift, "k_shot": args.k_shot,
                         "q_per_class": args.q_per_class}
    if args.out:
        _dump(result, Path(args.out))
    print(f"query accuracy {result['query_accuracy']:.4f}")
    return 0


def _parse_shifts(items) -> dict[str, float]:
    out = {}
    for item in items:
        name, _, value = item.partition("=")
        out[name] = float(value) if value else float(name)
    return out


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, _, value = item.partition("=")
        out[key] = json.loads(value)
    return out


def cmd_sweep(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = SweepConfig.from_dict(manifest["sweep"])
        ck_path = Path(manifest["checkpoint"])
        if _checkpoint_digest(ck_path) != manifest["checkpoint_sha256"]:
            raise SystemExit(f"checkpoint {ck_path} does not match the manifest digest")
        ck = load_checkpoint(ck_path)
    else:
        ck_path = Path(args.checkpoint)
        ck = load_checkpoint(ck_path)
        h, _, c = ck.spec.input_shape
        cfg = SweepConfig(presets=args.presets, points=args.points, episodes=args.episodes,
                          shifts=_parse_shifts(args.shifts), seeds=args.seeds,
                          n_way=ck.spec.n_outputs, k_shot=args.k_shot, q_per_class=args.q_per_class,
                          base_domain=DomainParams(image_size=h, channels=c),
                          overrides=_parse_overrides(args.set))
    cfg.workers = args.workers
    table = sweep(ck, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "raw.csv").write_text(table.to_csv())
    _dump({"version": __version__, "checkpoint": str(ck_path),
           "checkpoint_sha256": _checkpoint_digest(ck_path), "sweep": cfg.to_dict()},
          out / "manifest.json")
    print(f"wrote {out / 'raw.csv'}")
    return 0


def cmd_report(args) -> int:
    table = SweepTable.from_csv(Path(args.raw).read_text())
    report = metrics(table)
    for fmt in args.format:
        for path in emit(report, fmt, args.out):
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repurpose", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-tasks", help="dump episodes in the checkpoint file format")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--q-per-class", type=int, default=15)
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_tasks)

    p = sub.add_parser("metatrain", help="first-order MAML on the base toy domain")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("conv", "mlp"), default="conv")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--inner-lr", type=float, default=0.1)
    p.add_argument("--inner-steps", type=int, default=5)
    p.add_argument("--outer-lr", type=float, default=0.003)
    p.add_argument("--meta-batch", type=int, default=4)
    p.add_argument("--val-episodes", type=int, default=100)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--q-per-class", type=int, default=10)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_metatrain)

    p = sub.add_parser("adapt", help="adapt a checkpoint to one episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", choices=preset_names())
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--M", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--lambda-alpha", type=int, choices=(0, 1))
    p.add_argument("--lambda-at", type=int, choices=(0, 1))
    p.add_argument("--lambda-aug", type=int, choices=(0, 1))
    p.add_argument("--enaug", action="store_true")
    p.add_argument("--ufgsm", action="store_true")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--freeze-bn", action="store_true")
    p.add_argument("--inverse-usa", action="store_true")
    p.add_argument("--inverse-ufgsm", action="store_true")
    p.add_argument("--clip-inputs", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--q-per-class", type=int, default=15)
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="stepsize sweep over presets, domains and seeds")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="rerun the sweep recorded in a manifest.json")
    p.add_argument("--presets", nargs="+", default=["sgd", "sgd_all"], choices=preset_names())
    p.add_argument("--points", type=int, default=25)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--shifts", nargs="+", default=["base=0", "shift1=1"],
                   help="domains as name=shift")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--q-per-class", type=int, default=15)
    p.add_argument("--set", nargs="*", metavar="KEY=JSON", help="override an AdaptConfig field")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="metrics and plots from a sweep table")
    p.add_argument("--raw", required=True)
    p.add_argument("--format", nargs="+", choices=("csv", "json", "svg"), default=["csv", "json"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "sweep" and not (args.manifest or args.checkpoint):
        build_parser().error("sweep needs --checkpoint or --manifest")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
