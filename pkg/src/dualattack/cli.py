"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 internal or validation failure.
Artifacts go under ``--out-dir``; the trained zoo is cached in
``<out-dir>/zoo`` and reused by every experiment subcommand.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from . import harness as H
from . import models as M
from .attacks import AttackConfig
from .errors import DualAttackError

log = logging.getLogger("dualattack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (dataset, zoo, PatchOut masks)")
    p.add_argument("--out-dir", default="runs", help="artifact directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--zoo-dir", default=None, help="zoo cache directory (default <out-dir>/zoo)")
    p.add_argument("--budget", type=int, default=H.DEFAULT_BUDGET,
                   help="number of clean-correct eval images")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p, dual_default=True):
    p.add_argument("--eps255", type=float, default=16.0, help="L-inf budget in /255 units")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--step", type=float, default=None, help="step size in /255 units (default eps/iters)")
    p.add_argument("--patches", type=int, default=None, help="PatchOut patch count T (default ceil(2N/3))")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--pna", action=argparse.BooleanOptionalAction, default=dual_default)
    p.add_argument("--patchout", action=argparse.BooleanOptionalAction, default=dual_default)
    p.add_argument("--l2", action=argparse.BooleanOptionalAction, default=dual_default)
    p.add_argument("--mi", type=float, default=0.0, metavar="MU", help="momentum decay (0 disables MI)")
    p.add_argument("--sgm-decay", type=float, default=1.0, metavar="G")
    p.add_argument("--no-sign", action="store_true", help="raw gradient steps instead of sign steps")


def attack_config(args, name: str | None = None) -> AttackConfig:
    eps = args.eps255 / 255
    parts = [n for n, on in (("PatchOut", args.patchout), ("L2", args.l2), ("PNA", args.pna)) if on]
    default_name = "Dual" if len(parts) == 3 else ("+".join(parts) or "BIM")
    if args.mi > 0:
        default_name = "MI+" + default_name if parts else "MI"
    return AttackConfig(
        epsilon=eps, iterations=args.iters,
        step_size=None if args.step is None else args.step / 255,
        patch_count=args.patches, lam=args.lam, use_pna=args.pna, use_patchout=args.patchout,
        use_l2=args.l2, mi_momentum=args.mi, sgm_decay=args.sgm_decay, sign_step=not args.no_sign,
        seed=args.seed, name=name or default_name)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic dataset to a container")
    _common(p)
    p.add_argument("--noise", type=float, default=None, help="pixel noise std (default: zoo dataset)")

    p = sub.add_parser("train", help="train one roster member")
    _common(p)
    p.add_argument("--member", default="S0", help="roster label, e.g. S0 or C1")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("zoo", help="train or load the whole roster and print accuracies")
    _common(p)

    p = sub.add_parser("attack", help="craft adversarial images on one surrogate")
    _common(p)
    p.add_argument("--surrogate", default="S0")
    _attack_flags(p)

    p = sub.add_parser("evaluate", help="ASR of every zoo model on a perturbation dump")
    _common(p)
    p.add_argument("input", help="perturbation folder written by 'attack'")

    p = sub.add_parser("transfer-matrix", help="BIM and the flagged attack, all surrogates")
    _common(p)
    _attack_flags(p)

    p = sub.add_parser("ablate", help="the seven PatchOut/L2/PNA combinations")
    _common(p)
    p.add_argument("--surrogate", action="append", help="restrict to these surrogates")
    _attack_flags(p, dual_default=False)

    p = sub.add_parser("sweep", help="T and lambda sweeps on one surrogate")
    _common(p)
    p.add_argument("--surrogate", default="S0")
    _attack_flags(p, dual_default=False)

    p = sub.add_parser("pna-paths", help="8 attention-gradient chunk patterns")
    _common(p)
    p.add_argument("--surrogate", default="S0")
    _attack_flags(p, dual_default=False)

    p = sub.add_parser("patch-stacking", help="stacked ten-patch vs whole-image perturbations")
    _common(p)
    p.add_argument("--surrogate", default="S0")
    p.add_argument("--stages", default=",".join(map(str, H.STAGES)))
    _attack_flags(p, dual_default=False)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("dump-images", help="write images of a container as binary PPM files")
    p.add_argument("input", help="dataset container or perturbation folder")
    p.add_argument("--tensor", default=None, help="tensor name (default: x_adv or eval_images)")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# -- helpers ------------------------------------------------------------------------


def _zoo(args):
    cache = args.zoo_dir or os.path.join(args.out_dir, "zoo")
    models, train, evaluation = D.model_zoo(args.seed, cache, args.jobs, return_data=True)
    return models, train, evaluation


def _lab(args) -> H.Lab:
    models, _, evaluation = _zoo(args)
    return H.make_lab(args.seed, models, evaluation, args.budget)


def _emit(report: H.TransferReport, args, summary=None):
    csv_path, json_path = report.write(args.out_dir)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    if summary:
        for line in summary:
            print(line)


def _vit_lines(report, lab):
    return [f"{a:24s} black-box ViT ASR {H.vit_victim_mean(report, lab, a):6.2f}" for a in report.attacks()]


def write_ppm(path, image) -> None:
    """8-bit binary PPM (P6) of an ``(H, W, 3)`` image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DualAttackError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    raw = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args):
    spec = D.zoo_spec(args.seed)
    if args.noise is not None:
        spec = D.DatasetSpec(**{**spec.__dict__, "noise_std": args.noise})
    train, evaluation = D.gen_dataset(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"dataset_seed{args.seed}_{train.digest()}.pgrd")
    meta = {"num_classes": spec.num_classes, "noise_std": spec.noise_std, "seed": spec.seed,
            "train_digest": train.digest(), "eval_digest": evaluation.digest()}
    M.write_container(path, "bundle", meta, {
        "train_images": train.images, "train_labels": train.labels.astype(np.float64),
        "eval_images": evaluation.images, "eval_labels": evaluation.labels.astype(np.float64)})
    print(f"wrote {path}")
    return 0


def cmd_train(args):
    roster = {name: (arch, hyper) for name, arch, hyper in D.ZOO_ROSTER}
    if args.member not in roster:
        raise UsageError(f"unknown roster member {args.member!r}; choose from {sorted(roster)}")
    arch, hyper = roster[args.member]
    spec = D.zoo_spec(args.seed)
    changes = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr)) if v is not None}
    if changes:
        hyper = D.TrainHyper(**{**hyper.__dict__, **changes})
    train, evaluation = D.gen_dataset(spec)
    res = D.train_model(arch, train, hyper, args.seed, evaluation, label=args.member)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"model_{args.member}_seed{args.seed}.pgrd")
    M.save_checkpoint(res.model, path)
    print(f"{args.member}: train accuracy {res.train_accuracy:.4f}, eval accuracy {res.eval_accuracy:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_zoo(args):
    models, _, evaluation = _zoo(args)
    for m in models:
        print(f"{m.label}  {m.kind}  eval accuracy {D.accuracy(m, evaluation):.4f}  digest {m.digest()}")
    return 0


def cmd_attack(args):
    lab = _lab(args)
    cfg = attack_config(args)
    surrogate = lab.model(args.surrogate)
    x_adv = H.craft(surrogate, lab, cfg, args.jobs)
    asr = H.compute_asr(surrogate, x_adv, lab.labels)
    folder = os.path.join(args.out_dir, f"attack_seed{args.seed}_{surrogate.label}_{cfg.digest()}")
    os.makedirs(folder, exist_ok=True)
    meta = {"config_json": json.dumps(cfg.to_dict(), sort_keys=True), "surrogate": surrogate.label,
            "surrogate_digest": surrogate.digest(), "zoo_seed": args.seed}
    for i, img_id in enumerate(lab.image_ids):
        M.write_container(os.path.join(folder, f"img{int(img_id):05d}.pgrd"), "bundle",
                          dict(meta, image_id=int(img_id), label=int(lab.labels[i])),
                          {"delta": x_adv[i] - lab.images[i], "x_adv": x_adv[i]})
    print(f"{cfg.name} on {surrogate.label}: alpha {cfg.alpha * 255:.4g}/255, "
          f"white-box ASR {asr:.2f} over {len(lab.labels)} images")
    print(f"wrote {len(lab.labels)} perturbation files to {folder}")
    return 0


def read_dump(folder):
    """Load a per-image perturbation folder: ``(meta, x_adv, delta, labels, image_ids)``."""
    if not os.path.isdir(folder):
        raise DualAttackError(f"{folder} is not a perturbation folder")
    names = sorted(n for n in os.listdir(folder) if n.endswith(".pgrd"))
    if not names:
        raise DualAttackError(f"{folder} holds no perturbation files")
    x_adv, delta, labels, ids = [], [], [], []
    meta = None
    for n in names:
        _, m, t = M.read_container(os.path.join(folder, n))
        if "x_adv" not in t or "delta" not in t or "config_json" not in m:
            raise DualAttackError(f"{n} is not a perturbation file")
        meta = meta or m
        x_adv.append(t["x_adv"])
        delta.append(t["delta"])
        labels.append(int(m["label"]))
        ids.append(int(m["image_id"]))
    return meta, np.stack(x_adv), np.stack(delta), np.array(labels), np.array(ids)


def cmd_evaluate(args):
    meta, x_adv, delta, labels, ids = read_dump(args.input)
    cfg_dict = json.loads(meta["config_json"])
    cfg_dict.pop("alpha", None)
    cfg = AttackConfig(**cfg_dict)
    models, _, evaluation = _zoo(args)
    lab = H.Lab(args.seed, models, x_adv - delta, labels, ids, evaluation.digest())
    surrogate = lab.model(meta["surrogate"])
    rows = [H._row(lab, surrogate, v, cfg, x_adv) for v in lab.models]
    report = H.TransferReport("evaluate", rows, H._metadata(lab, [cfg], surrogates=[surrogate.label],
                                                         input=os.path.basename(os.path.normpath(args.input))))
    _emit(report, args, [f"{r.victim:4s} ASR {r.asr:6.2f}" for r in rows])
    return 0


def cmd_transfer_matrix(args):
    lab = _lab(args)
    cfg = attack_config(args)
    bim = cfg.replace(use_pna=False, use_patchout=False, use_l2=False, mi_momentum=0.0, name="BIM")
    cfgs = [bim] if cfg.name == "BIM" else [bim, cfg]
    report = H.run_transfer_matrix(lab, cfgs, jobs=args.jobs)
    lines = _vit_lines(report, lab)
    lines += [f"MASR {v.label}: " + ", ".join(f"{c.name} {H.compute_masr(report, v.label, c.name):.2f}" for c in cfgs)
              for v in lab.models]
    _emit(report, args, lines)
    return 0


def cmd_ablate(args):
    lab = _lab(args)
    base = attack_config(args).replace(use_pna=False, use_patchout=False, use_l2=False)
    surrogates = [lab.model(s) for s in args.surrogate] if args.surrogate else None
    report = H.run_ablation(lab, surrogates, args.jobs, base)
    fam = H.family_means(report, lab)
    lines = [f"{a:16s} ViT {fam[a]['vit']:6.2f}  CNN {fam[a]['cnn']:6.2f}" for a in report.attacks()]
    _emit(report, args, lines)
    return 0


def cmd_sweep(args):
    lab = _lab(args)
    base = attack_config(args).replace(use_pna=False, use_patchout=False, use_l2=False)
    report = H.run_sweeps(lab, lab.model(args.surrogate), jobs=args.jobs, base=base)
    _emit(report, args, _vit_lines(report, lab))
    return 0


def cmd_pna_paths(args):
    lab = _lab(args)
    base = attack_config(args).replace(use_pna=False, use_patchout=False, use_l2=False)
    report = H.run_pna_paths(lab, lab.model(args.surrogate), args.jobs, base)
    _emit(report, args, _vit_lines(report, lab))
    return 0


def cmd_patch_stacking(args):
    try:
        stages = [int(s) for s in args.stages.split(",") if s]
    except ValueError:
        raise UsageError(f"--stages expects comma-separated integers, got {args.stages!r}")
    lab = _lab(args)
    base = attack_config(args).replace(use_pna=False, use_patchout=False, use_l2=False)
    report = H.run_patch_stacking(lab, lab.model(args.surrogate), stages, args.jobs, base)
    _emit(report, args, _vit_lines(report, lab))
    return 0


def cmd_gradcheck(args):
    from .oracles import GRADCHECK_TOL, kronecker_checks, layer_checks, model_checks

    ok = True
    for name, err in layer_checks(args.seed).items():
        ok &= err < GRADCHECK_TOL
        print(f"layer {name:14s} rel-err {err:.3e}")
    checks = model_checks(args.seed)
    gap = checks.pop("pna_vs_full_maxabs")
    for name, err in checks.items():
        ok &= err < GRADCHECK_TOL
        print(f"vit   {name:14s} rel-err {err:.3e}")
    ok &= gap > 1e-8
    print(f"vit   pna-vs-full    max-abs {gap:.3e}")
    kron = kronecker_checks()
    ok &= kron < 1e-6
    print(f"kronecker identity   max-abs {kron:.3e}")
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return 0 if ok else 2


def cmd_dump_images(args):
    if os.path.isdir(args.input):
        _, x_adv, _, _, ids = read_dump(args.input)
        name, images = "x_adv", x_adv
    else:
        _, _, tensors = M.read_container(args.input)
        name = args.tensor or next((n for n in ("x_adv", "eval_images", "train_images") if n in tensors), None)
        if name is None or name not in tensors:
            raise DualAttackError(f"{args.input} has no image tensor {args.tensor or ''}".strip())
        images = tensors[name]
        if images.ndim == 3:
            images = images[None]
        ids = np.arange(len(images))
    if images.ndim != 4:
        raise DualAttackError(f"tensor {name!r} is not an image batch")
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(os.path.normpath(args.input)))[0]
    for i in range(min(args.count, len(images))):
        path = os.path.join(args.out_dir, f"{stem}_{name}_{int(ids[i]):05d}.ppm")
        write_ppm(path, images[i])
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "zoo": cmd_zoo, "attack": cmd_attack,
    "evaluate": cmd_evaluate, "transfer-matrix": cmd_transfer_matrix, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "pna-paths": cmd_pna_paths, "patch-stacking": cmd_patch_stacking,
    "gradcheck": cmd_gradcheck, "dump-images": cmd_dump_images,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dualattack {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DualAttackError, OSError, ValueError) as exc:
        print(f"dualattack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
