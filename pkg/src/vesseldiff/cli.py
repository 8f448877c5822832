"""Command-line interface.

Exit codes: 0 success, 1 I/O error, 2 argument/config error, 3 missing
prior-stage artifact, 4 numeric abort (non-finite loss), 5 diagnostic
check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import diffusion, metrics, ndtensor, phantom, pipeline
from .losses import TrainingError
from .nets import Denoiser, Segmenter
from .pipeline import PipelineConfig, PipelineState
from .schedule import linear_schedule

EXIT_OK = 0
EXIT_IO = 1
EXIT_ARGS = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5

STAGES = ("pretrain-a", "pretrain-b", "mine", "translate", "train-seg",
          "cooptimize", "all")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- config handling ----------------------------------------------------------

CONFIG_EXTRA_KEYS = ("data_dir", "out_dir")


def load_run_config(path: str, overrides: Dict[str, str]) -> dict:
    """Merge a JSON config file with command-line overrides (flags win)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise CliError(f"cannot read config '{path}': {e}", EXIT_IO)
    except json.JSONDecodeError as e:
        raise CliError(f"config '{path}' is not valid JSON: {e}", EXIT_ARGS)
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)} | set(CONFIG_EXTRA_KEYS)
    unknown = set(doc) - allowed
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_ARGS)
    doc = dict(doc)
    for key, value in overrides.items():
        if key not in allowed:
            raise CliError(f"unknown config key in override: '{key}'", EXIT_ARGS)
        if key in CONFIG_EXTRA_KEYS:
            doc[key] = value
        else:
            ftype = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}[key]
            doc[key] = _parse_value(value, ftype)
    for key in CONFIG_EXTRA_KEYS:
        if key not in doc:
            raise CliError(f"config is missing required key '{key}'", EXIT_ARGS)
    return doc


def _parse_value(text: str, ftype) -> object:
    if ftype in (bool, "bool"):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise CliError(f"expected a boolean, got '{text}'", EXIT_ARGS)
    if ftype in (int, "int"):
        return int(text)
    if ftype in (float, "float"):
        return float(text)
    return text


def build_pipeline_config(doc: dict) -> PipelineConfig:
    kwargs = {k: v for k, v in doc.items() if k not in CONFIG_EXTRA_KEYS}
    try:
        return PipelineConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid configuration: {e}", EXIT_ARGS)


# -- dataset I/O --------------------------------------------------------------

class Dataset:
    """Phantom dataset as loaded from a build_dataset output directory."""

    def __init__(self, data_dir: str):
        try:
            manifest = phantom.load_manifest(data_dir)
        except OSError as e:
            raise CliError(f"cannot read dataset manifest: {e}", EXIT_IO)
        self.manifest = manifest
        self.dir = data_dir
        self.images_a = self._load(manifest["paths"]["A_images"])
        self.masks_a = self._load(manifest["paths"]["A_masks"], binary=True)
        self.images_b = self._load(manifest["paths"]["B_images"])
        self.eval_masks_b = self._load(manifest["paths"]["B_eval_masks"], binary=True)

    def _load(self, rels: List[str], binary: bool = False) -> np.ndarray:
        imgs = []
        for rel in rels:
            img = phantom.read_pgm(os.path.join(self.dir, rel))
            if binary:
                img = (img >= 0.5).astype(np.float64)
            imgs.append(img)
        return np.stack(imgs) if imgs else np.zeros((0, 0, 0))

    def heldout_split(self, fraction: float):
        """Trailing fraction of B is held out from training, used for metrics."""
        n = self.images_b.shape[0]
        n_held = max(1, int(round(fraction * n))) if n else 0
        train_b = self.images_b[: n - n_held]
        held_imgs = self.images_b[n - n_held:]
        held_masks = self.eval_masks_b[n - n_held:]
        return train_b, held_imgs, held_masks


# -- run stages ---------------------------------------------------------------

def _require(path: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing prior-stage artifact: {path}", EXIT_MISSING)
    return path


def _save_model(cfg: PipelineConfig, stage: str, iteration: int, path: str,
                **models) -> None:
    state = PipelineState(config=cfg, stage=stage, iteration=iteration, **models)
    pipeline.save_checkpoint(state, path)


def _load_model(path: str, attr: str):
    state = pipeline.load_checkpoint(_require(path))
    model = getattr(state, attr)
    if model is None:
        raise CliError(f"checkpoint '{path}' does not contain '{attr}'", EXIT_MISSING)
    return model


def _append_history(out_dir: str, rows: List[dict]) -> None:
    path = os.path.join(out_dir, "metrics", "history.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fields = ["stage", "iteration", "dsc", "auc", "acc", "ahd",
              "hist_euclidean", "hist_cosine"]
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _write_images(dirpath: str, prefix: str, images: np.ndarray) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, img in enumerate(images):
        phantom.write_pgm(os.path.join(dirpath, f"{prefix}_{i:04d}.pgm"), img)


def run_stage(stage: str, cfg: PipelineConfig, data: Dataset, out_dir: str) -> None:
    ckpt = os.path.join(out_dir, "ckpt")
    gen = os.path.join(out_dir, "gen")
    os.makedirs(ckpt, exist_ok=True)
    os.makedirs(gen, exist_ok=True)
    train_b, held_imgs, held_masks = data.heldout_split(cfg.heldout_fraction)

    if stage == "pretrain-a":
        net = pipeline.pretrain_source(cfg, data.images_a, data.masks_a)
        _save_model(cfg, stage, 0, os.path.join(ckpt, "eps_a.ckpt"), eps_a=net)
        print(f"pretrain-a: saved {os.path.join(ckpt, 'eps_a.ckpt')}")

    elif stage == "pretrain-b":
        net = pipeline.pretrain_target(cfg, train_b)
        _save_model(cfg, stage, 0, os.path.join(ckpt, "eps_b.ckpt"), eps_b=net)
        print(f"pretrain-b: saved {os.path.join(ckpt, 'eps_b.ckpt')}")

    elif stage == "mine":
        eps_a = _load_model(os.path.join(ckpt, "eps_a.ckpt"), "eps_a")
        latents = pipeline.mine_latents(eps_a, data.images_a, data.masks_a, cfg)
        np.save(os.path.join(gen, "latents.npy"), latents)
        _write_images(os.path.join(gen, "latents"), "lat",
                      np.clip((latents[:, 0] + 1.0) / 2.0, 0.0, 1.0))
        print(f"mine: {latents.shape[0]} latents at subsequence depth {cfg.t0}")

    elif stage == "translate":
        eps_b = _load_model(os.path.join(ckpt, "eps_b.ckpt"), "eps_b")
        latents = np.load(_require(os.path.join(gen, "latents.npy")))
        synth = pipeline.synthesize_target(eps_b, latents, cfg)[:, 0]
        _write_images(os.path.join(gen, "iter0"), "synth", synth)
        print(f"translate: wrote {synth.shape[0]} images to {os.path.join(gen, 'iter0')}")

    elif stage == "train-seg":
        iter0_dir = _require(os.path.join(gen, "iter0"))
        synth = np.stack([
            phantom.read_pgm(os.path.join(iter0_dir, f"synth_{i:04d}.pgm"))
            for i in range(data.images_a.shape[0])])
        baseline = pipeline.train_segmenter(
            Segmenter(seed=cfg.seed + 3), data.images_a, data.masks_a, cfg)
        _save_model(cfg, "baseline", 0, os.path.join(ckpt, "seg_baseline.ckpt"),
                    segmenter=baseline)
        seg0 = pipeline.train_segmenter(
            Segmenter(seed=cfg.seed + 4), synth, data.masks_a, cfg)
        _save_model(cfg, "iter0", 0, os.path.join(ckpt, "seg_iter0.ckpt"),
                    segmenter=seg0)
        rows = []
        sb = pipeline.evaluate_segmenter(baseline, held_imgs, held_masks,
                                         cfg.pseudo_threshold)
        rows.append({"stage": "baseline", "iteration": -1, "dsc": sb.dsc,
                     "auc": sb.auc, "acc": sb.acc, "ahd": sb.ahd})
        s0 = pipeline.evaluate_segmenter(seg0, held_imgs, held_masks,
                                         cfg.pseudo_threshold)
        eu, co = pipeline.mean_hist_distance(synth, data.images_b)
        rows.append({"stage": "iter0", "iteration": 0, "dsc": s0.dsc,
                     "auc": s0.auc, "acc": s0.acc, "ahd": s0.ahd,
                     "hist_euclidean": eu, "hist_cosine": co})
        _append_history(out_dir, rows)
        print(f"train-seg: baseline DSC {sb.dsc:.4f}, iter0 DSC {s0.dsc:.4f}")

    elif stage == "cooptimize":
        eps_b = _load_model(os.path.join(ckpt, "eps_b.ckpt"), "eps_b")
        seg = _load_model(os.path.join(ckpt, "seg_iter0.ckpt"), "segmenter")

        def on_iteration(k, eps_b_k, seg_k, synth_k, row):
            _save_model(cfg, "cooptimize", k + 1,
                        os.path.join(ckpt, f"eps_b_k{k + 1}.ckpt"), eps_b=eps_b_k)
            _save_model(cfg, "cooptimize", k + 1,
                        os.path.join(ckpt, f"seg_k{k + 1}.ckpt"), segmenter=seg_k)
            _write_images(os.path.join(gen, f"iter{k + 1}"), "synth", synth_k)
            _append_history(out_dir, [dict(row, stage="cooptimize")])
            if "dsc" in row:
                print(f"cooptimize k={k + 1}: DSC {row['dsc']:.4f}")

        pipeline.cooptimize(eps_b, seg, data.images_a, data.masks_a, train_b,
                            cfg, held_imgs, held_masks, on_iteration=on_iteration)
        print(f"cooptimize: finished {cfg.K} iterations")

    else:
        raise CliError(f"unknown stage '{stage}'", EXIT_ARGS)


# -- diagnostic checks --------------------------------------------------------

def net_gradient_check(net, loss_of_net, rng: np.random.Generator,
                       coords_per_param: int = 4) -> float:
    """Max relative finite-difference error over sampled coordinates of every
    parameter tensor of a network."""
    max_err = 0.0
    for pname in sorted(net.params):
        p = net.params[pname]

        def f(probe, pname=pname, p=p):
            net.params[pname] = probe
            try:
                return loss_of_net(net)
            finally:
                net.params[pname] = p

        k = min(p.data.size, coords_per_param)
        coords = rng.choice(p.data.size, size=k, replace=False)
        probe = ndtensor.Tensor(p.data.copy(), requires_grad=True)
        max_err = max(max_err, ndtensor.finite_difference_check(f, probe, coords=coords))
    return max_err


def check_gradients(break_hook: bool = False, verbose: bool = True) -> bool:
    """Finite-difference gradient verification of both networks at 8x8.

    ``break_hook`` enables the deliberately wrong silu derivative, proving
    the suite fails when a derivative is broken.
    """
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 8, 8))
    cond = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float64)
    target = rng.standard_normal((1, 1, 8, 8))

    def denoiser_loss(net):
        d = net.forward(x, 7, cond) - ndtensor.Tensor(target)
        return (d * d).mean()

    def segmenter_loss(net):
        d = net.forward(x) - ndtensor.Tensor(target)
        return (d * d).mean()

    ok = True
    ndtensor._BREAK_SILU_GRAD = break_hook
    try:
        for label, net, loss_fn in (
                ("denoiser", Denoiser(conditional=True, seed=1), denoiser_loss),
                ("segmenter", Segmenter(seed=2), segmenter_loss)):
            # the output head is zero-initialized; perturb all parameters so
            # every gradient path is exercised
            for p in net.params.values():
                p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)
            max_err = net_gradient_check(net, loss_fn, rng)
            passed = max_err < 1e-4
            ok = ok and passed
            if verbose:
                print(f"grad {label}: max relative error {max_err:.3e} "
                      f"({'pass' if passed else 'FAIL'})")
    finally:
        ndtensor._BREAK_SILU_GRAD = False
    return ok


def check_roundtrip(verbose: bool = True) -> bool:
    """DDIM invert -> reverse must be exact for input-independent predictions."""
    rng = np.random.default_rng(1)
    sched = linear_schedule(100)
    max_err = 0.0
    for _ in range(100):
        x = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        for _ in range(20):
            t1, t2 = sorted(rng.choice(np.arange(1, 101), size=2, replace=False))
            up = diffusion.ddim_invert_step(x, int(t1), int(t2), eps, sched)
            back = diffusion.ddim_reverse_step(up, int(t2), int(t1), eps, sched)
            max_err = max(max_err, float(np.abs(back - x).max()))
    passed = max_err < 1e-9
    if verbose:
        print(f"roundtrip: max error {max_err:.3e} ({'pass' if passed else 'FAIL'})")
    return passed


def check_schedule(verbose: bool = True) -> bool:
    """Monotonicity and product-consistency of the default schedules."""
    ok = True
    for T in (1, 10, 200, 1000):
        sched = linear_schedule(T)
        ab = sched.alpha_bar
        mono = bool(np.all(np.diff(ab[1:]) < 0)) if T > 1 else True
        cons = float(np.abs(ab[1:] / ab[:-1] - (1.0 - sched.beta[1:])).max())
        passed = mono and cons < 1e-12 and 0 < ab[-1] < 1
        ok = ok and passed
        if verbose:
            print(f"schedule T={T}: consistency {cons:.3e} "
                  f"({'pass' if passed else 'FAIL'})")
    return ok


# -- commands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    manifest = phantom.DatasetManifest(
        m_source=args.m, n_target=args.n, size=args.size, seed=args.seed,
        out_dir=args.out)
    try:
        phantom.build_dataset(manifest)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    n_files = 2 * args.m + args.n
    print(f"phantom: wrote {n_files} training files "
          f"(+{args.n} eval-only masks) and manifest to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got '{item}'", file=sys.stderr)
            return EXIT_ARGS
        k, v = item.split("=", 1)
        overrides[k] = v
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        doc = load_run_config(args.config, overrides)
        cfg = build_pipeline_config(doc)
        if args.print_config:
            print(json.dumps(doc, indent=2, sort_keys=True))
            return EXIT_OK
        if not os.path.isdir(doc["data_dir"]):
            raise CliError(f"data_dir does not exist: {doc['data_dir']}", EXIT_ARGS)
        os.makedirs(doc["out_dir"], exist_ok=True)
        data = Dataset(doc["data_dir"])
        stages = [args.stage]
        if args.stage == "all":
            stages = ["pretrain-a", "pretrain-b", "mine", "translate",
                      "train-seg", "cooptimize"]
        for stage in stages:
            run_stage(stage, cfg, data, doc["out_dir"])
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except pipeline.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pred_files = sorted(f for f in os.listdir(args.pred_dir) if f.endswith(".pgm"))
        gt_files = sorted(f for f in os.listdir(args.gt_dir) if f.endswith(".pgm"))
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    orphans = set(pred_files) ^ set(gt_files)
    if orphans:
        print(f"error: unmatched files: {sorted(orphans)}", file=sys.stderr)
        return EXIT_ARGS
    rows = []
    for name in pred_files:
        probs = phantom.read_pgm(os.path.join(args.pred_dir, name))
        gt = (phantom.read_pgm(os.path.join(args.gt_dir, name)) >= 0.5).astype(float)
        pred = (probs >= 0.5).astype(float)
        try:
            a = metrics.auc(probs, gt)
        except metrics.UndefinedMetricError:
            a = float("nan")
        rows.append((name, metrics.dsc(pred, gt), a, metrics.acc(pred, gt),
                     metrics.ahd(pred, gt)))
    aucs = [r[2] for r in rows if np.isfinite(r[2])]
    mean_row = ("mean",
                float(np.mean([r[1] for r in rows])) if rows else 1.0,
                float(np.mean(aucs)) if aucs else float("nan"),
                float(np.mean([r[3] for r in rows])) if rows else 1.0,
                float(np.mean([r[4] for r in rows])) if rows else 0.0)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "dsc", "auc", "acc", "ahd"])
            for r in rows + [mean_row]:
                writer.writerow([r[0]] + [_fmt(float(v)) for v in r[1:]])
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"eval: mean DSC {mean_row[1]:.4f}, AUC {mean_row[2]:.4f}, "
          f"ACC {mean_row[3]:.4f}, AHD {mean_row[4]:.4f}")
    return EXIT_OK


def cmd_check(args) -> int:
    suites = {"grad": lambda: check_gradients(break_hook=args.break_grad),
              "roundtrip": check_roundtrip,
              "schedule": check_schedule}
    names = list(suites) if args.what == "all" else [args.what]
    ok = True
    for name in names:
        if not suites[name]():
            print(f"check failed: {name}", file=sys.stderr)
            ok = False
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseldiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a two-domain phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=200, help="source-domain sample count")
    p.add_argument("--n", type=int, default=200, help="target-domain sample count")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("run", help="run pipeline stages")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (flags win over the file)")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run diagnostic verification suites")
    p.add_argument("--what", choices=("grad", "roundtrip", "schedule", "all"),
                   default="all")
    p.add_argument("--break-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_ARGS if e.code not in (0, None) else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
