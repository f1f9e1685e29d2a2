"""``cvattn`` command line: one executable, one subcommand per capability.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Every run writes ``resolved_config.json`` into ``--out-dir``; feeding that
file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- argument definitions ---------------------------------------------------

S = argparse.SUPPRESS


def _globals(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default(0))
    p.add_argument("--precision", choices=("f32", "f64"), default=default(None))
    p.add_argument("--threads", type=int, default=default(1))
    p.add_argument("--out-dir", default=default("."))
    p.add_argument("--config", default=default(None), help="JSON file; flags override its values")


def _cv_flags(p, prefix: str = "") -> None:
    for name in ("mu", "nu", "lambda1", "lambda2", "eps", "dt", "eta"):
        p.add_argument(f"--{prefix}{name}", dest=f"{prefix.replace('-', '_')}{name}", type=float, default=S)
    if not prefix:
        p.add_argument("--iters", type=int, default=S)


def _dt_flags(p, prefix: str = "") -> None:
    d = prefix.replace("-", "_")
    p.add_argument(f"--{prefix}lambda", dest=f"{d}lambda_dt", type=float, default=S)
    p.add_argument(f"--{prefix}radius", dest=f"{d}kernel_radius", type=int, default=S)
    p.add_argument(f"--{prefix}metric", dest=f"{d}metric", choices=("euclidean", "squared-euclidean"), default=S)
    p.add_argument(f"--{prefix}allow-truncation", dest=f"{d}allow_truncation", action="store_true", default=S)


def _model_flags(p) -> None:
    p.add_argument("--gate-mode", choices=("none", "classic", "chanvese"), default=S)
    p.add_argument("--depth", type=int, default=S)
    p.add_argument("--base-channels", type=int, default=S)
    p.add_argument("--K", type=int, default=S)
    p.add_argument("--tau0", type=float, default=S)
    p.add_argument("--saturation-tol", type=float, default=S)
    _dt_flags(p, "dt-")
    _cv_flags(p, "gate-")


def _train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--w-dice", type=float, default=S)
    p.add_argument("--w-bce", type=float, default=S)
    p.add_argument("--augment", default=S, help="comma list of toggles, 'all' or 'none'")
    p.add_argument("--checkpoint-epochs", default=S, help="comma list, e.g. 1,10,30")
    p.add_argument("--dump-samples", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="cvattn", description=__doc__.splitlines()[0])
    _globals(root, lambda v: v)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, lambda v: S)
        return p

    p = add("segment", "standalone Chan-Vese segmentation of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--init-circle", default=S, help="cx,cy,r in pixels (default: centred, r = min(H, W) / 4)")
    _cv_flags(p)

    p = add("dt", "soft distance transform of an activation image")
    p.add_argument("--image", required=True)
    _dt_flags(p)

    p = add("synth", "write a synthetic dataset")
    for name, typ in (("size", int), ("n-samples", int), ("contrast", float), ("background", float),
                      ("background-amplitude", float), ("noise-sigma", float), ("n-confounders", int),
                      ("max-retries", int), ("split-seed", int)):
        p.add_argument(f"--{name}", type=typ, default=S)

    p = add("train", "train a U-Net on a dataset directory")
    p.add_argument("--data", default=S, help="dataset root holding manifest_train.csv and manifest_val.csv")
    p.add_argument("--train-manifest", default=S)
    p.add_argument("--val-manifest", default=S)
    _model_flags(p)
    _train_flags(p)

    p = add("eval", "evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--normalize", dest="normalize", action="store_true", default=S, help="default: as recorded in the checkpoint")
    p.add_argument("--no-normalize", dest="normalize", action="store_false", default=S)

    p = add("gradcheck", "finite-difference gradient suites (f64)")
    p.add_argument("--suite", choices=("ops", "cv", "dt", "gate", "unet", "all"), required=True)

    p = add("attn-dump", "per-gate attention heatmaps for k samples")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat for an epoch sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", type=int, default=S)
    p.add_argument("--normalize", dest="normalize", action="store_true", default=S, help="default: as recorded in the checkpoint")
    p.add_argument("--no-normalize", dest="normalize", action="store_false", default=S)
    return root


# --- config resolution ------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    # a resolved_config.json nests the settings under "config"
    return data.get("config", data)


def _pick(ns: dict, keys, prefix: str = "") -> dict:
    return {k: ns[prefix + k] for k in keys if prefix + k in ns}


CV_KEYS = ("mu", "nu", "lambda1", "lambda2", "eps", "dt", "iters", "eta")
DT_KEYS = ("lambda_dt", "kernel_radius", "metric", "allow_truncation")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma separated list of integers, got {text!r}") from None


def _augment_toggles(spec):
    from .data import AUGMENTATIONS, AugmentToggles

    if isinstance(spec, dict):
        return AugmentToggles(**spec)
    spec = str(spec).strip()
    if spec == "all":
        return AugmentToggles.all_on()
    if spec in ("", "none"):
        return AugmentToggles()
    names = [s.strip() for s in spec.split(",")]
    bad = [n for n in names if n not in AUGMENTATIONS]
    if bad:
        raise UsageError(f"unknown augmentation(s) {bad}; choose from {list(AUGMENTATIONS)}")
    return AugmentToggles(**{n: True for n in names})


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- flags into one JSON-able dict per subcommand."""
    ns = vars(args)
    file = _load_config_file(ns.get("config"))
    cmd = ns["command"]
    seed = ns.get("seed", file.get("seed", 0))
    precision = ns.get("precision") or file.get("precision") or ("f64" if cmd in ("segment", "dt") else "f32")
    out = {"command": cmd, "seed": seed, "precision": precision, "threads": ns.get("threads", 1)}

    if cmd == "segment":
        from .chan_vese import ChanVeseParams

        cv = ChanVeseParams(**{**file.get("cv", {}), **_pick(ns, CV_KEYS)})
        circle = ns.get("init_circle", file.get("init_circle"))
        if circle is not None and not isinstance(circle, list):
            try:
                circle = [float(v) for v in str(circle).split(",")]
            except ValueError:
                raise UsageError(f"--init-circle expects cx,cy,r, got {circle!r}") from None
        if circle is not None and (len(circle) != 3 or circle[2] <= 0):
            raise UsageError(f"--init-circle expects cx,cy,r with r > 0, got {circle}")
        out.update(image=ns["image"], init_circle=circle, cv=cv.to_dict())
    elif cmd == "dt":
        from .distance_transform import DtParams

        raw = {**file.get("dt", {}), **_pick(ns, DT_KEYS)}
        if "lambda_dt" in raw and not raw["lambda_dt"] > 0:
            raise UsageError(f"--lambda must be > 0, got {raw['lambda_dt']}")
        out.update(image=ns["image"], dt=DtParams(**raw).to_dict())
    elif cmd == "synth":
        from .data import SynthConfig

        keys = ("size", "n_samples", "contrast", "background", "background_amplitude", "noise_sigma", "n_confounders", "max_retries")
        synth = {**file.get("synth", {}), **_pick(ns, keys)}
        synth.setdefault("seed", seed)
        cfg = SynthConfig.from_dict(synth)
        out.update(synth=cfg.to_dict(), split_seed=ns.get("split_seed", file.get("split_seed", cfg.seed)))
    elif cmd == "train":
        from .attention import CvGateConfig
        from .training import TrainConfig
        from .unet import UNetConfig

        m = dict(file.get("model", {}))
        m.update(_pick(ns, ("gate_mode", "depth", "base_channels")))
        m.setdefault("seed", seed)
        m["precision"] = ns.get("precision") or m.get("precision") or precision
        g = dict(m.pop("gate", {}))
        g.update(_pick(ns, ("K", "tau0", "saturation_tol")))
        g["dt"] = {**g.get("dt", {}), **_pick(ns, DT_KEYS, "dt_")}
        g["cv"] = {**g.get("cv", {}), **_pick(ns, [k for k in CV_KEYS if k != "iters"], "gate_")}
        model = UNetConfig(gate=CvGateConfig.from_dict(g), **m)
        t = dict(file.get("train", {}))
        t.update(_pick(ns, ("epochs", "batch_size", "lr", "weight_decay", "w_dice", "w_bce", "dump_samples")))
        t.setdefault("seed", seed)
        if "augment" in ns:
            t["augment"] = _augment_toggles(ns["augment"]).to_dict()
        elif "augment" in t:
            t["augment"] = _augment_toggles(t["augment"]).to_dict()
        if "checkpoint_epochs" in ns:
            t["checkpoint_epochs"] = _csv_ints(ns["checkpoint_epochs"])
        train = TrainConfig(**t)
        data = dict(file.get("data", {}))
        data.update(_pick(ns, ("data", "train_manifest", "val_manifest")))
        if "data" in data:
            root = Path(data.pop("data"))
            data.setdefault("train_manifest", str(root / "manifest_train.csv"))
            data.setdefault("val_manifest", str(root / "manifest_val.csv"))
        if "train_manifest" not in data or "val_manifest" not in data:
            raise UsageError("train needs --data or both --train-manifest and --val-manifest")
        out.update(model=model.to_dict(), train=train.to_dict(), data=data)
        out["precision"] = model.precision
    elif cmd == "eval":
        out.update(checkpoint=ns["checkpoint"], manifest=ns["manifest"],
                   threshold=ns.get("threshold", file.get("threshold", 0.5)),
                   normalize=ns.get("normalize", file.get("normalize")))
        out["precision"] = ns.get("precision") or file.get("precision")
    elif cmd == "gradcheck":
        out.update(suite=ns["suite"], precision="f64")
    elif cmd == "attn-dump":
        samples = ns.get("samples", file.get("samples", 1))
        if samples < 1:
            raise UsageError(f"--samples must be >= 1, got {samples}")
        out.update(checkpoints=ns["checkpoint"], manifest=ns["manifest"], samples=samples,
                   normalize=ns.get("normalize", file.get("normalize")))
        out["precision"] = ns.get("precision") or file.get("precision")
    return out


# --- commands -----------------------------------------------------------------


def _write_resolved(out_dir: Path, cfg: dict) -> None:
    from .serialization import canonical_json, write_atomic

    write_atomic(out_dir / "resolved_config.json", (canonical_json({"config": cfg}) + "\n").encode())


def _heatmap(arr, path):
    """Min-max scale one 2-d map to 8 bits; returns the (min, max) used."""
    import numpy as np

    from .data import save_image

    a = np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    save_image(scaled, path)
    return lo, hi


def cmd_segment(cfg: dict, out: Path) -> int:
    import numpy as np

    from .chan_vese import ChanVeseParams, circle_levelset, cv_energy, cv_evolve, cv_segment
    from .data import load_image, save_mask
    from .params import resolve_dtype
    from .serialization import save_tnsr, write_atomic
    from .training import fmt

    dtype = resolve_dtype(cfg["precision"])
    img = load_image(cfg["image"]).astype(dtype)
    H, W = img.shape
    cx, cy, r = cfg["init_circle"] or ((W - 1) / 2.0, (H - 1) / 2.0, min(H, W) / 4.0)
    phi0 = circle_levelset((H, W), (cy, cx), r, dtype=dtype)
    p = ChanVeseParams(**cfg["cv"])
    phi, energies = cv_evolve(img, phi0, p, trace=True)
    phi = np.asarray(phi.data)
    save_mask(cv_segment(phi), out / "mask.png")
    save_tnsr(phi, out / "phi.tnsr")
    rows = ["iter,energy"] + [f"{i},{fmt(e)}" for i, e in enumerate(energies)]
    write_atomic(out / "energy.csv", ("\n".join(rows) + "\n").encode())
    print(f"segmented {cfg['image']}: {int(cv_segment(phi).sum())} foreground px, final energy {energies[-1]:.6g}")
    return EXIT_OK


def cmd_dt(cfg: dict, out: Path) -> int:
    import numpy as np

    from .data import load_image
    from .distance_transform import DtParams, soft_distance_transform
    from .params import resolve_dtype
    from .serialization import canonical_json, save_tnsr, write_atomic

    alpha = load_image(cfg["image"]).astype(resolve_dtype(cfg["precision"]))
    beta = np.asarray(soft_distance_transform(alpha[None, None], DtParams(**cfg["dt"])).data)[0, 0]
    save_tnsr(beta, out / "beta.tnsr")
    lo, hi = _heatmap(beta, out / "beta.png")
    write_atomic(out / "beta.json", (canonical_json({"beta.png": {"min": lo, "max": hi}}) + "\n").encode())
    print(f"beta range [{lo:.6g}, {hi:.6g}]")
    return EXIT_OK


def cmd_synth(cfg: dict, out: Path) -> int:
    from .data import SynthConfig, generate_synthetic, write_dataset

    sc = SynthConfig.from_dict(cfg["synth"])
    samples = generate_synthetic(sc)
    manifest = write_dataset(samples, out, sc, cfg["split_seed"])
    print(f"wrote {len(samples)} samples to {manifest}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    from .data import read_manifest
    from .training import TrainConfig, eval_csv_bytes, evaluate, train
    from .serialization import write_atomic
    from .unet import UNetConfig, build

    train_set = read_manifest(cfg["data"]["train_manifest"])
    val_set = read_manifest(cfg["data"]["val_manifest"])
    model = build(UNetConfig.from_dict(cfg["model"]))
    tc = TrainConfig(**cfg["train"])
    history = train(model, train_set, val_set, tc, out)
    report, rows = evaluate(model, val_set, normalize=tc.augment.normalize)
    write_atomic(out / "eval_val.csv", eval_csv_bytes(rows, report))
    last = history[-1]
    print(f"epoch {last['epoch']}: train loss {last['train_loss']:.4f}, val dice {report.dice[0]:.4f}±{report.dice[1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from .data import read_manifest
    from .serialization import write_atomic
    from .training import checkpoint_normalize, eval_csv_bytes, evaluate, load_model

    model = load_model(cfg["checkpoint"], cfg["precision"])
    data = read_manifest(cfg["manifest"])
    normalize = cfg["normalize"] if cfg["normalize"] is not None else checkpoint_normalize(cfg["checkpoint"])
    report, rows = evaluate(model, data, cfg["threshold"], normalize)
    write_atomic(out / "eval.csv", eval_csv_bytes(rows, report))
    for key in ("dice", "iou", "hausdorff_mm", "fpr", "fnr"):
        m, s = getattr(report, key)
        print(f"{key:13s} {m:.4f} ± {s:.4f}")
    if report.n_hausdorff_excluded:
        print(f"hausdorff excluded {report.n_hausdorff_excluded} of {report.n} samples (empty mask)")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    from .gradsuite import SUITES, run_suite

    suites = SUITES if cfg["suite"] == "all" else (cfg["suite"],)
    worst_ok = True
    for s in suites:
        for name, err, tol in run_suite(s, cfg["seed"]):
            ok = err <= tol
            worst_ok &= ok
            print(f"{'PASS' if ok else 'FAIL'} {s:5s} {name:26s} max_rel_err={err:.3e} tol={tol:.0e}")
    return EXIT_OK if worst_ok else EXIT_RUNTIME


def cmd_attn_dump(cfg: dict, out: Path) -> int:
    import numpy as np

    from .data import read_manifest
    from .serialization import canonical_json, save_tnsr, write_atomic
    from .training import checkpoint_normalize, load_model, stack_batch
    from .ops import avgpool

    data = read_manifest(cfg["manifest"])[: cfg["samples"]]
    sidecar: dict = {}
    stats = ["checkpoint,sample,gate,map,min,max,inside_mean,outside_mean"]
    for ck in cfg["checkpoints"]:
        model = load_model(ck, cfg["precision"])
        if model.cfg.gate_mode == "none":
            raise RuntimeError(f"{ck}: checkpoint has no attention gates")
        tag = Path(ck).stem
        normalize = cfg["normalize"] if cfg["normalize"] is not None else checkpoint_normalize(ck)
        images, masks = stack_batch(data, normalize)
        _, _, diags = model.forward(images, return_diagnostics=True)
        for level, d in enumerate(diags):
            for key in ("alpha", "beta", "gamma", "zeta"):
                if key not in d:
                    continue
                maps = np.asarray(d[key].data, dtype=np.float64)
                factor = masks.shape[-1] // maps.shape[-1]
                for i in range(len(data)):
                    name = f"{tag}_s{i:03d}_gate{level}_{key}"
                    lo, hi = _heatmap(maps[i, 0], out / f"{name}.png")
                    save_tnsr(maps[i, 0], out / f"{name}.tnsr")
                    sidecar[f"{name}.png"] = {"min": lo, "max": hi}
                    m = masks[i, 0] if factor == 1 else avgpool(masks[i, 0], factor)
                    inside = m >= 0.5
                    vals = maps[i, 0]
                    fmt = lambda v: "" if v is None else f"{v:.10g}"
                    stats.append(",".join([tag, str(i), str(level), key, fmt(lo), fmt(hi),
                                           fmt(vals[inside].mean() if inside.any() else None),
                                           fmt(vals[~inside].mean() if (~inside).any() else None)]))
    write_atomic(out / "heatmaps.json", (canonical_json(sidecar) + "\n").encode())
    write_atomic(out / "attn_stats.csv", ("\n".join(stats) + "\n").encode())
    print(f"wrote {len(sidecar)} heatmaps to {out}")
    return EXIT_OK


COMMANDS = {
    "segment": cmd_segment,
    "dt": cmd_dt,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "attn-dump": cmd_attn_dump,
}


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        _limit_threads(args.threads)
        cfg = resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(out, cfg)
        return COMMANDS[cfg["command"]](cfg, out)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
    except Exception as exc:  # runtime failures of any module surface as exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
