"""``quietsr`` command line: training, inference, benchmarks, sweeps and diagnostics.

Exit codes: 0 success, 1 the command ran but its acceptance condition failed,
2 usage error, 3 any library error (message on stderr).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit, plots, qsim
from .dataio import load_dataset
from .errors import CapacityError, QuietSRError, ValidationError
from .model import ModelConfig, init_params, load_checkpoint, model_fwd, save_checkpoint
from .train import TrainConfig, Trainer, grad_check, predict, train_epoch

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3
MICRO = {"num_layers": 2, "layers_per_block": 2}


class UsageError(QuietSRError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(model_cfg: dict, train_cfg: dict, pairs):
    """Apply ``key=value`` strings; keys may be prefixed ``model.`` or ``train.``."""
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        value = _parse_value(raw)
        scope, _, name = key.rpartition(".")
        if scope == "model" or (not scope and name in model_keys):
            if name not in model_keys:
                raise UsageError(f"unknown model setting {name!r}")
            model_cfg[name] = value
        elif scope == "train" or (not scope and name in train_keys):
            if name not in train_keys:
                raise UsageError(f"unknown training setting {name!r}")
            train_cfg[name] = value
        else:
            raise UsageError(f"unknown setting {key!r}")
    return model_cfg, train_cfg


def _load_config_file(path):
    if not path:
        return {}, {}
    data = json.loads(Path(path).read_text())
    return dict(data.get("model", {})), dict(data.get("train", {}))


def build_configs(args, micro=False):
    model_cfg, train_cfg = _load_config_file(getattr(args, "config", None))
    if micro:
        model_cfg = {**MICRO, **model_cfg}
    apply_overrides(model_cfg, train_cfg, getattr(args, "set", None))
    train_cfg.setdefault("seed", args.seed)
    return ModelConfig.from_dict(model_cfg), train_cfg


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def hash_inputs(paths, extra):
    h = hashlib.sha256()
    h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    for p in paths:
        if p and Path(p).is_file():
            h.update(Path(p).read_bytes())
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    started: float
    ended: float | None = None
    outputs: list = dataclasses.field(default_factory=list)
    status: str = "started"

    def write(self, out_dir):
        _atomic_write(Path(out_dir) / "manifest.json",
                      json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _start(args, config_snapshot, inputs):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    snapshot.update(config_snapshot)
    manifest = RunManifest(args.command, snapshot, args.seed,
                           hash_inputs(inputs, snapshot), time.time())
    manifest.write(out)
    return out, manifest


def _finish(manifest, out, outputs, status="ok"):
    manifest.outputs = [str(p) for p in outputs]
    manifest.ended = time.time()
    manifest.status = status
    manifest.write(out)


def _workers(args):
    return args.workers if args.workers is not None else qsim.default_workers()


def _model_fn(params, config, workers):
    def run(lr):
        return predict(params, config, lr, workers=workers)

    run.__name__ = "QUIET-SR"
    return run


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    config, tcfg_dict = build_configs(args, micro=args.micro)
    if args.lr is not None:
        tcfg_dict["lr"] = args.lr
    if args.epochs is not None:
        tcfg_dict["epochs"] = args.epochs
    if args.batch_size is not None:
        tcfg_dict["batch_size"] = args.batch_size
    if args.max_steps is not None:
        tcfg_dict["max_steps"] = args.max_steps
    tcfg = TrainConfig(**tcfg_dict)
    out, manifest = _start(args, {"model": config.to_dict(), "train": tcfg.to_dict()},
                           [args.dataset, args.test_dataset])
    train = load_dataset(args.dataset, limit=args.subset)
    workers = _workers(args)
    params = init_params(config, np.random.default_rng(tcfg.seed))
    log_path = out / "steps.jsonl"
    log_path.write_text("")
    trainer = Trainer(config, params, tcfg, workers=workers, log_path=str(log_path))
    ckpt = out / "checkpoint.qsr1"
    outputs = [log_path, ckpt]
    while trainer.epoch < tcfg.epochs:
        if tcfg.max_steps is not None and trainer.step >= tcfg.max_steps:
            break
        stats = train_epoch(trainer, train)
        save_checkpoint(ckpt, trainer.params, config, seed=tcfg.seed, epoch=trainer.epoch,
                        extra={"step": trainer.step})
        print(f"epoch {trainer.epoch}: mean_loss={stats['mean_loss']:.6f} "
              f"steps={stats['steps']} wall={stats['wall_time']:.1f}s")
    outputs.append(plots.loss_curve(trainer.history, out / "loss.png"))
    if args.test_dataset:
        test = load_dataset(args.test_dataset, split="test", limit=args.test_subset)
        rep = evalkit.benchmark(_model_fn(trainer.params, config, workers), test)
        csv_text, table = evalkit.emit_table([rep], args.reference)
        (out / "metrics.csv").write_text(csv_text)
        (out / "metrics.txt").write_text(table)
        outputs += [out / "metrics.csv", out / "metrics.txt"]
        print(table, end="")
    _finish(manifest, out, outputs)
    return EXIT_OK


def _read_png(path):
    from PIL import Image

    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
    arr = np.asarray(img, dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


def to_uint8(img):
    """Clamp to [0, 1] and quantise with round-half-even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    from PIL import Image

    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def cmd_sr(args):
    params, config, _ = load_checkpoint(args.checkpoint)
    image = _read_png(args.input).astype(np.float64) / 255.0
    h, w = image.shape[:2]
    if h % config.window or w % config.window:
        raise ValidationError(
            f"input {h}x{w} is not divisible by the window size M={config.window}"
        )
    sr = model_fwd(image[None], params, config, workers=_workers(args))[0][0]
    write_png(args.output, sr)
    print(f"wrote {args.output} ({sr.shape[0]}x{sr.shape[1]})")
    return EXIT_OK


def cmd_benchmark(args):
    methods = [m for m in (args.methods or "").split(",") if m]
    if not methods:
        raise UsageError("--methods must name at least one method")
    if "model" in methods and not args.checkpoint:
        raise UsageError("method 'model' needs --checkpoint")
    out, manifest = _start(args, {}, [args.dataset, args.checkpoint])
    data = load_dataset(args.dataset, split="test", name=args.name, limit=args.limit)
    reports = []
    for m in methods:
        if m == "model":
            params, config, _ = load_checkpoint(args.checkpoint)
            reports.append(evalkit.benchmark(_model_fn(params, config, _workers(args)), data,
                                             name="QUIET-SR"))
        else:
            reports.append(evalkit.benchmark(m, data))
    csv_text, table = evalkit.emit_table(reports, args.reference)
    (out / "benchmark.csv").write_text(csv_text)
    (out / "benchmark.txt").write_text(table)
    measured = [row for rep in reports for row in rep.rows]
    ref = evalkit.reference_rows(args.reference) if args.reference else []
    fig = plots.benchmark_bars(measured, ref, out / "benchmark.png",
                               title=f"{data.name} (x2)")
    print(table, end="")
    _finish(manifest, out, [out / "benchmark.csv", out / "benchmark.txt", fig])
    return EXIT_OK


def _parse_floats(text):
    try:
        return [float(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


def _parse_ints(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise UsageError(f"cannot parse integer list {text!r}") from exc


def _evaluate(params, config, data, workers):
    sr = np.clip(predict(params, config, data.lr, workers=workers), 0.0, 1.0)
    p, q = evalkit.score_images(sr, data.hr)
    return evalkit.aggregate_psnr(p), float(np.mean(q))


def cmd_noise_sweep(args):
    strengths = _parse_floats(args.strengths)
    kinds = [k for k in args.kind.split(",") if k]
    for s in strengths:
        if not 0.0 <= s <= 1.0:
            raise UsageError(f"strength {s} outside [0, 1]")
    for k in kinds:
        if k not in qsim.NOISE_KINDS:
            raise UsageError(f"unknown channel {k!r}; choose from {', '.join(qsim.NOISE_KINDS)}")
    out, manifest = _start(args, {}, [args.dataset, args.checkpoint])
    params, config, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset, split="test", limit=args.limit)
    workers = _workers(args)
    clean = _evaluate(params, config, data, workers)
    rows = []
    for kind in kinds:
        for s in strengths:
            with qsim.noisy(qsim.NoiseChannel(kind, s)):
                p, q = _evaluate(params, config, data, workers)
            rows.append((kind, s, p, q))
            print(f"{kind} p={s:g}: PSNR {p:.4f} dB  SSIM {q:.4f}")
    lines = ["kind,strength,psnr_db,ssim"]
    lines += [f"{k},{s:g},{p:.6f},{q:.6f}" for k, s, p, q in rows]
    (out / "noise_sweep.csv").write_text("\n".join(lines) + "\n")
    fig = plots.noise_sweep(rows, out / "noise_sweep.png", baseline=clean)
    ok = all(abs(p - clean[0]) <= 1e-9 and abs(q - clean[1]) <= 1e-9
             for _, s, p, q in rows if s == 0.0)
    _finish(manifest, out, [out / "noise_sweep.csv", fig], "ok" if ok else "zero-noise mismatch")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_scaling_sweep(args):
    dims = _parse_ints(args.dims)
    for d in dims:
        if d > 10:
            raise CapacityError(f"embedding dimension {d} needs more than 10 qubits")
        if d < 1:
            raise UsageError("embedding dimensions must be positive")
    base_model, tcfg_dict = build_configs(args, micro=True)
    tcfg_dict.update(max_steps=args.steps, epochs=10**9)
    if args.lr is not None:
        tcfg_dict["lr"] = args.lr
    if args.batch_size is not None:
        tcfg_dict["batch_size"] = args.batch_size
    tcfg = TrainConfig(**tcfg_dict)
    out, manifest = _start(args, {"model": base_model.to_dict(), "train": tcfg.to_dict()},
                           [args.dataset, args.test_dataset])
    train = load_dataset(args.dataset, limit=args.subset)
    test = load_dataset(args.test_dataset or args.dataset, split="test", limit=args.test_subset)
    workers = _workers(args)
    rows = []
    for d in dims:
        heads = base_model.heads if d % base_model.heads == 0 else 1
        ratio = base_model.qmlp_ratio
        while d * ratio > 10 and ratio > 1:
            ratio -= 1
        cfg = dataclasses.replace(base_model, embed_dim=d, heads=heads, qmlp_ratio=ratio)
        trainer = Trainer(cfg, init_params(cfg, np.random.default_rng(tcfg.seed)), tcfg,
                          workers=workers)
        while trainer.step < tcfg.max_steps:
            train_epoch(trainer, train)
        p, _ = _evaluate(trainer.params, cfg, test, workers)
        rows.append((d, p))
        print(f"dim {d}: PSNR {p:.4f} dB after {trainer.step} steps")
    lines = ["dim,psnr_db"] + [f"{d},{p:.6f}" for d, p in rows]
    (out / "scaling_sweep.csv").write_text("\n".join(lines) + "\n")
    fig = plots.scaling_sweep(rows, out / "scaling_sweep.png")
    ok = all(math.isfinite(p) for _, p in rows)
    _finish(manifest, out, [out / "scaling_sweep.csv", fig])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args):
    config, _ = build_configs(args, micro=True)
    out, manifest = _start(args, {"model": config.to_dict()}, [])
    rng = np.random.default_rng(args.seed)
    params = init_params(config, rng)
    h = w = args.size
    lr = rng.random((args.batch, h, w, config.channels))
    hr = rng.random((args.batch, h * config.upscale, w * config.upscale, config.channels))
    report = grad_check(params, config, (lr, hr), coords=args.coords, seed=args.seed,
                        method=args.method, workers=_workers(args))
    report["tolerance"] = args.tolerance
    _atomic_write(out / "gradcheck.json", json.dumps(report, indent=2) + "\n")
    print(f"max_rel_err={report['max_rel_err']:.3e} at {report['worst_param_name']} "
          f"({report['coords']} coordinates)")
    ok = report["max_rel_err"] < args.tolerance
    _finish(manifest, out, [out / "gradcheck.json"], "ok" if ok else "above tolerance")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_feature_analysis(args):
    out, manifest = _start(args, {}, [args.dataset, args.checkpoint])
    params, config, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset, split="test", limit=args.limit)
    feats = model_fwd(data.lr, params, config, workers=_workers(args))[1][5]
    ks = tuple(_parse_ints(args.ks))
    report = evalkit.feature_analysis(feats, ks=ks, samples=args.samples,
                                      permutations=args.permutations, seed=args.seed)
    _atomic_write(out / "feature_analysis.json",
                  json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    lines = ["k,dcor"] + [f"{k},{v:.6f}" for k, v in report.dcor_by_k]
    (out / "dcor_by_k.csv").write_text("\n".join(lines) + "\n")
    fig = plots.dcor_curve(report.dcor_by_k, out / "dcor_by_k.png")
    for k, v in report.dcor_by_k:
        print(f"k={k}: dCor {v:.4f}")
    print(f"HSIC {report.hsic_stat:.6g}, p={report.p_value:.4f} "
          f"({report.permutations} permutations)")
    _finish(manifest, out, [out / "feature_analysis.json", out / "dcor_by_k.csv", fig])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None,
                   help="qsim worker threads (default: $QSR_WORKERS or 1)")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--config", default=None, help="JSON file with 'model' and 'train' sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a setting, e.g. model.embed_dim=2 or train.lr=1e-3")


def build_parser():
    parser = argparse.ArgumentParser(prog="quietsr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-dataset", default=None)
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--test-subset", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--micro", action="store_true", help="2-layer model for quick runs")
    p.add_argument("--reference", default=None, help="dataset name for published rows")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one PNG image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("benchmark", help="PSNR/SSIM table against published numbers")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--methods", default="nearest,bilinear,bicubic")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--name", default=None, help="dataset label in the table")
    p.add_argument("--reference", default=None, help="e.g. MNIST or FashionMNIST")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("noise-sweep", help="evaluate under simulated noise channels")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", default="Depolarizing", help="comma-separated channel names")
    p.add_argument("--strengths", default="0,0.01,0.05,0.1")
    p.add_argument("--limit", type=int, default=4)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("scaling-sweep", help="PSNR versus embedding dimension")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-dataset", default=None)
    p.add_argument("--dims", default="2,4")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--subset", type=int, default=200)
    p.add_argument("--test-subset", type=int, default=50)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_scaling_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full gradient")
    _common(p)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=4, help="low-resolution side length")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--method", choices=qsim.GRAD_METHODS, default="shift")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("feature-analysis", help="dCor/HSIC on deep features")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--ks", default=",".join(str(k) for k in evalkit.K_GRID))
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--permutations", type=int, default=1000)
    p.set_defaults(func=cmd_feature_analysis)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QuietSRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
