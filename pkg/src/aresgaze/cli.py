"""Command-line pipeline: synth, normalize, train, eval, loocv, ablate-nh, analyze, export-attn.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .aaconv import AAConv2d
from .backbone import BackboneConfig
from .data.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.manifest import ManifestError, read_manifest, replace, resolve, write_manifest
from .data.pnm import PNMError, read_pnm, write_pnm
from .data.prepare import build_arrays, image_to_input, load_normalized, normalize_sample
from .data.synthetic import SyntheticConfig, generate_dataset
from .gazenet import EyeInputModel, GazeNetConfig, build_gaze_net, count_parameters
from .geometry import DegenerateError, resize_uint8
from .tensor import ConfigError, ContractError, ShapeError
from .training import NonFiniteError, TrainConfig, evaluate, loocv, run_fold, train

log = logging.getLogger("aresgaze")


class UsageError(Exception):
    """Bad flag values or config files; reported with exit code 2."""


class AttentionLayerError(ValueError):
    """The requested layer has no attention path."""

    def __init__(self, layer: int, augmented: list[int]):
        listed = ", ".join(map(str, augmented)) or "none"
        super().__init__(f"layer {layer} is not attention-augmented; augmented layers: {listed}")
        self.layer = layer
        self.augmented = augmented


# run config files -------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RunConfig:
    epochs: int = 120
    batch_size: int = 48
    lr_max: float = 0.128
    warmup_fraction: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0003
    nh: int = 8
    k_ratio: float = 0.25
    v_ratio: float = 0.25
    eye_model: str = "se"
    attention_face: bool = True
    attention_eyes: bool = True
    stage_channels: tuple[int, ...] = (64, 128, 256)
    seed: int = 0

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr_max, self.warmup_fraction, self.momentum,
                           self.weight_decay, self.seed if seed is None else seed)

    def net_config(self, face_size: int = 112, eye_size: int = 60, hidden: int = 256) -> GazeNetConfig:
        model = EyeInputModel(self.eye_model)
        eye_extent = (eye_size, eye_size) if model is EyeInputModel.SE else (eye_size // 2, eye_size)
        common = dict(stage_channels=self.stage_channels, nh=self.nh, k_ratio=self.k_ratio, v_ratio=self.v_ratio)
        return GazeNetConfig(
            face=BackboneConfig(attention=self.attention_face, input_channels=3, input_extent=(face_size, face_size),
                                **common),
            eyes=BackboneConfig(attention=self.attention_eyes, input_channels=1, input_extent=eye_extent, **common),
            eye_model=model,
            hidden=hidden,
        )


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise ValueError(f"expected on|off, got {text!r}")
    return text == "on"


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _eye_model(text: str) -> str:
    return EyeInputModel(text).value


_PARSERS = {
    "epochs": int, "batch_size": int, "lr_max": float, "warmup_fraction": float, "momentum": float,
    "weight_decay": float, "nh": int, "k_ratio": float, "v_ratio": float, "eye_model": _eye_model,
    "attention_face": _on_off, "attention_eyes": _on_off, "stage_channels": _int_list, "seed": int,
}


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _PARSERS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise UsageError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values)


def read_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, path)


# helpers ----------------------------------------------------------------------------

def _load_arrays(manifest: str, net: GazeNetConfig):
    normalized, records = load_normalized(manifest)
    if not records:
        raise ValueError(f"{manifest}: no samples")
    return build_arrays(normalized, records, net)


def _run_setup(args):
    cfg = read_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    net = cfg.net_config(args.face_size, args.eye_size, args.hidden)
    return cfg, seed, net


def _write_subject_table(path: Path, result) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "mean_error_deg", "samples"])
        for fold in result.folds:
            w.writerow([fold.subject, f"{fold.mean_error:.9g}", len(fold.records)])
        w.writerow(["overall", f"{result.overall:.9g}", len(result.records)])


def _parse_query(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--query expects x,y integers, got {text!r}") from None
    return x, y


# commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SyntheticConfig(subjects=args.subjects, samples_per_subject=args.samples, head_mode=args.mode,
                          extent=args.extent, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = generate_dataset(cfg, args.out)
    print(f"wrote {cfg.subjects * cfg.samples_per_subject} samples; manifest {path}")
    return 0


def cmd_normalize(args) -> int:
    out = Path(args.out)
    (out / "faces").mkdir(parents=True, exist_ok=True)
    (out / "eyes").mkdir(parents=True, exist_ok=True)
    records = read_manifest(args.manifest)
    clipped = 0
    normalized = []
    for rec in records:
        ns = normalize_sample(read_pnm(resolve(args.manifest, rec)), rec, args.size)
        clipped += ns.clipped
        face_rel = f"faces/{rec.sample_id}.ppm"
        write_pnm(out / face_rel, ns.face)
        write_pnm(out / "eyes" / f"{rec.sample_id}.pgm", ns.stacked_eyes)
        normalized.append(replace(rec, face_path=face_rel, light=ns.light,
                                  leye_x=None, leye_y=None, reye_x=None, reye_y=None))
    write_manifest(out / "manifest.csv", normalized)
    print(f"normalized {len(records)} samples ({clipped} with clipped eye crops); manifest {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg, seed, net = _run_setup(args)
    data = _load_arrays(args.data, net)
    model = build_gaze_net(net, rng=np.random.default_rng(seed), dtype=np.float32)
    result = train(model, data, cfg.train_config(seed))
    save_checkpoint(model, args.out)
    if args.history:
        with open(args.history, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, loss in enumerate(result.history):
                w.writerow([i, f"{loss:.9g}"])
    print(f"trained {result.steps} steps; final loss {result.history[-1]:.6f}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = _load_arrays(args.data, model.config)
    records, mean = evaluate(model, data)
    analysis.write_report(args.report, records)
    print(f"mean angular error {mean:.4f} deg over {len(records)} samples")
    return 0


def cmd_loocv(args) -> int:
    cfg, seed, net = _run_setup(args)
    data = _load_arrays(args.data, net)
    subjects = args.subjects.split(",") if args.subjects else None
    result = loocv(data, net, cfg.train_config(seed), subjects=subjects, parallel_folds=args.parallel_folds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_report(out / "report.csv", result.records)
    _write_subject_table(out / "subjects.csv", result)
    for fold in result.folds:
        print(f"{fold.subject}: {fold.mean_error:.4f} deg")
    print(f"overall {result.overall:.4f} deg")
    return 0


def cmd_ablate_nh(args) -> int:
    cfg, seed, _ = _run_setup(args)
    try:
        values = _int_list(args.nh)
    except ValueError:
        raise UsageError(f"--nh expects a comma list of integers, got {args.nh!r}") from None
    if not values:
        raise UsageError("--nh needs at least one value")
    rows = []
    for nh in values:
        run = dataclasses.replace(cfg, nh=nh)
        net = run.net_config(args.face_size, args.eye_size, args.hidden)
        data = _load_arrays(args.data, net)
        subjects = sorted(set(data.subject_ids))
        tcfg = run.train_config(seed)
        if args.loocv:
            err = loocv(data, net, tcfg).overall
        else:
            holdout = args.holdout or subjects[-1]
            if holdout not in subjects:
                raise UsageError(f"--holdout {holdout!r} is not a subject in {args.data}")
            err = run_fold(data, net, tcfg, holdout, subjects.index(holdout)).mean_error
        params = count_parameters(build_gaze_net(net, dtype=np.float32))
        rows.append((nh, err, params))
        print(f"nh={nh}: {err:.4f} deg ({params} parameters)")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nh", "mean_error_deg", "parameters"])
        for nh, err, params in rows:
            w.writerow([nh, f"{err:.9g}", params])
    return 0


def cmd_analyze(args) -> int:
    records = analysis.read_report(args.report)
    if not records:
        raise ValueError(f"{args.report}: no records")
    if args.kind == "pose":
        if args.bin <= 0:
            raise UsageError("--bin must be positive")
        grid = analysis.pose_bin_analysis(records, args.bin)
        if args.baseline:
            grid = analysis.grid_difference(grid, analysis.pose_bin_analysis(analysis.read_report(args.baseline), args.bin))
        analysis.write_pose_grid(args.out, grid)
        print(f"{sum(1 for _ in grid.cells())} populated bins of width {args.bin} rad; {args.out}")
    else:
        bins = analysis.light_bin_analysis(records)
        analysis.write_light_bins(args.out, bins)
        print(f"light slope {bins.slope:.6g} deg per gray level; {args.out}")
    return 0


def attention_maps(model, image: np.ndarray, branch: str, layer: int, query: tuple[int, int] | None):
    """Attention rows for one query pixel at one layer; returns ``(maps (nh, h, w), (qx, qy))``."""
    backbone = model.face if branch == "face" else model.eye
    layers = backbone.conv_layers()
    augmented = [i for i, m in enumerate(layers) if isinstance(m, AAConv2d)]
    if not 0 <= layer < len(layers):
        raise AttentionLayerError(layer, augmented)
    target = layers[layer]
    if not isinstance(target, AAConv2d):
        raise AttentionLayerError(layer, augmented)
    cfg = backbone.config
    h_in, w_in = cfg.input_extent
    if branch == "face":
        if image.ndim != 3:
            raise ValueError("face branch needs an RGB image")
        x = image_to_input(resize_uint8(image, h_in, w_in))
    else:
        if image.ndim != 2:
            raise ValueError("eye branch needs a gray image")
        if model.config.eye_model is not EyeInputModel.SE:
            image = image[: image.shape[0] // 2]
        x = image_to_input(resize_uint8(image, h_in, w_in))
    qx, qy = (w_in // 2, h_in // 2) if query is None else query
    if not (0 <= qx < w_in and 0 <= qy < h_in):
        raise ValueError(f"query ({qx}, {qy}) outside the {w_in}x{h_in} input")
    h, w = target.extent
    lx, ly = qx * w // w_in, qy * h // h_in
    model.eval()
    target.keep_attention = True
    try:
        if branch == "face":
            model.face(x[None].astype(model.dtype))
        else:
            model.eye(x[None].astype(model.dtype))
        weights = target.last_attention
    finally:
        target.keep_attention = False
        target.last_attention = None
    return weights[0, :, ly * w + lx, :].reshape(-1, h, w).astype(np.float64), (lx, ly)


def to_gray_map(row: np.ndarray) -> np.ndarray:
    """Min-max to [0, 255]; a constant map becomes mid-gray."""
    lo, hi = float(row.min()), float(row.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(row.shape, 128, dtype=np.uint8)
    return np.rint((row - lo) / (hi - lo) * 255.0).astype(np.uint8)


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window, edges replicated."""
    if radius <= 0:
        return img.astype(np.float64)
    k = 2 * radius + 1
    padded = np.pad(img.astype(np.float64), radius, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.mean(axis=(2, 3))


def postprocess_map(gray: np.ndarray, threshold: float, radius: int) -> np.ndarray:
    """Smooth, then zero everything below the ``threshold`` percentile, then rescale."""
    smooth = box_blur(gray, radius)
    cut = np.percentile(smooth, threshold)
    kept = np.where(smooth >= cut, smooth, 0.0)
    return to_gray_map(kept)


def cmd_export_attn(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = read_pnm(args.image)
    query = _parse_query(args.query) if args.query else None
    maps, (lx, ly) = attention_maps(model, image, args.branch, args.layer, query)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    post = args.threshold is not None or args.smooth is not None
    threshold = 80.0 if args.threshold is None else args.threshold
    radius = 2 if args.smooth is None else args.smooth
    if not 0 <= threshold <= 100 or radius < 0:
        raise UsageError("--threshold must lie in [0, 100] and --smooth must be non-negative")
    for k, row in enumerate(maps):
        gray = to_gray_map(row)
        write_pnm(f"{prefix}_head{k}.pgm", gray)
        if post:
            write_pnm(f"{prefix}_head{k}_post.pgm", postprocess_map(gray, threshold, radius))
    meta = {"branch": args.branch, "layer": args.layer, "extent": list(maps.shape[1:]), "query": [lx, ly],
            "heads": len(maps), "postprocess": post, "threshold_percentile": threshold, "smooth_radius": radius}
    Path(f"{prefix}_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(maps)} attention maps with prefix {prefix}")
    return 0


# argument parsing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="normalized manifest")
    p.add_argument("--config", help="key=value run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--face-size", type=int, default=112, help="face input extent (default 112)")
    p.add_argument("--eye-size", type=int, default=60, help="stacked-eye input extent (default 60)")
    p.add_argument("--hidden", type=int, default=256, help="prediction head width (default 256)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aresgaze", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic raw dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--samples", type=int, default=10, help="samples per subject")
    p.add_argument("--mode", choices=["static", "mobile"], default="static")
    p.add_argument("--extent", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("normalize", help="normalize raw frames into faces and stacked eyes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=112, help="normalized face extent Z")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("train", help="train one model")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="optional per-epoch loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loocv", help="leave-one-subject-out evaluation")
    _add_run_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--subjects", help="comma list of held-out subjects (default all)")
    p.add_argument("--parallel-folds", type=int, default=1)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("ablate-nh", help="compare attention head counts")
    _add_run_flags(p)
    p.add_argument("--nh", default="2,4,8")
    p.add_argument("--out", required=True, help="comparison CSV")
    p.add_argument("--holdout", help="held-out subject (default: last subject)")
    p.add_argument("--loocv", action="store_true", help="full leave-one-subject-out per head count")
    p.set_defaults(func=cmd_ablate_nh)

    p = sub.add_parser("analyze", help="error breakdown by head pose or light")
    p.add_argument("kind", choices=["pose", "light"])
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bin", type=float, default=0.20, help="pose bin width in radians")
    p.add_argument("--baseline", help="second report; writes this minus baseline")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-attn", help="write per-head attention maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="normalized face PPM or stacked-eye PGM")
    p.add_argument("--layer", type=int, required=True, help="index into stem + block layers")
    p.add_argument("--branch", choices=["face", "eyes"], default="face")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--query", help="x,y in input pixels (default centre)")
    p.add_argument("--threshold", type=float, help="keep values above this percentile (default 80)")
    p.add_argument("--smooth", type=int, help="box blur radius (default 2)")
    p.set_defaults(func=cmd_export_attn)
    return parser


RUNTIME_ERRORS = (
    OSError, ValueError, CheckpointError, ManifestError, PNMError, ConfigError, ShapeError, ContractError,
    DegenerateError, NonFiniteError, AttentionLayerError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
