"""
Command line entry point: ``texseg {gen,train,eval,segment}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (``--latent-dim`` sets
``latent_dim``). Every run writes the fully resolved settings to
``<out>/effective-config.txt``; passing that file back as ``--config``
repeats the run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .evaluation import METHODS, evaluate, open_disk4, binarize, residual_for, strided_reconstruct
from .imaging import load_image, read_manifest, save_image, save_mask, write_raw_residual
from .models import CheckpointError, FeatureExtractor, ModelSpec, load_checkpoint
from .ssim import SsimParams
from .synthetic import CheckerSpec, DefectSpec, make_toy_dataset
from .training import LOSS_VARIANT, TrainConfig, TrainingDiverged, train

log = logging.getLogger("texseg")

EFFECTIVE_CONFIG = "effective-config.txt"
SEGMENT_SUFFIXES = ("_reconstruction.png", "_residual.png", "_segmentation.png")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "on", "true", "yes"):
        return True
    if t in ("0", "off", "false", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _loss(text: str) -> str:
    t = str(text).strip().upper()
    if t not in LOSS_VARIANT:
        raise ValueError(f"invalid loss {text!r} (choose from {', '.join(k.lower() for k in LOSS_VARIANT)})")
    return t


def _method(text: str) -> str:
    t = str(text).strip().upper()
    if t not in METHODS:
        raise ValueError(f"invalid method {text!r} (choose from {', '.join(m.lower() for m in METHODS)})")
    return t


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    commands: tuple[str, ...]
    help: str = ""
    choices: tuple[str, ...] | None = None


_ALL = ("gen", "train", "eval", "segment")
_SSIM_CMDS = ("train", "eval", "segment")

KEYS = [
    Key("out", str, None, _ALL, "output directory"),
    Key("seed", int, 0, _ALL, "random seed"),
    # gen
    Key("n_train", int, 100, ("gen",), "defect-free images"),
    Key("n_test", int, 50, ("gen",), "defective test images"),
    Key("image_size", int, 128, ("gen",)),
    Key("cell_min", int, 8, ("gen",)),
    Key("cell_max", int, 24, ("gen",)),
    Key("rot_min", float, 0.0, ("gen",), "degrees"),
    Key("rot_max", float, 90.0, ("gen",), "degrees"),
    Key("low", float, 0.0, ("gen",)),
    Key("high", float, 1.0, ("gen",)),
    Key("supersample", int, 2, ("gen",), "anti-aliasing factor (1 disables)"),
    Key("strokes_min", int, 1, ("gen",)),
    Key("strokes_max", int, 2, ("gen",)),
    Key("dots_min", int, 0, ("gen",)),
    Key("dots_max", int, 2, ("gen",)),
    Key("defect_intensity", float, 0.5, ("gen",)),
    Key("defect_margin", int, 0, ("gen",), "keep defects this many pixels from the image edge"),
    # data
    Key("manifest", str, None, ("train", "eval"), "dataset manifest file"),
    Key("resize", int, 0, ("train", "eval", "segment"), "downscale images to NxN first (0: off)"),
    # model / training
    Key("loss", _loss, "L2", ("train",), "training loss", tuple(k.lower() for k in LOSS_VARIANT)),
    Key("latent_dim", int, 100, ("train",)),
    Key("epochs", int, 200, ("train",)),
    Key("batch_size", int, 64, ("train",)),
    Key("learning_rate", float, 2e-4, ("train",)),
    Key("weight_decay", float, 1e-5, ("train",)),
    Key("decoupled_weight_decay", _bool, False, ("train",)),
    Key("patch_count", int, 10_000, ("train",)),
    Key("patch_size", int, 128, ("train",)),
    Key("validation_fraction", float, 0.1, ("train",)),
    Key("resample_each_epoch", _bool, False, ("train",)),
    Key("checkpoint_every", int, 50, ("train",)),
    Key("fm_lambda", float, 1.0, ("train",)),
    Key("extractor_weights", str, "", ("train",), "feature extractor weight file (FM)"),
    Key("vae_samples", int, 6, ("train", "eval", "segment")),
    # ssim
    Key("window_size", int, 11, _SSIM_CMDS),
    Key("c1", float, 0.01, _SSIM_CMDS),
    Key("c2", float, 0.03, _SSIM_CMDS),
    Key("alpha", float, 1.0, _SSIM_CMDS),
    Key("beta", float, 1.0, _SSIM_CMDS),
    Key("gamma", float, 1.0, _SSIM_CMDS),
    # evaluation
    Key("checkpoint", str, None, ("eval", "segment")),
    Key("method", _method, "", ("eval", "segment"), "residual method (default: the checkpoint's loss)",
        tuple(m.lower() for m in METHODS)),
    Key("stride", int, 30, ("eval", "segment")),
    Key("opening", _bool, True, ("eval", "segment"), "on/off"),
    Key("n_thresholds", int, 256, ("eval",)),
    Key("fprs", _floats, [0.01, 0.05, 0.1], ("eval",), "comma separated target false positive rates"),
    Key("image", str, None, ("segment",)),
    Key("threshold", float, None, ("segment",)),
]
_BY_NAME = {k.name: k for k in KEYS}
_REQUIRED = {
    "gen": ("out",),
    "train": ("out", "manifest"),
    "eval": ("out", "manifest", "checkpoint"),
    "segment": ("out", "checkpoint", "image", "threshold"),
}


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, list):
        return ",".join(f"{v:g}" for v in value)
    if value is None:
        return ""
    if isinstance(value, str) and value.upper() in LOSS_VARIANT and value.upper() == value:
        return value.lower()
    return str(value)


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults < config file < flags for ``command``."""
    keys = [k for k in KEYS if command in k.commands]
    settings = {k.name: k.default for k in keys}
    if args.config:
        for name, raw in read_config(args.config).items():
            key = _BY_NAME.get(name)
            if key is None or command not in key.commands:
                continue  # config files may be shared between commands
            try:
                settings[name] = key.parse(raw) if raw != "" else key.default
            except ValueError as exc:
                raise ConfigError(f"{args.config}: {name}: {exc}") from exc
    for k in keys:
        value = getattr(args, k.name, None)
        if value is not None:
            settings[k.name] = value
    missing = [n for n in _REQUIRED[command] if settings.get(n) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return settings


def write_effective(settings: dict[str, Any], out: Path) -> str:
    text = "".join(f"{k} = {_format(v)}\n" for k, v in settings.items())
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(text)
    return text


def _ssim_params(s) -> SsimParams:
    return SsimParams(s["window_size"], s["c1"], s["c2"], s["alpha"], s["beta"], s["gamma"])


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------
def cmd_gen(s: dict[str, Any]) -> int:
    out = Path(s["out"])
    checker = CheckerSpec(s["image_size"], s["cell_min"], s["cell_max"], s["rot_min"], s["rot_max"],
                          s["low"], s["high"], s["supersample"])
    defects = DefectSpec(strokes_min=s["strokes_min"], strokes_max=s["strokes_max"],
                         dots_min=s["dots_min"], dots_max=s["dots_max"], intensity=s["defect_intensity"],
                         margin=s["defect_margin"])
    manifest = make_toy_dataset(out, s["n_train"], s["n_test"], checker, defects, seed=s["seed"])
    print(manifest.path)
    return 0


def cmd_train(s: dict[str, Any]) -> int:
    out = Path(s["out"])
    loss = s["loss"]
    spec = ModelSpec(latent_dim=s["latent_dim"], variant=LOSS_VARIANT[loss], fm_lambda=s["fm_lambda"],
                     vae_samples=s["vae_samples"])
    cfg = TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                      weight_decay=s["weight_decay"], patch_count=s["patch_count"], patch_size=s["patch_size"],
                      loss=loss, seed=s["seed"], validation_fraction=s["validation_fraction"],
                      resample_each_epoch=s["resample_each_epoch"],
                      decoupled_weight_decay=s["decoupled_weight_decay"],
                      checkpoint_every=s["checkpoint_every"], resize=s["resize"] or None,
                      ssim=_ssim_params(s))
    extractor = None
    if loss == "FM":
        extractor = (FeatureExtractor.from_file(s["extractor_weights"]) if s["extractor_weights"]
                     else FeatureExtractor(seed=s["seed"]))
    manifest = read_manifest(s["manifest"], s["validation_fraction"], check=True)
    _, history = train(manifest, spec, cfg, out_dir=out, extractor=extractor)
    print(history.checkpoint_path)
    return 0


def _load_net(s):
    ckpt = load_checkpoint(s["checkpoint"])
    method = s["method"] or (ckpt.loss or "L2")
    return ckpt, ckpt.build_model(), method


def _residual_png(res: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(res.min()), float(res.max())
    scaled = (res - lo) / (hi - lo) if hi > lo else np.zeros_like(res)
    return scaled, lo, hi


def cmd_eval(s: dict[str, Any]) -> int:
    out = Path(s["out"])
    res_dir = out / "residuals"
    res_dir.mkdir(parents=True, exist_ok=True)
    _, net, method = _load_net(s)
    manifest = read_manifest(s["manifest"])

    def export(name, img, res):
        scaled, _, _ = _residual_png(res)
        save_image(scaled, res_dir / f"{name}_residual.png", depth=16)
        write_raw_residual(res, res_dir / f"{name}_residual.raw")

    report = evaluate(net, manifest, method, _ssim_params(s), stride=s["stride"], apply_opening=s["opening"],
                      n_thresholds=s["n_thresholds"] or None, fprs=s["fprs"], vae_samples=s["vae_samples"],
                      seed=s["seed"], resize=s["resize"] or None, on_residual=export)
    (out / "report.txt").write_text(report.to_text())
    (out / "roc.csv").write_text(report.roc.to_csv())
    print(report.to_text(), end="")
    return 0


def cmd_segment(s: dict[str, Any]) -> int:
    out = Path(s["out"])
    _, net, method = _load_net(s)
    img = load_image(s["image"])
    if s["resize"]:
        from .imaging import downscale_bilinear
        img = downscale_bilinear(img, s["resize"], s["resize"])
    params = _ssim_params(s)
    recon = strided_reconstruct(net, img, s["stride"])
    res = residual_for(method, net, img, params, stride=s["stride"], vae_samples=s["vae_samples"], seed=s["seed"])
    seg = binarize(res, s["threshold"])
    if s["opening"]:
        seg = open_disk4(seg)
    stem = Path(s["image"]).stem
    save_image(recon, out / f"{stem}{SEGMENT_SUFFIXES[0]}", depth=16)
    save_image(np.clip(res, 0.0, 1.0), out / f"{stem}{SEGMENT_SUFFIXES[1]}", depth=16)
    save_mask(seg, out / f"{stem}{SEGMENT_SUFFIXES[2]}")
    print(f"{int(seg.sum())} defect pixels")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texseg", description=__doc__.splitlines()[1])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        for k in KEYS:
            if name not in k.commands:
                continue
            flag = "--" + k.name.replace("_", "-")
            default = "" if k.default is None else _format(k.default)
            kw: dict[str, Any] = dict(dest=k.name, default=None, help=f"{k.help} [default: {default}]".strip())
            if k.choices:
                kw["choices"] = k.choices
                kw["type"] = str.lower
            else:
                kw["type"] = k.parse
            p.add_argument(flag, **kw)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = resolve(args.command, args)
    except ConfigError as exc:
        parser.error(str(exc))
    for name in ("loss", "method"):
        if name in settings and isinstance(settings[name], str) and settings[name]:
            settings[name] = _BY_NAME[name].parse(settings[name])
    text = write_effective(settings, Path(settings["out"]))
    print(text, end="", file=sys.stderr)
    try:
        return COMMANDS[args.command](settings)
    except (OSError, ValueError, CheckpointError, TrainingDiverged) as exc:
        print(f"texseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
