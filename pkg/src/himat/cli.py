"""Single entry point: train, generate, decompose, bench, bench-kernels,
wavelet, eval, dataset.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.
With --json, errors also emit a machine-readable JSON line on stderr.
Every command writes its artifacts under --out together with a
manifest recording the resolved configuration, its hash, the seed and
the library version, so any output is reproducible from the manifest
alone (timings aside).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

import himat
from himat import config as config_mod
from himat import pngio
from himat.bench import BenchConfig, VARIANTS, bench_kernels, report_to_csv, run_bench, validate_report
from himat.config import RunConfig
from himat.errors import ConfigError, HimatError
from himat.experiment import INSTRUCTIONS, decompose_image, generate_material, load_run, train_run
from himat.himt import read_himt, write_himt
from himat.material import MAP_NAMES, MaterialSet, synth_dataset
from himat.metrics import GlcmConfig, cross_map_consistency, glcm_score, psnr
from himat.wavelet import dwt2, load_basis, swt2


def _write_manifest(out_dir, command, payload, t_start):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "library_version": himat.__version__,
        "elapsed_s": round(time.perf_counter() - t_start, 3),
    }
    manifest.update(payload)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _load_image(path):
    path = str(path)
    if path.endswith(".himt"):
        return read_himt(path)
    return pngio.read_png(path)


def _save_material(out_dir, mat, bit_depth=8):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in mat.maps().items():
        pngio.write_png(out_dir / f"{name}.png", arr, bit_depth=bit_depth)


# -- subcommands -----------------------------------------------------------

def cmd_train(args):
    t0 = time.perf_counter()
    cfg = config_mod.load(args.config) if args.config else RunConfig().validate()
    model, codec, norm, info = train_run(cfg, loss_kind=args.loss, seed=args.seed, out_dir=args.out)
    # merge command metadata into the checkpoint manifest (never clobber it)
    manifest_path = Path(args.out) / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest.update(
        {
            "command": "train",
            "first_loss": info["losses"][0],
            "cli_elapsed_s": round(time.perf_counter() - t0, 3),
        }
    )
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"trained {len(info['losses'])} steps; final loss {info['losses'][-1]:.5f}; wrote {args.out}")
    return 0


def cmd_generate(args):
    t0 = time.perf_counter()
    model, codec, norm, manifest = load_run(args.ckpt)
    mat = generate_material(model, codec, norm, args.prompt_id, args.steps, tileable=args.tileable, seed=args.seed)
    _save_material(args.out, mat, bit_depth=args.bit_depth)
    _write_manifest(
        args.out,
        "generate",
        {
            "ckpt": str(args.ckpt),
            "ckpt_config_hash": manifest.get("config_hash"),
            "prompt_id": args.prompt_id,
            "steps": args.steps,
            "tileable": bool(args.tileable),
            "seed": args.seed,
        },
        t0,
    )
    print(f"wrote {len(MAP_NAMES)} maps to {args.out}")
    return 0


def cmd_decompose(args):
    t0 = time.perf_counter()
    model, codec, norm, manifest = load_run(args.ckpt)
    image = _load_image(args.input)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"decompose expects an RGB image, got shape {image.shape}")
    instr_id = INSTRUCTIONS.index(args.instruction)
    out = decompose_image(model, codec, norm, image, instr_id, args.steps, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pngio.write_png(out_dir / f"{args.instruction}.png", out, bit_depth=args.bit_depth)
    _write_manifest(
        args.out,
        "decompose",
        {
            "ckpt": str(args.ckpt),
            "input": str(args.input),
            "instruction": args.instruction,
            "steps": args.steps,
            "seed": args.seed,
        },
        t0,
    )
    print(f"wrote {out_dir / (args.instruction + '.png')}")
    return 0


def cmd_bench(args):
    t0 = time.perf_counter()
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    sizes = [int(s) for s in args.sizes.split(",")]
    cfg = BenchConfig(channels=args.channels, maps=args.maps, trials=args.trials, seed=args.seed)
    report = run_bench(cfg, variants, sizes, measure=not args.analytic_only)
    validate_report(report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    if args.csv:
        Path(args.csv).write_text(report_to_csv(report))
    print(f"wrote {out} ({len(report['rows'])} rows in {time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_bench_kernels(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    report = bench_kernels(sizes=sizes, trials=args.trials)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2))
    for row in report["rows"]:
        print(f"{row['kernel']:>16} n={row['size']:<6} {row['backend']:>8}: {row['median_s'] * 1e3:8.3f} ms")
    return 0


def cmd_wavelet(args):
    t0 = time.perf_counter()
    img = _load_image(args.input)
    basis = load_basis(args.basis)
    transform = dwt2 if args.kind == "dwt" else swt2
    axes = (0, 1)
    sb = transform(img, basis, levels=args.levels, axes=axes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ell in range(1, sb.levels + 1):
        for name, band in zip(("ll", "lh", "hl", "hh"), sb.level(ell)):
            arr = band.data
            write_himt(out_dir / f"{name}_l{ell}.himt", arr)
            if args.png_previews:
                lo, hi = arr.min(), arr.max()
                preview = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
                pngio.write_png(out_dir / f"{name}_l{ell}.png", preview)
    _write_manifest(
        args.out,
        "wavelet",
        {"input": str(args.input), "basis": args.basis, "kind": args.kind, "levels": args.levels},
        t0,
    )
    print(f"wrote {4 * sb.levels} subbands to {out_dir}")
    return 0


def cmd_eval(args):
    record = {"metric": args.metric, "in": str(args.input)}
    if args.metric == "psnr":
        if not args.ref:
            raise ConfigError("psnr needs --ref")
        record["ref"] = str(args.ref)
        record["value"] = psnr(_load_image(args.input), _load_image(args.ref))
    elif args.metric == "glcm":
        img = _load_image(args.input)
        if img.ndim == 3:
            img = img.mean(axis=-1)
        record["value"] = glcm_score(img, GlcmConfig(levels=args.levels))
    else:  # consistency
        in_dir = Path(args.input)
        maps = {}
        for name in MAP_NAMES:
            arr = pngio.read_png(in_dir / f"{name}.png")
            maps[name] = arr
        record["value"] = cross_map_consistency(MaterialSet(**maps))
    print(json.dumps(record))
    return 0


def cmd_dataset(args):
    t0 = time.perf_counter()
    items = synth_dataset(args.seed, args.count, args.size, args.size)
    out_dir = Path(args.out)
    listing = []
    for i, (mat, fam) in enumerate(items):
        item_dir = out_dir / f"item_{i:03d}"
        _save_material(item_dir, mat, bit_depth=args.bit_depth)
        listing.append({"item": f"item_{i:03d}", "prompt_id": int(fam)})
    _write_manifest(
        args.out,
        "dataset",
        {"seed": args.seed, "count": args.count, "size": args.size, "items": listing},
        t0,
    )
    print(f"wrote {len(items)} items to {out_dir}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="himat", description=__doc__)
    parser.add_argument("--json", action="store_true", help="machine-readable error tail on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per a JSON run config")
    p.add_argument("--config", help="run config path (defaults mirror the documented choices)")
    p.add_argument("--loss", choices=("mse", "dwt", "swt"), default=None, help="override loss kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample a material from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-id", type=int, required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--tileable", action="store_true", help="noise rolling for seamless tiling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("decompose", help="recover a map from an input image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--instruction", choices=INSTRUCTIONS, required=True)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("bench", help="cost comparison across cross-map variants")
    p.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    p.add_argument("--sizes", default="256,1024,4096")
    p.add_argument("--trials", type=int, default=9)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--maps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--analytic-only", action="store_true")
    p.add_argument("--csv", help="also write a CSV table")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("bench-kernels", help="compiled vs numpy kernel backends")
    p.add_argument("--sizes", default="64,256,1024")
    p.add_argument("--trials", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench_kernels)

    p = sub.add_parser("wavelet", help="decompose an image into subbands")
    p.add_argument("--input", required=True, help="PNG or HIMT")
    p.add_argument("--basis", choices=("haar", "sym4", "sym19"), default="sym19")
    p.add_argument("--kind", choices=("dwt", "swt"), default="swt")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--png-previews", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_wavelet)

    p = sub.add_parser("eval", help="metrics, printed as JSON records")
    p.add_argument("--metric", choices=("psnr", "glcm", "consistency"), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ref", help="reference image (psnr)")
    p.add_argument("--levels", type=int, default=16, help="gray levels (glcm)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dataset", help="write a synthetic material dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (HimatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
