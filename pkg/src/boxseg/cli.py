"""Command-line entry points: synth, preprocess, train, infer, eval, stats,
assist, serve.

Thread pinning happens before numpy is first imported (numpy reads the BLAS
environment variables exactly once), which is why this module and the package
root import nothing heavy at module scope. Every artifact-producing run drops
a run_manifest.json next to its outputs; re-running the same manifest inputs
reproduces the artifacts bit-exactly.

Exit codes: 0 success, 2 usage, 3 missing input file, 4 invalid
configuration, 5 malformed file format, 6 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_RUNTIME = 6

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _pin_threads(argv: list[str]) -> None:
    """Apply --threads to the BLAS env before numpy can load."""
    threads = None
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif token.startswith("--threads="):
            threads = token.split("=", 1)[1]
    if threads is None:
        return
    try:
        value = str(int(threads))
    except ValueError:
        return  # argparse will reject it with a usage error
    for var in _BLAS_VARS:
        os.environ[var] = value


def _fail_line(error: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": error, "message": message}) + "\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError("config file must hold a JSON object")
    return obj


def _pick(flag_value, file_section: dict, key: str, default):
    """Priority: explicit flag > config file > built-in default."""
    if flag_value is not None:
        return flag_value
    if key in file_section:
        return file_section[key]
    return default


def _model_config(args, file_cfg: dict):
    from .model import ModelConfig

    section = dict(file_cfg.get("model", {}))
    defaults = ModelConfig()
    return ModelConfig(
        image_size=int(_pick(getattr(args, "image_size", None), section, "image_size", defaults.image_size)),
        patch_size=int(section.get("patch_size", defaults.patch_size)),
        embed_dim=int(section.get("embed_dim", defaults.embed_dim)),
        encoder_depth=int(section.get("encoder_depth", defaults.encoder_depth)),
        num_heads=int(section.get("num_heads", defaults.num_heads)),
        mlp_ratio=float(section.get("mlp_ratio", defaults.mlp_ratio)),
        decoder_depth=int(section.get("decoder_depth", defaults.decoder_depth)),
        pe_frequencies=int(section.get("pe_frequencies", defaults.pe_frequencies)),
        seed=int(_pick(getattr(args, "seed", None), section, "seed", defaults.seed)),
    )


def _train_config(args, file_cfg: dict):
    from .train import TrainConfig

    section = dict(file_cfg.get("train", {}))
    defaults = TrainConfig()
    fractions = section.get("fractions", defaults.fractions)
    return TrainConfig(
        learning_rate=float(_pick(getattr(args, "lr", None), section, "learning_rate", defaults.learning_rate)),
        beta1=float(section.get("beta1", defaults.beta1)),
        beta2=float(section.get("beta2", defaults.beta2)),
        weight_decay=float(_pick(getattr(args, "weight_decay", None), section, "weight_decay", defaults.weight_decay)),
        epochs=int(_pick(getattr(args, "epochs", None), section, "epochs", defaults.epochs)),
        batch_size=int(_pick(getattr(args, "batch_size", None), section, "batch_size", defaults.batch_size)),
        perturb_max=_pick(getattr(args, "perturb_max", None), section, "perturb_max", defaults.perturb_max),
        fractions=tuple(fractions),
        seed=int(_pick(getattr(args, "seed", None), section, "seed", defaults.seed)),
        dice_epsilon=float(section.get("dice_epsilon", defaults.dice_epsilon)),
    )


def _write_manifest(out_dir: str, subcommand: str, config: dict, inputs: dict, outputs: dict, seed) -> None:
    from . import __version__

    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _parse_box(text: str):
    from .model import BoundingBox

    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"box must be 'x_min,y_min,x_max,y_max', got {text!r}")
    return BoundingBox(*(int(p) for p in parts))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    from .synthdata import SynthSpec, generate_dataset, generate_tumor_volume, save_dataset
    from .iohub import volume_to_container_args, write_volume

    file_cfg = _load_config_file(args.config)
    section = dict(file_cfg.get("synth", {}))
    spec = SynthSpec(
        style=_pick(args.style, section, "style", "mixed"),
        image_size=int(_pick(args.image_size, section, "image_size", 64)),
        seed=int(_pick(args.seed, section, "seed", 0)),
        contrast_gap=float(section.get("contrast_gap", SynthSpec().contrast_gap)),
        noise_sigma=float(section.get("noise_sigma", SynthSpec().noise_sigma)),
    )
    cases = generate_dataset(spec, args.n, groups=args.groups)
    index = save_dataset(cases, args.out)

    volumes = []
    for v in range(args.tumor_volumes):
        vol_spec = SynthSpec(style="ct-like", image_size=spec.image_size, seed=spec.seed + v)
        volume, gt = generate_tumor_volume(vol_spec, args.depth)
        vol_name = f"tumor{v:03d}.miv"
        gt_name = f"tumor{v:03d}_gt.miv"
        write_volume(os.path.join(args.out, vol_name), volume.data, **volume_to_container_args(volume))
        write_volume(os.path.join(args.out, gt_name), gt)
        volumes.append({"id": f"tumor{v:03d}", "volume": vol_name, "mask": gt_name, "depth": args.depth})
    if volumes:
        index["volumes"] = volumes
        with open(os.path.join(args.out, "index.json"), "w") as fh:
            json.dump(index, fh, indent=2)

    _write_manifest(
        args.out,
        "synth",
        {"style": spec.style, "image_size": spec.image_size, "n": args.n,
         "groups": args.groups, "tumor_volumes": args.tumor_volumes, "depth": args.depth,
         "contrast_gap": spec.contrast_gap, "noise_sigma": spec.noise_sigma},
        {},
        {"index": "index.json"},
        spec.seed,
    )
    print(f"wrote {len(cases)} cases and {len(volumes)} volumes to {args.out}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    from .imgproc import WindowSpec, normalize_volume
    from .iohub import container_to_volume, read_volume, volume_to_container_args, write_volume

    container = read_volume(args.input)
    volume = container_to_volume(container)
    if args.window_width is not None or args.window_level is not None:
        if args.window_width is None or args.window_level is None:
            raise ValueError("--window-width and --window-level must be given together")
        volume.window = WindowSpec(args.window_width, args.window_level)
    normalized = normalize_volume(volume)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_volume(args.out, normalized.data, **volume_to_container_args(normalized))
    _write_manifest(
        os.path.dirname(os.path.abspath(args.out)),
        "preprocess",
        {"window_width": args.window_width, "window_level": args.window_level},
        {"volume": args.input},
        {"normalized": os.path.basename(args.out)},
        None,
    )
    print(f"normalized {args.input} ({volume.modality.value}) -> {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .iohub import save_checkpoint
    from .synthdata import flatten_cases, load_dataset
    from .train import train

    file_cfg = _load_config_file(args.config)
    model_config = _model_config(args, file_cfg)
    train_config = _train_config(args, file_cfg)
    samples = flatten_cases(load_dataset(args.data))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")

    def progress(record):
        print(
            f"epoch {record['epoch']}: loss {record['mean_loss']:.4f} "
            f"tune DSC {record['tune_dsc_median']:.4f} ({record['seconds']:.1f}s)"
        )

    params, _ = train(samples, model_config, train_config, log_path=log_path, progress=progress)
    ckpt_path = os.path.join(args.out, "checkpoint.bsc")
    digest = save_checkpoint(ckpt_path, params, model_config)
    _write_manifest(
        args.out,
        "train",
        {"model": model_config.to_dict(), "train": train_config.to_dict()},
        {"data": args.data},
        {"checkpoint": "checkpoint.bsc", "log": "train_log.jsonl", "checkpoint_sha256": digest},
        train_config.seed,
    )
    print(f"checkpoint {ckpt_path} sha256={digest}")
    return EXIT_OK


def _load_plane(path: str):
    from .imgproc import ImagePlane
    from .iohub import read_png, read_volume

    if path.lower().endswith(".png"):
        return read_png(path)
    container = read_volume(path)
    return ImagePlane(container.data)


def _cmd_infer(args) -> int:
    import numpy as np

    from .imgproc import resize, round_half_away
    from .iohub import load_checkpoint, rle_encode, rle_to_json, write_png
    from .model import BoundingBox, predict

    params, config, _ = load_checkpoint(args.checkpoint)
    plane = _load_plane(args.image)
    box = _parse_box(args.box)
    source_h, source_w = plane.height, plane.width

    if plane.channels == 1:
        from .imgproc import ImagePlane

        plane = ImagePlane(np.repeat(plane.data, 3, axis=2))
    if (source_h, source_w) != (config.image_size, config.image_size):
        box.validate(source_w, source_h)
        plane = resize(plane, config.image_size, config.image_size, kind="image")
        sx = config.image_size / source_w
        sy = config.image_size / source_h
        coords = round_half_away(
            np.array([box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy])
        ).astype(int)
        coords[0] = max(0, min(coords[0], config.image_size - 1))
        coords[1] = max(0, min(coords[1], config.image_size - 1))
        coords[2] = max(coords[0] + 1, min(coords[2], config.image_size))
        coords[3] = max(coords[1] + 1, min(coords[3], config.image_size))
        box = BoundingBox(*coords.tolist())

    output = predict(plane, box, params, config)
    mask = output.mask
    if (source_h, source_w) != mask.shape:
        mask = resize(mask, source_w, source_h, kind="mask")

    os.makedirs(args.out, exist_ok=True)
    write_png(os.path.join(args.out, "mask.png"), mask.astype(np.float32) * 255.0)
    with open(os.path.join(args.out, "mask.json"), "w") as fh:
        json.dump(
            {"mask": rle_to_json(rle_encode(mask)), "confidence": output.confidence},
            fh,
        )
    _write_manifest(
        args.out,
        "infer",
        {"box": args.box, "model": config.to_dict()},
        {"checkpoint": args.checkpoint, "image": args.image},
        {"mask_png": "mask.png", "mask_rle": "mask.json"},
        None,
    )
    print(f"confidence {output.confidence:.4f}; mask -> {args.out}/mask.png")
    return EXIT_OK


def _cmd_eval(args) -> int:
    import numpy as np

    from .iohub import load_checkpoint
    from .metrics import evaluate_run
    from .synthdata import flatten_cases, load_dataset
    from .train import split_dataset

    file_cfg = _load_config_file(args.config)
    train_config = _train_config(args, file_cfg)
    params, config, _ = load_checkpoint(args.checkpoint)
    samples = flatten_cases(load_dataset(args.data))
    if args.split == "all":
        indices = np.arange(len(samples))
    else:
        splits = dict(
            zip(
                ("train", "tune", "val"),
                split_dataset([s.group_id for s in samples], train_config.fractions, train_config.seed),
            )
        )
        indices = splits[args.split]
    os.makedirs(args.out, exist_ok=True)
    _, summary = evaluate_run(
        samples,
        indices,
        params,
        config,
        tau=args.tau,
        csv_path=os.path.join(args.out, "metrics.csv"),
        summary_path=os.path.join(args.out, "summary.json"),
    )
    _write_manifest(
        args.out,
        "eval",
        {"split": args.split, "tau": args.tau, "fractions": list(train_config.fractions)},
        {"checkpoint": args.checkpoint, "data": args.data},
        {"csv": "metrics.csv", "summary": "summary.json"},
        train_config.seed,
    )
    overall = summary["overall"]
    print(
        f"{args.split}: n={summary['count']} DSC median {overall['dsc']['median']:.4f} "
        f"NSD median {overall['nsd']['median']:.4f}"
    )
    return EXIT_OK


def _read_metric_csv(path: str, metric: str) -> dict:
    import csv as csv_mod

    values = {}
    with open(path, newline="") as fh:
        for row in csv_mod.DictReader(fh):
            values[row["case_id"]] = float(row[metric])
    return values


def _cmd_stats(args) -> int:
    from .metrics import wilcoxon_signed_rank

    a = _read_metric_csv(args.a, args.metric)
    b = _read_metric_csv(args.b, args.metric)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise ValueError("the two CSVs share no case_id values")
    result = wilcoxon_signed_rank([a[c] for c in shared], [b[c] for c in shared])
    report = {
        "metric": args.metric,
        "n_pairs": len(shared),
        "n_effective": result.n_effective,
        "W": result.statistic,
        "p": result.p_value,
        "method": result.method,
        "degenerate": result.degenerate,
    }
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    print(json.dumps(report))
    return EXIT_OK


def _cmd_assist(args) -> int:
    from .annotate import LinearMarker, assist_segment, export_session
    from .imgproc import normalize_volume
    from .iohub import container_to_volume, load_checkpoint, read_volume

    params, config, _ = load_checkpoint(args.checkpoint)
    volume = normalize_volume(container_to_volume(read_volume(args.volume)))
    with open(args.markers) as fh:
        entries = json.load(fh)
    markers = [
        LinearMarker(
            slice_index=int(e["slice"]),
            long_axis=tuple(tuple(float(v) for v in p) for p in e["long_axis"]),
            short_axis=tuple(tuple(float(v) for v in p) for p in e["short_axis"]),
        )
        for e in entries
    ]
    session = assist_segment(volume, markers, params, config, volume_id=os.path.basename(args.volume))
    manifest = export_session(session, args.out)
    _write_manifest(
        args.out,
        "assist",
        {"model": config.to_dict()},
        {"checkpoint": args.checkpoint, "volume": args.volume, "markers": args.markers},
        {"session": "session.json"},
        None,
    )
    print(
        f"segmented {len(session.model_masks)} slices in "
        f"{session.phase_time('inference'):.2f}s; exported to {args.out} "
        f"(total time {manifest['total_time']:.2f}s)"
    )
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    checkpoint = args.checkpoint or os.environ.get("BOXSEG_CHECKPOINT")
    if not checkpoint:
        raise ValueError("pass --checkpoint or set BOXSEG_CHECKPOINT")
    port = args.port if args.port is not None else int(os.environ.get("BOXSEG_PORT", "8000"))
    app = create_app(checkpoint_path=checkpoint)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        p.add_argument("--config", default=None, help="JSON config file; flags win")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--style", default=None, choices=["mixed", "ct-like", "us-like", "rgb-like"])
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--tumor-volumes", type=int, default=0)
    p.add_argument("--depth", type=int, default=20)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="normalize a volume per its modality")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-width", type=float, default=None)
    p.add_argument("--window-level", type=float, default=None)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train on a synth dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--perturb-max", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="segment one image with one box")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG or MIV plane")
    p.add_argument("--box", required=True, help="x_min,y_min,x_max,y_max")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=["train", "tune", "val", "all"])
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="paired signed-rank test between two metric CSVs")
    common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", default="dsc", choices=["dsc", "nsd"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("assist", help="marker-driven volume segmentation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--markers", required=True, help="JSON list of markers")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_assist)

    p = sub.add_parser("serve", help="run the HTTP service")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    from .errors import BoxsegError, ConfigError, FormatError, SplitError

    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _fail_line("FileNotFoundError", str(exc))
        return EXIT_MISSING_INPUT
    except (ConfigError, SplitError, ValueError) as exc:
        _fail_line(type(exc).__name__, str(exc))
        return EXIT_CONFIG
    except FormatError as exc:
        _fail_line(type(exc).__name__, str(exc))
        return EXIT_FORMAT
    except BoxsegError as exc:
        _fail_line(type(exc).__name__, str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
