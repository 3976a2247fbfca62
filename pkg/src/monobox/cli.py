"""Command-line front end for the pipeline.

Each subcommand maps onto one service operation.  By default it runs the
operation in-process; with --server URL it POSTs the same payload to a
running instance instead.  Option precedence: command-line flag, then a
key=value --config file, then the built-in defaults.
"""

import argparse
import sys

from pydantic import ValidationError

from .fileutil import parse_key_values
from .service import ops, schemas


def _floats(text):
    values = tuple(float(v) for v in text.replace(",", " ").split())
    if not values:
        raise argparse.ArgumentTypeError("expected numbers")
    return values


def _strs(text):
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return values


# field name -> (cast, help)
_SYNTH_FIELDS = {
    "out_dir": (str, "dataset directory to create"),
    "n_objects": (int, "objects to place"),
    "image_w": (int, "image width, px"),
    "image_h": (int, "image height, px"),
    "fu": (float, "focal length, horizontal"),
    "fv": (float, "focal length, vertical"),
    "cu": (float, "principal point u"),
    "cv": (float, "principal point v"),
    "camera_height": (float, "camera height above ground, m"),
    "class_name": (str, "object class to emit"),
    "dims_mean": (_floats, "mean h w l, m"),
    "dims_sigma": (_floats, "sigma of h w l, m"),
    "x_range": (_floats, "lateral placement range, m"),
    "z_range": (_floats, "depth placement range, m"),
    "feature_dim": (int, "feature vector length"),
    "noise_sigma": (float, "feature noise sigma"),
    "seed": (int, "generation seed"),
}
_STATS_FIELDS = {
    "labels": (str, "KITTI label file"),
    "out": (str, "stats file to write"),
    "classes": (_strs, "comma-separated class names"),
}
_TRAIN_FIELDS = {
    "dataset": (str, "dataset directory from synth"),
    "stats": (str, "stats file from stats"),
    "weights_out": (str, "weights file to write"),
    "history_out": (str, "loss history file to write"),
    "hidden_dim": (int, "hidden units per branch"),
    "n_bins": (int, "orientation bins"),
    "overlap_fraction": (float, "bin overlap fraction"),
    "lr": (float, "learning rate"),
    "weight_decay": (float, "decoupled weight decay"),
    "batch_size": (int, "batch size"),
    "epochs": (int, "training epochs"),
    "seed": (int, "training seed"),
    "alpha_residual": (float, "residual loss weight"),
    "w_orientation": (float, "orientation loss weight"),
    "factor": (float, "plateau lr factor"),
    "patience": (int, "plateau patience, epochs"),
    "threshold": (float, "plateau relative threshold"),
}
_PREDICT_FIELDS = {
    "weights": (str, "weights file"),
    "features": (str, "feature file"),
    "boxes": (str, "label file supplying class/bbox/location per row"),
    "calib": (str, "calibration file"),
    "out": (str, "KITTI result file to write"),
}
_EVAL_FIELDS = {
    "gt": (str, "ground-truth label file"),
    "det": (str, "detection label file (with scores)"),
    "class_name": (str, "class to evaluate"),
    "points": (int, "interpolation points: 40 or 11"),
    "iou_threshold": (float, "IoU threshold (default 0.7 Car, 0.5 otherwise)"),
    "out": (str, "machine-readable report file to write"),
    "threads": (int, "worker threads for per-difficulty evaluation"),
}
_BENCH_FIELDS = {
    "weights": (str, "weights file"),
    "batch": (int, "batch size"),
    "repetitions": (int, "timed repetitions"),
    "seed": (int, "seed for the random batch"),
}

_COMMANDS = {
    "synth": (_SYNTH_FIELDS, schemas.SynthRequest, ops.run_synth),
    "stats": (_STATS_FIELDS, schemas.StatsRequest, ops.run_stats),
    "train": (_TRAIN_FIELDS, schemas.TrainRequest, ops.run_train),
    "predict": (_PREDICT_FIELDS, schemas.PredictRequest, ops.run_predict),
    "eval": (_EVAL_FIELDS, schemas.EvalRequest, ops.run_eval),
    "bench": (_BENCH_FIELDS, schemas.BenchRequest, ops.run_bench),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monobox",
                                     description="monocular 3D estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fields, _, _) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--server", default=None,
                       help="run against a service at this base URL")
        for field, (cast, help_text) in fields.items():
            p.add_argument(f"--{field.replace('_', '-')}", type=cast,
                           default=None, help=help_text)
    serve = sub.add_parser("serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def resolve_payload(args, fields) -> dict:
    """Merge flags over config-file values; omitted keys fall to model defaults."""
    file_cfg = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as f:
            file_cfg = parse_key_values(f.read())
    unknown = set(file_cfg) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    payload = {}
    for field, (cast, _) in fields.items():
        value = getattr(args, field)
        if value is None and field in file_cfg:
            value = cast(file_cfg[field])
        if value is not None:
            payload[field] = value
    return payload


def _post(server, command, payload) -> dict:
    import httpx

    url = server.rstrip("/") + "/" + command
    try:
        resp = httpx.post(url, json=payload, timeout=None)
    except httpx.HTTPError as e:
        raise RuntimeError(f"request to {url} failed: {e}") from e
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise RuntimeError(f"{url} returned {resp.status_code}: {detail}")
    return resp.json()


def _print_result(command, result):
    if command == "synth":
        print(f"wrote {result['n_objects']} objects to {result['out_dir']} "
              f"({' '.join(result['files'])})")
    elif command == "stats":
        for name in sorted(result["means"]):
            mean = " ".join(f"{v:.6f}" for v in result["means"][name])
            print(f"{name}: count={result['counts'][name]} mean_hwl={mean}")
        print(f"wrote {result['out']}")
    elif command == "train":
        loss = result["final_loss"]
        loss_text = "n/a" if loss is None else f"{loss:.6f}"
        print(f"trained {result['epochs']} epochs, final loss {loss_text}, "
              f"lr reductions at {result['reduction_epochs'] or 'none'}")
        print(f"wrote {result['weights']}")
        if result["history"]:
            print(f"wrote {result['history']}")
    elif command == "predict":
        print(f"wrote {result['n_objects']} predictions to {result['out']}")
    elif command == "eval":
        print(result["table"], end="")
        if result["out"]:
            print(f"wrote {result['out']}")
    elif command == "bench":
        print(f"batch {result['batch']} x dim {result['feature_dim']}: "
              f"mean {result['mean_s'] * 1e3:.3f} ms, "
              f"p50 {result['p50_s'] * 1e3:.3f} ms, "
              f"p95 {result['p95_s'] * 1e3:.3f} ms, "
              f"{result['per_object_mean_s'] * 1e6:.1f} us/object "
              f"over {result['repetitions']} runs")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            import uvicorn

            from .service.app import app
            uvicorn.run(app, host=args.host, port=args.port)
            return 0
        fields, model_cls, op = _COMMANDS[args.command]
        payload = resolve_payload(args, fields)
        request = model_cls(**payload)
        if args.server is not None:
            result = _post(args.server, args.command, request.model_dump())
        else:
            result = op(**request.model_dump())
        _print_result(args.command, result)
        return 0
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        print(f"error: invalid {loc}: {first['msg']}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
