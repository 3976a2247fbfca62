"""Pipeline operations behind the HTTP endpoints and CLI subcommands.

Every function takes plain values, does file I/O through the core modules,
and returns a JSON-compatible dict.  Outputs are written atomically, so a
failing run leaves no partial files.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import evalkit, net, synth
from ..fileutil import atomic_write_text, format_key_values
from ..geometry import local_to_global, ray_angle_from_pixel
from ..kitti_io import (ObjectLabel, compute_dims_stats, parse_calib_file,
                        parse_dims_stats, parse_label_file,
                        serialize_dims_stats, serialize_label_file)

DATASET_FILES = (synth.LABELS_NAME, synth.CALIB_NAME,
                 synth.FEATURES_NAME, synth.MANIFEST_NAME)


def run_synth(out_dir, n_objects=200, image_w=1242, image_h=375,
              fu=721.5377, fv=721.5377, cu=609.5593, cv=172.854,
              camera_height=1.65, class_name="Car",
              dims_mean=(1.5, 1.6, 3.9), dims_sigma=(0.1, 0.1, 0.4),
              x_range=(-6.0, 6.0), z_range=(8.0, 35.0),
              feature_dim=64, noise_sigma=0.05, seed=0) -> dict:
    cfg = synth.SceneConfig(
        n_objects=n_objects, image_size=(image_w, image_h),
        fu=fu, fv=fv, cu=cu, cv=cv, camera_height=camera_height,
        class_name=class_name, dims_mean=tuple(dims_mean),
        dims_sigma=tuple(dims_sigma), x_range=tuple(x_range),
        z_range=tuple(z_range), feature_dim=feature_dim,
        noise_sigma=noise_sigma, seed=seed)
    scene = synth.generate_scene(cfg)
    synth.write_dataset(scene, out_dir)
    return {"out_dir": out_dir, "n_objects": len(scene.objects),
            "seed": seed, "files": list(DATASET_FILES)}


def run_stats(labels, out, classes=("Car",)) -> dict:
    with open(labels, encoding="utf-8") as f:
        parsed = parse_label_file(f.read())
    stats = compute_dims_stats(parsed, list(classes))
    atomic_write_text(out, serialize_dims_stats(stats))
    return {"out": out,
            "means": {c: list(m) for c, m in stats.means.items()},
            "counts": dict(stats.counts)}


def run_train(dataset, stats, weights_out, history_out=None,
              hidden_dim=256, n_bins=2, overlap_fraction=0.1,
              lr=1e-4, weight_decay=1e-3, batch_size=200, epochs=250,
              seed=0, alpha_residual=1.0, w_orientation=1.0,
              factor=0.1, patience=10, threshold=1e-4) -> dict:
    data = synth.read_dataset(dataset)
    with open(stats, encoding="utf-8") as f:
        dims_stats = parse_dims_stats(f.read())

    head_cfg = net.HeadConfig(feature_dim=data.features.shape[1],
                              hidden_dim=hidden_dim, n_bins=n_bins,
                              overlap_fraction=overlap_fraction)
    train_cfg = net.TrainConfig(
        epochs=epochs, batch_size=batch_size, seed=seed,
        optimizer=net.OptimizerConfig(lr=lr, weight_decay=weight_decay),
        scheduler=net.SchedulerConfig(factor=factor, patience=patience,
                                      threshold=threshold),
        loss=net.losses.LossConfig(alpha_residual=alpha_residual,
                                   w_orientation=w_orientation))

    theta = np.array([label.alpha for label in data.labels])
    dims_true = np.array([label.dims for label in data.labels])
    mean_rows = []
    for i, label in enumerate(data.labels):
        if label.class_name not in dims_stats.means:
            raise ValueError(f"label {i} has class {label.class_name!r} "
                             f"absent from stats file {stats}")
        mean_rows.append(dims_stats.means[label.class_name])
    targets = net.losses.make_batch_targets(theta, dims_true,
                                            np.array(mean_rows), head_cfg.layout())

    result = net.train(data.features, targets, head_cfg, train_cfg)
    meta = {"feature_dim": head_cfg.feature_dim, "hidden_dim": hidden_dim,
            "n_bins": n_bins, "overlap_fraction": overlap_fraction,
            "dims_mean": {c: list(m) for c, m in dims_stats.means.items()},
            "seed": seed}
    net.save_weights(weights_out, result.params, meta)

    effective = {"dataset": dataset, "stats": stats,
                 "feature_dim": head_cfg.feature_dim, "hidden_dim": hidden_dim,
                 "n_bins": n_bins, "overlap_fraction": repr(float(overlap_fraction)),
                 "lr": repr(float(lr)), "weight_decay": repr(float(weight_decay)),
                 "batch_size": batch_size, "epochs": epochs, "seed": seed,
                 "alpha_residual": repr(float(alpha_residual)),
                 "w_orientation": repr(float(w_orientation)),
                 "factor": repr(float(factor)), "patience": patience,
                 "threshold": repr(float(threshold))}
    if history_out is not None:
        lines = [f"# {k}={v}" for k, v in effective.items()]
        lines.append("# epoch loss lr")
        for i, (loss, lr_used) in enumerate(zip(result.epoch_losses,
                                                result.lr_history), start=1):
            lines.append(f"{i} {loss!r} {lr_used!r}")
        atomic_write_text(history_out, "\n".join(lines) + "\n")

    return {"weights": weights_out, "history": history_out, "epochs": epochs,
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
            "reduction_epochs": list(result.reduction_epochs)}


MIN_PREDICTED_DIM = 0.01  # meters; keeps result files parseable


def run_predict(weights, features, boxes, calib, out) -> dict:
    """Estimate dims and orientation per box; write a KITTI result file.

    Class, bbox, truncation/occlusion and location are carried over from
    the box-source label file; alpha and dims come from the head, and
    rotation_y = alpha + ray angle through the bbox center pixel.  The
    detection score is the top bin probability.  Dimensions are floored
    at MIN_PREDICTED_DIM: an underfit head can regress a deviation past
    zero, and a physical size below a centimeter is never meaningful.
    """
    params, meta = net.load_weights(weights)
    layout = net.head_config_from_meta(meta).layout()
    x = synth.read_features(features).astype(float)
    if x.shape[1] != meta["feature_dim"]:
        raise ValueError(f"features have dim {x.shape[1]}, weights expect "
                         f"{meta['feature_dim']}")
    with open(boxes, encoding="utf-8") as f:
        sources = parse_label_file(f.read())
    if len(sources) != x.shape[0]:
        raise ValueError(f"{len(sources)} boxes but {x.shape[0]} feature rows")
    with open(calib, encoding="utf-8") as f:
        intrinsics = parse_calib_file(f.read())

    pred, _ = net.forward(params, x)
    shifted = pred.scores - pred.scores.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    results = []
    for i, src in enumerate(sources):
        if src.class_name not in meta["dims_mean"]:
            raise ValueError(f"box {i} has class {src.class_name!r} absent "
                             f"from the weights' dims_mean table")
        alpha = float(net.decode(
            net.BinPrediction(scores=pred.scores[i], residual_sc=pred.residual_sc[i]),
            layout))
        dims = tuple(np.maximum(
            np.asarray(meta["dims_mean"][src.class_name], dtype=float)
            + pred.delta_dims[i], MIN_PREDICTED_DIM))
        ray = ray_angle_from_pixel(src.bbox_center[0], intrinsics)
        results.append(ObjectLabel(
            class_name=src.class_name, truncation=src.truncation,
            occlusion=src.occlusion, alpha=alpha, bbox=src.bbox, dims=dims,
            location=src.location, rotation_y=local_to_global(alpha, ray),
            score=float(probs[i].max())))
    atomic_write_text(out, serialize_label_file(results))
    return {"out": out, "n_objects": len(results)}


def run_eval(gt, det, class_name="Car", points=40, iou_threshold=None,
             out=None, threads=1) -> dict:
    with open(gt, encoding="utf-8") as f:
        gt_labels = parse_label_file(f.read())
    with open(det, encoding="utf-8") as f:
        det_labels = parse_label_file(f.read())
    if iou_threshold is None:
        iou_threshold = evalkit.default_iou_threshold(class_name)

    if threads > 1:
        def one(spec):
            matches = evalkit.match_detections(gt_labels, det_labels,
                                               iou_threshold, spec, class_name)
            return evalkit.DifficultyResult(
                spec=spec,
                ap=evalkit.average_precision(matches, matches.n_valid_gt, points),
                aos=evalkit.average_orientation_similarity(
                    matches, matches.n_valid_gt, points),
                n_valid_gt=matches.n_valid_gt, matches=matches)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = tuple(pool.map(one, evalkit.DIFFICULTIES))
        report = evalkit.EvalReport(class_name=class_name,
                                    iou_threshold=iou_threshold,
                                    points=points, results=results)
    else:
        report = evalkit.evaluate(gt_labels, det_labels, class_name,
                                  iou_threshold=iou_threshold, points=points)

    values = evalkit.report_key_values(report)
    if out is not None:
        atomic_write_text(out, format_key_values(values))
    return {"table": evalkit.format_report_table(report), "values": values,
            "out": out}


def run_bench(weights, batch=200, repetitions=50, seed=0) -> dict:
    params, meta = net.load_weights(weights)
    layout = net.head_config_from_meta(meta).layout()
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((batch, meta["feature_dim"]))
    result = evalkit.bench_inference(params, features, layout,
                                     repetitions=repetitions)
    return {"batch": result.batch_size, "feature_dim": result.feature_dim,
            "repetitions": len(result.times), "mean_s": result.mean,
            "p50_s": result.p50, "p95_s": result.p95,
            "per_object_mean_s": result.per_object_mean}


def dataset_paths(dataset_dir) -> dict:
    """Absolute paths of the four files inside a dataset directory."""
    return {name: os.path.join(dataset_dir, name) for name in DATASET_FILES}
