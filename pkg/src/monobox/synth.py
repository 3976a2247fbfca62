"""Self-consistent synthetic scenes for oracle-grade testing and training.

Objects are sampled on a flat ground plane in front of a pinhole camera,
fully visible by construction (rejection sampling, never clipping), and
carry labels whose fields satisfy the geometric identities exactly:
rotation_y = wrap(alpha + atan2(x, z)), bbox = projection of the 3D box,
and the box bottom rests on the ground.

Each object also gets a feature vector: a fixed random linear mix of the
quantities the heads must recover (sin/cos of the local angle, dimension
deviations, a constant) plus gaussian noise.  With zero noise the features
span a 6-dimensional affine subspace, so the estimation task is exactly
solvable and any residual error is attributable to the learner.

A dataset on disk is one directory: labels.txt and calib.txt in KITTI
format, features.mlft (magic "MLFT", uint32 count, uint32 feature_dim,
float32 little-endian rows), and manifest.txt as key=value lines from
which the dataset can be regenerated byte-identically.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .angles import wrap_angle
from .fileutil import atomic_write_bytes, atomic_write_text, format_key_values, parse_key_values
from .geometry import Box3D, Pose, box_corners, global_to_local, ray_angle_from_location
from .kitti_io import (CameraIntrinsics, ObjectLabel, parse_calib_file,
                       parse_label_file, serialize_calib_file, serialize_label_file)

FEATURES_MAGIC = b"MLFT"
MIXER_INPUTS = 6  # sin, cos, three dimension deviations, constant

LABELS_NAME = "labels.txt"
CALIB_NAME = "calib.txt"
FEATURES_NAME = "features.mlft"
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 200
    image_size: tuple = (1242, 375)
    fu: float = 721.5377
    fv: float = 721.5377
    cu: float = 609.5593
    cv: float = 172.854
    camera_height: float = 1.65
    class_name: str = "Car"
    dims_mean: tuple = (1.5, 1.6, 3.9)  # h, w, l
    dims_sigma: tuple = (0.1, 0.1, 0.4)
    x_range: tuple = (-6.0, 6.0)
    z_range: tuple = (8.0, 35.0)
    feature_dim: int = 64
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 0:
            raise ValueError(f"n_objects must be >= 0, got {self.n_objects}")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if self.x_range[0] > self.x_range[1]:
            raise ValueError(f"empty x_range {self.x_range}")
        if self.z_range[0] > self.z_range[1] or self.z_range[0] <= 0:
            raise ValueError(f"z_range must be positive and nonempty, got {self.z_range}")
        if any(s < 0 for s in self.dims_sigma) or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_p2_values([
            self.fu, 0.0, self.cu, 0.0,
            0.0, self.fv, self.cv, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ])


@dataclass(frozen=True)
class SynthObject:
    label: ObjectLabel
    feature: np.ndarray
    theta_l: float


@dataclass(frozen=True)
class SynthScene:
    objects: list
    intrinsics: CameraIntrinsics
    config: SceneConfig

    def feature_matrix(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, self.config.feature_dim))
        return np.stack([o.feature for o in self.objects])

    def labels(self) -> list:
        return [o.label for o in self.objects]


def make_mixer(feature_dim: int, rng) -> np.ndarray:
    return rng.standard_normal((feature_dim, MIXER_INPUTS))


def make_features(theta_l: float, dims_delta, mixer, noise_sigma: float, rng=None) -> np.ndarray:
    """Mix the recoverable statistics into a feature vector, plus noise."""
    mixer = np.asarray(mixer, dtype=float)
    if mixer.ndim != 2 or mixer.shape[1] != MIXER_INPUTS:
        raise ValueError(f"mixer must be (feature_dim, {MIXER_INPUTS}), got {mixer.shape}")
    d = np.asarray(dims_delta, dtype=float)
    u = np.array([np.sin(theta_l), np.cos(theta_l), d[0], d[1], d[2], 1.0])
    feature = mixer @ u
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        feature = feature + noise_sigma * rng.standard_normal(mixer.shape[0])
    return feature


def generate_scene(cfg: SceneConfig) -> SynthScene:
    """Sample cfg.n_objects fully visible objects, deterministically per seed.

    Raises RuntimeError with the observed acceptance rate if rejection
    sampling cannot place every object within 100 * n_objects attempts.
    """
    mixer_seq, sample_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    mixer = make_mixer(cfg.feature_dim, np.random.default_rng(mixer_seq))
    sample_rng = np.random.default_rng(sample_seq)
    noise_rng = np.random.default_rng(noise_seq)

    width, height = cfg.image_size
    mean = np.asarray(cfg.dims_mean, dtype=float)
    sigma = np.asarray(cfg.dims_sigma, dtype=float)
    objects = []
    attempts = 0
    budget = 100 * cfg.n_objects
    while len(objects) < cfg.n_objects:
        if attempts >= budget:
            rate = len(objects) / attempts
            raise RuntimeError(
                f"placed {len(objects)} of {cfg.n_objects} objects in {attempts} "
                f"attempts (acceptance rate {rate:.3f}); widen the location "
                f"ranges or shrink the dimensions")
        attempts += 1
        x = sample_rng.uniform(*cfg.x_range)
        z = sample_rng.uniform(*cfg.z_range)
        dims = mean + sigma * sample_rng.standard_normal(3)
        rotation_y = wrap_angle(sample_rng.uniform(-np.pi, np.pi))
        if (dims <= 0.0).any():
            continue
        location = (x, cfg.camera_height, z)  # bottom-center on the ground
        box = Box3D(dims=tuple(dims), pose=Pose(yaw=rotation_y, translation=location))
        corners = box_corners(box)
        if (corners[:, 2] <= 1e-6).any():
            continue
        us = cfg.fu * corners[:, 0] / corners[:, 2] + cfg.cu
        vs = cfg.fv * corners[:, 1] / corners[:, 2] + cfg.cv
        bbox = (us.min(), vs.min(), us.max(), vs.max())
        if not (0.0 < bbox[0] and bbox[2] < width and 0.0 < bbox[1] and bbox[3] < height):
            continue
        alpha = global_to_local(rotation_y, ray_angle_from_location(location))
        label = ObjectLabel(class_name=cfg.class_name, truncation=0.0, occlusion=0,
                            alpha=alpha, bbox=bbox, dims=tuple(dims),
                            location=location, rotation_y=rotation_y)
        feature = make_features(alpha, dims - mean, mixer, cfg.noise_sigma, noise_rng)
        objects.append(SynthObject(label=label, feature=feature, theta_l=alpha))
    return SynthScene(objects=objects, intrinsics=cfg.intrinsics(), config=cfg)


def write_features(path, features):
    """Write an (N, feature_dim) array in the MLFT container, atomically."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    count, dim = features.shape
    if dim < 1:
        raise ValueError("feature_dim must be >= 1")
    header = FEATURES_MAGIC + np.array([count, dim], dtype="<u4").tobytes()
    atomic_write_bytes(path, header + np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read an MLFT container back as a float32 (N, feature_dim) array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FEATURES_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {FEATURES_MAGIC!r}")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    count, dim = (int(v) for v in np.frombuffer(data[4:12], dtype="<u4"))
    expected = 12 + 4 * count * dim
    if len(data) != expected:
        raise ValueError(f"{path}: payload is {len(data)} bytes, expected {expected} "
                         f"for {count} rows of {dim}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(count, dim).copy()


_FLOAT_KEYS = ("fu", "fv", "cu", "cv", "camera_height", "noise_sigma")
_FLOAT_PAIR_KEYS = ("x_range", "z_range")
_FLOAT_TRIPLE_KEYS = ("dims_mean", "dims_sigma")
_INT_KEYS = ("n_objects", "feature_dim", "seed")


def manifest_from_config(cfg: SceneConfig) -> dict:
    """Flatten a SceneConfig to key=value strings; floats keep full precision."""
    out = {"class_name": cfg.class_name,
           "image_size": f"{cfg.image_size[0]} {cfg.image_size[1]}"}
    for key in _INT_KEYS:
        out[key] = str(getattr(cfg, key))
    for key in _FLOAT_KEYS:
        out[key] = repr(float(getattr(cfg, key)))
    for key in _FLOAT_PAIR_KEYS + _FLOAT_TRIPLE_KEYS:
        out[key] = " ".join(repr(float(v)) for v in getattr(cfg, key))
    return out


def config_from_manifest(manifest: dict) -> SceneConfig:
    """Rebuild the exact SceneConfig a manifest was written from."""
    known = {"class_name", "image_size", *_INT_KEYS, *_FLOAT_KEYS,
             *_FLOAT_PAIR_KEYS, *_FLOAT_TRIPLE_KEYS}
    unknown = sorted(set(manifest) - known)
    if unknown:
        raise ValueError(f"bad manifest: unknown keys {unknown}")
    try:
        kwargs = {"class_name": manifest["class_name"],
                  "image_size": tuple(int(v) for v in manifest["image_size"].split())}
        for key in _INT_KEYS:
            kwargs[key] = int(manifest[key])
        for key in _FLOAT_KEYS:
            kwargs[key] = float(manifest[key])
        for key in _FLOAT_PAIR_KEYS + _FLOAT_TRIPLE_KEYS:
            kwargs[key] = tuple(float(v) for v in manifest[key].split())
    except (KeyError, ValueError) as e:
        raise ValueError(f"bad manifest: {e}") from e
    return SceneConfig(**kwargs)


def write_dataset(scene: SynthScene, path):
    """Write labels, calib, features and manifest into directory `path`."""
    os.makedirs(path, exist_ok=True)
    atomic_write_text(os.path.join(path, LABELS_NAME),
                      serialize_label_file(scene.labels()))
    atomic_write_text(os.path.join(path, CALIB_NAME),
                      serialize_calib_file(scene.intrinsics))
    write_features(os.path.join(path, FEATURES_NAME), scene.feature_matrix())
    atomic_write_text(os.path.join(path, MANIFEST_NAME),
                      format_key_values(manifest_from_config(scene.config)))


@dataclass(frozen=True)
class LoadedDataset:
    labels: list
    intrinsics: CameraIntrinsics
    features: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def config(self) -> SceneConfig:
        return config_from_manifest(self.manifest)


def read_dataset(path) -> LoadedDataset:
    """Read a dataset directory back; validates row counts across files."""
    with open(os.path.join(path, LABELS_NAME), encoding="utf-8") as f:
        labels = parse_label_file(f.read())
    with open(os.path.join(path, CALIB_NAME), encoding="utf-8") as f:
        intrinsics = parse_calib_file(f.read())
    features = read_features(os.path.join(path, FEATURES_NAME))
    manifest_path = os.path.join(path, MANIFEST_NAME)
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as f:
            manifest = parse_key_values(f.read())
    if features.shape[0] != len(labels):
        raise ValueError(f"{path}: {features.shape[0]} feature rows but "
                         f"{len(labels)} labels")
    return LoadedDataset(labels=labels, intrinsics=intrinsics,
                         features=features, manifest=manifest)


def split_scene(scene: SynthScene, n_train: int) -> tuple:
    """Split a scene into (train, held_out) keeping the shared feature mixer."""
    if not 0 <= n_train <= len(scene.objects):
        raise ValueError(f"n_train {n_train} out of range for {len(scene.objects)} objects")
    head = replace(scene, objects=scene.objects[:n_train])
    tail = replace(scene, objects=scene.objects[n_train:])
    return head, tail
