"""Synthetic ground truth: face templates, posed scenes, rendered feature evidence.

Dataset layout (``make_dataset``) in an output directory:

``dataset.jsonl``
    First line is a header object::

        {"format": "headpose6d-dataset", "version": 1, "count": n,
         "config": {...ScenarioConfig...}, "template_version": 1,
         "feature_file": "features.bin"}

    Every following line is one record::

        {"index", "template_id", "sigma", "K": {f, cx, cy, w, h},
         "R_star": 9 floats row-major, "T_star": 3 floats,
         "bbox": {tau_x, tau_y, b, f}, "c_star": {s, tx, ty},
         "V_star": 1220 x [x, y, z], "sub_seed": [seed, index],
         "maps": [{"stage": t, "offset": byte offset}, ...]}

    The sparse landmark indices and the triangulation are implied by
    ``template_version``. Heatmaps are not stored; ``render_feature_maps``
    regenerates them bit-exactly from the record's sub-seed.

``features.bin``
    Concatenated blocks, each a 16-byte little-endian header
    (magic ``b"HPFM"``, uint16 version, uint16 C, uint32 H, uint32 W)
    followed by C*H*W row-major float64 values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bbox import (
    BBoxInfo, CROP_SIZE, CorrectionParams, FACE_BOX_M, analytic_bbox, bbox_crop_pixels,
    bbox_from_projected_landmarks, correction_from_translation,
)
from .errors import ConfigError, IoFailure, Unprojectable
from .geometry import CameraIntrinsics, euler_to_matrix, project_points
from .sampling import FeatureMap, feature_map_size, image_to_feature

N_VERTICES = 1220
N_SPARSE = 68
N_RINGS = 29
N_LON = 42
TEMPLATE_VERSION = 1
BUMP_STD = 1.5
HEATMAP_STD = 0.75  # texels; narrow enough that an edge margin removes truncation bias
CROP_MARGIN_PX = 10.0  # sparse landmarks must sit this far inside the 192 px crop
SEMI_AXES = (0.08, 0.11, 0.09)
DATASET_FORMAT = "headpose6d-dataset"
DATASET_VERSION = 1
MAP_MAGIC = b"HPFM"
MAP_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


def _sphere_grid_triangles() -> np.ndarray:
    """Top pole = 0, rings row-major, bottom pole = last index."""
    tris = []
    ring = lambda i, j: 1 + i * N_LON + (j % N_LON)
    bottom = 1 + N_RINGS * N_LON
    for j in range(N_LON):
        tris.append((0, ring(0, j + 1), ring(0, j)))
    for i in range(N_RINGS - 1):
        for j in range(N_LON):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    for j in range(N_LON):
        tris.append((bottom, ring(N_RINGS - 1, j), ring(N_RINGS - 1, j + 1)))
    return np.array(tris, dtype=np.int64)


def _sparse_indices() -> np.ndarray:
    # 17 rings x 4 meridians on the camera-facing side (longitude 0 faces -z)
    idx = []
    for i in range(5, 22):
        for j in (-6, -2, 2, 6):
            idx.append(1 + i * N_LON + (j % N_LON))
    return np.array(sorted(idx), dtype=np.int64)


TRIANGLES = _sphere_grid_triangles()
SPARSE_IDX = _sparse_indices()


def _unit_directions() -> np.ndarray:
    theta = np.pi * (np.arange(N_RINGS) + 1) / (N_RINGS + 1)
    phi = 2 * np.pi * np.arange(N_LON) / N_LON
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.sin(ph), -np.cos(th), -np.sin(th) * np.cos(ph)], axis=-1)
    return np.concatenate([[[0.0, -1.0, 0.0]], ring.reshape(-1, 3), [[0.0, 1.0, 0.0]]])


@dataclass(frozen=True)
class FaceTemplate:
    vertices: np.ndarray  # (3, 1220) meters, head space
    sigma: float
    seed: int
    triangles: np.ndarray = field(default_factory=lambda: TRIANGLES, repr=False)
    sparse_idx: np.ndarray = field(default_factory=lambda: SPARSE_IDX, repr=False)


def make_face_template(seed: int, sigma: float = 1.0) -> FaceTemplate:
    """Perturbed ellipsoid head with a nose bump, clamped into the 0.2*sigma m box."""
    if not 0.7 <= sigma <= 1.3:
        raise ValueError(f"sigma must lie in [0.7, 1.3], got {sigma}")
    rng = np.random.default_rng((int(seed), 7))
    d = _unit_directions()
    r = np.ones(len(d))
    for _ in range(6):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r += rng.uniform(-0.05, 0.05) * np.exp(4.0 * (d @ u - 1.0))
    front = np.array([0.0, 0.1, -1.0]) / np.hypot(0.1, 1.0)
    r += rng.uniform(0.12, 0.18) * np.exp(30.0 * (d @ front - 1.0))
    v = (d * r[:, None] * np.array(SEMI_AXES) * sigma).T
    v -= v.mean(axis=1, keepdims=True)
    half = FACE_BOX_M * sigma / 2.0
    ext = np.abs(v).max(axis=1)
    v *= np.minimum(1.0, half / ext)[:, None]
    return FaceTemplate(v, float(sigma), int(seed))


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "near"
    seed: int | None = None
    n_samples: int = 100
    depth_range: tuple = (0.3, 0.9)
    rotation_range_deg: tuple = (30.0, 20.0, 20.0)  # yaw, pitch, roll half-ranges
    lateral_frac: float = 0.5  # head-center offset as a fraction of the image half-size
    sigma_range: tuple = (0.85, 1.15)
    n_templates: int = 40
    noise_px: float = 1.0
    sigma_cue_noise: float = 0.02
    bbox_mode: str = "analytic"
    margin: float = 0.25
    channels: int = 8
    feature_seed: int = 0
    focal: float = 800.0
    image_size: tuple = (1280, 960)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is required")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ConfigError(f"depth_range must satisfy 0 < lo < hi, got {self.depth_range}")
        slo, shi = self.sigma_range
        if not 0.7 <= slo <= shi <= 1.3:
            raise ConfigError(f"sigma_range must lie inside [0.7, 1.3], got {self.sigma_range}")
        if any(r < 0 for r in self.rotation_range_deg):
            raise ConfigError("rotation ranges must be non-negative")
        if self.bbox_mode not in ("analytic", "tight"):
            raise ConfigError(f"bbox_mode must be 'analytic' or 'tight', got {self.bbox_mode!r}")
        if self.channels < 5:
            raise ConfigError("channels must be at least 5")
        if self.n_samples <= 0 or self.n_templates <= 0:
            raise ConfigError("sample and template counts must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        return CameraIntrinsics(self.focal, w / 2.0, h / 2.0, int(w), int(h))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k in ("depth_range", "rotation_range_deg", "sigma_range", "image_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


SCENARIOS = {
    "near": {"depth_range": (0.3, 0.9)},
    # artifact choice modeling a far-range shift; not taken from any benchmark
    "far": {"depth_range": (1.2, 2.4)},
}


def scenario(name: str, **overrides) -> ScenarioConfig:
    if name not in SCENARIOS and name != "custom":
        raise ConfigError(f"unknown scenario {name!r}; choose near, far or custom")
    params = dict(SCENARIOS.get(name, {}))
    params.update(overrides)
    return ScenarioConfig(name=name, **params)


@dataclass
class SceneSample:
    index: int
    template_id: int
    sigma: float
    R_star: np.ndarray
    T_star: np.ndarray
    K: CameraIntrinsics
    bbox: BBoxInfo
    c_star: CorrectionParams
    V_star: np.ndarray  # (3, N) head space
    sub_seed: tuple
    maps: list | None = None  # three FeatureMap
    heatmap: np.ndarray | None = None  # (68, 48, 48) logits

    @property
    def V_cam(self) -> np.ndarray:
        return self.R_star @ self.V_star + self.T_star[:, None]

    @property
    def V_img(self) -> np.ndarray:
        """GT dense landmarks in crop pixels."""
        uv = project_points(self.V_star, self.R_star, self.T_star, self.K)
        return bbox_crop_pixels(uv, self.bbox, self.K)

    @property
    def L_star(self) -> np.ndarray:
        return self.V_img[:, SPARSE_IDX]


def template_bank(cfg: ScenarioConfig) -> list[FaceTemplate]:
    rng = np.random.default_rng((cfg.seed, 1))
    sigmas = rng.uniform(*cfg.sigma_range, size=cfg.n_templates)
    seeds = rng.integers(0, 2**31 - 1, size=cfg.n_templates)
    return [make_face_template(int(s), float(g)) for s, g in zip(seeds, sigmas)]


def sample_scene(
    cfg: ScenarioConfig, template: FaceTemplate, K: CameraIntrinsics,
    rng: np.random.Generator, index: int = 0, template_id: int = 0,
) -> SceneSample:
    """Draw a pose for the template; rejection-sample until it projects inside the image."""
    ry, rp, rr = cfg.rotation_range_deg
    for _ in range(100):
        yaw, pitch, roll = rng.uniform(-ry, ry), rng.uniform(-rp, rp), rng.uniform(-rr, rr)
        R = euler_to_matrix(yaw, pitch, roll)
        tz = rng.uniform(*cfg.depth_range)
        off = rng.uniform(-cfg.lateral_frac, cfg.lateral_frac, size=2) * np.array([K.width, K.height]) / 2
        T = np.array([off[0] * tz / K.f, off[1] * tz / K.f, tz])
        Xc = R @ template.vertices + T[:, None]
        if np.any(Xc[2] <= 1e-3):
            continue
        uv = project_points(template.vertices, R, T, K)
        if uv[0].min() < 0 or uv[1].min() < 0 or uv[0].max() > K.width - 1 or uv[1].max() > K.height - 1:
            continue
        if cfg.bbox_mode == "analytic":
            bbox = analytic_bbox(T, template.sigma, K)
        else:
            bbox = bbox_from_projected_landmarks(uv, K, cfg.margin)
        L = bbox_crop_pixels(uv[:, SPARSE_IDX], bbox, K)
        if L.min() < CROP_MARGIN_PX or L.max() > CROP_SIZE - CROP_MARGIN_PX:
            continue
        c = correction_from_translation(T, bbox)
        return SceneSample(
            index, template_id, template.sigma, R, T, K, bbox, c, template.vertices.copy(), (cfg.seed, index)
        )
    raise Unprojectable(f"no pose for sample {index} fits the image after 100 attempts")


def mixing_matrix(feature_seed: int, channels: int) -> np.ndarray:
    """Fixed random linear mixing of the 69 evidence fields into C channels."""
    rng = np.random.default_rng((int(feature_seed), 3))
    return rng.normal(size=(channels, N_SPARSE + 1))


def _bumps(centers: np.ndarray, side: int) -> np.ndarray:
    """Isotropic Gaussian bumps (std BUMP_STD texels), one field per center: (K, side, side)."""
    g = np.arange(side, dtype=np.float64)
    dx = g[None, None, :] - centers[0][:, None, None]
    dy = g[None, :, None] - centers[1][:, None, None]
    return np.exp(-(dx * dx + dy * dy) / (2 * BUMP_STD**2))


def render_feature_maps(sample: SceneSample, noise_px: float, channels: int,
                        mixing: np.ndarray | None = None, sigma_cue_noise: float = 0.0,
                        sigma_range: tuple = (0.85, 1.15)):
    """Synthetic stand-in for backbone outputs.

    Each map mixes 68 landmark bump fields plus one appearance field whose
    amplitude encodes the (noisy) face scale. Landmark positions carry
    Gaussian noise of noise_px crop pixels, drawn independently per map; the
    scale cue is drawn once per sample and shared by all maps.
    Returns (three FeatureMap, heatmap logits of shape (68, 48, 48)).
    """
    if channels < 5:
        raise ValueError("channels must be at least 5")
    if mixing is None:
        mixing = mixing_matrix(0, channels)
    rng = np.random.default_rng(tuple(sample.sub_seed) + (5,))
    lo, hi = sigma_range
    mid, half = (lo + hi) / 2.0, max((hi - lo) / 2.0, 1e-6)
    cue = (sample.sigma + sigma_cue_noise * rng.normal() - mid) / half
    L = sample.L_star
    maps, heat = [], None
    for stage in (1, 2, 3):
        side = feature_map_size(stage)
        noisy = L + noise_px * rng.normal(size=L.shape)
        centers = image_to_feature(noisy, side)
        fields = _bumps(centers, side)
        base = np.concatenate([fields, cue * fields.sum(axis=0, keepdims=True)])
        values = np.tensordot(mixing, base, axes=(1, 0))
        maps.append(FeatureMap(values, stage))
        if stage == 3:
            gx = np.arange(side, dtype=np.float64)
            dx = gx[None, None, :] - centers[0][:, None, None]
            dy = gx[None, :, None] - centers[1][:, None, None]
            heat = -(dx * dx + dy * dy) / (2 * HEATMAP_STD**2)
    return maps, heat


@dataclass
class SceneSet:
    """A generated split held in memory: samples plus stacked arrays for batching."""

    config: ScenarioConfig
    samples: list

    def __len__(self):
        return len(self.samples)

    def arrays(self, idx=None) -> dict:
        s = self.samples if idx is None else [self.samples[i] for i in idx]
        out = {
            "R": np.stack([x.R_star for x in s]),
            "T": np.stack([x.T_star for x in s]),
            "c": np.stack([x.c_star.as_array() for x in s]),
            "V": np.stack([x.V_star for x in s]),
            "tau": np.stack([[x.bbox.tau_x, x.bbox.tau_y] for x in s]),
            "b": np.array([x.bbox.b for x in s]),
            "f": np.array([x.K.f for x in s]),
            "cx": np.array([x.K.cx for x in s]),
            "cy": np.array([x.K.cy for x in s]),
        }
        out["V_cam"] = out["R"] @ out["V"] + out["T"][:, :, None]
        out["V_img"] = np.stack([x.V_img for x in s])
        out["maps"] = [np.stack([x.maps[t].values for x in s]) for t in range(3)]
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for x in self.samples:
            h.update(x.R_star.tobytes())
            h.update(x.T_star.tobytes())
            h.update(np.array(x.bbox.normalized()).tobytes())
            h.update(x.V_star.tobytes())
            for m in x.maps:
                h.update(m.values.tobytes())
        return h.hexdigest()


def generate(cfg: ScenarioConfig, heatmaps: bool = False) -> SceneSet:
    """Generate all samples of a scenario in memory, deterministic in cfg.seed.

    Heatmaps are large (68x48x48 per sample) and are only kept on request;
    ``heatmap_for`` regenerates them identically.
    """
    K = cfg.intrinsics()
    bank = template_bank(cfg)
    mixing = mixing_matrix(cfg.feature_seed, cfg.channels)
    samples = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng((cfg.seed, 2, i))
        tid = int(rng.integers(len(bank)))
        s = sample_scene(cfg, bank[tid], K, rng, index=i, template_id=tid)
        s.maps, heat = render_feature_maps(
            s, cfg.noise_px, cfg.channels, mixing, cfg.sigma_cue_noise, cfg.sigma_range
        )
        if heatmaps:
            s.heatmap = heat
        samples.append(s)
    return SceneSet(cfg, samples)


def _record(s: SceneSample, offsets: list) -> dict:
    return {
        "index": s.index,
        "template_id": s.template_id,
        "sigma": s.sigma,
        "K": s.K.to_dict(),
        "R_star": s.R_star.ravel().tolist(),
        "T_star": s.T_star.tolist(),
        "bbox": s.bbox.to_dict(),
        "c_star": s.c_star.to_dict(),
        "V_star": s.V_star.T.tolist(),
        "sub_seed": list(s.sub_seed),
        "maps": [{"stage": t + 1, "offset": o} for t, o in enumerate(offsets)],
    }


def write_map_block(fh, values: np.ndarray) -> None:
    C, H, W = values.shape
    fh.write(_HEADER.pack(MAP_MAGIC, MAP_VERSION, C, H, W))
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_map_block(fh, offset: int) -> np.ndarray:
    fh.seek(offset)
    magic, version, C, H, W = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != MAP_MAGIC or version != MAP_VERSION:
        raise IoFailure(f"bad feature block at offset {offset}")
    data = np.frombuffer(fh.read(8 * C * H * W), dtype="<f8")
    return data.reshape(C, H, W).astype(np.float64)


def make_dataset(cfg: ScenarioConfig, out_dir, n_templates: int | None = None) -> Path:
    """Generate a scenario and write dataset.jsonl + features.bin into out_dir."""
    if n_templates is not None:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), "n_templates": n_templates})
    data = generate(cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "features.bin", "wb") as fb, open(out / "dataset.jsonl", "w") as fj:
            header = {
                "format": DATASET_FORMAT,
                "version": DATASET_VERSION,
                "count": len(data),
                "config": cfg.to_dict(),
                "template_version": TEMPLATE_VERSION,
                "feature_file": "features.bin",
            }
            fj.write(json.dumps(header, sort_keys=True) + "\n")
            for s in data.samples:
                offsets = []
                for m in s.maps:
                    offsets.append(fb.tell())
                    write_map_block(fb, m.values)
                fj.write(json.dumps(_record(s, offsets), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {out}: {exc}") from exc
    return out / "dataset.jsonl"


def load_dataset(path) -> SceneSet:
    """Load a dataset directory (or its dataset.jsonl) written by make_dataset."""
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.jsonl"
    try:
        lines = p.read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {p}: {exc}") from exc
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise IoFailure(f"{p} is not a version-{DATASET_VERSION} {DATASET_FORMAT} file")
    cfg = ScenarioConfig.from_dict(header["config"])
    mixing = mixing_matrix(cfg.feature_seed, cfg.channels)
    samples = []
    try:
        fb = open(p.parent / header["feature_file"], "rb")
    except OSError as exc:
        raise IoFailure(f"cannot open feature file: {exc}") from exc
    with fb:
        for line in lines[1:]:
            r = json.loads(line)
            K = CameraIntrinsics.from_dict(r["K"])
            s = SceneSample(
                r["index"], r["template_id"], r["sigma"],
                np.array(r["R_star"]).reshape(3, 3), np.array(r["T_star"]), K,
                BBoxInfo.from_dict(r["bbox"]), CorrectionParams.from_dict(r["c_star"]),
                np.array(r["V_star"]).T.copy(), tuple(r["sub_seed"]),
            )
            s.maps = [FeatureMap(read_map_block(fb, m["offset"]), m["stage"]) for m in r["maps"]]
            samples.append(s)
    if len(samples) != header["count"]:
        raise IoFailure(f"{p}: header promises {header['count']} records, found {len(samples)}")
    return SceneSet(cfg, samples)


def heatmap_for(sample: SceneSample, cfg: ScenarioConfig) -> np.ndarray:
    """Regenerate the sparse-landmark heatmap of a stored sample."""
    _, heat = render_feature_maps(
        sample, cfg.noise_px, cfg.channels, mixing_matrix(cfg.feature_seed, cfg.channels),
        cfg.sigma_cue_noise, cfg.sigma_range,
    )
    return heat


def dataset_hash(path) -> str:
    """sha256 over dataset.jsonl and its feature sidecar."""
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.jsonl"
    h = hashlib.sha256()
    for f in (p, p.parent / "features.bin"):
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()
