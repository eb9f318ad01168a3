"""Self-supervised visual front end.

Two virtual top-down orthographic cameras ride on the end-effector with
mirrored lateral offsets.  Rendering is a coverage-weighted (2x2
supersampled) polygon rasterizer: table plane, hole opening, peg top --
sub-pixel edge coverage is what carries displacement information below one
pixel.  The encoder is a small shared-trunk convnet per view; the two view
embeddings concatenate into the feature vector the policy consumes, and a
three-layer head predicts the signs of the relative displacements
(dx, dy, dtheta) for self-supervised training.  Labels come from the
simulator's ground-truth frames; dtheta is folded by the peg's rotational
symmetry (the raw sign is unobservable beyond the symmetry sector).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, CorruptCheckpointError, TrainingDiverged
from .shapes import points_in_polygon, rot2d

DEFAULT_COLORS = np.array(
    [
        [0.42, 0.47, 0.50],  # table
        [0.08, 0.08, 0.10],  # hole opening
        [0.85, 0.55, 0.20],  # peg
    ]
)


@dataclass
class CameraSpec:
    """Orthographic top-down camera in the end-effector frame."""

    offset: tuple = (0.0088, 0.0)  # metres, EE frame
    scale: float = 0.0022  # m / pixel
    width: int = 64
    height: int = 64

    def mirrored(self) -> "CameraSpec":
        return CameraSpec(
            offset=(-self.offset[0], -self.offset[1]),
            scale=self.scale, width=self.width, height=self.height,
        )


def camera_pair(width: int = 64, height: int = 64,
                scale: float = 0.0022) -> tuple[CameraSpec, CameraSpec]:
    cam_a = CameraSpec(width=width, height=height, scale=scale)
    return cam_a, cam_a.mirrored()


@dataclass
class AppearanceParams:
    randomize: bool = False
    color_jitter: float = 0.15  # uniform per-channel shift of class colors
    pixel_noise: float = 0.02  # gaussian, applied after composition


def draw_colors(appearance: AppearanceParams, rng) -> np.ndarray:
    colors = DEFAULT_COLORS.copy()
    if appearance.randomize:
        colors = colors + rng.uniform(
            -appearance.color_jitter, appearance.color_jitter, size=colors.shape
        )
    return np.clip(colors, 0.0, 1.0)


def _coverage(poly_px: np.ndarray, width: int, height: int) -> tuple:
    """2x2 supersampled coverage of a polygon given in pixel coordinates.

    Returns (rows slice, cols slice, coverage array) restricted to the
    polygon's bounding box; coverage values in [0, 1]."""
    x0 = max(int(np.floor(poly_px[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(poly_px[:, 0].max())) + 1, width - 1)
    y0 = max(int(np.floor(poly_px[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(poly_px[:, 1].max())) + 1, height - 1)
    if x1 < x0 or y1 < y0:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0))
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    cov = np.zeros((len(ys), len(xs)))
    for du, dv in ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)):
        px, py = np.meshgrid(xs + du, ys + dv)
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        cov += points_in_polygon(pts, poly_px).reshape(cov.shape)
    return slice(y0, y1 + 1), slice(x0, x1 + 1), cov / 4.0


def _to_pixels(pts_cam: np.ndarray, cam: CameraSpec) -> np.ndarray:
    """Camera-frame metres -> pixel coordinates (x right, y down)."""
    px = pts_cam[:, 0] / cam.scale + cam.width / 2.0
    py = -pts_cam[:, 1] / cam.scale + cam.height / 2.0
    return np.stack([px, py], axis=1)


def render(env, cam: CameraSpec, colors: np.ndarray | None = None,
           rng=None, noise_std: float = 0.0) -> np.ndarray:
    """Rasterize the scene from an EE-mounted camera; returns (3, H, W) in
    [0, 1].  The camera rotates with the peg, so the image shows the hole at
    its pose relative to the object frame."""
    if colors is None:
        colors = DEFAULT_COLORS
    state = env.state
    q = state.joint.q
    cam_off = np.asarray(cam.offset)

    img = np.empty((cam.height, cam.width, 3))
    img[:] = colors[0]

    # hole opening in camera frame: world -> EE frame -> camera shift
    R_we = rot2d(-q[5])
    hole_world = state.hole.opening @ rot2d(state.hole.pose[2]).T + state.hole.pose[:2]
    hole_cam = (hole_world - q[:2]) @ R_we.T - cam_off
    rs, cs, cov = _coverage(_to_pixels(hole_cam, cam), cam.width, cam.height)
    img[rs, cs] = img[rs, cs] * (1 - cov[..., None]) + colors[1] * cov[..., None]

    # peg polygon is fixed in the EE frame
    peg_cam = state.hole.shape.cross_section - cam_off
    rs, cs, cov = _coverage(_to_pixels(peg_cam, cam), cam.width, cam.height)
    img[rs, cs] = img[rs, cs] * (1 - cov[..., None]) + colors[2] * cov[..., None]

    if noise_std > 0 and rng is not None:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32)


@dataclass
class SignLabels:
    sx: bool
    sy: bool
    stheta: bool

    def to_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.stheta], dtype=bool)


def labels_from_state(env, dead_zone_pos: float = 0.002,
                      dead_zone_ang: float = np.deg2rad(2.0)):
    """Sign labels of the hole pose relative to the object frame, or None when
    any displacement falls inside the dead zone (ill-defined sign)."""
    dx, dy, dth, _ = env.relative_pose()
    if abs(dx) < dead_zone_pos or abs(dy) < dead_zone_pos or abs(dth) < dead_zone_ang:
        return None
    return SignLabels(sx=dx > 0, sy=dy > 0, stheta=dth > 0)


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

_DS_MAGIC = b"PEGD"
_DS_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIBBHH")


@dataclass
class Dataset:
    """(image_A, image_B, sign labels) triples; images float32 (3, H, W)."""

    images: np.ndarray  # (n, 2, 3, H, W) float32, possibly memmapped
    labels: np.ndarray  # (n, 3) bool

    @property
    def n(self) -> int:
        return len(self.labels)

    def save(self, path) -> None:
        n = self.n
        _, v, c, h, w = self.images.shape if n else (0, 2, 3, 0, 0)
        with open(path, "wb") as f:
            f.write(_DS_HEADER.pack(_DS_MAGIC, _DS_VERSION, n, 2, c, h, w))
            for i in range(n):
                f.write(self.images[i].astype("<f4").tobytes())
            packed = np.packbits(self.labels.astype(np.uint8), axis=1, bitorder="little")
            f.write(packed[:, 0].tobytes() if n else b"")

    @classmethod
    def load(cls, path, memmap: bool = True) -> "Dataset":
        with open(path, "rb") as f:
            header = f.read(_DS_HEADER.size)
            if len(header) != _DS_HEADER.size:
                raise CorruptCheckpointError("truncated dataset header")
            magic, version, n, views, c, h, w = _DS_HEADER.unpack(header)
            if magic != _DS_MAGIC or version != _DS_VERSION:
                raise CorruptCheckpointError("bad dataset magic/version")
        img_bytes = n * views * c * h * w * 4
        if memmap and n:
            images = np.memmap(path, dtype="<f4", mode="r",
                               offset=_DS_HEADER.size, shape=(n, views, c, h, w))
        else:
            with open(path, "rb") as f:
                f.seek(_DS_HEADER.size)
                images = np.frombuffer(
                    f.read(img_bytes), dtype="<f4"
                ).reshape(n, views, c, h, w)
        with open(path, "rb") as f:
            f.seek(_DS_HEADER.size + img_bytes)
            raw = f.read(n)
        if len(raw) != n:
            raise CorruptCheckpointError("truncated dataset labels")
        bits = np.unpackbits(
            np.frombuffer(raw, dtype=np.uint8)[:, None], axis=1, bitorder="little"
        )[:, :3].astype(bool) if n else np.zeros((0, 3), bool)
        return cls(images=images, labels=bits)


def collect_dataset(env, n_samples: int, seed: int = 0,
                    cams: tuple | None = None,
                    appearance: AppearanceParams | None = None,
                    dead_zone_pos: float = 0.002,
                    dead_zone_ang: float = np.deg2rad(2.0),
                    max_per_episode: int = 25) -> Dataset:
    """Run random-action episodes and keep labeled (two-view image, sign)
    samples; dead-zone states are rejected.

    ``max_per_episode`` caps how many samples one episode contributes --
    states within an episode are strongly correlated, and uncapped episodes
    skew the sign balance of small datasets."""
    cams = cams or camera_pair()
    appearance = appearance or AppearanceParams()
    if n_samples == 0:
        h, w = cams[0].height, cams[0].width
        return Dataset(images=np.zeros((0, 2, 3, h, w), np.float32),
                       labels=np.zeros((0, 3), bool))
    rng = np.random.default_rng(seed)
    images = np.empty((n_samples, 2, 3, cams[0].height, cams[0].width), np.float32)
    labels = np.empty((n_samples, 3), bool)
    count = 0
    while count < n_samples:
        env.reset(seed=int(rng.integers(2**63)))
        colors = draw_colors(appearance, rng)
        done = False
        taken = 0
        while not done and count < n_samples and taken < max_per_episode:
            lab = labels_from_state(env, dead_zone_pos, dead_zone_ang)
            if lab is not None:
                for v, cam in enumerate(cams):
                    images[count, v] = render(
                        env, cam, colors, rng, appearance.pixel_noise
                        if appearance.randomize else 0.0,
                    )
                labels[count] = lab.to_array()
                count += 1
                taken += 1
            a = rng.uniform(-1.0, 1.0, env.stage.action_dim)
            a[:2] *= env.cfg.dxy_max
            a[2] *= env.cfg.dtheta_max
            if env.stage.action_dim == 5:
                a[3] *= env.cfg.dz_max
                a[4] = rng.uniform(0, 1)
            _, _, done, _ = env.step(a)
    return Dataset(images=images, labels=labels)


# ---------------------------------------------------------------------------
# encoder network
# ---------------------------------------------------------------------------

class EncoderNet:
    """Shared convolutional trunk per view, tanh embeddings concatenated into
    the policy feature vector, and a three-layer sign-prediction head."""

    kind = "encoder"

    def __init__(self, image_hw=(64, 64), feature_dim: int = 128,
                 conv_channels=(8, 16, 32), single_view: bool = False,
                 rng=None):
        self.image_hw = tuple(image_hw)
        self.feature_dim = int(feature_dim)
        self.conv_channels = tuple(conv_channels)
        self.single_view = bool(single_view)
        c0 = 3
        trunk = []
        for c in conv_channels:
            trunk.append(nn.Conv2d(c0, c, k=3, stride=2, pad=1, rng=rng))
            trunk.append(nn.ReLU())
            c0 = c
        trunk.append(nn.GlobalAvgPool())
        self.trunk = nn.Network(trunk)
        embed_dim = feature_dim if single_view else feature_dim // 2
        self.embed = nn.Network([nn.Dense(c0, embed_dim, rng=rng), nn.Tanh()])
        self.head = nn.Network(
            [
                nn.Dense(feature_dim, 64, rng=rng), nn.ReLU(),
                nn.Dense(64, 32, rng=rng), nn.ReLU(),
                nn.Dense(32, 3, rng=rng),
            ]
        )

    # -- functional passes (trunk weights shared across views) -----------

    def _view_forward(self, img):
        caches = []
        x = img
        for layer in self.trunk.layers:
            x, c = layer.forward(x)
            caches.append(c)
        for layer in self.embed.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def _view_backward(self, caches, dy, grads, prefix_scale=1.0):
        n_trunk = len(self.trunk.layers)
        layers = self.trunk.layers + self.embed.layers
        for i in range(len(layers) - 1, -1, -1):
            dy, g = layers[i].backward(caches[i], dy)
            for name, val in g.items():
                key = (
                    f"trunk.{i}.{name}" if i < n_trunk
                    else f"embed.{i - n_trunk}.{name}"
                )
                if key in grads:
                    grads[key] = grads[key] + val * prefix_scale
                else:
                    grads[key] = val * prefix_scale
        return dy

    def features(self, img_a, img_b=None, keep_caches: bool = False):
        if img_a.shape[-2:] != self.image_hw:
            raise ConfigError(
                f"encoder trained at {self.image_hw}, got {img_a.shape[-2:]}"
            )
        fa, ca = self._view_forward(img_a)
        if self.single_view:
            self._train_cache = (ca, None, [fa.shape[1]])
            return fa
        fb, cb = self._view_forward(img_b)
        feat, sizes = nn.concat_forward([fa, fb])
        self._train_cache = (ca, cb, sizes)
        return feat

    def logits(self, feats):
        return self.head.forward(feats)

    def backward_from_logits(self, dlogits):
        grads = {}
        head_grads, dfeat = self.head.backward(dlogits)
        for name, val in head_grads.items():
            grads[f"head.{name}"] = val
        ca, cb, sizes = self._train_cache
        if self.single_view:
            self._view_backward(ca, dfeat, grads)
        else:
            da, db = nn.concat_backward(sizes, dfeat)
            self._view_backward(ca, da, grads)
            self._view_backward(cb, db, grads)
        return grads

    # -- container protocol ----------------------------------------------

    def params(self) -> dict:
        out = {}
        for name, p in self.trunk.params().items():
            out[f"trunk.{name}"] = p
        for name, p in self.embed.params().items():
            out[f"embed.{name}"] = p
        for name, p in self.head.params().items():
            out[f"head.{name}"] = p
        return out

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "image_hw": list(self.image_hw),
            "feature_dim": self.feature_dim,
            "conv_channels": list(self.conv_channels),
            "single_view": self.single_view,
        }

    def fingerprint(self) -> str:
        return nn.topology_fingerprint(self.spec())


nn.register_network_kind(
    "encoder",
    lambda spec: EncoderNet(
        image_hw=tuple(spec["image_hw"]), feature_dim=spec["feature_dim"],
        conv_channels=tuple(spec["conv_channels"]),
        single_view=spec["single_view"],
    ),
)


def encode(net: EncoderNet, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
    """Deterministic 1-sample feature extraction (fusion activations)."""
    fa = img_a[None] if img_a.ndim == 3 else img_a
    fb = img_b[None] if img_b.ndim == 3 else img_b
    return net.features(fa, fb)[0]


def _bce_with_logits(logits, y):
    """Stable binary cross-entropy; returns (loss sum f64, dlogits)."""
    z = logits.astype(np.float64)
    loss = np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    dl = 1.0 / (1.0 + np.exp(-z)) - y
    return loss, dl.astype(np.float32)


def head_accuracy(net: EncoderNet, images, labels, batch: int = 256) -> np.ndarray:
    """Per-head sign accuracy over a labeled image set."""
    correct = np.zeros(3)
    n = len(labels)
    for k in range(0, n, batch):
        sl = slice(k, min(k + batch, n))
        imgs = np.asarray(images[sl], dtype=np.float32)
        feats = net.features(imgs[:, 0], None if net.single_view else imgs[:, 1])
        pred = net.logits(feats) > 0
        correct += np.sum(pred == labels[sl], axis=0)
    return correct / n


def train_encoder(dataset: Dataset, epochs: int = 10, batch_size: int = 64,
                  lr: float = 0.001, seed: int = 0, val_frac: float = 0.1,
                  net: EncoderNet | None = None, log=None):
    """Minimize summed BCE of the three sign heads; reports held-out accuracy."""
    if dataset.n == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng(seed)
    if net is None:
        h, w = dataset.images.shape[-2:]
        net = EncoderNet(image_hw=(h, w), rng=rng)
    n_val = max(int(dataset.n * val_frac), 1)
    order = rng.permutation(dataset.n)
    train_idx, val_idx = order[:-n_val], order[-n_val:]
    opt = nn.Adam(lr=lr)
    params = net.params()
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(train_idx))
        total = 0.0
        for k in range(0, len(perm), batch_size):
            idx = np.sort(train_idx[perm[k : k + batch_size]])
            imgs = np.asarray(dataset.images[idx], dtype=np.float32)
            y = dataset.labels[idx].astype(np.float64)
            feats = net.features(imgs[:, 0], None if net.single_view else imgs[:, 1])
            logits = net.logits(feats)
            loss, dl = _bce_with_logits(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"encoder loss NaN at epoch {epoch}")
            total += loss
            grads = net.backward_from_logits(dl / len(idx))
            opt.step(params, grads)
        acc = head_accuracy(net, dataset.images[np.sort(val_idx)],
                            dataset.labels[np.sort(val_idx)])
        history.append(
            {"epoch": epoch, "loss": total / max(len(train_idx), 1),
             "val_acc": acc.tolist()}
        )
        if log:
            log(history[-1])
    metrics = {
        "val_acc": history[-1]["val_acc"] if history else [0.5, 0.5, 0.5],
        "history": history,
    }
    return net, metrics


def make_feature_fn(net: EncoderNet, cams=None,
                    appearance: AppearanceParams | None = None):
    """Feature extractor for the environment: renders both views on demand
    and returns the fusion feature.  Episode-constant colors are redrawn
    whenever a fresh episode is detected."""
    cams = cams or camera_pair(width=net.image_hw[1], height=net.image_hw[0])
    appearance = appearance or AppearanceParams()
    state = {"episode": None, "colors": DEFAULT_COLORS}

    def fn(env):
        if state["episode"] != env._episode_idx:
            state["episode"] = env._episode_idx
            state["colors"] = draw_colors(appearance, env._rng)
        noise = appearance.pixel_noise if appearance.randomize else 0.0
        img_a = render(env, cams[0], state["colors"], env._rng, noise)
        img_b = render(env, cams[1], state["colors"], env._rng, noise)
        if net.single_view:
            return net.features(img_a[None])[0]
        return encode(net, img_a, img_b)

    return fn
