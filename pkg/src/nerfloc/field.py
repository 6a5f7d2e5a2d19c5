"""The small trainable radiance field.

Architecture (all float64, gradients written by hand):

* frequency positional encoding of the normalized position (coordinate-major
  sin/cos ladder, 6 * l_pos dims); the leading ``d_pos`` entries double as the
  positional half of the matching feature,
* a ReLU trunk of ``trunk_depth`` layers x ``trunk_width`` units,
* a linear bottleneck of ``d_mlp`` units whose output is both the MLP half of
  the matching feature and the input to the two heads,
* density head: softplus (guarantees sigma >= 0),
* color head: sigmoid over the bottleneck concatenated with the encoded view
  direction (guarantees each channel in [0, 1]; the direction feeds only this
  head, so matching features are view-independent).

With the defaults the matching feature is d_pos + d_mlp = 32 + 15 = 47 wide.
"""

import io
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import CorruptCheckpointError, DivergenceError, SceneBoundsError
from .geometry import clip_to_box, ray_grid, _sample_core
from .nnops import AdamState, exp_decay_lr, he_init, relu, sigmoid, softplus

CHECKPOINT_MAGIC = b"MLNF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    l_pos: int = 6
    d_pos: int = 32
    l_dir: int = 2
    trunk_width: int = 64
    trunk_depth: int = 4
    d_mlp: int = 15

    def __post_init__(self):
        if self.d_pos > 6 * self.l_pos:
            raise ValueError("d_pos cannot exceed the encoding width 6*l_pos")

    @property
    def feature_dim(self):
        return self.d_pos + self.d_mlp


def positional_encode(x, l: int):
    """Coordinate-major frequency ladder: per coordinate c, the 2*l values
    sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(l-1) pi c), cos(2^(l-1) pi c).

    Expects coordinates already normalized to the scene box; values outside
    [-1.5, 1.5] are rejected as a scene-bounds violation. Output width is 6*l
    for 3-vectors.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.any(np.abs(pts) > 1.5):
        raise SceneBoundsError("normalized coordinates outside [-1.5, 1.5]")
    out = _sin_cos_ladder(pts, l)
    return out if np.asarray(x).ndim > 1 else out[0]


def _sin_cos_ladder(pts, l):
    freqs = (2.0 ** np.arange(l)) * np.pi
    ang = pts[:, :, None] * freqs  # (n, 3, l)
    enc = np.empty((pts.shape[0], 3, l, 2))
    np.sin(ang, out=enc[:, :, :, 0])
    np.cos(ang, out=enc[:, :, :, 1])
    return enc.reshape(pts.shape[0], -1)


def _encode_dirs(dirs, l: int):
    # Unit directions are within [-1, 1] componentwise already.
    return _sin_cos_ladder(np.atleast_2d(np.asarray(dirs, dtype=np.float64)), l)


@dataclass
class FieldParams:
    """Parameter arrays plus the scene box they are normalized against."""

    config: FieldConfig
    bounds: np.ndarray           # (2, 3)
    arrays: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    def array_order(self):
        names = []
        for i in range(self.config.trunk_depth):
            names += [f"w{i}", f"b{i}"]
        names += ["w_feat", "b_feat", "w_density", "b_density", "w_color", "b_color"]
        return names

    def validate_finite(self):
        for name in self.array_order():
            if not np.all(np.isfinite(self.arrays[name])):
                raise CorruptCheckpointError(f"non-finite values in parameter '{name}'")

    def copy(self):
        return FieldParams(self.config, self.bounds.copy(),
                           {k: v.copy() for k, v in self.arrays.items()})

    def pack(self):
        return np.concatenate([self.arrays[n].ravel() for n in self.array_order()])

    def unpack(self, vector):
        """Return a copy of self with parameters replaced from a flat vector."""
        out = self.copy()
        offset = 0
        for name in self.array_order():
            size = self.arrays[name].size
            out.arrays[name] = vector[offset:offset + size].reshape(self.arrays[name].shape).copy()
            offset += size
        if offset != len(vector):
            raise ValueError("vector length does not match parameter count")
        return out

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def normalize(self, points):
        center = self.bounds.mean(axis=0)
        half = (self.bounds[1] - self.bounds[0]) / 2.0
        return (np.atleast_2d(points) - center) / half


def init_field(config: FieldConfig, bounds, rng_seed: int = 0) -> FieldParams:
    rng = np.random.default_rng(rng_seed)
    cfg = config
    arrays = {}
    in_dim = 6 * cfg.l_pos
    for i in range(cfg.trunk_depth):
        arrays[f"w{i}"] = he_init(rng, (cfg.trunk_width, in_dim), in_dim)
        arrays[f"b{i}"] = np.zeros(cfg.trunk_width)
        in_dim = cfg.trunk_width
    arrays["w_feat"] = he_init(rng, (cfg.d_mlp, cfg.trunk_width), cfg.trunk_width)
    arrays["b_feat"] = np.zeros(cfg.d_mlp)
    arrays["w_density"] = he_init(rng, (cfg.d_mlp,), cfg.d_mlp)
    arrays["b_density"] = np.zeros(1)
    color_in = cfg.d_mlp + 6 * cfg.l_dir
    arrays["w_color"] = he_init(rng, (3, color_in), color_in)
    arrays["b_color"] = np.zeros(3)
    return FieldParams(config, bounds, arrays)


@dataclass(frozen=True)
class PointEval:
    sigma: float
    color: np.ndarray   # (3,)
    f_pos: np.ndarray   # (d_pos,)
    f_mlp: np.ndarray   # (d_mlp,)

    @property
    def features(self):
        return np.concatenate([self.f_pos, self.f_mlp])


def forward(params: FieldParams, positions, view_dirs, *, need_color=True,
            keep_cache=False, dir_encoding=None):
    """Batched network evaluation.

    Returns a dict with ``sigma`` (n,), ``color`` (n, 3) when requested,
    ``enc`` (the position encoding) and ``bottleneck`` (the d_mlp tap).
    ``keep_cache`` retains the intermediate activations needed by
    :func:`backward`. Callers that evaluate many samples per ray may pass a
    precomputed ``dir_encoding`` instead of per-sample directions.
    """
    cfg = params.config
    a = params.arrays
    xn = params.normalize(positions)
    enc = positional_encode(xn, cfg.l_pos)
    h = enc
    cache_layers = []
    for i in range(cfg.trunk_depth):
        z = h @ a[f"w{i}"].T + a[f"b{i}"]
        if keep_cache:
            cache_layers.append((h, z))
        h = relu(z)
    bott = h @ a["w_feat"].T + a["b_feat"]
    spre = bott @ a["w_density"] + a["b_density"][0]
    sigma = softplus(spre)
    out = {"enc": enc, "bottleneck": bott, "sigma": sigma}
    if need_color:
        denc = dir_encoding if dir_encoding is not None \
            else _encode_dirs(view_dirs, cfg.l_dir)
        cin = np.concatenate([bott, denc], axis=1)
        cpre = cin @ a["w_color"].T + a["b_color"]
        out["color"] = sigmoid(cpre)
        if keep_cache:
            out["_cin"] = cin
            out["_cpre"] = cpre
    if keep_cache:
        out["_layers"] = cache_layers
        out["_h_last"] = h
        out["_spre"] = spre
    return out


def backward(params: FieldParams, cache, d_sigma, d_color=None):
    """Gradients of a scalar loss w.r.t. every parameter.

    ``cache`` is the dict from :func:`forward` with ``keep_cache=True``;
    ``d_sigma`` (n,) and ``d_color`` (n, 3) are the upstream gradients.
    """
    cfg = params.config
    a = params.arrays
    grads = {}
    d_bott = np.zeros_like(cache["bottleneck"])
    if d_color is not None:
        col = cache["color"]
        d_cpre = d_color * col * (1.0 - col)
        grads["w_color"] = d_cpre.T @ cache["_cin"]
        grads["b_color"] = d_cpre.sum(axis=0)
        d_cin = d_cpre @ a["w_color"]
        d_bott += d_cin[:, :cfg.d_mlp]
    else:
        grads["w_color"] = np.zeros_like(a["w_color"])
        grads["b_color"] = np.zeros_like(a["b_color"])
    d_spre = d_sigma * sigmoid(cache["_spre"])
    grads["w_density"] = cache["bottleneck"].T @ d_spre
    grads["b_density"] = np.array([d_spre.sum()])
    d_bott += np.outer(d_spre, a["w_density"])
    grads["w_feat"] = d_bott.T @ cache["_h_last"]
    grads["b_feat"] = d_bott.sum(axis=0)
    dh = d_bott @ a["w_feat"]
    for i in reversed(range(cfg.trunk_depth)):
        h_in, z = cache["_layers"][i]
        dz = dh * (z > 0.0)
        grads[f"w{i}"] = dz.T @ h_in
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ a[f"w{i}"]
    return grads


def eval_point(params: FieldParams, x, view_dir) -> PointEval:
    """Evaluate density, color, and the two feature taps at a single point."""
    d = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    params.validate_finite()
    out = forward(params, np.asarray(x, dtype=np.float64)[None, :], d[None, :])
    return PointEval(
        sigma=float(out["sigma"][0]),
        color=out["color"][0],
        f_pos=out["enc"][0, :params.config.d_pos].copy(),
        f_mlp=out["bottleneck"][0].copy(),
    )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_rays: int = 1024
    n_samples: int = 40
    lr_init: float = 1e-2
    lr_final: float = 1e-4
    # Brief linear ramp up to lr_init before the exponential decay: the full
    # peak rate applied from step 0 can collapse the density field for good.
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0


def _ray_pool(params, images):
    """Flatten posed images into ray origin/direction/range/color arrays,
    keeping only rays that intersect the scene box."""
    origins, dirs, t0s, t1s, colors = [], [], [], [], []
    for img in images:
        o, d, _ = ray_grid(img.pose, img.intrinsics, stride=1)
        t0, t1, hit = clip_to_box(o, d, params.bounds)
        origins.append(o[hit])
        dirs.append(d[hit])
        t0s.append(t0[hit])
        t1s.append(t1[hit])
        colors.append(img.rgb.reshape(-1, 3)[hit])
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(t0s), np.concatenate(t1s), np.concatenate(colors))


def _batch_loss_and_grads(params, origins, dirs, t0, t1, gt, n_samples, rng):
    """Color loss on one ray batch plus parameter gradients.

    Loss is the mean over rays of the squared color error summed over
    channels. Differentiates through the quadrature weights and the network.
    """
    from . import renderer  # local import: renderer depends on field for eval

    batch = _sample_core(origins, dirs, t0, t1, n_samples, rng)
    denc = np.repeat(_encode_dirs(dirs, params.config.l_dir), n_samples, axis=0)
    cache = forward(params, batch.positions, None, keep_cache=True, dir_encoding=denc)
    n_rays = len(origins)
    sigma = cache["sigma"].reshape(n_rays, n_samples)
    colors = cache["color"].reshape(n_rays, n_samples, 3)
    delta = (batch.t_end - batch.t_start).reshape(n_rays, n_samples)
    weights, _ = renderer.quadrature_weights(sigma, delta)
    rendered = np.einsum("rn,rnc->rc", weights, colors)
    resid = rendered - gt
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    d_rendered = 2.0 * resid / n_rays
    d_sigma, d_colors = renderer.quadrature_backward(sigma, delta, colors, weights, d_rendered)
    grads = backward(params, cache, d_sigma.ravel(), d_colors.reshape(-1, 3))
    return loss, grads


def train(params: FieldParams, images, schedule: TrainConfig):
    """Fit the field to posed images by Adam on the rendered-color loss.

    The learning rate decays exponentially from ``lr_init`` to ``lr_final``.
    Returns (trained params, per-step loss log). A non-finite loss aborts
    with the offending step index.
    """
    params = params.copy()
    pool = _ray_pool(params, images)
    if len(pool[0]) == 0:
        raise ValueError("no training rays intersect the scene bounds")
    opt = AdamState(params.arrays, schedule.beta1, schedule.beta2)
    losses = []
    n_pool = len(pool[0])
    for step in range(schedule.steps):
        rng = np.random.default_rng([schedule.seed, 9176, step])
        idx = rng.integers(0, n_pool, size=min(schedule.batch_rays, n_pool))
        loss, grads = _batch_loss_and_grads(
            params, pool[0][idx], pool[1][idx], pool[2][idx], pool[3][idx],
            pool[4][idx], schedule.n_samples, rng)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        losses.append(loss)
        warmup = int(schedule.warmup_frac * schedule.steps)
        if step < warmup:
            lr = schedule.lr_init * (0.1 + 0.9 * step / warmup)
        else:
            lr = exp_decay_lr(step - warmup, schedule.steps - warmup,
                              schedule.lr_init, schedule.lr_final)
        opt.step(params.arrays, grads, lr)
    params.validate_finite()
    return params, np.asarray(losses)


def save_checkpoint(params: FieldParams, path):
    """Binary checkpoint: magic, version, architecture header, bounds, then the
    parameter arrays as little-endian float64 in declaration order."""
    cfg = params.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<7I", CHECKPOINT_VERSION, cfg.l_pos, cfg.d_pos, cfg.l_dir,
                          cfg.trunk_width, cfg.trunk_depth, cfg.d_mlp))
    buf.write(params.bounds.astype("<f8").tobytes())
    for name in params.array_order():
        buf.write(params.arrays[name].astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> FieldParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    header = struct.unpack_from("<7I", data, 4)
    if header[0] != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported version {header[0]}")
    cfg = FieldConfig(l_pos=header[1], d_pos=header[2], l_dir=header[3],
                      trunk_width=header[4], trunk_depth=header[5], d_mlp=header[6])
    offset = 4 + 28
    bounds = np.frombuffer(data, dtype="<f8", count=6, offset=offset).reshape(2, 3)
    offset += 48
    params = init_field(cfg, bounds, rng_seed=0)
    for name in params.array_order():
        shape = params.arrays[name].shape
        count = params.arrays[name].size
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        params.arrays[name] = arr.copy()
        offset += count * 8
    if offset != len(data):
        raise CorruptCheckpointError("trailing or missing bytes")
    params.validate_finite()
    return params
