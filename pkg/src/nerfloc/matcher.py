"""Query-image features and dense 2D-3D correspondence search.

Similarity between a query feature and a lifted scene feature is the negative
Euclidean distance; a pair is kept only when each side is the other's best
match (mutual nearest neighbor), which yields a partial matching. For large
grids the similarity matrix is evaluated in row blocks with results identical
to the dense computation.

Query features come from one of two sources:

* oracle mode: the feature map rendered from the field at the image's
  ground-truth pose (a noise-free upper bound used for pipeline testing),
* projector mode: a small trained convolutional encoder-decoder mapping RGB
  (plus normalized pixel-coordinate channels) to the field's feature domain.
  Regressing scene features from an image needs whole-image context (a local
  patch of a repeating texture is ambiguous), so the encoder downsamples to a
  global receptive field and the decoder upsamples back to the matching grid.
"""

from dataclasses import dataclass

import numpy as np

from .nnops import AdamState, bilinear_matrix, conv2d_backward, conv2d_forward, he_init, relu
from .renderer import LiftedCloud, render_map


@dataclass(frozen=True)
class QueryFeatureMap:
    """Per-pixel features for a query image on the matching grid."""

    features: np.ndarray   # (m, d), row-major over the grid
    pixels: np.ndarray     # (m, 2) full-resolution (row, col)
    grid_shape: tuple
    source_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite query features")


@dataclass(frozen=True)
class Correspondences:
    """Mutual 2D-3D matches, sorted by 2D pixel index.

    ``pixels`` is (row, col): integer dtype means grid cell indices (the image
    point is the cell center), float dtype means exact continuous positions.
    """

    pixels: np.ndarray   # (m, 2) (row, col)
    points: np.ndarray   # (m, 3)
    scores: np.ndarray   # (m,) negative Euclidean distances

    def __len__(self):
        return len(self.pixels)

    def pixel_points(self):
        """Continuous image coordinates (u, v) = (x-right, y-down) per match."""
        p = np.asarray(self.pixels)
        if p.dtype.kind in "iu":
            return np.stack([p[:, 1] + 0.5, p[:, 0] + 0.5], axis=1).astype(np.float64)
        return np.stack([p[:, 1], p[:, 0]], axis=1).astype(np.float64)


def mutual_nn_pairs(feat_a, feat_b, block: int = 256):
    """Mutual nearest neighbors under Euclidean distance, ties to lower index.

    Returns (idx_a, idx_b, distance). Blockwise over rows of ``feat_a`` so the
    full matrix is materialized only for small inputs.
    """
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    n_a, n_b = len(feat_a), len(feat_b)
    if n_a == 0 or n_b == 0:
        raise ValueError("empty feature sets")
    nn_ab = np.empty(n_a, dtype=np.int64)
    d_ab = np.empty(n_a)
    best_ba = np.full(n_b, np.inf)
    nn_ba = np.zeros(n_b, dtype=np.int64)
    for lo in range(0, n_a, block):
        hi = min(lo + block, n_a)
        diff = feat_a[lo:hi, None, :] - feat_b[None, :, :]
        d2 = np.einsum("abd,abd->ab", diff, diff)
        rows = np.arange(hi - lo)
        nn_ab[lo:hi] = np.argmin(d2, axis=1)
        d_ab[lo:hi] = d2[rows, nn_ab[lo:hi]]
        col_min = d2.min(axis=0)
        col_arg = np.argmin(d2, axis=0) + lo
        better = col_min < best_ba  # strict: ties stay with the earlier row
        best_ba[better] = col_min[better]
        nn_ba[better] = col_arg[better]
    ia = np.arange(n_a)
    mutual = nn_ba[nn_ab] == ia
    return ia[mutual], nn_ab[mutual], np.sqrt(d_ab[mutual])


def match(query: QueryFeatureMap, cloud: LiftedCloud) -> Correspondences:
    """Mutual-NN matching of query pixels against lifted scene features."""
    if query.features.shape[1] != cloud.features.shape[1]:
        raise ValueError("query and scene feature dimensions differ")
    i2d, i3d, dist = mutual_nn_pairs(query.features, cloud.features)
    return Correspondences(
        pixels=query.pixels[i2d].copy(),
        points=cloud.points[i3d].copy(),
        scores=-dist,
    )


def save_correspondences(corr: Correspondences, path):
    """CSV with columns row, col, x, y, z, score."""
    with open(path, "w") as f:
        f.write("row,col,x,y,z,score\n")
        for p, x, s in zip(corr.pixels, corr.points, corr.scores):
            vals = [p[0].item(), p[1].item(), x[0].item(), x[1].item(),
                    x[2].item(), s.item()]
            f.write(",".join(repr(v) for v in vals) + "\n")


def load_correspondences(path) -> Correspondences:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    pixels = rows[:, :2]
    if np.all(pixels == np.round(pixels)):
        pixels = pixels.astype(np.int64)
    return Correspondences(pixels=pixels, points=rows[:, 2:5], scores=rows[:, 5])


@dataclass
class ProjectorParams:
    """Weights of the RGB-to-feature projector plus its output geometry.

    Targets are regressed in whitened form (per-dimension mean/std computed
    from the training feature maps); inference undoes the whitening."""

    arrays: dict
    out_dim: int
    stride: int            # matching-grid stride in full-resolution pixels
    image_size: int
    channels: tuple
    target_mean: np.ndarray = None
    target_std: np.ndarray = None
    validation_loss: float = np.inf


def init_projector(out_dim: int, stride: int, image_size: int, rng_seed: int = 0,
                   channels=(24, 48, 96)) -> ProjectorParams:
    rng = np.random.default_rng(rng_seed)
    c0, c1, c2 = channels
    widths = [(5, c0), (c0, c1), (c1, c2), (c2, c2),  # encoder, stride 2 each
              (c2 + c2, c1), (c1 + c1, c0), (c0 + c0, 16),  # decoder + skips
              (16 + 5, out_dim)]
    arrays = {}
    for i, (cin, cout) in enumerate(widths):
        arrays[f"w{i}"] = he_init(rng, (cout, cin, 3, 3), 9 * cin)
        arrays[f"b{i}"] = np.zeros(cout)
    return ProjectorParams(arrays, out_dim, stride, image_size, tuple(channels),
                           target_mean=np.zeros(out_dim), target_std=np.ones(out_dim))


def _coord_channels(n, h, w):
    vv, uu = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
                         indexing="ij")
    return np.broadcast_to(np.stack([vv, uu]), (n, 2, h, w)).copy()


def _resize(x, m):
    return np.einsum("ij,nkjl,ml->nkim", m, x, m, optimize=True)


def _resize_back(d, m):
    return np.einsum("ij,nkim,ml->nkjl", m, d, m, optimize=True)


def _projector_forward(proj: ProjectorParams, images, keep_cache=False):
    """images: (n, h, w, 3) -> features (n, d, h/stride, w/stride).

    Four stride-2 convs encode down to a whole-image receptive field; four
    decoder convs with bilinear upsampling and encoder skip connections bring
    the features back to the matching grid (square images assumed). The input
    carries two normalized pixel-coordinate channels alongside RGB.
    """
    x = np.transpose(np.asarray(images, dtype=np.float64), (0, 3, 1, 2))
    n, _, h, w = x.shape
    x = np.concatenate([x, _coord_channels(n, h, w)], axis=1)
    a = proj.arrays
    skips = [x]
    enc_caches = []
    for i in range(4):
        out, c = conv2d_forward(x, a[f"w{i}"], a[f"b{i}"], stride=2)
        enc_caches.append((c, out))
        x = relu(out)
        skips.append(x)
    grid = proj.image_size // proj.stride
    dec_caches = []
    for step in range(4):
        target = grid if step == 3 else min(x.shape[2] * 2, grid)
        up_m = bilinear_matrix(target, x.shape[2])
        up = _resize(x, up_m)
        skip = skips[3 - step]
        skip_m = None
        if skip.shape[2] != target:
            skip_m = bilinear_matrix(target, skip.shape[2])
            skip = _resize(skip, skip_m)
        cat = np.concatenate([up, skip], axis=1)
        out, c = conv2d_forward(cat, a[f"w{4 + step}"], a[f"b{4 + step}"], stride=1)
        dec_caches.append((up_m, skip_m, 3 - step, up.shape[1], c, out))
        x = relu(out) if step < 3 else out  # linear output head
    return x, ((enc_caches, dec_caches) if keep_cache else None)


def _projector_backward(proj: ProjectorParams, cache, d_out):
    enc_caches, dec_caches = cache
    grads = {}
    skip_grads = [None] * 5
    d = d_out
    for step in reversed(range(4)):
        up_m, skip_m, skip_idx, up_channels, c, out = dec_caches[step]
        if step < 3:
            d = d * (out > 0.0)
        d_cat, dw, db = conv2d_backward(d, c)
        grads[f"w{4 + step}"] = dw
        grads[f"b{4 + step}"] = db
        d_skip = d_cat[:, up_channels:]
        if skip_m is not None:
            d_skip = _resize_back(d_skip, skip_m)
        if skip_grads[skip_idx] is None:
            skip_grads[skip_idx] = d_skip
        else:
            skip_grads[skip_idx] = skip_grads[skip_idx] + d_skip
        d = _resize_back(d_cat[:, :up_channels], up_m)
    # d is now the gradient at the deepest encoder activation (skips[4]).
    for i in reversed(range(4)):
        if skip_grads[i + 1] is not None:
            d = d + skip_grads[i + 1]
        c, out = enc_caches[i]
        d = d * (out > 0.0)
        d, dw, db = conv2d_backward(d, c)
        grads[f"w{i}"] = dw
        grads[f"b{i}"] = db
    return grads


def train_projector(images, targets, proj: ProjectorParams, *, epochs: int = 200,
                    batch: int = 8, lr: float = 2e-3, seed: int = 0,
                    holdout_frac: float = 0.2):
    """Regress rendered feature maps from RGB under L2 loss.

    ``targets`` is (n, grid, grid, d) of rendered features at the images'
    ground-truth poses, whitened per dimension before regression (the raw
    dimensions differ in scale by orders of magnitude, which otherwise lets a
    few dominate the loss). A held-out slice provides ``validation_loss``,
    the mean per-entry squared error in the de-whitened feature domain.
    """
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    proj.target_mean = targets.reshape(-1, targets.shape[-1]).mean(axis=0)
    proj.target_std = np.maximum(targets.reshape(-1, targets.shape[-1]).std(axis=0),
                                 1e-6)
    white = (targets - proj.target_mean) / proj.target_std
    white = np.transpose(white, (0, 3, 1, 2))
    n = len(images)
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(holdout_frac * n))) if n > 2 else 0
    perm = rng.permutation(n)
    hold, fit = perm[:n_hold], perm[n_hold:]
    opt = AdamState(proj.arrays)
    for epoch in range(epochs):
        order = rng.permutation(fit)
        for lo in range(0, len(order), batch):
            idx = order[lo:lo + batch]
            pred, cache = _projector_forward(proj, images[idx], keep_cache=True)
            resid = pred - white[idx]
            d_up = 2.0 * resid / resid.size
            grads = _projector_backward(proj, cache, d_up)
            opt.step(proj.arrays, grads, lr)
    check = hold if n_hold else fit
    pred, _ = _projector_forward(proj, images[check])
    scale = proj.target_std[None, :, None, None]
    proj.validation_loss = float(np.mean(((pred - white[check]) * scale) ** 2))
    return proj


def _grid_pixels(image_shape, stride):
    rows = np.arange(0, image_shape[0], stride)
    cols = np.arange(0, image_shape[1], stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_query_features(image, projector, selection, *, mode: str = "projector",
                           field_params=None, pose=None, intrinsics=None,
                           stride: int = 2, n_samples: int = 64,
                           source_id: str = "") -> QueryFeatureMap:
    """Per-pixel query features on the matching grid.

    ``mode='projector'`` runs the trained CNN on the RGB image;
    ``mode='oracle'`` renders the field at the image's ground-truth pose and
    is exact by construction.
    """
    image = np.asarray(image, dtype=np.float64)
    if mode == "oracle":
        if field_params is None or pose is None or intrinsics is None:
            raise ValueError("oracle mode needs field_params, pose, and intrinsics")
        rendered = render_map(field_params, pose, intrinsics, stride=stride,
                              selection=selection, n_samples=n_samples,
                              compute_color=False)
        return QueryFeatureMap(features=rendered.features, pixels=rendered.pixels,
                               grid_shape=rendered.grid_shape, source_id=source_id)
    if mode == "projector":
        if projector is None:
            raise ValueError("projector mode needs trained projector parameters")
        n_sel = len(selection.indices) if selection is not None else projector.out_dim
        if projector.out_dim != n_sel:
            raise ValueError("projector output does not match the selection mask")
        if image.shape[0] != projector.image_size:
            raise ValueError("image resolution differs from the training resolution")
        out, _ = _projector_forward(projector, image[None])
        grid = out.shape[2]
        feats = np.transpose(out[0], (1, 2, 0)).reshape(grid * grid, -1)
        feats = feats * projector.target_std + projector.target_mean
        pixels = _grid_pixels(image.shape[:2], projector.stride)
        return QueryFeatureMap(features=feats, pixels=pixels,
                               grid_shape=(grid, grid), source_id=source_id)
    raise ValueError(f"unknown mode '{mode}'")
