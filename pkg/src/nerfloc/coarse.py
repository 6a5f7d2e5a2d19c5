"""Coarse pose estimation via pose groups and a place classifier.

Training poses are clustered in two sequential rounds: K-Means on camera
translations, then, inside every spatial cluster, K-Means on viewing
directions under the angular metric arccos<a, b> (roll is deliberately
ignored; co-visibility depends on where the camera looks, not how it is
rolled). A group's representative is the member pose nearest the group
centroid under a combined translation + angle distance, and is what
initializes feature matching.

A small convolutional classifier maps a query image straight to a pose
group. It is trained with an additive angular margin loss over unit class
embeddings; at inference the margin is dropped and the confidence is the
softmax over scaled cosine logits.
"""

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .nnops import AdamState, bilinear_matrix, conv2d_backward, conv2d_forward, he_init, relu


@dataclass(frozen=True)
class PoseGroup:
    group_id: int
    member_ids: np.ndarray
    centroid: np.ndarray        # (3,) mean translation
    mean_direction: np.ndarray  # (3,) unit viewing direction
    representative_id: int
    representative: Pose

    def __post_init__(self):
        if len(self.member_ids) == 0:
            raise ValueError("empty pose group")
        n = np.linalg.norm(self.mean_direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("mean direction must be unit length")


def _kmeans_euclidean(points, k, rng, max_rounds=100):
    """Lloyd with farthest-point seeding; duplicate points collapse the
    effective cluster count. Returns (assignment, centers)."""
    n = len(points)
    uniq = np.unique(points, axis=0)
    k_eff = min(k, len(uniq))
    seeds = [int(rng.integers(len(uniq)))]
    d_min = np.linalg.norm(uniq - uniq[seeds[0]], axis=1)
    while len(seeds) < k_eff:
        nxt = int(np.argmax(d_min))
        seeds.append(nxt)
        d_min = np.minimum(d_min, np.linalg.norm(uniq - uniq[nxt], axis=1))
    centers = uniq[seeds].astype(np.float64)
    assign = np.full(n, -1)
    for _ in range(max_rounds):
        d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_assign = np.argmin(d, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for b in range(k_eff):
            members = points[assign == b]
            if len(members):
                centers[b] = members.mean(axis=0)
    used = np.unique(assign)
    remap = {int(b): i for i, b in enumerate(used)}
    return np.array([remap[int(b)] for b in assign]), centers[used]


def _kmeans_angular(dirs, k, rng, max_rounds=100):
    """Lloyd on unit vectors with distance arccos<a, b>; centers are
    renormalized member means."""
    n = len(dirs)
    uniq = np.unique(np.round(dirs, 12), axis=0)
    k_eff = min(k, len(uniq))
    seeds = [int(rng.integers(len(uniq)))]
    d_min = np.arccos(np.clip(uniq @ uniq[seeds[0]], -1.0, 1.0))
    while len(seeds) < k_eff:
        nxt = int(np.argmax(d_min))
        seeds.append(nxt)
        d_min = np.minimum(d_min, np.arccos(np.clip(uniq @ uniq[nxt], -1.0, 1.0)))
    centers = uniq[seeds].astype(np.float64)
    assign = np.full(n, -1)
    for _ in range(max_rounds):
        ang = np.arccos(np.clip(dirs @ centers.T, -1.0, 1.0))
        new_assign = np.argmin(ang, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for b in range(k_eff):
            members = dirs[assign == b]
            if len(members):
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 1e-12:
                    centers[b] = mean / norm
    used = np.unique(assign)
    remap = {int(b): i for i, b in enumerate(used)}
    return np.array([remap[int(b)] for b in assign]), centers[used]


def two_stage_cluster(poses, k_spatial: int, k_orient: int, rng_seed: int = 0):
    """Spatial clustering of translations followed by orientation clustering
    of viewing directions inside each spatial cluster. Deterministic given the
    seed; group ids are ordered by (spatial cluster, orientation cluster)."""
    if not poses:
        raise ValueError("no poses to cluster")
    if k_orient < 1:
        raise ValueError("k_orient must be >= 1")
    rng = np.random.default_rng(rng_seed)
    trans = np.stack([p.translation for p in poses])
    dirs = np.stack([p.forward() for p in poses])
    spatial_assign, _ = _kmeans_euclidean(trans, k_spatial, rng)
    scale = max(float(np.max(trans.max(axis=0) - trans.min(axis=0))), 1e-12)

    groups = []
    for s in range(spatial_assign.max() + 1):
        ids = np.flatnonzero(spatial_assign == s)
        orient_assign, _ = _kmeans_angular(dirs[ids], k_orient, rng)
        for o in range(orient_assign.max() + 1):
            member_ids = ids[orient_assign == o]
            centroid = trans[member_ids].mean(axis=0)
            mean_dir = dirs[member_ids].mean(axis=0)
            norm = np.linalg.norm(mean_dir)
            mean_dir = mean_dir / norm if norm > 1e-12 else dirs[member_ids[0]]
            combined = (np.linalg.norm(trans[member_ids] - centroid, axis=1) / scale
                        + np.arccos(np.clip(dirs[member_ids] @ mean_dir, -1.0, 1.0)))
            rep = int(member_ids[np.argmin(combined)])
            groups.append(PoseGroup(
                group_id=len(groups),
                member_ids=member_ids,
                centroid=centroid,
                mean_direction=mean_dir,
                representative_id=rep,
                representative=poses[rep],
            ))
    return groups


def initial_pose(group: PoseGroup) -> Pose:
    """The representative pose used to initialize matching."""
    return group.representative


UNIT_TOL = 1e-3  # loose enough for finite-difference probes in tests


def _check_unit(v, what):
    norms = np.linalg.norm(np.atleast_2d(v), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit-norm")


def arcface_loss(embeddings, feature, label: int, margin: float, scale: float):
    """Additive angular margin loss for one sample.

    loss = -log( e^{s cos(theta_y + m)} / (e^{s cos(theta_y + m)}
                 + sum_{j != y} e^{s cos theta_j}) )

    Returns (loss, grad wrt feature, grad wrt embeddings). Gradients are for
    the unconstrained inputs; callers keep the vectors unit-norm themselves.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    f = np.asarray(feature, dtype=np.float64)
    _check_unit(emb, "embeddings")
    _check_unit(f, "feature")
    loss, d_f, d_emb = _arcface_batched(emb, f[None, :], np.array([label]), margin, scale)
    return float(loss), d_f[0], d_emb


def _arcface_batched(emb, feats, labels, margin, scale):
    """Mean arcface loss over a batch with gradients for features/embeddings."""
    b = len(feats)
    u = feats @ emb.T  # cosines
    u = np.clip(u, -1.0 + 1e-12, 1.0 - 1e-12)
    rows = np.arange(b)
    u_y = u[rows, labels]
    sin_y = np.sqrt(1.0 - u_y * u_y)
    z = scale * u
    z[rows, labels] = scale * (u_y * np.cos(margin) - sin_y * np.sin(margin))
    z_max = z.max(axis=1, keepdims=True)
    e = np.exp(z - z_max)
    p = e / e.sum(axis=1, keepdims=True)
    loss = float(np.mean(-np.log(p[rows, labels])))
    dz = p.copy()
    dz[rows, labels] -= 1.0
    dz /= b
    du = dz * scale
    du[rows, labels] = dz[rows, labels] * scale * (
        np.cos(margin) + u_y * np.sin(margin) / np.maximum(sin_y, 1e-12))
    d_feats = du @ emb
    d_emb = du.T @ feats
    return loss, d_feats, d_emb


@dataclass
class PlacePredictor:
    """Convolutional place classifier with unit-norm class embeddings.

    Four stride-2 conv layers, then a linear projection of the flattened
    spatial map to the embedding dimension (place recognition needs to know
    where things appear in the image, so no global pooling)."""

    arrays: dict
    n_groups: int
    embed_dim: int
    margin: float
    scale: float
    image_size: int
    trained: bool = False
    channels: tuple = (8, 16, 32, 32)


def init_place_predictor(n_groups: int, *, embed_dim: int = 64, margin: float = 0.2,
                         scale: float = 16.0, image_size: int = 64,
                         rng_seed: int = 0) -> PlacePredictor:
    rng = np.random.default_rng(rng_seed)
    channels = (8, 16, 32, 32)
    arrays = {}
    c_in = 3
    for i, c_out in enumerate(channels):
        arrays[f"w{i}"] = he_init(rng, (c_out, c_in, 3, 3), 9 * c_in)
        arrays[f"b{i}"] = np.zeros(c_out)
        c_in = c_out
    side = -(image_size // -16)  # four stride-2 layers, each rounding up
    flat = channels[-1] * side * side
    arrays["w_proj"] = he_init(rng, (embed_dim, flat), flat)
    arrays["b_proj"] = np.zeros(embed_dim)
    emb = rng.normal(size=(n_groups, embed_dim))
    arrays["embeddings"] = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return PlacePredictor(arrays, n_groups, embed_dim, margin, scale, image_size,
                          channels=channels)


def _resize_images(images, size):
    if images.shape[1] == size and images.shape[2] == size:
        return images
    ar = bilinear_matrix(size, images.shape[1])
    ac = bilinear_matrix(size, images.shape[2])
    return np.einsum("ij,njlc,ml->nimc", ar, images, ac, optimize=True)


def _predictor_features(pred: PlacePredictor, images, keep_cache=False):
    """images (n, h, w, 3) -> unit features (n, d)."""
    x = _resize_images(np.asarray(images, dtype=np.float64), pred.image_size)
    x = np.transpose(x, (0, 3, 1, 2))
    caches = []
    h = x
    for i in range(4):
        out, c = conv2d_forward(h, pred.arrays[f"w{i}"], pred.arrays[f"b{i}"], stride=2)
        caches.append((c, out))
        h = relu(out)
    flat = h.reshape(len(h), -1)
    proj = flat @ pred.arrays["w_proj"].T + pred.arrays["b_proj"]
    norms = np.maximum(np.linalg.norm(proj, axis=1, keepdims=True), 1e-12)
    feats = proj / norms
    if keep_cache:
        return feats, (caches, h.shape, flat, proj, norms)
    return feats, None


def _predictor_backward(pred: PlacePredictor, cache, d_feats):
    caches, h_shape, flat, proj, norms = cache
    # Through the normalization: d_proj = (I - f f^T) d_feat / ||proj||.
    feats = proj / norms
    d_proj = (d_feats - feats * np.sum(d_feats * feats, axis=1, keepdims=True)) / norms
    grads = {"w_proj": d_proj.T @ flat, "b_proj": d_proj.sum(axis=0)}
    dh = (d_proj @ pred.arrays["w_proj"]).reshape(h_shape)
    for i in reversed(range(4)):
        conv_cache, out = caches[i]
        d_out = dh * (out > 0.0)
        dh, dw, db = conv2d_backward(d_out, conv_cache)
        grads[f"w{i}"] = dw
        grads[f"b{i}"] = db
    return grads


def train_place_predictor(pred: PlacePredictor, images, labels, *, epochs: int = 120,
                          batch: int = 16, lr: float = 3e-3, seed: int = 0) -> PlacePredictor:
    """Fit the classifier with the angular-margin loss; class embedding rows
    are renormalized to unit length after every update."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    opt = AdamState(pred.arrays)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for lo in range(0, len(order), batch):
            idx = order[lo:lo + batch]
            feats, cache = _predictor_features(pred, images[idx], keep_cache=True)
            _, d_feats, d_emb = _arcface_batched(
                pred.arrays["embeddings"], feats, labels[idx], pred.margin, pred.scale)
            grads = _predictor_backward(pred, cache, d_feats)
            grads["embeddings"] = d_emb
            opt.step(pred.arrays, grads, lr)
            emb = pred.arrays["embeddings"]
            pred.arrays["embeddings"] = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    pred.trained = True
    return pred


def predict_place(pred: PlacePredictor, image):
    """(group id, softmax confidence) for one image; no margin at inference."""
    if not pred.trained:
        raise ValueError("place predictor has not been trained")
    feats, _ = _predictor_features(pred, np.asarray(image)[None])
    logits = pred.scale * (feats[0] @ pred.arrays["embeddings"].T)
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    g = int(np.argmax(p))
    return g, float(p[g])


def save_pose_groups(groups, path):
    payload = [{
        "group_id": g.group_id,
        "member_ids": [int(i) for i in g.member_ids],
        "centroid": g.centroid.tolist(),
        "mean_direction": g.mean_direction.tolist(),
        "representative_id": g.representative_id,
        "representative": g.representative.flat().tolist(),
    } for g in groups]
    with open(path, "w") as f:
        json.dump(payload, f)


def load_pose_groups(path):
    with open(path) as f:
        payload = json.load(f)
    return [PoseGroup(
        group_id=item["group_id"],
        member_ids=np.asarray(item["member_ids"], dtype=np.int64),
        centroid=np.asarray(item["centroid"]),
        mean_direction=np.asarray(item["mean_direction"]),
        representative_id=item["representative_id"],
        representative=Pose.from_flat(item["representative"]),
    ) for item in payload]
