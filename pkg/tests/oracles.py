"""Independent reference computations used by the tests."""
import math

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial import ConvexHull

from addnet.maskgen import ORGAN_GROUPS


def hull_oracle(points, size, tol=1e-9):
    """Per-pixel half-plane test against scipy's hull facets."""
    w, h = size
    hull = ConvexHull(np.asarray(points, dtype=float))
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            if all(eq[0] * c + eq[1] * r + eq[2] <= tol for eq in hull.equations):
                out[r, c] = 1
    return out


def naive_convolve(image, kernel2d):
    """Direct O(N^2 k^2) convolution with symmetric reflection at the borders."""
    h, w = image.shape
    kh, kw = kernel2d.shape
    rh, rw = kh // 2, kw // 2

    def reflect(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - 1 - i
        return i

    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    acc += image[reflect(r + i - rh, h), reflect(c + j - rw, w)] * kernel2d[i, j]
            out[r, c] = acc
    return out


def sampled_gaussian(sigma, radius=None):
    radius = math.ceil(3 * sigma) if radius is None else radius
    x = np.arange(-radius, radius + 1)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def deep_interior(mask, radius):
    """Pixels whose whole (2r+1)^2 window lies inside the image and inside ``mask``."""
    inner = minimum_filter(mask.astype(np.uint8), size=2 * radius + 1, mode="constant", cval=0) == 1
    return inner


def deep_exterior(mask, radius):
    return deep_interior(1 - mask, radius)


def finite_difference_check(net, images, masks, labels, loss_fn, n_coords=40, h=1e-6, seed=0):
    """Compare autograd against central differences on random parameter and mask coordinates.

    Returns the worst relative error seen. Coordinates whose gradient is
    tiny on both sides are compared absolutely.
    """
    import torch

    rng = np.random.default_rng(seed)
    masks = masks.clone().requires_grad_(True)
    net.zero_grad()
    loss_fn(net(images, masks), labels).backward()
    targets = [(p, p.grad.detach().clone()) for p in net.parameters()]
    targets.append((masks, masks.grad.detach().clone()))
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            tensor, grad = targets[rng.integers(len(targets))]
            flat = tensor.view(-1)
            k = int(rng.integers(flat.numel()))
            orig = flat[k].item()
            flat[k] = orig + h
            up = float(loss_fn(net(images, masks), labels))
            flat[k] = orig - h
            down = float(loss_fn(net(images, masks), labels))
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grad.view(-1)[k])
            scale = max(abs(numeric), abs(analytic))
            err = abs(numeric - analytic) / scale if scale > 1e-6 else abs(numeric - analytic)
            worst = max(worst, err)
    return worst


def organ_oracle(lm, size):
    w, h = size
    out = np.zeros((h, w), dtype=np.uint8)
    for idx in ORGAN_GROUPS.values():
        out |= hull_oracle(lm.subset(idx), size)
    return out


def region_expectations(lm, size, sigma):
    radius = math.ceil(3 * sigma)
    face = hull_oracle(lm.points, size)
    organs = organ_oracle(lm, size)
    deep_organ = deep_interior(organs, radius) & deep_interior(face, radius)
    deep_face_only = deep_interior(face, radius) & deep_exterior(organs, radius)
    outside = deep_exterior(face, radius)
    return deep_organ, deep_face_only, outside
