"""N-MNIST-format stand-in data from saccaded digit images.

Real N-MNIST recordings come from an event camera sweeping three saccades
over MNIST digits.  This module emulates that: 8x8 digit bitmaps from
scikit-learn are upsampled to 28x28, placed on a 34x34 sensor and moved
along a triangular path.  A per-pixel log-intensity change detector emits
events.  Output files use the N-MNIST binary layout, so the real loader and
codec read them unchanged.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .event_io import NMNIST_HEIGHT, NMNIST_WIDTH, EventStream, encode_nmnist

SACCADE_MS = 100
# triangle vertices in pixels (dx, dy); the path returns to the start
_VERTICES = np.array([[0.0, 0.0], [3.5, 3.5], [-3.5, 3.5], [0.0, 0.0]])


def _digit_images():
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = np.clip(ndimage.zoom(digits.images / 16.0, (1, 3.5, 3.5), order=3), 0.0, 1.0)
    return imgs, digits.target


def saccade_events(image: np.ndarray, seed: int, contrast: float = 0.5, contrast_jitter: float = 0.05,
                   noise_rate_hz: float = 0.5, label=None) -> EventStream:
    """Events produced by sweeping ``image`` (28x28, values in [0, 1]) over three saccades."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    canvas = np.zeros((NMNIST_HEIGHT, NMNIST_WIDTH))
    canvas[3:31, 3:31] = image
    thresh = np.clip(rng.normal(contrast, contrast_jitter, canvas.shape), 0.05, None)

    def log_frame(dx, dy):
        return np.log(0.05 + ndimage.shift(canvas, (dy, dx), order=1, mode="constant"))

    ref = log_frame(0.0, 0.0)
    xs, ys, ts, ps = [], [], [], []
    total_ms = SACCADE_MS * (len(_VERTICES) - 1)
    for ms in range(1, total_ms + 1):
        leg, frac = divmod(ms / SACCADE_MS, 1.0)
        leg = min(int(leg), len(_VERTICES) - 2)
        if ms == total_ms:
            frac = 1.0
        dx, dy = _VERTICES[leg] + frac * (_VERTICES[leg + 1] - _VERTICES[leg])
        diff = log_frame(dx, dy) - ref
        n = np.floor(np.abs(diff) / thresh).astype(np.int64)
        yy, xx = np.nonzero(n)
        if yy.size:
            k = n[yy, xx]
            up = diff[yy, xx] > 0
            xs.append(np.repeat(xx, k))
            ys.append(np.repeat(yy, k))
            ps.append(np.repeat(up.astype(np.int64), k))
            ts.append((ms - 1) * 1000 + rng.integers(0, 1000, size=int(k.sum())))
            ref[yy, xx] += np.where(up, 1.0, -1.0) * k * thresh[yy, xx]

    n_noise = rng.poisson(noise_rate_hz * canvas.size * total_ms / 1000)
    xs.append(rng.integers(0, NMNIST_WIDTH, n_noise))
    ys.append(rng.integers(0, NMNIST_HEIGHT, n_noise))
    ts.append(rng.integers(0, total_ms * 1000, n_noise))
    ps.append(rng.integers(0, 2, n_noise))

    x, y, t, p = (np.concatenate(v).astype(np.int64) for v in (xs, ys, ts, ps))
    order = np.argsort(t, kind="stable")
    return EventStream(x[order], y[order], t[order], p[order], NMNIST_WIDTH, NMNIST_HEIGHT,
                       int(t.max()) if t.size else 0, label)


def write_standin_dataset(root, train_per_class: int = 100, test_per_class: int = 20, seed: int = 0) -> Path:
    """Write ``root/Train/<label>/*.bin`` and ``root/Test/<label>/*.bin``.

    Train and test draw from disjoint digit images.
    """
    imgs, labels = _digit_images()
    rng = np.random.default_rng(seed)
    root = Path(root)
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        idx = idx[rng.permutation(len(idx))]
        need = train_per_class + test_per_class
        if len(idx) < need:
            raise ValueError(f"digit {digit} has only {len(idx)} images, {need} requested")
        for split, chosen in (("Train", idx[:train_per_class]), ("Test", idx[train_per_class:need])):
            out_dir = root / split / str(digit)
            out_dir.mkdir(parents=True, exist_ok=True)
            for i, img_idx in enumerate(chosen):
                stream = saccade_events(imgs[img_idx], seed=seed * 100003 + int(img_idx))
                (out_dir / f"{i:05d}.bin").write_bytes(encode_nmnist(stream))
    return root
