"""Random-shift augmentation of observation windows (pad + random crop).

All frames inside one window move by the same offset so the stack stays
temporally coherent; the two windows of a transition get independent
draws. Vector windows pass through unchanged.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)
_warned_vector = False


def _is_image_window(window):
    return np.asarray(window).ndim >= 3


def _note_vector_identity():
    global _warned_vector
    if not _warned_vector:
        logger.info("augmentation on vector observations is the identity")
        _warned_vector = True


def random_shift(window, pad, rng):
    """Shift an image window (d, H, W) by one offset drawn uniformly from
    {-pad..pad}^2, with replicate-edge padding."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    window = np.asarray(window)
    if not _is_image_window(window):
        _note_vector_identity()
        return window
    if pad == 0:
        return window
    d, h, w = window.shape
    padded = np.pad(window, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, oy:oy + h, ox:ox + w]


def augment_pair(window_t, window_t1, pad, rng):
    """Independently augmented (window_t, window_t1)."""
    return random_shift(window_t, pad, rng), random_shift(window_t1, pad, rng)


def random_shift_batch(windows, pad, rng):
    """Per-sample random shifts for a batch (B, d, H, W); identity for
    vector batches (B, d, n)."""
    windows = np.asarray(windows)
    if windows.ndim < 4:
        _note_vector_identity()
        return windows
    if pad == 0:
        return windows
    b, d, h, w = windows.shape
    padded = np.pad(windows, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    out = np.empty_like(windows)
    for i, (oy, ox) in enumerate(offsets):
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return out
