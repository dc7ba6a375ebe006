"""Style statistics: per-channel spatial mean and variance of tapped layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import extract, no_grad
from .errors import ContractError


@dataclass
class SdfVector:
    """Stacked style statistics for a batch.

    ``values`` has shape ``(n, 2 * total_channels)``. ``layer_index`` maps each
    tapped layer to its ``(start, stop)`` column range; within a range the
    first half are channel means and the second half channel variances.
    """

    values: np.ndarray
    layer_index: dict

    def __len__(self):
        return self.values.shape[0]


def channel_moments(h):
    """Per-channel spatial mean and population variance.

    ``h`` is ``(n, c, ...spatial)``; a flat ``(n, d)`` activation counts as one
    channel whose ``d`` units are its spatial positions.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[:, None, :]
    n, c = h.shape[:2]
    flat = h.reshape(n, c, -1)
    if flat.shape[2] < 2:
        raise ContractError(f"tapped activation {h.shape[1:]} has no spatial extent")
    return flat.mean(axis=2), flat.var(axis=2)


def sdf_from_activations(activations):
    cols, index, start = [], {}, 0
    for tap, h in activations:
        mean, var = channel_moments(h)
        block = np.concatenate([mean, var], axis=1)
        index[tap] = (start, start + block.shape[1])
        start += block.shape[1]
        cols.append(block)
    return SdfVector(np.concatenate(cols, axis=1), index)


def compute_sdf(params, arch, x, tap_layers=None, batch_size=512):
    """Style statistics of ``x`` under the current extractor, without a tape."""
    taps = tuple(arch.taps if tap_layers is None else tap_layers)
    if not taps:
        raise ContractError("need at least one tap layer")
    n_layers = len(arch.extractor)
    for t in taps:
        if not 0 <= t < n_layers:
            raise ContractError(f"tap {t} is not an extractor layer (0..{n_layers - 1})")
    x = np.asarray(x, dtype=np.float64)
    chunks = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            _, outs = extract(params, arch, x[lo:lo + batch_size], return_layers=True)
            chunks.append(sdf_from_activations([(t, outs[t].data) for t in taps]))
    return SdfVector(np.concatenate([c.values for c in chunks]), chunks[0].layer_index)
