"""Language representation vectors from a frozen TDNN."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..nn.tdnn import TdnnModel, _as_batch, forward_logits

POOLING = ("concat", "mean")


def extract_representations(model: TdnnModel, features, pooling: str = "concat", chunk: int = 16) -> np.ndarray:
    """(N, dim) representations for a (N, T, D) feature batch, eval mode.

    ``concat`` flattens the per-frame embeddings in frame order
    (T' * 256 values); ``mean`` averages them over frames.
    """
    if pooling not in POOLING:
        raise ConfigError(f"pooling must be one of {POOLING}")
    x, _ = _as_batch(features, model)
    out = []
    for i in range(0, len(x), chunk):
        _, rep, _ = forward_logits(model, x[i:i + chunk], train=False)
        if pooling == "concat":
            out.append(rep.reshape(rep.shape[0], -1))
        else:
            out.append(rep.mean(axis=1))
    return np.concatenate(out, axis=0)


def extract_representation(model: TdnnModel, features, pooling: str = "concat") -> np.ndarray:
    """Representation vector for a single (T, D) feature matrix."""
    frames = getattr(features, "frames", features)
    return extract_representations(model, np.asarray(frames)[None], pooling)[0]
