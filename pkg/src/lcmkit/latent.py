"""Toy latent codecs: identity for low-dim data, linear for vector images.

The linear codec projects onto the leading principal directions of the
training set's (uncentered) second moment and rescales each latent
coordinate to unit RMS, so downstream noise-schedule assumptions about
data scale hold.  Both encode and decode are strictly linear maps and
decode(encode(x)) is the orthogonal projection onto the retained
subspace.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatentCodec:
    kind: str  # "identity" | "linear"
    d_data: int
    d_latent: int
    encode_matrix: np.ndarray = None  # (d_latent, d_data)
    decode_matrix: np.ndarray = None  # (d_data, d_latent)


def identity_codec(dim):
    return LatentCodec(kind="identity", d_data=int(dim), d_latent=int(dim))


def fit_linear_codec(data, d_latent, rank_tol=1e-10):
    """Least-squares rank-d codec from the top principal directions."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("training data must be a (samples, dim) matrix")
    d_latent = int(d_latent)
    d_data = data.shape[1]
    if not 1 <= d_latent <= d_data:
        raise ValueError(f"latent dim {d_latent} outside [1, {d_data}]")
    _, sv, vt = np.linalg.svd(data, full_matrices=False)
    if sv.shape[0] < d_latent or sv[d_latent - 1] <= rank_tol * max(sv[0], 1.0):
        raise ValueError(
            f"training data rank-deficient: needs {d_latent} strong directions"
        )
    basis = vt[:d_latent]  # (d_latent, d_data), orthonormal rows
    rms = sv[:d_latent] / np.sqrt(data.shape[0])  # per-latent RMS before whitening
    return LatentCodec(
        kind="linear",
        d_data=d_data,
        d_latent=d_latent,
        encode_matrix=basis / rms[:, None],
        decode_matrix=basis.T * rms[None, :],
    )


def encode(codec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != codec.d_data:
        raise ValueError(f"expected data dim {codec.d_data}, got {x.shape[-1]}")
    if codec.kind == "identity":
        return x.copy()
    return x @ codec.encode_matrix.T


def decode(codec, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != codec.d_latent:
        raise ValueError(f"expected latent dim {codec.d_latent}, got {z.shape[-1]}")
    if codec.kind == "identity":
        return z.copy()
    return z @ codec.decode_matrix.T
