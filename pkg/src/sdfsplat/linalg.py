"""Quaternions and small fixed-size linear algebra helpers.

The `*_from_components` functions are generic over tape variables and
ndarrays so the same rotation code drives both the differentiable training
path (batched over primitives) and plain numpy inference.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class InvalidInputError(ValueError):
    """Raised for inputs outside an operation's domain (e.g. zero quaternion)."""


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidInputError("quaternion has zero or non-finite norm")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrix of a quaternion (w, x, y, z); normalizes internally.

    The result is orthonormal with determinant +1 (up to double-precision
    rounding, tested at 1e-9).
    """
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmats_from_quat_components(w, x, y, z):
    """Batched quaternion -> rotation matrices, shape (N, 3, 3).

    Accepts tape variables or ndarrays of shape (N,). Normalization is part
    of the expression, so optimizers may step in raw 4-vector space.
    """
    inv = ad.div(1.0, ad.safe_sqrt(ad.square(w) + ad.square(x) + ad.square(y) + ad.square(z)))
    w, x, y, z = ad.mul(w, inv), ad.mul(x, inv), ad.mul(y, inv), ad.mul(z, inv)
    two = 2.0
    r00 = 1.0 - two * (ad.square(y) + ad.square(z))
    r01 = two * (ad.mul(x, y) - ad.mul(w, z))
    r02 = two * (ad.mul(x, z) + ad.mul(w, y))
    r10 = two * (ad.mul(x, y) + ad.mul(w, z))
    r11 = 1.0 - two * (ad.square(x) + ad.square(z))
    r12 = two * (ad.mul(y, z) - ad.mul(w, x))
    r20 = two * (ad.mul(x, z) - ad.mul(w, y))
    r21 = two * (ad.mul(y, z) + ad.mul(w, x))
    r22 = 1.0 - two * (ad.square(x) + ad.square(y))
    rows = [
        ad.stack([r00, r01, r02], axis=-1),
        ad.stack([r10, r11, r12], axis=-1),
        ad.stack([r20, r21, r22], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def random_unit_quaternion(rng):
    q = rng.normal(size=4)
    return quat_normalize(q)
