"""Small fully-connected prediction network with hand-rolled gradients.

Three silu hidden layers of configurable width.  Timestep and guidance
scale enter through Fourier features with log-spaced frequencies; each
embedding has its own learned projection into the first hidden layer and
the guidance projection starts at exactly zero, so a freshly conditioned
net computes the same function as its unconditioned source.  Class
conditioning is a learned per-class vector added alongside, with a
dedicated row for the null condition.

All parameters live in one flat float64 vector ``theta``; forward caches
activations so ``net_grad`` can run reverse accumulation without any
autograd framework.  Everything is float64: the solver-order and
gradient checks need the headroom.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

FREQ_RANGE = (1.0, 1000.0)


class StaleCacheError(RuntimeError):
    """Raised when a gradient is requested against outdated activations."""


def fourier_embed(value, embed_dim, base_freqs):
    """Concatenated sin/cos features; norm is sqrt(embed_dim/2) for any input."""
    embed_dim = int(embed_dim)
    if embed_dim % 2 != 0:
        raise ValueError(f"embed_dim must be even, got {embed_dim}")
    base_freqs = np.asarray(base_freqs, dtype=np.float64)
    if base_freqs.shape != (embed_dim // 2,):
        raise ValueError(f"need embed_dim/2 = {embed_dim // 2} frequencies, got {base_freqs.shape}")
    phase = np.multiply.outer(np.asarray(value, dtype=np.float64), base_freqs)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def default_freqs(embed_dim):
    return np.geomspace(FREQ_RANGE[0], FREQ_RANGE[1], embed_dim // 2)


@dataclass
class NetCache:
    """Activations from one forward pass, consumed by net_grad."""

    z: np.ndarray
    phit: np.ndarray
    phiw: np.ndarray
    cidx: np.ndarray
    pre1: np.ndarray
    a1: np.ndarray
    pre2: np.ndarray
    a2: np.ndarray
    pre3: np.ndarray
    a3: np.ndarray
    theta: np.ndarray
    version: int


class Denoiser:
    """Trainable epsilon/x/v prediction net over a flat parameter vector."""

    def __init__(self, d_in, width=128, embed_dim=16, n_classes=0,
                 omega_conditioned=False, prediction_kind="epsilon", seed=0):
        if embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")
        if prediction_kind not in ("epsilon", "x", "v"):
            raise ValueError(f"unknown prediction kind {prediction_kind!r}")
        self.d_in = int(d_in)
        self.d_out = int(d_in)
        self.width = int(width)
        self.embed_dim = int(embed_dim)
        self.n_classes = int(n_classes)
        self.omega_conditioned = bool(omega_conditioned)
        self.prediction_kind = prediction_kind
        self.layer_sizes = [self.d_in, self.width, self.width, self.width, self.d_out]
        self.base_freqs = default_freqs(self.embed_dim)
        self._version = 0

        w, e, d = self.width, self.embed_dim, self.d_in
        blocks = [
            ("w1", (w, d)), ("b1", (w,)),
            ("p_t", (w, e)),
            ("emb_c", (self.n_classes + 1, w)),
            ("w2", (w, w)), ("b2", (w,)),
            ("w3", (w, w)), ("b3", (w,)),
            ("w4", (self.d_out, w)), ("b4", (self.d_out,)),
        ]
        if self.omega_conditioned:
            blocks.append(("p_w", (w, e)))
        self._slices = {}
        off = 0
        for name, shape in blocks:
            size = int(np.prod(shape))
            self._slices[name] = (slice(off, off + size), shape)
            off += size
        self.theta = np.zeros(off)
        self._init_params(seed)
        # shared zero projection so unconditioned nets reuse one kernel signature
        self._zero_pw = np.zeros((w, e))

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        scales = {
            "w1": self.d_in, "w2": self.width, "w3": self.width, "w4": self.width,
            "p_t": self.embed_dim,
        }
        for name, fan in scales.items():
            v = self.view(name)
            v[...] = rng.standard_normal(v.shape) / np.sqrt(fan)
        self.view("emb_c")[...] = 0.1 * rng.standard_normal(self.view("emb_c").shape)
        # p_w (when present) and biases stay exactly zero

    def view(self, name, theta=None):
        sl, shape = self._slices[name]
        base = self.theta if theta is None else theta
        return base[sl].reshape(shape)

    @property
    def n_params(self):
        return self.theta.size

    def bump_version(self):
        self._version += 1

    def apply_delta(self, delta):
        """In-place parameter update; invalidates existing forward caches."""
        self.theta += delta
        self.bump_version()

    def _class_rows(self, c, batch):
        null_row = self.n_classes
        if c is None:
            return np.full(batch, null_row, dtype=np.int64)
        cidx = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,)).copy()
        cidx[cidx < 0] = null_row
        if np.any(cidx > self.n_classes):
            raise ValueError("class id outside the embedding table")
        return cidx

    def _embed_inputs(self, z, t, omega, c):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.shape[1] != self.d_in:
            raise ValueError(f"input dimension {zb.shape[1]} != {self.d_in}")
        batch = zb.shape[0]
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        phit = fourier_embed(tb, self.embed_dim, self.base_freqs)
        if self.omega_conditioned:
            if omega is None:
                raise ValueError("omega-conditioned net called without omega")
            ob = np.broadcast_to(np.asarray(omega, dtype=np.float64), (batch,))
            phiw = fourier_embed(ob, self.embed_dim, self.base_freqs)
        else:
            if omega is not None:
                raise ValueError("unconditioned net called with omega")
            phiw = np.zeros((batch, self.embed_dim))
        cidx = self._class_rows(c, batch)
        return zb, phit, phiw, cidx, single

    def forward(self, z, t, omega=None, c=None, theta=None, want_cache=False):
        """Evaluate the net; pure in (theta, inputs).

        ``theta`` overrides the live parameters (used for EMA targets).
        With ``want_cache`` the activations are returned for net_grad.
        """
        zb, phit, phiw, cidx, single = self._embed_inputs(z, t, omega, c)
        th = self.theta if theta is None else theta
        pw = self.view("p_w", th) if self.omega_conditioned else self._zero_pw
        pre1, a1, pre2, a2, pre3, a3, out = kernels.mlp_forward(
            zb, phit, phiw, cidx,
            self.view("w1", th), self.view("b1", th), self.view("p_t", th), pw,
            self.view("emb_c", th),
            self.view("w2", th), self.view("b2", th),
            self.view("w3", th), self.view("b3", th),
            self.view("w4", th), self.view("b4", th),
        )
        result = out[0] if single else out
        if not want_cache:
            return result
        cache = NetCache(zb, phit, phiw, cidx, pre1, a1, pre2, a2, pre3, a3,
                         th, self._version)
        return result, cache

    def omega_projection(self, omega_embed, theta=None):
        """The guidance-conditioning projection; all-zero on a fresh net."""
        if not self.omega_conditioned:
            raise ValueError("net has no omega pathway")
        th = self.theta if theta is None else theta
        return self.view("p_w", th) @ np.asarray(omega_embed, dtype=np.float64)


def net_grad(den, loss_grad_at_output, cache):
    """dL/dtheta by reverse accumulation through the cached forward pass."""
    if cache.version != den._version:
        raise StaleCacheError("parameters changed since the cached forward pass")
    g = np.asarray(loss_grad_at_output, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    th = cache.theta
    parts = kernels.mlp_backward(
        g, cache.z, cache.phit, cache.phiw, cache.cidx,
        den.view("w2", th), den.view("w3", th), den.view("w4", th),
        cache.pre1, cache.a1, cache.pre2, cache.a2, cache.pre3, cache.a3,
        den.n_classes + 1,
    )
    names = ["w1", "b1", "p_t", "p_w", "emb_c", "w2", "b2", "w3", "b3", "w4", "b4"]
    flat = np.zeros(den.n_params)
    for name, part in zip(names, parts):
        if name == "p_w" and not den.omega_conditioned:
            continue
        sl, _ = den._slices[name]
        flat[sl] = part.ravel()
    return flat


@dataclass
class EmaPair:
    """Online parameters and their exponential-moving-average target.

    The target only ever changes through ema_update; no gradient path
    touches it.
    """

    theta_online: np.ndarray
    theta_target: np.ndarray
    mu: float = 0.999943

    def __post_init__(self):
        if self.theta_online.shape != self.theta_target.shape:
            raise ValueError("online/target parameter vectors differ in length")


def make_ema(den, mu=0.999943):
    return EmaPair(theta_online=den.theta, theta_target=den.theta.copy(), mu=mu)


def ema_update(pair, mu=None):
    """theta_target <- mu * theta_target + (1 - mu) * theta_online, in place."""
    mu = pair.mu if mu is None else float(mu)
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {mu}")
    pair.theta_target *= mu
    pair.theta_target += (1.0 - mu) * pair.theta_online
    return pair
