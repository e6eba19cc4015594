"""Forward measurement operators with exact adjoints, plus noise models.

All convolutions use circular (periodic) boundary handling so adjoints are
exact via the FFT.  Masks multiply elementwise and keep the image shape, so
inpainting runs through shape-preserving operators.  Operators are frozen
after construction and every apply/vjp is a pure function.

Desk-scale defaults are anchored so that a 32x32 task mirrors the usual
256x256 configuration: blur kernels shrink with the image side, mask
fractions and noise levels stay unscaled.
"""

import numpy as np


def _round_odd(v):
    """Nearest integer, bumped up to the next odd value if even."""
    n = int(round(v))
    return n + 1 if n % 2 == 0 else n


# ====== kernels ======

def gaussian_kernel(size, sigma):
    """Normalized size x size Gaussian tap grid (size odd, sigma > 0)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def motion_kernel(length, angle):
    """Deterministic straight-line blur kernel.

    A line of the given pixel length through the grid center at the given
    angle (radians, in [0, pi)), rasterized by bilinear splatting of densely
    spaced points, then normalized to unit sum.
    """
    if length < 1 or length % 2 == 0:
        raise ValueError(f"motion length must be odd and positive, got {length}")
    if not (0 <= angle < np.pi):
        raise ValueError(f"angle must lie in [0, pi), got {angle}")
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    steps = np.linspace(-c, c, 8 * length)
    for s in steps:
        yy = c + s * np.sin(angle)
        xx = c + s * np.cos(angle)
        i0, j0 = int(np.floor(yy)), int(np.floor(xx))
        fy, fx = yy - i0, xx - j0
        for di, dj, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                          (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            ii, jj = i0 + di, j0 + dj
            if 0 <= ii < length and 0 <= jj < length:
                k[ii, jj] += w
    return k / k.sum()


def _spatial(shape):
    """(H, W) of a 2-d or trailing-channel 3-d signal shape."""
    if len(shape) == 2:
        return shape
    if len(shape) == 3:
        return shape[:2]
    raise ValueError(f"operators expect 2-d or 3-d image shapes, got {shape}")


def _freq_response(kernel, hw):
    """rfft2 of the kernel zero-padded to hw with its center tap at (0, 0)."""
    H, W = hw
    kh, kw = kernel.shape
    if kh > H or kw > W:
        raise ValueError(f"kernel {kernel.shape} larger than image {hw}")
    pad = np.zeros((H, W))
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


def _circ_filter(x, kf):
    spec = np.fft.rfft2(x, axes=(0, 1))
    if x.ndim == 3:
        kf = kf[:, :, None]
    return np.fft.irfft2(spec * kf, s=x.shape[:2], axes=(0, 1))


# ====== operator classes ======

class ForwardOperator:
    """Base measurement map with apply, exact vjp, and shape metadata."""

    kind = "abstract"
    linear = True

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def _check_in(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.in_shape:
            raise ValueError(f"{self.kind}: input shape {x.shape} != {self.in_shape}")
        return x

    def _check_out(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != self.out_shape:
            raise ValueError(f"{self.kind}: cotangent shape {v.shape} != {self.out_shape}")
        return v

    def apply(self, x):
        raise NotImplementedError

    def vjp(self, x, v):
        """v^T dA/dx at x; for linear operators this is A^T v, independent of x."""
        raise NotImplementedError


class Identity(ForwardOperator):
    kind = "identity"

    def __init__(self, in_shape):
        super().__init__(in_shape, in_shape)

    def apply(self, x):
        return self._check_in(x)

    def vjp(self, x, v):
        return self._check_out(v)


class _ConvOperator(ForwardOperator):
    """Shared circular-convolution machinery for the blur kinds."""

    def __init__(self, in_shape, kernel):
        super().__init__(in_shape, in_shape)
        self.kernel = kernel
        self._kf = _freq_response(kernel, _spatial(in_shape))

    def apply(self, x):
        return _circ_filter(self._check_in(x), self._kf)

    def vjp(self, x, v):
        return _circ_filter(self._check_out(v), np.conj(self._kf))


class GaussianBlur(_ConvOperator):
    kind = "gaussian_blur"

    def __init__(self, in_shape, ksize, sigma):
        super().__init__(in_shape, gaussian_kernel(ksize, sigma))
        self.ksize, self.sigma = ksize, sigma


class MotionBlur(_ConvOperator):
    kind = "motion_blur"

    def __init__(self, in_shape, length, angle):
        super().__init__(in_shape, motion_kernel(length, angle))
        self.length, self.angle = length, angle


class Downsample4x(ForwardOperator):
    """Anti-aliased bicubic 4x decimation, separable per axis.

    A width-4 box prefilter composed with Catmull-Rom (a = -0.5) resampling
    collapses to the symmetric 7-tap stride-4 stencil
    [-1, 8, 17, 16, 17, 8, -1] / 64 per axis, applied circularly.
    """

    kind = "downsample4x"
    _stencil = np.array([-1.0, 8.0, 17.0, 16.0, 17.0, 8.0, -1.0]) / 64.0

    def __init__(self, in_shape):
        hw = _spatial(in_shape)
        if hw[0] % 4 or hw[1] % 4:
            raise ValueError(f"downsample4x needs sides divisible by 4, got {hw}")
        out_hw = (hw[0] // 4, hw[1] // 4)
        out_shape = out_hw + tuple(in_shape[2:])
        super().__init__(in_shape, out_shape)
        self._rows = self._axis_matrix(hw[0])
        self._cols = self._axis_matrix(hw[1])

    @classmethod
    def _axis_matrix(cls, n):
        m = np.zeros((n // 4, n))
        for j in range(n // 4):
            for off, c in enumerate(cls._stencil):
                m[j, (4 * j - 2 + off) % n] += c
        return m

    def apply(self, x):
        x = self._check_in(x)
        return np.einsum("ih,jw,hw...->ij...", self._rows, self._cols, x)

    def vjp(self, x, v):
        v = self._check_out(v)
        return np.einsum("ih,jw,ij...->hw...", self._rows, self._cols, v)


class _MaskOperator(ForwardOperator):
    """Elementwise binary mask; shape preserving, so inpainting stays in-domain."""

    def __init__(self, in_shape, mask):
        super().__init__(in_shape, in_shape)
        self.mask = mask

    def _broadcast(self, x):
        return self.mask if x.ndim == 2 else self.mask[:, :, None]

    def apply(self, x):
        x = self._check_in(x)
        return x * self._broadcast(x)

    def vjp(self, x, v):
        v = self._check_out(v)
        return v * self._broadcast(v)


class RandomMask(_MaskOperator):
    """Zeroes exactly round(fraction * H * W) pixels, identical in every channel."""

    kind = "random_mask"

    def __init__(self, in_shape, fraction, rng):
        if not (0 <= fraction < 1):
            raise ValueError(f"mask fraction must be in [0, 1), got {fraction}")
        H, W = _spatial(in_shape)
        count = int(round(fraction * H * W))
        mask = np.ones(H * W)
        if count:
            dropped = rng.choice(H * W, size=count, replace=False)
            mask[dropped] = 0.0
        super().__init__(in_shape, mask.reshape(H, W))
        self.fraction = fraction


class BoxMask(_MaskOperator):
    """Zeroes a centered box region (the unknown area of box inpainting)."""

    kind = "box_mask"

    def __init__(self, in_shape, box_h, box_w):
        H, W = _spatial(in_shape)
        if not (0 < box_h <= H and 0 < box_w <= W):
            raise ValueError(f"box ({box_h}, {box_w}) does not fit inside ({H}, {W})")
        mask = np.ones((H, W))
        top, left = (H - box_h) // 2, (W - box_w) // 2
        mask[top:top + box_h, left:left + box_w] = 0.0
        super().__init__(in_shape, mask)
        self.box = (box_h, box_w)


class NonlinearBlur(ForwardOperator):
    """Gamma curve clamp(x, 0, 1)^gamma followed by a small Gaussian blur.

    An analytic differentiable surrogate for learned nonlinear deblurring
    models; outputs carry the "nonlinear-surrogate" label downstream.
    """

    kind = "nonlinear_blur"
    linear = False

    def __init__(self, in_shape, gamma, ksize, sigma):
        super().__init__(in_shape, in_shape)
        if gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {gamma}")
        self.gamma = gamma
        self.ksize, self.sigma = ksize, sigma
        self._kf = _freq_response(gaussian_kernel(ksize, sigma), _spatial(in_shape))

    def apply(self, x):
        x = self._check_in(x)
        return _circ_filter(np.clip(x, 0.0, 1.0) ** self.gamma, self._kf)

    def vjp(self, x, v):
        x = self._check_in(x)
        v = self._check_out(v)
        back = _circ_filter(v, np.conj(self._kf))
        c = np.clip(x, 0.0, 1.0)
        slope = np.where((x > 0.0) & (x < 1.0),
                         self.gamma * c ** (self.gamma - 1.0), 0.0)
        return back * slope


# ====== noise models ======

class GaussianNoise:
    def __init__(self, sigma):
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.sigma = float(sigma)

    def __repr__(self):
        return f"GaussianNoise(sigma={self.sigma})"


class PoissonNoise:
    """Shot noise at rate lam * scale counts per unit intensity.

    scale converts [0,1] intensities to photon counts (default 255, the
    pixel-count reading of unit noise level on 8-bit-ranged images).
    """

    def __init__(self, lam, scale=255.0):
        if lam <= 0 or scale <= 0:
            raise ValueError(f"lam and scale must be > 0, got ({lam}, {scale})")
        self.lam = float(lam)
        self.scale = float(scale)

    def __repr__(self):
        return f"PoissonNoise(lam={self.lam}, scale={self.scale})"


def degrade(op, noise, x, rng):
    """Measure x through op and corrupt with the noise model.

    Gaussian: A(x) + sigma z.  Poisson: counts drawn at rate
    lam * scale * clamp(A(x), 0, inf), rescaled back to intensity units.
    The rng passed here is the only consumer of measurement-noise draws.
    """
    y = op.apply(x)
    if isinstance(noise, GaussianNoise):
        if noise.sigma == 0.0:
            return y
        return y + noise.sigma * rng.standard_normal(y.shape)
    rate = noise.lam * noise.scale * np.clip(y, 0.0, None)
    return rng.poisson(rate).astype(float) / (noise.lam * noise.scale)


# ====== factory ======

def _blur_defaults(n):
    # anchored at 9x9 sigma 1.0 for n = 32 and 61x61 sigma 3.0 for n = 256
    return max(3, _round_odd(61.0 * n / 256.0)), max(1.0, 3.0 * n / 256.0)


def make_operator(kind, params, in_shape, rng=None):
    """Construct a ForwardOperator by kind name with desk-scaled defaults.

    Args:
        kind: one of identity, gaussian_blur, motion_blur, downsample4x,
            random_mask, box_mask, nonlinear_blur.
        params: dict of per-kind parameters; missing keys take defaults
            scaled from the image side.
        in_shape: full signal shape, (H, W) or (H, W, C).
        rng: numpy Generator, required by random_mask only.

    Returns:
        the operator instance.
    """
    params = dict(params or {})
    n = _spatial(in_shape)[0]
    if kind == "identity":
        op = Identity(in_shape)
    elif kind == "gaussian_blur":
        dk, ds = _blur_defaults(n)
        op = GaussianBlur(in_shape, int(params.pop("ksize", dk)),
                          float(params.pop("sigma", ds)))
    elif kind == "motion_blur":
        dk, _ = _blur_defaults(n)
        op = MotionBlur(in_shape, int(params.pop("length", dk)),
                        float(params.pop("angle", np.pi / 4)))
    elif kind == "downsample4x":
        op = Downsample4x(in_shape)
    elif kind == "random_mask":
        if rng is None:
            raise ValueError("random_mask needs an rng to place the mask")
        op = RandomMask(in_shape, float(params.pop("fraction", 0.7)), rng)
    elif kind == "box_mask":
        side = _spatial(in_shape)
        bh = int(params.pop("box_h", side[0] // 2))
        bw = int(params.pop("box_w", side[1] // 2))
        op = BoxMask(in_shape, bh, bw)
    elif kind == "nonlinear_blur":
        ks = int(params.pop("ksize", max(3, _round_odd(5.0 * n / 32.0))))
        sg = float(params.pop("sigma", max(0.5, 1.0 * n / 32.0)))
        op = NonlinearBlur(in_shape, float(params.pop("gamma", 2.2)), ks, sg)
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    if params:
        raise ValueError(f"unknown {kind} params: {sorted(params)}")
    return op
