"""Stream fusion by bilinear pooling.

Exact route: per-location outer products of the appearance and part
maps, averaged over space.  Compact route: count-sketch both local
vectors and circularly convolve the sketches (tensor sketch), which
approximates the outer product's sketch at a fraction of the size.
Circular convolution runs as direct O(d^2) summation for small d and
as a radix-2 Cooley-Tukey transform for larger power-of-two d.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataIOError, NumericError
from .tensor import EPS_DENOM, Tensor, record_op

# Largest dimension handled by direct circular convolution; beyond it
# the transform path (power-of-two only) takes over.
DIRECT_CONV_MAX = 64
IMAG_RESIDUE_MAX = 1e-9

SKETCH_MAGIC = b"SKP1\x00\x00\x00\x00"


def _map_array(x) -> Tensor:
    # Accept either a bare Tensor or a FeatureMap-like carrier.
    return x.tensor if hasattr(x, "tensor") else x


# ---------------------------------------------------------------------------
# sketch parameters
# ---------------------------------------------------------------------------


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class SketchParams:
    """Frozen random projection tables for the compact pooling path.

    `h_*` map channel indices to buckets in [0, d); `s_*` hold signs in
    {-1, +1}.  Tables are a pure function of (input_dims, output_dim,
    seed), so persisting the seed alone would suffice; the tables are
    stored anyway so files are self-contained.
    """

    input_dims: tuple[int, int]
    output_dim: int
    h_a: np.ndarray
    s_a: np.ndarray
    h_p: np.ndarray
    s_p: np.ndarray
    seed: int

    @classmethod
    def generate(
        cls, input_dims: tuple[int, int], output_dim: int, seed: int
    ) -> "SketchParams":
        c_a, c_p = int(input_dims[0]), int(input_dims[1])
        d = int(output_dim)
        if c_a < 1 or c_p < 1 or d < 1:
            raise ConfigurationError(
                f"sketch dims must be positive, got ({c_a}, {c_p}) -> {d}"
            )
        if d > DIRECT_CONV_MAX and not _is_power_of_two(d):
            raise ConfigurationError(
                f"sketch dim {d} above {DIRECT_CONV_MAX} must be a power of two "
                f"for the transform-based convolution path"
            )
        rng = np.random.default_rng(seed)
        h_a = rng.integers(0, d, size=c_a, dtype=np.int64)
        s_a = rng.integers(0, 2, size=c_a, dtype=np.int64) * 2 - 1
        h_p = rng.integers(0, d, size=c_p, dtype=np.int64)
        s_p = rng.integers(0, 2, size=c_p, dtype=np.int64) * 2 - 1
        return cls((c_a, c_p), d, h_a, s_a, h_p, s_p, int(seed))

    def validate(self) -> None:
        c_a, c_p = self.input_dims
        d = self.output_dim
        for name, h, s, n in (
            ("appearance", self.h_a, self.s_a, c_a),
            ("part", self.h_p, self.s_p, c_p),
        ):
            if len(h) != n or len(s) != n:
                raise ConfigurationError(
                    f"{name} sketch tables have {len(h)}/{len(s)} entries, expected {n}"
                )
            if h.size and (h.min() < 0 or h.max() >= d):
                raise ConfigurationError(f"{name} hash table exceeds [0, {d})")
            if not np.all(np.abs(s) == 1):
                raise ConfigurationError(f"{name} sign table has entries outside ±1")

    def projection_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (C, d) matrices R with R[i, h[i]] = s[i], zero elsewhere."""
        c_a, c_p = self.input_dims
        ra = np.zeros((c_a, self.output_dim))
        ra[np.arange(c_a), self.h_a] = self.s_a
        rp = np.zeros((c_p, self.output_dim))
        rp[np.arange(c_p), self.h_p] = self.s_p
        return ra, rp


def save_sketch_params(path, params: SketchParams) -> None:
    """Write tables to a small binary sidecar (all integers little-endian)."""
    params.validate()
    c_a, c_p = params.input_dims
    blob = bytearray(SKETCH_MAGIC)
    blob += np.asarray([c_a, c_p, params.output_dim], dtype="<u4").tobytes()
    blob += np.asarray([params.seed], dtype="<u8").tobytes()
    for table in (params.h_a, params.s_a, params.h_p, params.s_p):
        blob += np.asarray(table, dtype="<i8").tobytes()
    try:
        Path(path).write_bytes(bytes(blob))
    except OSError as exc:
        raise DataIOError(f"cannot write sketch sidecar {path}: {exc}") from exc


def load_sketch_params(path) -> SketchParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read sketch sidecar {path}: {exc}") from exc
    head = len(SKETCH_MAGIC)
    if blob[:head] != SKETCH_MAGIC:
        raise DataIOError(f"{path}: bad sketch sidecar magic {blob[:8]!r}")
    c_a, c_p, d = (int(v) for v in np.frombuffer(blob, "<u4", 3, offset=head))
    seed = int(np.frombuffer(blob, "<u8", 1, offset=head + 12)[0])
    off = head + 20
    tables = []
    for n in (c_a, c_a, c_p, c_p):
        end = off + 8 * n
        if len(blob) < end:
            raise DataIOError(f"{path}: truncated sketch table block")
        tables.append(np.frombuffer(blob, "<i8", n, offset=off).astype(np.int64))
        off = end
    if off != len(blob):
        raise DataIOError(f"{path}: {len(blob) - off} trailing bytes")
    params = SketchParams((c_a, c_p), d, tables[0], tables[1], tables[2], tables[3], seed)
    params.validate()
    return params


# ---------------------------------------------------------------------------
# radix-2 transform
# ---------------------------------------------------------------------------


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey DFT along the last axis.

    Requires a power-of-two extent; batches over all leading axes.
    """
    a = np.array(x, dtype=np.complex128)
    n = a.shape[-1]
    if not _is_power_of_two(n):
        raise ConfigurationError(f"transform length must be a power of two, got {n}")
    if n == 1:
        return a
    a = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(a.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        upper = even + odd
        lower = even - odd
        blocks[..., :half] = upper
        blocks[..., half:] = lower
        size *= 2
    return a


def ifft(x: np.ndarray) -> np.ndarray:
    a = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(a))) / a.shape[-1]


# ---------------------------------------------------------------------------
# count sketch and circular convolution
# ---------------------------------------------------------------------------


def count_sketch(x: Tensor, h: np.ndarray, s: np.ndarray, d: int) -> Tensor:
    """Signed-bucket projection: out[k] = sum over i with h[i]=k of s[i]*x[i]."""
    if x.array.ndim != 1:
        raise ConfigurationError(f"count_sketch needs a vector, got {x.shape}")
    n = x.shape[0]
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    if len(h) != n or len(s) != n:
        raise ConfigurationError(
            f"sketch tables have {len(h)}/{len(s)} entries for input of length {n}"
        )
    if n and (h.min() < 0 or h.max() >= d):
        raise ConfigurationError(f"hash table exceeds [0, {d})")
    out = np.bincount(h, weights=s * x.array, minlength=d)
    return record_op((x,), out, lambda g: (s * g[h],))


def _circulant_indices(d: int) -> np.ndarray:
    # idx[k, i] = (k - i) mod d, so conv(u, v)[k] = sum_i u[i] * v[idx[k, i]].
    k = np.arange(d)
    return (k[:, None] - k[None, :]) % d


def _convolve_direct(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    idx = _circulant_indices(len(u))
    return v[idx] @ u


def circular_convolve(u: Tensor, v: Tensor) -> Tensor:
    """Circular convolution of two equal-length vectors.

    Dispatches to direct summation for length <= 64 and to the radix-2
    transform (power-of-two lengths only) above that.
    """
    if u.array.ndim != 1 or v.array.ndim != 1 or u.shape != v.shape:
        raise ConfigurationError(
            f"circular_convolve needs equal-length vectors, got {u.shape}, {v.shape}"
        )
    d = u.shape[0]
    uv, vv = u.array, v.array
    if d <= DIRECT_CONV_MAX:
        out = _convolve_direct(uv, vv)
        idx = _circulant_indices(d)

        def _bw(g):
            return (vv[idx].T @ g, uv[idx].T @ g)

    else:
        if not _is_power_of_two(d):
            raise ConfigurationError(
                f"circular convolution beyond {DIRECT_CONV_MAX} needs a "
                f"power-of-two length, got {d}"
            )
        fu, fv = fft(uv), fft(vv)
        z = ifft(fu * fv)
        residue = float(np.abs(z.imag).max())
        if residue >= IMAG_RESIDUE_MAX:
            raise NumericError(
                f"circular convolution imaginary residue {residue:.3e} "
                f"exceeds {IMAG_RESIDUE_MAX:.0e}"
            )
        out = z.real.copy()

        def _bw(g):
            fg = fft(g)
            du = ifft(fg * np.conj(fv)).real
            dv = ifft(fg * np.conj(fu)).real
            return (du, dv)

    return record_op((u, v), out, _bw)


# ---------------------------------------------------------------------------
# pooled descriptors
# ---------------------------------------------------------------------------


@dataclass
class PooledDescriptor:
    """Fusion output: exact (length C_a*C_p) or compact (length d)."""

    vector: Tensor
    normalized: bool = False


def bilinear_pool_exact(a, p) -> PooledDescriptor:
    """Average of vectorized per-location outer products.

    out[i*C_p + j] = (1/S) * sum over locations of a[i, x, y] * p[j, x, y];
    the appearance index is the outer (slow) one.
    """
    at, pt = _map_array(a), _map_array(p)
    if at.array.ndim != 3 or pt.array.ndim != 3:
        raise ConfigurationError(
            f"bilinear pooling needs CxHxW maps, got {at.shape} and {pt.shape}"
        )
    if at.shape[1:] != pt.shape[1:]:
        raise ConfigurationError(
            f"spatial extents disagree: {at.shape[1:]} vs {pt.shape[1:]}"
        )
    c_a = at.shape[0]
    c_p = pt.shape[0]
    s = at.shape[1] * at.shape[2]
    amat = at.array.reshape(c_a, s)
    pmat = pt.array.reshape(c_p, s)
    out = (amat @ pmat.T / s).reshape(c_a * c_p)
    needs_a, needs_p = at.requires_grad, pt.requires_grad
    a_shape, p_shape = at.shape, pt.shape

    def _bw(g):
        gm = g.reshape(c_a, c_p) / s
        da = (gm @ pmat).reshape(a_shape) if needs_a else None
        dp = (gm.T @ amat).reshape(p_shape) if needs_p else None
        return (da, dp)

    return PooledDescriptor(record_op((at, pt), out, _bw), normalized=False)


def compact_bilinear(a_vec: Tensor, p_vec: Tensor, params: SketchParams) -> Tensor:
    """Tensor sketch of one location: convolve the two count sketches."""
    c_a, c_p = params.input_dims
    if a_vec.shape != (c_a,) or p_vec.shape != (c_p,):
        raise ConfigurationError(
            f"vector lengths {a_vec.shape}/{p_vec.shape} do not match "
            f"sketch dims ({c_a}, {c_p})"
        )
    sa = count_sketch(a_vec, params.h_a, params.s_a, params.output_dim)
    sp = count_sketch(p_vec, params.h_p, params.s_p, params.output_dim)
    return circular_convolve(sa, sp)


def compact_bilinear_pool(a, p, params: SketchParams) -> PooledDescriptor:
    """Average of per-location tensor sketches over the spatial grid.

    Fused implementation: both maps are projected with dense sketch
    matrices, convolved per location, then averaged.  By linearity of
    the sketch this equals sketching each location and averaging.
    """
    at, pt = _map_array(a), _map_array(p)
    if at.array.ndim != 3 or pt.array.ndim != 3:
        raise ConfigurationError(
            f"compact pooling needs CxHxW maps, got {at.shape} and {pt.shape}"
        )
    if at.shape[1:] != pt.shape[1:]:
        raise ConfigurationError(
            f"spatial extents disagree: {at.shape[1:]} vs {pt.shape[1:]}"
        )
    c_a, c_p = params.input_dims
    if at.shape[0] != c_a or pt.shape[0] != c_p:
        raise ConfigurationError(
            f"map channels ({at.shape[0]}, {pt.shape[0]}) do not match "
            f"sketch dims ({c_a}, {c_p})"
        )
    d = params.output_dim
    s = at.shape[1] * at.shape[2]
    ra, rp = params.projection_matrices()
    amat = at.array.reshape(c_a, s)
    pmat = pt.array.reshape(c_p, s)
    sk_a = amat.T @ ra
    sk_p = pmat.T @ rp

    needs_a, needs_p = at.requires_grad, pt.requires_grad
    a_shape, p_shape = at.shape, pt.shape

    if d <= DIRECT_CONV_MAX:
        idx = _circulant_indices(d)
        out = np.einsum("si,ski->sk", sk_a, sk_p[:, idx]).mean(axis=0)

        def _bw(g):
            gs = g / s
            d_sk_a = np.einsum("k,ski->si", gs, sk_p[:, idx])
            d_sk_p = np.einsum("k,ski->si", gs, sk_a[:, idx])
            da = (ra @ d_sk_a.T).reshape(a_shape) if needs_a else None
            dp = (rp @ d_sk_p.T).reshape(p_shape) if needs_p else None
            return (da, dp)

    else:
        if not _is_power_of_two(d):
            raise ConfigurationError(
                f"compact pooling beyond {DIRECT_CONV_MAX} needs a "
                f"power-of-two sketch dimension, got {d}"
            )
        fa, fp = fft(sk_a), fft(sk_p)
        z = ifft(fa * fp)
        residue = float(np.abs(z.imag).max())
        if residue >= IMAG_RESIDUE_MAX:
            raise NumericError(
                f"compact pooling imaginary residue {residue:.3e} "
                f"exceeds {IMAG_RESIDUE_MAX:.0e}"
            )
        out = z.real.mean(axis=0)

        def _bw(g):
            fg = fft(g.astype(np.complex128)) / s
            d_sk_a = ifft(fg[None, :] * np.conj(fp)).real
            d_sk_p = ifft(fg[None, :] * np.conj(fa)).real
            da = (ra @ d_sk_a.T).reshape(a_shape) if needs_a else None
            dp = (rp @ d_sk_p.T).reshape(p_shape) if needs_p else None
            return (da, dp)

    return PooledDescriptor(record_op((at, pt), out, _bw), normalized=False)


def l2_normalize_vector(x: Tensor) -> Tensor:
    """Scale a vector to unit norm; zero stays zero via a clamped denominator."""
    if x.array.ndim != 1:
        raise ConfigurationError(f"l2_normalize_vector needs a vector, got {x.shape}")
    norm = float(np.sqrt(np.sum(x.array * x.array)))
    denom = max(norm, EPS_DENOM)
    y = x.array / denom

    def _bw(g):
        if norm <= EPS_DENOM:
            return (g / denom,)
        return ((g - y * np.dot(y, g)) / denom,)

    return record_op((x,), y, _bw)


def l2_normalize(desc: PooledDescriptor) -> PooledDescriptor:
    return PooledDescriptor(l2_normalize_vector(desc.vector), normalized=True)
