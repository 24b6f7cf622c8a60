"""Sparse coding over per-channel patch dictionaries.

The encoder represents every 16x16 block of each channel as an exact-K
sparse combination of atoms from a dictionary learned on natural
patches (D1). The decoder reconstructs the same coefficients against a
second dictionary (D2) derived from enhanced counterparts, so decoding
enhances for free. Coefficients are laid out as image-shaped planes:
the 16x16 tile at a block's position holds that block's 256
coefficients row-major by atom index.
"""

from dataclasses import dataclass, field

import numpy as np

from .binio import ByteReader, ByteWriter
from .errors import DataError, DimensionError, NumericError
from .imaging import BLOCK, ImagePlanes, RgbImage, merge_blocks, save_ppm, split_blocks

DICT_MAGIC = b"UWDICT01"

# OMP stops early once the residual is essentially zero.
RESIDUAL_TOL = 1e-10


@dataclass
class Dictionary:
    """Per-channel patch dictionaries, shape (channels, atom_dim, n_atoms).

    Atoms are columns. D1 keeps columns at unit norm; derived
    dictionaries (D2) are deliberately not renormalized, their scale is
    part of the mapping.
    """

    data: np.ndarray
    _grams: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise DimensionError("Dictionary wants (channels, atom_dim, n_atoms), got %r"
                                 % (a.shape,))
        self.data = a

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def atom_dim(self):
        return self.data.shape[1]

    @property
    def n_atoms(self):
        return self.data.shape[2]

    def gram(self, c):
        """Cached Gram matrix D_c^T D_c for channel c."""
        if c not in self._grams:
            d = self.data[c]
            self._grams[c] = d.T @ d
        return self._grams[c]

    def save(self, path):
        w = ByteWriter()
        w.raw(DICT_MAGIC)
        w.u8(self.channels)
        w.u16(self.atom_dim)
        w.u16(self.n_atoms)
        for c in range(self.channels):
            # column-major: atoms are contiguous runs
            w.f32_array(self.data[c].T)
        w.crc()
        with open(path, "wb") as f:
            f.write(w.getvalue())

    @classmethod
    def load(cls, path):
        from .errors import FormatError
        with open(path, "rb") as f:
            r = ByteReader(f.read())
        if r.raw(len(DICT_MAGIC)) != DICT_MAGIC:
            raise FormatError("not a dictionary file: bad magic")
        channels = r.u8()
        atom_dim = r.u16()
        n_atoms = r.u16()
        data = np.empty((channels, atom_dim, n_atoms), dtype=np.float64)
        for c in range(channels):
            data[c] = r.f32_array(atom_dim * n_atoms, (n_atoms, atom_dim)).T
        r.check_crc()
        return cls(data)


@dataclass
class CoefficientPlanes:
    """Sparse coefficients arranged as (3, H, W) planes.

    Same spatial extent as the source planes; the tile at block
    position (by, bx) holds that block's coefficient vector, row-major
    by atom index.
    """

    data: np.ndarray
    k: int

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != 3:
            raise DimensionError("CoefficientPlanes wants (3, H, W), got %r" % (a.shape,))
        self.data = a

    def zero_fraction(self):
        return float(np.count_nonzero(self.data == 0.0) / self.data.size)

    def nonzeros_per_tile(self):
        """(3, n_blocks) array of nonzero counts, tiles in raster order."""
        blocks = split_blocks(ImagePlanes(self.data))
        return np.count_nonzero(blocks, axis=2)


# ---------------------------------------------------------------------------
# Orthogonal matching pursuit. All blocks of a call run in lockstep so
# the per-iteration least-squares refits become one stacked solve.

def omp_batch(x, dictionary_matrix, k, gram=None):
    """Exact-K OMP of a batch of vectors against one channel dictionary.

    Parameters
    ----------
    x : (n_vectors, atom_dim) rows to code.
    dictionary_matrix : (atom_dim, n_atoms) atom columns.
    k : number of atoms per vector; a vector stops early only when its
        residual norm falls below RESIDUAL_TOL.
    gram : optional precomputed D^T D.

    Returns
    -------
    (n_vectors, n_atoms) dense coefficients, zero off each support.

    Selection is by largest absolute correlation with the residual;
    exact ties resolve to the lowest atom index. Coefficients are refit
    on the full support each iteration by least squares on the normal
    equations, with a ridge rescue of 1e-10 * trace/m on singularity.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    d = dictionary_matrix
    nb, dim = x.shape
    n_atoms = d.shape[1]
    if not 1 <= k <= n_atoms:
        raise DataError("k=%d out of range [1, %d]" % (k, n_atoms))
    if dim != d.shape[0]:
        raise DimensionError("vectors have dim %d, atoms %d" % (dim, d.shape[0]))
    g = d.T @ d if gram is None else gram

    p0 = x @ d                      # (nb, n_atoms) initial correlations
    xtx = np.einsum("ij,ij->i", x, x)
    sel = np.zeros((nb, k), dtype=np.int64)
    coef = np.zeros((nb, k))
    n_sel = np.zeros(nb, dtype=np.int64)
    gsel = np.zeros((nb, k, k))     # per-vector support Gram, grown in place
    p = p0.copy()
    prev_r2 = xtx.copy()
    active = xtx > RESIDUAL_TOL ** 2

    for n in range(k):
        if not active.any():
            break
        # np.argmax returns the first maximum, so ties go to the
        # lowest atom index
        j = np.argmax(np.abs(p), axis=1)
        corr = np.abs(p[np.arange(nb), j])
        active &= corr > 1e-13      # residual orthogonal to all atoms: stop
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        sel[idx, n] = j[idx]
        n_sel[idx] = n + 1

        m = n + 1
        rows = g[sel[idx, n]]                         # (na_active, n_atoms)
        grown = np.take_along_axis(rows, sel[idx, :m], axis=1)
        gsel[idx, n, :m] = grown
        gsel[idx, :m, n] = grown
        rhs = np.take_along_axis(p0[idx], sel[idx, :m], axis=1)
        sol = _solve_support(gsel[idx][:, :m, :m], rhs)
        coef[idx, :m] = sol

        p[idx] = p0[idx] - np.einsum("bn,bna->ba", sol, g[sel[idx, :m]])
        np.put_along_axis(p, sel[:, :m], 0.0, axis=1)

        r2 = xtx[idx] - np.einsum("bn,bn->b", sol, rhs)
        assert (r2 <= prev_r2[idx] + 1e-9).all(), "OMP residual increased"
        prev_r2[idx] = r2
        active[idx] &= r2 > RESIDUAL_TOL ** 2

    alpha = np.zeros((nb, n_atoms))
    for b in range(nb):
        mb = n_sel[b]
        if mb:
            alpha[b, sel[b, :mb]] = coef[b, :mb]
    return alpha


def omp(x, dictionary_matrix, k, gram=None):
    """Single-vector OMP; see omp_batch."""
    return omp_batch(np.asarray(x, dtype=np.float64)[None, :],
                     dictionary_matrix, k, gram=gram)[0]


def _solve_support(a, rhs):
    try:
        return np.linalg.solve(a, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        pass
    m = a.shape[-1]
    trace = np.trace(a, axis1=-2, axis2=-1)
    ridge = (1e-10 / m) * trace
    eye = np.eye(m)
    try:
        return np.linalg.solve(a + ridge[:, None, None] * eye,
                               rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NumericError("support Gram matrix singular beyond ridge rescue")


def encode_image(planes, dictionary, k):
    """Sparse-code every block of every channel; returns CoefficientPlanes."""
    c, h, w = planes.data.shape
    if dictionary.channels != c:
        raise DimensionError("dictionary has %d channels, planes %d"
                             % (dictionary.channels, c))
    blocks = split_blocks(planes)
    coeffs = np.zeros((c, blocks.shape[1], dictionary.n_atoms))
    for ch in range(c):
        coeffs[ch] = omp_batch(blocks[ch], dictionary.data[ch], k,
                               gram=dictionary.gram(ch))
    planes_out = merge_blocks(coeffs, h, w)
    return CoefficientPlanes(planes_out.data, k)


def decode_image(coeff_planes, dictionary):
    """Reconstruct planes from coefficient planes against a dictionary."""
    data = coeff_planes.data if isinstance(coeff_planes, CoefficientPlanes) else coeff_planes
    return ImagePlanes(reconstruct_planes(np.asarray(data, dtype=np.float64),
                                          dictionary.data))


def reconstruct_planes(coeff_data, dict_data):
    """(3, H, W) coefficient planes x (3, atom_dim, n_atoms) -> (3, H, W) pixels.

    Linear map; also serves as the forward of the differentiable
    reconstruction used in training.
    """
    c, h, w = coeff_data.shape
    alphas = split_blocks(ImagePlanes(coeff_data))
    out = np.empty_like(alphas)
    for ch in range(c):
        out[ch] = alphas[ch] @ dict_data[ch].T
    return merge_blocks(out, h, w).data


# ---------------------------------------------------------------------------
# Dictionary learning. D1 comes from alternating OMP with a
# least-squares dictionary update (method of optimal directions); D2 is
# the closed-form ridge regression of enhanced blocks onto the D1
# coefficients.

def train_d1(patches, n_atoms=256, iterations=10, k=8, seed=0):
    """Learn per-channel unit-norm dictionaries from natural patches.

    Parameters
    ----------
    patches : (3, N, atom_dim) array of vectorized blocks per channel.
    n_atoms, iterations, k : dictionary size, alternation count, and
        the sparsity used during training.
    seed : initial atoms are N distinct training patches drawn with
        this seed.

    Returns
    -------
    (Dictionary, history) where history is a (3, iterations) array of
    the mean squared reconstruction error after each update.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] != 3:
        raise DimensionError("patches want (3, N, atom_dim), got %r" % (patches.shape,))
    _, n, atom_dim = patches.shape
    if n < 10 * n_atoms:
        raise DataError("need at least %d patches for %d atoms, got %d"
                        % (10 * n_atoms, n_atoms, n))
    rng = np.random.default_rng(seed)
    dicts = np.empty((3, atom_dim, n_atoms))
    history = np.empty((3, iterations))

    for ch in range(3):
        x = patches[ch].T  # (atom_dim, N), columns are patches
        d = x[:, rng.choice(n, size=n_atoms, replace=False)].copy()
        d = _normalize_columns(d)

        for it in range(iterations):
            a = omp_batch(x.T, d, k).T

            sse_before = float(((x - d @ a) ** 2).sum())
            d_new = _mod_update(x, a, d)
            sse_after = float(((x - d_new @ a) ** 2).sum())
            # with the support fixed the least-squares update cannot
            # make things worse
            assert sse_after <= sse_before + 1e-9 * max(1.0, sse_before), \
                "dictionary update increased the objective"

            d = d_new
            residual2 = ((x - d @ a) ** 2).sum(axis=0)
            d = _replace_dead_atoms(d, a, x, residual2)
            d = _normalize_columns(d)
            history[ch, it] = sse_after / n
        dicts[ch] = d

    return Dictionary(dicts), history


def _normalize_columns(d):
    norms = np.linalg.norm(d, axis=0)
    out = d.copy()
    for j in np.nonzero(norms < 1e-10)[0]:
        out[:, j] = 0.0
        out[j % d.shape[0], j] = 1.0
        norms[j] = 1.0
    return out / norms


def _mod_update(x, a, d_old):
    aat = a @ a.T
    xat = x @ a.T
    try:
        return np.linalg.solve(aat, xat.T).T
    except np.linalg.LinAlgError:
        # unused atoms make A A^T singular; solve in the least-squares
        # sense and keep the old columns where the data says nothing
        d = np.linalg.lstsq(aat, xat.T, rcond=None)[0].T
        unused = ~np.any(a != 0.0, axis=1)
        d[:, unused] = d_old[:, unused]
        return d


def _replace_dead_atoms(d, a, x, residual2):
    usage = np.count_nonzero(a, axis=1)
    norms = np.linalg.norm(d, axis=0)
    dead = np.nonzero((usage == 0) | (norms < 1e-10))[0]
    if dead.size == 0:
        return d
    worst = np.argsort(-residual2, kind="stable")
    out = d.copy()
    for slot, j in enumerate(dead):
        p = x[:, worst[slot % x.shape[1]]]
        nrm = np.linalg.norm(p)
        if nrm > 1e-10:
            out[:, j] = p / nrm
    return out


def derive_d2(pairs, d1, k, block=BLOCK, seed=0):
    """Closed-form enhanced dictionary from (original, enhanced) pairs.

    Codes each original block against D1 with sparsity k, then solves
    per channel for the D2 minimizing ||E - D2 A||_F^2 with a small
    ridge (1e-6 * trace / n_atoms). Columns are not renormalized.

    k is either one sparsity for every block or an inclusive (lo, hi)
    range sampled per block. The map is only reliable on coefficient
    vectors like the ones it was fit to, so match this to the coding
    regime D2 will serve; a fixed k fit decodes badly at other k.
    """
    from .imaging import to_planes

    k_range = tuple(k) if isinstance(k, (tuple, list)) else (int(k), int(k))
    if not 1 <= k_range[0] <= k_range[1]:
        raise DataError("bad sparsity %r" % (k,))
    rng = np.random.default_rng(seed)

    blocks = [[] for _ in range(3)]
    targets = [[] for _ in range(3)]
    for orig, enh in pairs:
        po = to_planes(orig) if isinstance(orig, RgbImage) else orig
        pe = to_planes(enh) if isinstance(enh, RgbImage) else enh
        if po.data.shape != pe.data.shape:
            raise DimensionError("pair shapes differ: %r vs %r"
                                 % (po.data.shape, pe.data.shape))
        ob = split_blocks(po, block)
        eb = split_blocks(pe, block)
        for ch in range(3):
            blocks[ch].append(ob[ch])
            targets[ch].append(eb[ch])

    n_atoms = d1.n_atoms
    out = np.empty((3, d1.atom_dim, n_atoms))
    for ch in range(3):
        x = np.concatenate(blocks[ch])
        ks = rng.integers(k_range[0], k_range[1] + 1, size=x.shape[0])
        alpha = np.empty((x.shape[0], n_atoms))
        for kv in np.unique(ks):
            sel = ks == kv
            alpha[sel] = omp_batch(x[sel], d1.data[ch], int(kv),
                                   gram=d1.gram(ch))
        a = alpha.T                        # (n_atoms, NB)
        e = np.concatenate(targets[ch]).T  # (atom_dim, NB)
        gram = a @ a.T
        eps = 1e-6 * np.trace(gram) / n_atoms
        m = gram + eps * np.eye(n_atoms)
        if np.linalg.cond(m) > 1e12:
            raise NumericError("coefficient Gram is ill-conditioned (channel %d)" % ch)
        out[ch] = np.linalg.solve(m, a @ e.T).T
    return Dictionary(out)


def evaluate_enhanced_dictionary(entries, d1, d2, k_range=(16, 128), seed=0):
    """Per-block enhancement gain of decoding against D2 instead of D1.

    entries : iterable of (block, enhanced_block, channel) with blocks
        as (atom_dim,) vectors; channel selects the dictionary pair.
    Each block is coded against D1 with k drawn uniformly from k_range
    (inclusive, seeded), then the gain is
    10*log10(MSE(enh, D1 a) / MSE(enh, D2 a)) with both MSEs floored
    at 1e-12.

    Returns the (n_entries,) array of gains in dB.
    """
    rng = np.random.default_rng(seed)
    gains = np.empty(len(entries))
    for i, (blk, enh, ch) in enumerate(entries):
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        alpha = omp(np.asarray(blk, dtype=np.float64), d1.data[ch], k,
                    gram=d1.gram(ch))
        rec1 = d1.data[ch] @ alpha
        rec2 = d2.data[ch] @ alpha
        e = np.asarray(enh, dtype=np.float64)
        mse1 = max(float(((e - rec1) ** 2).mean()), 1e-12)
        mse2 = max(float(((e - rec2) ** 2).mean()), 1e-12)
        gains[i] = 10.0 * np.log10(mse1 / mse2)
    return gains


def export_dictionary_diff(d1, d2, prefix, block=BLOCK):
    """Write per-channel atom mosaics of d1, d2, and |d1 - d2| as PPM.

    Atoms are tiled on a square-ish grid, each atom normalized to full
    range independently (flat atoms render mid-gray). Returns the list
    of written paths.
    """
    names = "rgb"
    paths = []
    for ch in range(d1.channels):
        for tag, mat in (("d1", d1.data[ch]), ("d2", d2.data[ch]),
                         ("diff", np.abs(d1.data[ch] - d2.data[ch]))):
            mosaic = _atom_mosaic(mat, block)
            path = "%s_%s_%s.ppm" % (prefix, tag, names[ch])
            save_ppm(path, RgbImage(np.repeat(mosaic[:, :, None], 3, axis=2)))
            paths.append(path)
    return paths


def _atom_mosaic(mat, block):
    atom_dim, n_atoms = mat.shape
    side = int(np.ceil(np.sqrt(n_atoms)))
    out = np.zeros((side * block, side * block), dtype=np.uint8)
    for j in range(n_atoms):
        atom = mat[:, j].reshape(block, block)
        lo, hi = atom.min(), atom.max()
        if hi - lo > 1e-12:
            tile = (atom - lo) * (255.0 / (hi - lo))
        else:
            tile = np.full((block, block), 128.0)
        r, c = divmod(j, side)
        out[r * block:(r + 1) * block, c * block:(c + 1) * block] = \
            np.rint(tile).astype(np.uint8)
    return out
