"""Decomposed quantizer: SVD basis split into balanced blocks, one codebook per block.

The encoder of layer ``l`` is the fixed orthonormal block ``W_l`` applied to
the centered input; the decoder is its transpose. Only the codebooks learn.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, adam_step
from .tensorio import load_tensors, save_tensors

log = logging.getLogger("dqrec.quantize")


def partition_columns(sq_sigmas, n_blocks: int, block_size: int | None = None) -> list[list[int]]:
    """Greedy balanced assignment of columns to equal-size blocks.

    Columns are visited by decreasing load (ties: lower column first) and each
    goes to the least-loaded block that still has room (ties: lower block).
    Returns the column indices of every block in assignment order.
    """
    loads_in = np.asarray(sq_sigmas, dtype=np.float64)
    d = len(loads_in)
    if block_size is None:
        if d % n_blocks:
            raise ValueError(f"{d} columns cannot be split into {n_blocks} equal blocks")
        block_size = d // n_blocks
    if n_blocks * block_size != d:
        raise ValueError(f"{n_blocks} blocks of {block_size} do not cover {d} columns")
    order = sorted(range(d), key=lambda c: (-loads_in[c], c))
    blocks: list[list[int]] = [[] for _ in range(n_blocks)]
    loads = [0.0] * n_blocks
    for c in order:
        best = min((b for b in range(n_blocks) if len(blocks[b]) < block_size),
                   key=lambda b: (loads[b], b))
        blocks[best].append(c)
        loads[best] += loads_in[c]
    return blocks


def partition_objective(sq_sigmas, blocks) -> float:
    """Sum over ordered block pairs of absolute load differences."""
    s = np.asarray(sq_sigmas, dtype=np.float64)
    loads = np.array([s[b].sum() for b in blocks])
    return float(np.abs(loads[:, None] - loads[None, :]).sum())


@dataclass
class QuantizerBasis:
    """Centering mean plus the right singular vectors regrouped into blocks.

    ``components`` is d x d with the columns of block ``l`` stored
    contiguously at ``[l*b, (l+1)*b)``; ``sigma`` follows the same order and
    ``columns`` records each column's position in the raw SVD output.
    """

    mean: np.ndarray
    components: np.ndarray
    sigma: np.ndarray
    columns: np.ndarray
    n_blocks: int
    kind: str = "user"

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    @property
    def block_size(self) -> int:
        return self.dim // self.n_blocks

    @property
    def blocks(self) -> list[np.ndarray]:
        b = self.block_size
        return [self.components[:, l * b:(l + 1) * b] for l in range(self.n_blocks)]

    def block_loads(self) -> np.ndarray:
        return (self.sigma**2).reshape(self.n_blocks, self.block_size).sum(axis=1)


def fit_basis(Z, n_blocks: int, kind: str = "user") -> QuantizerBasis:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError("representation matrix must be 2-d")
    n, d = Z.shape
    if n <= d:
        raise ValueError(f"need more rows than columns, got {n} x {d}")
    if n_blocks < 1 or d % n_blocks:
        raise ValueError(f"dimension {d} is not divisible by {n_blocks} layers")
    if not np.all(np.isfinite(Z)):
        raise ValueError("representation matrix has non-finite entries")
    mean = Z.mean(axis=0)
    # only the right factor and singular values are kept
    _, sigma, wt = np.linalg.svd(Z - mean, full_matrices=False)
    blocks = partition_columns(sigma**2, n_blocks)
    cols = np.concatenate(blocks)
    return QuantizerBasis(mean, wt.T[:, cols].copy(), sigma[cols].copy(), cols, n_blocks, kind)


def _project(rows: np.ndarray, M: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """``rows @ M`` computed so that each output row is bitwise independent of the batch.

    BLAS picks kernels by shape, so the same code decoded alone and inside a
    batch can differ in the last bit, which breaks exact distance ties.
    """
    flat = rows.reshape(-1, rows.shape[-1])
    out = np.empty((len(flat), M.shape[1]))
    for start in range(0, len(flat), chunk):
        part = flat[start:start + chunk]
        out[start:start + chunk] = (part[:, :, None] * M[None]).sum(axis=1)
    return out.reshape(rows.shape[:-1] + (M.shape[1],))


def encode(z, basis: QuantizerBasis) -> np.ndarray:
    """Latents of shape ``(..., L, d/L)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != basis.dim:
        raise ValueError(f"input dim {z.shape[-1]} != basis dim {basis.dim}")
    y = _project(z - basis.mean, basis.components)
    return y.reshape(z.shape[:-1] + (basis.n_blocks, basis.block_size))


def _sq_dists(x: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    # direct differences keep exact ties exact
    return ((x[..., None, :] - codebook) ** 2).sum(axis=-1)


def assign_codewords(latents, codebooks, chunk: int = 4096) -> np.ndarray:
    """Nearest codeword per layer; ties go to the lowest index.

    ``latents`` is ``(..., L, b)``, ``codebooks`` ``(L, J, b)``; returns integer
    codes of shape ``(..., L)``.
    """
    x = np.asarray(latents, dtype=np.float64)
    C = np.asarray(codebooks, dtype=np.float64)
    if C.ndim != 3 or C.shape[1] == 0:
        raise ValueError("codebooks must be a non-empty (L, J, b) array")
    if x.shape[-2:] != (C.shape[0], C.shape[2]):
        raise ValueError(f"latent shape {x.shape[-2:]} does not match codebooks {C.shape}")
    flat = x.reshape(-1, C.shape[0], C.shape[2])
    codes = np.empty(flat.shape[:2], dtype=np.int64)
    for start in range(0, len(flat), chunk):
        part = flat[start:start + chunk]
        for l in range(C.shape[0]):
            codes[start:start + chunk, l] = np.argmin(_sq_dists(part[:, l], C[l]), axis=1)
    return codes.reshape(x.shape[:-1])


def decode_codewords(selected, basis: QuantizerBasis) -> np.ndarray:
    """Map per-layer vectors ``(..., L, b)`` back to representation space."""
    sel = np.asarray(selected, dtype=np.float64)
    flat = sel.reshape(sel.shape[:-2] + (basis.dim,))
    return _project(flat, basis.components.T) + basis.mean


@dataclass
class QuantizerModel:
    basis: QuantizerBasis
    codebooks: np.ndarray  # (L, J, b)
    beta: float = 0.25

    @property
    def n_layers(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    def lookup(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.shape[-1] != self.n_layers:
            raise ValueError(f"semantic id length {codes.shape[-1]} != {self.n_layers}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise IndexError(f"codeword index outside [0, {self.codebook_size})")
        return self.codebooks[np.arange(self.n_layers), codes]

    def encode(self, z):
        return encode(z, self.basis)

    def assign(self, latents):
        return assign_codewords(latents, self.codebooks)

    def semantic_ids(self, z):
        return self.assign(self.encode(z))

    def decode(self, codes):
        return decode_codewords(self.lookup(codes), self.basis)

    def quantize(self, z):
        """Return ``(codes, z_hat)`` for one or many representations."""
        codes = self.semantic_ids(z)
        return codes, self.decode(codes)

    def save(self, path) -> None:
        b = self.basis
        save_tensors(path, {
            "mean": b.mean,
            "components": b.components,
            "sigma": b.sigma,
            "columns": b.columns.astype(np.float64),
            "codebooks": self.codebooks,
            "hparams": np.array([b.n_blocks, self.codebook_size, self.beta]),
            "kind": np.array([0.0 if b.kind == "user" else 1.0]),
        })

    @classmethod
    def load(cls, path) -> "QuantizerModel":
        t = load_tensors(path)
        n_blocks, _, beta = t["hparams"]
        basis = QuantizerBasis(t["mean"], t["components"], t["sigma"], t["columns"].astype(np.int64),
                               int(n_blocks), "user" if t["kind"][0] == 0.0 else "item")
        return cls(basis, t["codebooks"], float(beta))


def decode(codes, model: QuantizerModel) -> np.ndarray:
    return model.decode(codes)


def quantization_losses(z, model: QuantizerModel, beta: float | None = None):
    """Reconstruction, commitment and total loss; per row for batched input."""
    beta = model.beta if beta is None else beta
    z = np.asarray(z, dtype=np.float64)
    x = model.encode(z)
    codes = model.assign(x)
    selected = model.lookup(codes)
    z_hat = decode_codewords(selected, model.basis)
    rec = ((z_hat - z) ** 2).sum(axis=-1)
    com = ((x - selected) ** 2).sum(axis=(-2, -1))
    total = rec + beta * com
    if z.ndim == 1:
        return float(rec), float(com), float(total)
    return rec, com, total


def _seed_codewords(x: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``count`` distinct training latents by greedy D^2 sampling.

    Each step draws a few candidates with probability proportional to their
    squared distance from the latents already picked and keeps the candidate
    that lowers the total distance the most.
    """
    uniq = np.unique(x, axis=0)
    if len(uniq) < count:
        raise ValueError(f"only {len(uniq)} distinct latents for {count} codewords")
    trials = 2 + int(np.log(count))
    chosen = [int(rng.integers(len(uniq)))]
    d2 = ((uniq - uniq[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(count - 1):
        total = d2.sum()
        if total <= 0:
            chosen.append(int(np.flatnonzero(~np.isin(np.arange(len(uniq)), chosen))[0]))
            continue
        cand = rng.choice(len(uniq), size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2, ((uniq[None, :, :] - uniq[cand][:, None, :]) ** 2).sum(axis=-1))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        chosen.append(int(cand[best]))
        d2 = cand_d2[best]
    return uniq[chosen].copy()


def _layer_errors(X: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Mean squared distance from each layer's latents to their nearest codeword."""
    codes = assign_codewords(X, codebooks)
    selected = codebooks[np.arange(codebooks.shape[0]), codes]
    return ((X - selected) ** 2).sum(axis=-1).mean(axis=0)


def train_codebooks(Z, basis: QuantizerBasis, codebook_size: int, beta: float = 0.25,
                    epochs: int = 50, batch_size: int = 1024, lr: float = 1e-3,
                    rng: np.random.Generator | None = None, monitor=None,
                    n_init: int = 1) -> np.ndarray:
    """Fit per-layer codebooks by minibatch Adam on ``L_R + beta * L_C``.

    Codewords start at distinct training latents picked by D^2 sampling. A
    codeword that receives no assignment during a whole epoch is moved to a
    random training latent. With ``n_init > 1`` training is repeated from fresh
    seedings and each layer keeps the codebook with the lowest training error
    (layers do not interact through the loss, so this is the lowest L_T).
    ``monitor(epoch, codebooks)`` is called after every epoch of every run.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if codebook_size < 2:
        raise ValueError("codebook size must be at least 2")
    if codebook_size > n:
        raise ValueError(f"codebook size {codebook_size} exceeds {n} training rows")
    X = encode(Z, basis)
    best, best_err = None, None
    for _ in range(max(1, n_init)):
        codebooks = _train_once(Z, X, basis, codebook_size, beta, epochs, batch_size, lr, rng, monitor)
        err = _layer_errors(X, codebooks)
        if best is None:
            best, best_err = codebooks, err
        else:
            better = err < best_err
            best[better] = codebooks[better]
            best_err = np.where(better, err, best_err)
    return best


def _train_once(Z, X, basis, codebook_size, beta, epochs, batch_size, lr, rng, monitor):
    n = len(Z)
    L, b = basis.n_blocks, basis.block_size
    codebooks = np.stack([_seed_codewords(X[:, l], codebook_size, rng) for l in range(L)])
    params = {"codebooks": codebooks}
    state = AdamState(lr=lr)
    W = basis.components
    for epoch in range(epochs):
        usage = np.zeros((L, codebook_size), dtype=np.int64)
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x, z = X[idx], Z[idx]
            codes = assign_codewords(x, codebooks)
            selected = codebooks[np.arange(L), codes]
            z_hat = decode_codewords(selected, basis)
            # d/dr of ||z_hat - z||^2 projects the residual back through W_l
            g_rows = 2.0 * ((z_hat - z) @ W).reshape(len(idx), L, b) + 2.0 * beta * (selected - x)
            grad = np.zeros_like(codebooks)
            for l in range(L):
                np.add.at(grad[l], codes[:, l], g_rows[:, l])
                usage[l] += np.bincount(codes[:, l], minlength=codebook_size)
            adam_step(params, {"codebooks": grad / len(idx)}, state)
        dead = np.argwhere(usage == 0)
        for l, j in dead:
            codebooks[l, j] = X[rng.integers(n), l]
            for moment in (state.m, state.v):
                moment["codebooks"][l, j] = 0.0
        if len(dead):
            log.debug("epoch %d: reseeded %d dead codewords", epoch, len(dead))
        if monitor is not None:
            monitor(epoch, codebooks)
    return codebooks


def fit_quantizer(Z, n_layers: int, codebook_size: int, beta: float = 0.25, kind: str = "user",
                  epochs: int = 50, batch_size: int = 1024, lr: float = 1e-3,
                  rng: np.random.Generator | None = None, n_init: int = 1) -> QuantizerModel:
    basis = fit_basis(Z, n_layers, kind)
    codebooks = train_codebooks(Z, basis, codebook_size, beta, epochs, batch_size, lr, rng,
                                n_init=n_init)
    return QuantizerModel(basis, codebooks, beta)
