"""Shared construction helpers for the test suite."""

import numpy as np

from blockspai.statespace import InterconnectedSystem, assemble_global


def make_random_system(
    rng,
    N=5,
    n=2,
    m=1,
    r=1,
    edge_prob=0.3,
    spectral_radius=0.8,
    positive=False,
    full_rank_d=False,
):
    """Random interconnected system scaled to a prescribed spectral radius.

    positive=True makes every stored block strictly positive (entrywise), the
    regime in which structural predictions are exact instead of upper bounds.
    """

    def block(rows, cols):
        blk = rng.standard_normal((rows, cols))
        if positive:
            blk = np.abs(blk) + 0.2
        return blk

    diag = [block(n, n) for _ in range(N)]
    edges = {}
    for i in range(N):
        for j in range(N):
            if i != j and rng.random() < edge_prob:
                edges[(i, j)] = block(n, n)
    B = [block(n, m) for _ in range(N)]
    C = [block(r, n) for _ in range(N)]
    if full_rank_d:
        D = [np.linalg.qr(rng.standard_normal((max(r, m), max(r, m))))[0][:r, :m]
             for _ in range(N)]
    else:
        D = [np.zeros((r, m)) for _ in range(N)]

    system = InterconnectedSystem(N=N, n=n, m=m, r=r, edges=edges,
                                  diag=diag, B=B, C=C, D=D)
    rho = max(np.abs(np.linalg.eigvals(assemble_global(system)[0].to_dense())))
    if rho > 0 and spectral_radius is not None:
        scale = spectral_radius / rho
        diag = [M * scale for M in diag]
        edges = {k: M * scale for k, M in edges.items()}
        system = InterconnectedSystem(N=N, n=n, m=m, r=r, edges=edges,
                                      diag=diag, B=B, C=C, D=D)
    return system


def scalar_system(a, b, c, d):
    return InterconnectedSystem(
        N=1, n=1, m=1, r=1, edges={},
        diag=[np.array([[float(a)]])], B=[np.array([[float(b)]])],
        C=[np.array([[float(c)]])], D=[np.array([[float(d)]])],
    )


def spd_with_spectrum(rng, eigenvalues, block_size=1):
    """Symmetric matrix with prescribed spectrum, as a block sparse matrix."""
    from blockspai.blocksparse import BlockSparseMatrix

    eigenvalues = np.asarray(eigenvalues, dtype=float)
    dim = eigenvalues.size
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    dense = (q * eigenvalues) @ q.T
    dense = (dense + dense.T) / 2.0
    if dim % block_size != 0:
        raise ValueError("block size must divide the dimension")
    sizes = [block_size] * (dim // block_size)
    return BlockSparseMatrix.from_dense(dense, sizes, sizes), dense


def corpus_spectrum(rng, dim, kappa):
    """Spectrum with isolated extremes; power iteration resolves both ends fast."""
    interior = np.exp(rng.uniform(np.log(1.6), np.log(kappa / 1.6), dim - 2))
    return np.concatenate([[1.0, kappa], interior])
