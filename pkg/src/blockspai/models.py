"""Benchmark system generators: 3D heat lattice, banded chain, random graphs.

The heat model discretizes the 3D heat equation with an explicit 7-point
stencil on a gx*gy*gz grid.  Each (x, y) column of gz cells is one subsystem,
so the local order is n = gz; the four in-plane neighbors become graph edges
carrying the face coupling c*I, with c = alpha*dt/h^2.  Cells on the boundary
keep the interior center coefficient 1 - 6c (heat leaks through the missing
faces), which keeps the global dynamics strictly stable.  Every subsystem is
driven through its bottom cell and observed at its top cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocksparse import PatternMatrix
from .errors import ValidationError
from .statespace import InterconnectedSystem, assemble_global


@dataclass(frozen=True)
class HeatModelSpec:
    gx: int
    gy: int
    gz: int
    alpha: float = 1.0
    h: float = 1.0
    dt: float = 0.1

    def __post_init__(self):
        if min(self.gx, self.gy, self.gz) < 1:
            raise ValidationError("grid dimensions must be positive")
        if self.alpha <= 0 or self.h <= 0 or self.dt <= 0:
            raise ValidationError("alpha, h, dt must be positive")
        bound = self.h ** 2 / (6.0 * self.alpha)
        if self.dt > bound:
            raise ValidationError(
                f"explicit scheme unstable: dt = {self.dt} exceeds the "
                f"admissible bound h^2/(6*alpha) = {bound:.6g}"
            )

    @property
    def coupling(self) -> float:
        return self.alpha * self.dt / self.h ** 2

    @property
    def subsystem_count(self) -> int:
        return self.gx * self.gy

    def node(self, ix: int, iy: int) -> int:
        return ix * self.gy + iy


def generate_heat3d(spec: HeatModelSpec) -> InterconnectedSystem:
    """Explicit 7-point-stencil heat dynamics as an interconnected system."""
    c = spec.coupling
    gz = spec.gz
    local = np.zeros((gz, gz))
    np.fill_diagonal(local, 1.0 - 6.0 * c)
    for z in range(gz - 1):
        local[z, z + 1] = c
        local[z + 1, z] = c

    N = spec.subsystem_count
    diag = [local.copy() for _ in range(N)]
    face = c * np.eye(gz)
    edges = {}
    if c != 0.0:
        for ix in range(spec.gx):
            for iy in range(spec.gy):
                i = spec.node(ix, iy)
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    jx, jy = ix + dx, iy + dy
                    if 0 <= jx < spec.gx and 0 <= jy < spec.gy:
                        edges[(i, spec.node(jx, jy))] = face.copy()

    bottom = np.zeros((gz, 1))
    bottom[0, 0] = 1.0
    top = np.zeros((1, gz))
    top[0, gz - 1] = 1.0
    return InterconnectedSystem(
        N=N, n=gz, m=1, r=1, edges=edges,
        diag=diag,
        B=[bottom.copy() for _ in range(N)],
        C=[top.copy() for _ in range(N)],
        D=[np.zeros((1, 1)) for _ in range(N)],
    )


def heat_lattice_pattern(spec: HeatModelSpec) -> PatternMatrix:
    """The declared adjacency of the heat model: 4-neighbor lattice plus diagonal."""
    pairs = []
    for ix in range(spec.gx):
        for iy in range(spec.gy):
            i = spec.node(ix, iy)
            pairs.append((i, i))
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < spec.gx and 0 <= jy < spec.gy:
                    pairs.append((i, spec.node(jx, jy)))
    return PatternMatrix.from_pairs(spec.subsystem_count, pairs)


def generate_banded_chain(N: int, n: int, coupling: float, rho: float) -> InterconnectedSystem:
    """1D nearest-neighbor chain with block-tridiagonal A scaled to radius rho."""
    if N < 1 or n < 1:
        raise ValidationError("N and n must be positive")
    if not (0 < rho < 1):
        raise ValidationError("target spectral radius must lie in (0, 1)")
    local = np.zeros((n, n))
    np.fill_diagonal(local, 1.0)
    for z in range(n - 1):
        local[z, z + 1] = 0.3
        local[z + 1, z] = 0.3
    diag = [local.copy() for _ in range(N)]
    edges = {}
    if coupling != 0.0:
        link = coupling * np.eye(n)
        for i in range(N - 1):
            edges[(i, i + 1)] = link.copy()
            edges[(i + 1, i)] = link.copy()

    e_first = np.zeros((n, 1))
    e_first[0, 0] = 1.0
    e_last = np.zeros((1, n))
    e_last[0, n - 1] = 1.0
    system = InterconnectedSystem(
        N=N, n=n, m=1, r=1, edges=edges,
        diag=diag,
        B=[e_first.copy() for _ in range(N)],
        C=[e_last.copy() for _ in range(N)],
        D=[np.zeros((1, 1)) for _ in range(N)],
    )
    # The chain is symmetric, so its spectral radius equals its spectral norm
    # and the rescaling below is exact up to the power-iteration tolerance.
    from .spectral import spectral_norm

    radius = spectral_norm(assemble_global(system)[0])
    return _rescaled(system, rho / radius)


@dataclass(frozen=True)
class RandomModelSpec:
    N: int
    n: int = 2
    m: int = 1
    r: int = 1
    mean_degree: float | None = None
    edge_prob: float | None = None
    spectral_radius: float = 0.9
    seed: int = 0
    positive_blocks: bool = False
    full_rank_feedthrough: bool = False

    def __post_init__(self):
        if min(self.N, self.n, self.m, self.r) < 1:
            raise ValidationError("N, n, m, r must be positive")
        if (self.mean_degree is None) == (self.edge_prob is None):
            raise ValidationError("specify exactly one of mean_degree or edge_prob")
        if not (0 < self.spectral_radius < 1):
            raise ValidationError("target spectral radius must lie in (0, 1)")


# Safety margin under the radius target: an estimate within ~1% then still
# lands strictly below the requested rho.
RADIUS_MARGIN = 0.992


def estimate_spectral_radius(A, steps: int = 400, seed: int = 0) -> float:
    """Spectral radius of a general square matrix by power iteration.

    Reads the total growth ||A^k v||^(1/k) and takes the max over the last few
    steps, which rides out the phase oscillation a dominant complex pair
    induces on any single step.
    """
    from .blocksparse import BlockSparseMatrix

    csr = A.csr if isinstance(A, BlockSparseMatrix) else A
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(csr.shape[0])
    v /= np.linalg.norm(v)
    log_total = 0.0
    estimates = []
    for k in range(1, steps + 1):
        v = csr @ v
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            return 0.0
        log_total += np.log(norm)
        v /= norm
        if k > steps - 10:
            estimates.append(np.exp(log_total / k))
    return float(max(estimates))


def _rescaled(system: InterconnectedSystem, scale: float) -> InterconnectedSystem:
    return InterconnectedSystem(
        N=system.N, n=system.n, m=system.m, r=system.r,
        edges={k: M * scale for k, M in system.edges.items()},
        diag=[M * scale for M in system.diag],
        B=system.B, C=system.C, D=system.D,
    )


def generate_random(spec: RandomModelSpec) -> InterconnectedSystem:
    """Seeded random system on a random directed graph, rescaled to the radius target."""
    rng = np.random.default_rng(spec.seed)
    N, n = spec.N, spec.n

    def block(rows, cols):
        blk = rng.standard_normal((rows, cols))
        if spec.positive_blocks:
            blk = np.abs(blk) + 0.2
        return blk

    if spec.mean_degree is not None:
        count = int(round(spec.N * spec.mean_degree))
        count = min(count, N * (N - 1))
        chosen = rng.choice(N * (N - 1), size=count, replace=False)
        pairs = []
        for idx in np.sort(chosen):
            i, rem = divmod(int(idx), N - 1)
            j = rem if rem < i else rem + 1
            pairs.append((i, j))
    else:
        pairs = [
            (i, j)
            for i in range(N)
            for j in range(N)
            if i != j and rng.random() < spec.edge_prob
        ]

    edges = {pair: block(n, n) for pair in pairs}
    diag = [block(n, n) for _ in range(N)]
    B = [block(n, spec.m) for _ in range(N)]
    C = [block(spec.r, n) for _ in range(N)]
    if spec.full_rank_feedthrough:
        dim = max(spec.r, spec.m)
        D = [np.linalg.qr(rng.standard_normal((dim, dim)))[0][:spec.r, :spec.m]
             for _ in range(N)]
    else:
        D = [np.zeros((spec.r, spec.m)) for _ in range(N)]

    system = InterconnectedSystem(N=N, n=n, m=spec.m, r=spec.r,
                                  edges=edges, diag=diag, B=B, C=C, D=D)
    radius = estimate_spectral_radius(assemble_global(system)[0], seed=spec.seed + 1)
    if radius == 0.0:
        return system
    return _rescaled(system, RADIUS_MARGIN * spec.spectral_radius / radius)
