import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from surfglm.em import SubjectInput  # noqa: E402
from surfglm.mesh import build_fem_matrices, build_projector, identity_projector  # noqa: E402
from surfglm.simulate import grid_mesh, icosphere  # noqa: E402
from surfglm.spde import build_precision, sample_gaussian_field  # noqa: E402

from dense_oracle import DenseProblem  # noqa: E402


def make_toy(seed: int, K: int = 2, T: int = 40, mesh: str = "grid", barycentric: bool = False,
             kappa2: float = 0.5, phi: float = 0.5, sigma2: float = 1.0):
    """Small problem drawn from the model itself: w from the prior, y = X Psi w + e."""
    rng = np.random.default_rng(seed)
    if mesh == "grid":
        side = int(rng.integers(4, 8))  # 16..49 vertices
        m = grid_mesh(side, side, spacing=1.0)
    else:
        m = icosphere(1, radius=3.0)  # 42 vertices
    fem = build_fem_matrices(m)
    if barycentric:
        tri = rng.integers(0, len(m.triangles), size=max(8, m.n - 5))
        w = rng.dirichlet(np.ones(3), size=len(tri))
        pts = np.einsum("ti,tid->td", w, m.vertices[m.triangles[tri]])
        proj = build_projector(m, pts)
    else:
        proj = identity_projector(m.n)
    N = proj.shape[0]
    X = rng.standard_normal((N, T, K))
    wk = [sample_gaussian_field(build_precision((kappa2, phi), fem).matrix(), np.zeros(m.n),
                                int(rng.integers(1 << 30)), 1)[0] for _ in range(K)]
    beta = np.column_stack([proj.psi @ w_ for w_ in wk])
    y = np.einsum("vtk,vk->tv", X, beta) + np.sqrt(sigma2) * rng.standard_normal((T, N))
    inp = SubjectInput(y, X, proj, fem)
    dense = DenseProblem(y, X, proj.psi.toarray(), fem.C.toarray(), fem.G.toarray())
    return m, fem, inp, dense


@pytest.fixture
def toy():
    return make_toy


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
