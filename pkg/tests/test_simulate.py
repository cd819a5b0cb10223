import numpy as np
import pytest

from surfglm.em import classical_glm
from surfglm.mesh import build_fem_matrices, point_geodesic_distances
from surfglm.pipeline import prepare_subject
from surfglm.preprocess import PreprocessOptions
from surfglm.simulate import (SimulationScenario, ar_noise, field_from_centers, grid_mesh, icosphere,
                              make_block_design, make_synthetic_mesh, simulate_coefficient_field,
                              simulate_population, simulate_scan, translate_field)


def test_mesh_counts():
    s = make_synthetic_mesh("sphere", 42)
    assert s.n == 42 and len(s.triangles) == 80
    g = grid_mesh(10, 10)
    assert g.n == 100 and len(g.triangles) == 162
    assert make_synthetic_mesh("grid", 2000).n == 45 * 45
    for m in (s, g):
        fem = build_fem_matrices(m)
        assert np.abs(fem.G @ np.ones(m.n)).max() < 1e-10
    with pytest.raises(ValueError):
        make_synthetic_mesh("torus", 10)


@pytest.fixture(scope="module")
def grid():
    return make_synthetic_mesh("grid", 2000)


def test_default_field_nonzero_mean(grid):
    means = []
    for seed in range(20):
        f = simulate_coefficient_field(grid, max_coef=2.0, seed=seed)
        nz = f.values[f.values > 0]
        assert f.values.max() == pytest.approx(2.0)
        means.append(nz.mean())
    assert 0.3 <= np.mean(means) <= 0.7
    assert all(0.2 <= m <= 0.9 for m in means)


def test_plateau_and_support(grid):
    f = simulate_coefficient_field(grid, max_coef=2.0, smooth_fwhm_mm=0.0, seed=3)
    nz = f.values[f.values > 0]
    assert np.all(nz == 2.0)
    g = simulate_coefficient_field(grid, max_coef=2.0, seed=3)
    reach = g.radius + 3 * g.fwhm / (2 * np.sqrt(2 * np.log(2)))
    d = np.min([point_geodesic_distances(grid, c) for c in g.centers], axis=0)
    assert np.all(g.values[d > reach + 1e-9] == 0)
    frac = np.mean(g.values > 0)
    assert 0 < frac < 0.5


def test_translation_zero_and_amplitude(grid):
    f = simulate_coefficient_field(grid, seed=4)
    same = translate_field(grid, f, 0.0, seed=1)
    assert np.array_equal(same.values, f.values)
    moved = translate_field(grid, f, 5.0, seed=1)
    assert moved.values.max() == pytest.approx(f.values.max(), abs=1e-9)


def test_mean_displacement_on_sphere():
    m = icosphere(3)
    c = m.vertices[[5, 300]]
    f = field_from_centers(m, c, 8.0, 0.0, 2.0)
    from surfglm.simulate import CoefficientField

    fld = CoefficientField(f, c, 8.0, 0.0, 2.0)
    d = []
    for seed in range(200):
        new = translate_field(m, fld, 5.0, seed=seed)
        chord = np.linalg.norm(new.centers - c, axis=1)
        d.extend(2 * 100.0 * np.arcsin(np.minimum(chord / 200.0, 1.0)))  # great-circle distance
    assert abs(np.mean(d) / 5.0 - 1) < 0.15


def test_ar1_noise_autocorrelation():
    e = ar_noise(10_000, 1, 1.0, [0.3], np.random.default_rng(0))[:, 0]
    r1 = np.corrcoef(e[:-1], e[1:])[0, 1]
    assert abs(r1 - 0.3) < 0.05
    with pytest.raises(ValueError):
        ar_noise(10, 1, 1.0, [1.2], np.random.default_rng(0))


def test_scan_determinism_and_noiseless_recovery(grid):
    design = make_block_design(2, 300, seed=2)
    rng = np.random.default_rng(1)
    beta = rng.uniform(0, 2, (grid.n, 2))
    a = simulate_scan(grid, beta, design.X, 1.0, [0.3], seed=5)
    b = simulate_scan(grid, beta, design.X, 1.0, [0.3], seed=5)
    assert np.array_equal(a.y, b.y)
    clean = simulate_scan(grid, beta, design.X, 0.0, seed=5)
    prep = prepare_subject([clean], design.X, grid, build_fem_matrices(grid),
                           options=PreprocessOptions(ar_order=0, fwhm=0.0), design_is_scaled=True)
    est = classical_glm(prep.inp.y, prep.inp.X).beta
    assert np.abs(est - beta[prep.keep]).max() < 1e-8
    with pytest.raises(ValueError):
        simulate_scan(grid, beta, design.X[:, :1])


def test_block_design_columns_nonconstant():
    d = make_block_design(3, 300, seed=0)
    assert d.X.shape == (300, 3)
    assert np.all(d.X.std(axis=0) > 0)
    assert np.array_equal(d.X, make_block_design(3, 300, seed=0).X)


def test_population_single_subject_no_shift():
    sc = SimulationScenario(n_target=400, K=2, T=100, M=1, subject_shift_mm=0.0, seed=3)
    pop = simulate_population(sc)
    t = pop.subjects[0].truth
    assert np.array_equal(t.beta_true, t.population)
    assert np.abs(t.beta_true).max() <= sc.max_coef + 1e-12
    frac = np.mean(t.beta_true > 0)
    assert 0 < frac < 0.5


def test_population_threads_and_runs():
    sc = SimulationScenario(n_target=400, K=2, T=80, M=3, subject_shift_mm=5.0, runs=2, seed=7)
    a, b = simulate_population(sc), simulate_population(sc, threads=4)
    for s, u in zip(a.subjects, b.subjects):
        assert all(np.array_equal(x.y, y.y) for x, y in zip(s.scans, u.scans))
    eff = a.subjects[0].truth.run_effects[0]
    assert np.abs(eff).max() == pytest.approx(0.1 * sc.max_coef)
    assert np.all(eff[a.subjects[0].truth.beta_true == 0] == 0)


def test_scenario_validation_and_round_trip():
    sc = SimulationScenario(K=3, ar_coeffs=[0.2])
    assert SimulationScenario.from_dict(sc.to_dict()) == sc
    with pytest.raises(ValueError):
        SimulationScenario(K=0)
    with pytest.raises(ValueError):
        SimulationScenario.from_dict({"bogus": 1})


def test_task_supports_independent():
    corr = []
    m = make_synthetic_mesh("grid", 900)
    for seed in range(20):
        a = simulate_coefficient_field(m, seed=seed, index=0).values > 0
        b = simulate_coefficient_field(m, seed=seed, index=1).values > 0
        corr.append(np.corrcoef(a, b)[0, 1])
    assert abs(np.mean(corr)) < 0.1
