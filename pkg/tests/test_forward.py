import numpy as np
import pytest

from eitkit.forward import (
    CemSystem,
    ContactModel,
    FemContext,
    ForwardError,
    Measurement,
    PatternSet,
    adjacent_measurements,
    default_injections,
    default_patterns,
    forward_and_jacobian,
    jacobian,
    load_measurement,
    save_measurement,
    solve_forward,
    vjp,
)
from eitkit.mesh import MeshSpec, generate_disk_mesh


@pytest.fixture(scope="module")
def ctx(small_mesh):
    return FemContext(small_mesh)


@pytest.fixture(scope="module")
def patterns():
    return default_patterns(16)


def test_default_injection_set():
    inj = default_injections(16, 54)
    assert len(inj) == 54
    assert len({frozenset(p) for p in inj}) == 54
    # adjacent pairs first, then widening skips
    assert inj[0] == (0, 1) and inj[15] == (15, 0)
    assert inj[16] == (0, 2)
    assert inj[48] == (0, 4)


def test_pattern_validation():
    with pytest.raises(ForwardError):
        PatternSet(injections=((0, 0),), measurements=((0, 1),)).validate(16)
    with pytest.raises(ForwardError):
        PatternSet(injections=((0, 1), (0, 1)), measurements=((0, 1),)).validate(16)
    with pytest.raises(ForwardError):
        PatternSet(injections=((0, 21),), measurements=((0, 1),)).validate(16)


def test_contact_model_validation():
    with pytest.raises(ForwardError):
        ContactModel(0.0).per_electrode(16)
    z = ContactModel((0.01,) * 16).per_electrode(16)
    assert z.shape == (16,)


def test_homogeneous_system_well_posed(ctx, small_mesh):
    sys_ = CemSystem(ctx, np.ones(small_mesh.n_nodes))
    mat = sys_.matrix.toarray()
    assert np.allclose(mat, mat.T, atol=1e-12)
    # positive definite on the gauge-constrained block
    rng = np.random.default_rng(0)
    n, k = small_mesh.n_nodes, small_mesh.n_electrodes
    block = mat[: n + k, : n + k]
    for _ in range(5):
        x = rng.normal(size=n + k)
        x[n:] -= x[n:].mean()  # electrode potentials sum to zero
        assert x @ block @ x > 0


def test_zero_conductivity_rejected(ctx, small_mesh):
    sigma = np.ones(small_mesh.n_nodes)
    sigma[3] = 0.0
    with pytest.raises(ForwardError):
        CemSystem(ctx, sigma)


def test_adjacent_injection_dominates_own_measurement(ctx, small_mesh):
    adj = adjacent_measurements(16)
    pat = PatternSet(injections=((0, 1),), measurements=adj)
    res = solve_forward(ctx, np.ones(small_mesh.n_nodes), pat, drop_overlapping=False)
    # oracle: brute-force comparison across all adjacent measurements
    assert int(np.argmax(np.abs(res.voltages))) == 0


def test_reciprocity(ctx, small_mesh):
    adj = adjacent_measurements(16)
    pat = PatternSet(injections=adj, measurements=adj)
    res = solve_forward(ctx, np.ones(small_mesh.n_nodes), pat, drop_overlapping=False)
    v = res.voltages.reshape(16, 16)
    assert np.abs(v - v.T).max() / np.abs(v).max() < 1e-8


def test_joint_scaling_identity(small_mesh, patterns):
    c = 2.7
    base = solve_forward(FemContext(small_mesh), np.ones(small_mesh.n_nodes), patterns)
    scaled = solve_forward(
        FemContext(small_mesh, ContactModel(0.01 / c)),
        np.full(small_mesh.n_nodes, c),
        patterns,
    )
    assert np.allclose(scaled.voltages, base.voltages / c, rtol=1e-10)


def test_conductivity_scaling_approximation(ctx, small_mesh, patterns):
    base = solve_forward(ctx, np.ones(small_mesh.n_nodes), patterns)
    scaled = solve_forward(ctx, np.full(small_mesh.n_nodes, 1.1), patterns)
    rel = np.abs(scaled.voltages - base.voltages / 1.1).max() / np.abs(base.voltages).max()
    assert rel < 0.05


def test_measurement_retention_default_drops_overlaps(ctx, small_mesh, patterns):
    res = solve_forward(ctx, np.ones(small_mesh.n_nodes), patterns)
    for pi, mi in res.pairs:
        s, t = patterns.injections[pi]
        p, q = patterns.measurements[mi]
        assert not ({s, t} & {p, q})
    full = solve_forward(ctx, np.ones(small_mesh.n_nodes), patterns, drop_overlapping=False)
    assert len(full.pairs) == len(patterns.injections) * len(patterns.measurements)


def test_jacobian_matches_finite_differences(ctx, small_mesh, patterns, rng):
    delta = 1e-6
    for _ in range(3):
        sigma = np.exp(rng.normal(0.0, 0.3, small_mesh.n_nodes))
        jac = jacobian(ctx, sigma, patterns)
        cols = rng.choice(small_mesh.n_nodes, 5, replace=False)
        for n in cols:
            plus = sigma.copy()
            plus[n] += delta
            minus = sigma.copy()
            minus[n] -= delta
            fd = (
                solve_forward(ctx, plus, patterns).voltages
                - solve_forward(ctx, minus, patterns).voltages
            ) / (2 * delta)
            rel = np.abs(jac.matrix[:, n] - fd).max() / np.abs(jac.matrix[:, n]).max()
            assert rel < 1e-4


def test_jacobian_boundary_dominates_center(ctx, small_mesh, patterns):
    jac = jacobian(ctx, np.ones(small_mesh.n_nodes), patterns)
    r = np.hypot(small_mesh.nodes[:, 0], small_mesh.nodes[:, 1])
    near = np.abs(jac.matrix[:, r > 0.9]).max()
    center = np.abs(jac.matrix[:, r < 0.2]).max()
    assert near >= 10 * center


def test_jacobian_finite_for_contrast_range(ctx, small_mesh, patterns, rng):
    sigma = np.exp(rng.uniform(np.log(0.1), np.log(10.0), small_mesh.n_nodes))
    jac = jacobian(ctx, sigma, patterns)
    assert np.all(np.isfinite(jac.matrix))


def test_vjp_identities(ctx, small_mesh, patterns, rng):
    jac = jacobian(ctx, np.ones(small_mesh.n_nodes), patterns)
    n_rows = jac.matrix.shape[0]
    e3 = np.zeros(n_rows)
    e3[3] = 1.0
    assert np.array_equal(vjp(jac, e3), jac.matrix[3])
    assert np.all(vjp(jac, np.zeros(n_rows)) == 0)
    u = rng.normal(size=n_rows)
    v = rng.normal(size=small_mesh.n_nodes)
    lhs = (jac.matrix @ v) @ u
    rhs = v @ vjp(jac, u)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    with pytest.raises(ForwardError):
        vjp(jac, np.zeros(n_rows + 1))


def test_fused_matches_separate_ops(ctx, small_mesh, patterns):
    sigma = np.linspace(0.5, 1.5, small_mesh.n_nodes)
    fwd, jac = forward_and_jacobian(ctx, sigma, patterns)
    assert np.array_equal(fwd.voltages, solve_forward(ctx, sigma, patterns).voltages)
    assert np.array_equal(jac.matrix, jacobian(ctx, sigma, patterns).matrix)


def test_forward_converges_under_refinement(patterns):
    # successive voltage differences shrink along the mesh ladder
    targets = (300, 600, 1200, 2400)
    volts = []
    for t in targets:
        mesh = generate_disk_mesh(MeshSpec(target_nodes=t))
        volts.append(solve_forward(FemContext(mesh), np.ones(mesh.n_nodes), patterns).voltages)
    diffs = [np.linalg.norm(a - b) for a, b in zip(volts, volts[1:])]
    assert all(d1 > d2 for d1, d2 in zip(diffs, diffs[1:]))


def test_measurement_roundtrip(tmp_path, patterns):
    meas = Measurement(
        patterns=patterns,
        voltages=np.linspace(-1, 1, 7),
        voltages_clean=np.linspace(-1, 1, 7) * 0.99,
        meta={"snr_db": 60},
    )
    path = tmp_path / "meas.json"
    save_measurement(meas, path)
    again = load_measurement(path)
    assert np.array_equal(again.voltages, meas.voltages)
    assert np.array_equal(again.voltages_clean, meas.voltages_clean)
    assert again.patterns.injections == patterns.injections
    assert again.meta["snr_db"] == 60
