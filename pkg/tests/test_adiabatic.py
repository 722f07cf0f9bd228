import math
import warnings

import numpy as np
import pytest

from qmap_adiabatic.adiabatic import (
    SERIES_FIELDS,
    PipelineConfig,
    abel_sum,
    accumulate_V,
    build_trace,
    deviation_series,
    dynamical_phase,
    evolve_exact,
    intertwining_defect,
    interaction_picture,
    kato_diagonal_blocks,
    kato_hamiltonian,
    kato_hamiltonians,
    kato_propagator,
    parts_transform,
    phase_products,
    recursion_residual,
    series_from_trace,
    shift_branch_angles,
    voff_decomposition_check,
    write_trace_csv,
    zr_decomposition,
)
from qmap_adiabatic.errors import (
    EndpointFallback,
    GapViolation,
    LabelMismatch,
    LengthMismatch,
    RankChange,
)
from qmap_adiabatic.matcore import dagger, expm_hermitian, op_norm, op_norms, pauli
from qmap_adiabatic.models import (
    Constant,
    PathSchedule,
    SampledFamily,
    model_constant,
    model_crossing,
    model_kicked,
    model_rotating_projector,
    random_hermitian,
)
from qmap_adiabatic.spectral import SpectralFrame, track_branches

SX, SY, SZ = pauli()
ROT_HALF_PI = model_rotating_projector(1.0, math.pi / 2, -math.pi / 2)


def rand_unitary(rng, d):
    return expm_hermitian(random_hermitian(d, rng), 1j * rng.uniform(0.1, 3))


# -- exact evolution --------------------------------------------------------


def test_evolve_exact_empty_schedule():
    out = evolve_exact(ROT_HALF_PI, PathSchedule(0, 1, 0))
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out[0], np.eye(2))


def test_evolve_exact_constant_is_power():
    fam = model_constant()
    U0 = fam(0.0)
    out = evolve_exact(fam, PathSchedule(0, 1, 5))
    for n in range(6):
        np.testing.assert_allclose(out[n], np.linalg.matrix_power(U0, n), atol=1e-14)


def test_evolve_exact_four_fold_product():
    fam = model_rotating_projector(1.7, 0.4, -1.9)
    sch = PathSchedule(0, 1, 4)
    U = [fam(s) for s in sch.nodes]
    oracle = U[4] @ (U[3] @ (U[2] @ U[1]))  # opposite association to the recursion
    assert op_norm(evolve_exact(fam, sch)[-1] - oracle) <= 1e-13


# -- Kato generator ---------------------------------------------------------


def test_kato_constant_family_is_zero():
    assert op_norm(kato_hamiltonian(model_constant(), 0.3, 1e-4)) == 0.0


def test_kato_single_branch_is_zero():
    fam = Constant(np.exp(0.3j) * np.eye(2))
    assert op_norm(kato_hamiltonian(fam, 0.3, 1e-4)) == 0.0


@pytest.mark.parametrize("omega", [1.0, 2.5])
def test_kato_rotating_matches_closed_form(omega):
    fam = model_rotating_projector(omega, 1.0, -0.5)
    exact = 0.5 * omega * SY
    errs = [op_norm(kato_hamiltonian(fam, 0.37, h) - exact) for h in (1e-2, 5e-3, 2.5e-3)]
    assert errs[-1] <= 1e-5
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5  # O(h^2)
    assert op_norm(kato_hamiltonian(fam, 0.37, 1e-4) - exact) <= 1e-6


def test_kato_richardson_is_more_accurate():
    fam = model_rotating_projector(1.0, 1.0, -0.5)
    plain = op_norm(kato_hamiltonian(fam, 0.2, 1e-3) - 0.5 * SY)
    rich = op_norm(kato_hamiltonian(fam, 0.2, 1e-3, richardson=True) - 0.5 * SY)
    assert rich < plain / 100


def test_kato_hermitian_on_kicked():
    fam = model_kicked(4)
    H = kato_hamiltonians(fam, np.linspace(0.05, 0.95, 40), 1e-4)
    assert np.all(op_norms(H - dagger(H)) <= 1e-9 * (1 + op_norms(H)))


def test_kato_diagonal_blocks():
    fam = model_kicked(4)
    gen, der = [], []
    for h in (1e-4, 5e-5, 2.5e-5):
        b = kato_diagonal_blocks(fam, 0.4, h)
        gen.append(b["generator"])
        der.append(b["derivative"])
    assert max(gen) <= 1e-12
    assert der[0] / der[1] >= 3.5 and der[1] / der[2] >= 3.5


def test_kato_label_mismatch_with_huge_step():
    with pytest.raises(LabelMismatch):
        kato_hamiltonian(model_rotating_projector(1.0, 1.0, -0.5), 0.0, math.pi / 2)


def test_kato_endpoint_fallback_on_sampled_family():
    rot = model_rotating_projector(1.0, 1.0, -0.5)
    s = np.linspace(0, 1, 101)
    fam = SampledFamily(s, rot.evaluate_many(s))
    with pytest.warns(EndpointFallback):
        H = kato_hamiltonian(fam, 0.0, 1e-4)
    assert op_norm(H - 0.5 * SY) <= 1e-5
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kato_hamiltonian(fam, 0.5, 1e-4)


def test_kato_rank_change_is_reported():
    with pytest.raises(RankChange):
        kato_hamiltonian(model_crossing(), 0.0, 1e-4)


# -- Kato propagator --------------------------------------------------------


def test_propagator_at_start_is_identity():
    out = kato_propagator(model_kicked(4), PathSchedule(0, 1, 0))
    np.testing.assert_array_equal(out[0], np.eye(4))


def test_propagator_constant_family_is_identity():
    out = kato_propagator(model_constant(), PathSchedule(0, 1, 10))
    assert np.max(np.abs(out - np.eye(2))) == 0.0


def test_propagator_rotating_closed_form():
    omega, s_end = 1.0, 0.8
    fam = model_rotating_projector(omega, 1.0, -0.5)
    sch = PathSchedule(0.0, s_end, 1250)  # 10^4 substeps at m = 8
    out = kato_propagator(fam, sch, 8)
    for n in (1, 625, 1250):
        exact = expm_hermitian(0.5 * omega * SY, -1j * sch.nodes[n])
        assert op_norm(out[n] - exact) <= 1e-8


def test_propagator_intertwining_second_order():
    fam = model_kicked(4)
    sch = PathSchedule(0, 1, 16)
    frames = track_branches(fam, sch)
    d = [intertwining_defect(frames, kato_propagator(fam, sch, m, frames=frames))
         for m in (8, 16, 32)]
    assert d[0] <= 1e-4
    assert d[0] / d[1] >= 3.5 and d[1] / d[2] >= 3.5


def test_propagator_projection_makes_intertwining_exact():
    fam = model_kicked(4)
    sch = PathSchedule(0, 1, 32)
    frames = track_branches(fam, sch)
    raw = kato_propagator(fam, sch, frames=frames)
    proj = kato_propagator(fam, sch, frames=frames, enforce_intertwining=True)
    assert intertwining_defect(frames, proj) <= 1e-12
    assert np.max(op_norms(proj - raw)) <= 10 * intertwining_defect(frames, raw)


# -- dynamical phase --------------------------------------------------------


def _diag_frames(N):
    s = np.arange(N + 1) / N
    P = np.array([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]).astype(complex)
    return [SpectralFrame(float(x), np.array([x, -x]), P.copy(), (1, 1)) for x in s]


def test_dynamical_phase_closed_form():
    N = 50
    U_D = dynamical_phase(_diag_frames(N))
    np.testing.assert_array_equal(U_D[0], np.eye(2))
    for n in range(N + 1):
        phi = n * (n + 1) / (2 * N)
        np.testing.assert_allclose(U_D[n], np.diag([np.exp(1j * phi), np.exp(-1j * phi)]),
                                   atol=1e-13)


def test_dynamical_phase_single_branch():
    frames = track_branches(model_constant([0.4]), PathSchedule(0, 1, 7))
    U_D = dynamical_phase(frames)
    for n in range(8):
        assert U_D[n][0, 0] == pytest.approx(np.exp(0.4j * n), abs=1e-14)


def test_dynamical_phase_commutes_with_initial_projectors():
    frames = track_branches(model_kicked(4), PathSchedule(0, 1, 20))
    U_D = dynamical_phase(frames)
    for P in frames[0].projectors:
        assert np.max(op_norms(U_D @ P - P @ U_D)) <= 1e-14


def test_dynamical_phase_length_mismatch():
    with pytest.raises(LengthMismatch):
        dynamical_phase(_diag_frames(4), PathSchedule(0, 1, 5))


# -- interaction picture and V ----------------------------------------------


def test_constant_family_interaction_picture_is_trivial():
    tr = build_trace(model_constant(), PathSchedule(0, 1, 9))
    assert np.max(np.abs(tr.W - np.eye(2))) <= 1e-14
    assert np.max(np.abs(tr.UW - np.eye(2))) <= 1e-14
    np.testing.assert_array_equal(tr.W[0], np.eye(2))


def test_rotating_recursion_residual():
    tr = build_trace(model_rotating_projector(), PathSchedule(0, 1, 64))
    assert recursion_residual(tr.W, tr.UW) <= 1e-10
    A = tr.U_kato @ tr.U_dyn
    assert np.max(op_norms(tr.W - dagger(A) @ tr.U_exact)) <= 1e-12


def test_interaction_picture_without_maps():
    tr = build_trace(model_kicked(4), PathSchedule(0, 1, 16))
    W, UW = interaction_picture(tr.U_exact, tr.U_kato, tr.U_dyn)
    assert np.max(op_norms(UW - tr.UW)) <= 1e-13


def test_interaction_picture_length_mismatch():
    eye = np.broadcast_to(np.eye(2), (3, 2, 2))
    with pytest.raises(LengthMismatch):
        interaction_picture(eye, eye[:2], eye)


def test_accumulate_V_examples():
    steps = np.broadcast_to(np.eye(3), (5, 3, 3))
    assert np.max(np.abs(accumulate_V(steps))) == 0.0
    rng = np.random.default_rng(0)
    U1 = rand_unitary(rng, 3)
    V = accumulate_V(U1[None])
    np.testing.assert_array_equal(V[1], U1 - np.eye(3))
    steps = np.array([rand_unitary(rng, 3) for _ in range(8)])
    V = accumulate_V(steps)
    for n in range(9):
        direct = np.zeros((3, 3), dtype=complex)
        for m in range(n):
            direct = direct + (steps[m] - np.eye(3))
        assert np.max(np.abs(V[n] - direct)) <= 1e-14


# -- summation by parts -----------------------------------------------------


def test_abel_worked_example():
    lhs, rhs = abel_sum([1, 2, 3], [1, 1])
    assert lhs == 2 and rhs == 2


def test_abel_zero_g():
    lhs, rhs = abel_sum(np.arange(6.0), np.zeros(5))
    assert lhs == 0 and rhs == 0


def test_abel_random_scalars():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        f = rng.normal(size=n + 1) + 1j * rng.normal(size=n + 1)
        g = rng.normal(size=n) + 1j * rng.normal(size=n)
        lhs, rhs = abel_sum(f, g)
        assert abs(lhs - rhs) <= 1e-12 * np.sum(np.abs(f)) * np.sum(np.abs(g))


def test_abel_matrices_noncommuting():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = int(rng.integers(1, 65))
        f = rng.normal(size=(n + 1, 4, 4)) + 1j * rng.normal(size=(n + 1, 4, 4))
        g = rng.normal(size=(n, 4, 4)) + 1j * rng.normal(size=(n, 4, 4))
        lhs, rhs = abel_sum(f, g)
        assert op_norm(lhs - rhs) <= 1e-12 * max(op_norm(lhs), 1.0) * n


def test_abel_length_mismatch():
    with pytest.raises(LengthMismatch):
        abel_sum([1, 2, 3], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        abel_sum([1], [])


# -- Z / R bookkeeping ------------------------------------------------------


def test_phase_products_alternate_for_opposite_angles():
    sch = PathSchedule(0, 1, 12)
    frames = track_branches(ROT_HALF_PI, sch)
    Z = phase_products(frames, 0, 1)
    assert Z[0] == 1
    np.testing.assert_allclose(Z, [(-1) ** n for n in range(13)], atol=1e-12)


def test_constant_family_R_vanishes():
    fam = model_constant()
    sch = PathSchedule(0, 1, 6)
    frames = track_branches(fam, sch)
    Uk = kato_propagator(fam, sch, frames=frames)
    zr = zr_decomposition(frames, Uk, 0, 1)
    assert np.max(np.abs(zr.R)) <= 1e-15
    chk = voff_decomposition_check(frames, Uk, 0, 1)
    assert chk["parts"] <= 1e-15 and chk["direct"] <= 1e-15


def test_zr_rejects_equal_indices_and_small_gap():
    fam = model_rotating_projector(1.0, 0.0, 5e-4)
    sch = PathSchedule(0, 1, 8)
    frames = track_branches(fam, sch)
    Uk = kato_propagator(fam, sch, frames=frames)
    with pytest.raises(ValueError):
        zr_decomposition(frames, Uk, 0, 0)
    with pytest.raises(GapViolation):
        zr_decomposition(frames, Uk, 0, 1)


def _trace_and_zr(fam, N, j=0, k=1, warp="identity"):
    tr = build_trace(fam, PathSchedule(0, 1, N, warp))
    return tr, zr_decomposition(tr.frames, tr.U_kato, j, k, tr.UW)


def test_parts_base_case_n1():
    tr, zr = _trace_and_zr(model_kicked(4), 1)
    g1 = zr.R[1] / zr.zm1[1]
    np.testing.assert_allclose(parts_transform(zr)[1], zr.Z[1] * g1 - g1, atol=1e-15)
    P0 = tr.frames[0].projectors
    assert op_norm(P0[0] @ tr.V[1] @ P0[1] - zr.Z[0] * zr.R[1]) <= 1e-13


@pytest.mark.parametrize("fam", [model_rotating_projector(), model_kicked(4)],
                         ids=["rotating", "kicked"])
def test_oscillatory_sum_identities_at_128(fam):
    tr = build_trace(fam, PathSchedule(0, 1, 128, "sine"))
    J = tr.frames[0].n_branches
    for j in range(J):
        for k in range(J):
            if j != k:
                chk = voff_decomposition_check(tr.frames, tr.U_kato, j, k, tr.V, tr.UW)
                assert chk["factorization"] <= 1e-10
                assert chk["direct"] <= 1e-10
                assert chk["parts"] <= 1e-10


def test_plus_sign_variant_of_parts_identity_fails():
    # the remainder enters with a minus sign; flipping it breaks the identity
    tr, zr = _trace_and_zr(model_kicked(4), 128, 0, 1)
    P0 = tr.frames[0].projectors
    lhs = P0[0] @ tr.V @ P0[1]
    good = parts_transform(zr)
    tail = np.zeros_like(good)
    tail[2:] = np.cumsum(zr.Z[1:-1, None, None] * zr.R2[1:-1], axis=0)
    flipped = good + 2 * tail
    assert np.max(op_norms(lhs - good)) <= 1e-10
    assert np.max(op_norms(lhs - flipped)) >= 1e-4


def test_R2_vanishes_on_uniform_rotating_grid():
    _, zr = _trace_and_zr(model_rotating_projector(), 64)
    assert np.max(op_norms(zr.R2)) <= 1e-13
    _, zr = _trace_and_zr(model_rotating_projector(), 64, warp="sine")
    assert np.max(op_norms(zr.R2)) >= 1e-6


# -- deviation series -------------------------------------------------------


def test_constant_family_series_is_exact():
    for N in (1, 7, 64):
        ser = deviation_series(model_constant(), PathSchedule(0, 1, N))
        assert max(ser.values().values()) <= 1e-10


def test_rotating_series_positive_and_finite():
    ser = deviation_series(model_rotating_projector(), PathSchedule(0, 1, 256))
    vals = ser.values()
    assert set(vals) == set(SERIES_FIELDS)
    assert 0 < ser.offdiag_W < 1 and all(math.isfinite(v) and v >= 0 for v in vals.values())
    assert ser.diagnostics["eq3_norm_residual"] <= 1e-9


def test_single_branch_series():
    ser = deviation_series(model_constant([0.4]), PathSchedule(0, 1, 16))
    assert ser.offdiag_W == 0 and ser.V_offdiag_max == 0 and ser.R2_max == 0
    assert ser.diag_W <= 1e-10


def test_two_pi_shift_invariance():
    fam = model_kicked(4)
    sch = PathSchedule(0, 1, 64)
    cfg = PipelineConfig()
    frames = track_branches(fam, sch)
    base = series_from_trace(build_trace(fam, sch, cfg, frames), cfg).values()
    for turns in ({0: 1}, {1: -3, 2: 5}, {3: 40}):
        shifted = shift_branch_angles(frames, turns)
        vals = series_from_trace(build_trace(fam, sch, cfg, shifted), cfg).values()
        for key in SERIES_FIELDS:
            assert abs(vals[key] - base[key]) <= 1e-12


def test_frobenius_norm_option_bounds_operator_norm():
    fam = model_kicked(4)
    sch = PathSchedule(0, 1, 32)
    op = deviation_series(fam, sch).values()
    fro = deviation_series(fam, sch, PipelineConfig(norm="fro")).values()
    for key in SERIES_FIELDS:
        assert op[key] <= fro[key] * (1 + 1e-12) + 1e-300


def test_trace_dump(tmp_path):
    fam = model_kicked(4)
    tr = build_trace(fam, PathSchedule(0, 1, 8))
    p = tmp_path / "trace.csv"
    write_trace_csv(tr, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("n,s_n,offdiag_W,diag_W")
    assert len(lines) == 10
