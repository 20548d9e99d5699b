import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustbf import oracle
from robustbf.builders import (BeamformingInstance, ContractError, build_inner_data, build_tilde_w,
                               solve_design)
from robustbf.channel import UncertaintyRegion, sample_region_batch
from robustbf.oracle import (inner_values, interior_relaxation_point, phase_rotation_witness, sample_min,
                             sample_min_sinr, verify_robust_feasibility, worst_case_value)

from conftest import random_hermitian, random_unit


def tight_instance():
    rng = np.random.default_rng(4)
    regs = []
    for _ in range(3):
        h = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        regs.append(UncertaintyRegion(float(np.vdot(h, h).real), h / np.linalg.norm(h), 0.1, 0.1))
    return BeamformingInstance.from_db(3, 0.01, 0.0, regs)


@pytest.fixture(scope="module")
def design():
    inst = tight_instance()
    res = solve_design(inst)
    assert res.status == "RankOne"
    return inst, res


def test_identity_small_eps(rng):
    region = UncertaintyRegion(1.0, random_unit(rng, 2), 1e-6, 0.5)
    v, dv, _ = inner_values(region, np.eye(2))
    assert abs(v - 0.25) <= 1e-6 and abs(dv - 0.25) <= 1e-6


def test_zero_objective(rng):
    region = UncertaintyRegion(2.0, random_unit(rng, 3), 0.3, 0.2)
    v, dv, _ = inner_values(region, np.zeros((3, 3)))
    assert abs(v) <= 1e-8 and abs(dv) <= 1e-8


def test_origin_inside_ball(rng):
    W = random_hermitian(rng, 3)
    W = W @ W.conj().T
    region = UncertaintyRegion(0.25, random_unit(rng, 3), 0.3, 0.6)
    v, dv, _ = inner_values(region, W)
    assert abs(v) <= 1e-7 * (1 + np.linalg.norm(W, 2)) and abs(dv - v) <= 1e-6


def test_direction_only_region(rng):
    # beta = 0 and W~ = I: every channel has norm sqrt(alpha)
    region = UncertaintyRegion(2.5, random_unit(rng, 3), 0.4, 0.0)
    v, dv, wit = inner_values(region, np.eye(3))
    assert abs(v - 2.5) <= 1e-7 and abs(dv - 2.5) <= 1e-7
    if wit is not None:
        assert region.contains(wit[:3], wit[3:], tol=1e-8)


def test_witness_is_a_member_attaining_the_value(rng):
    found = 0
    for _ in range(8):
        region = UncertaintyRegion(float(rng.uniform(0.5, 4)), random_unit(rng, 2),
                                   float(rng.uniform(0.1, 1.4)), float(rng.uniform(0.05, 0.5)))
        W = random_hermitian(rng, 2)
        v, _, wit = inner_values(region, W)
        if wit is None:
            continue
        found += 1
        h, e = wit[:2], wit[2:]
        assert max(region.violations(h, e)) <= 1e-8
        assert abs(np.vdot(h, W @ h).real - v) <= 1e-6 * (1 + abs(v))
    assert found >= 4


def test_strictly_feasible_dual_point(rng):
    for _ in range(5):
        a = float(rng.uniform(0.5, 4))
        region = UncertaintyRegion(a, random_unit(rng, 3), 0.3, 0.2)
        data = build_inner_data(region, random_hermitian(rng, 3, 5.0))
        g = -1e3
        assert np.linalg.eigvalsh(oracle.dual_slack(data, 1.0, a * g, g))[0] > 0


def test_strictly_feasible_relaxation_point(rng):
    region = UncertaintyRegion(1.7, random_unit(rng, 3), 0.3, 0.2)
    data = build_inner_data(region, np.eye(3))
    r1, r2, r3 = data.rhs
    Y = interior_relaxation_point(region, 0.999)
    assert np.linalg.eigvalsh(Y)[0] > 0
    tr = [np.trace(a @ Y).real for a in (data.a1, data.a2, data.a3)]
    assert tr[0] > r1 and abs(tr[1] - r2) <= 1e-12 and tr[2] < r3


def test_sampling_sandwich_and_convergence(rng):
    region = UncertaintyRegion(1.3, random_unit(rng, 2), 0.5, 0.3)
    W = random_hermitian(rng, 2)
    v, _, _ = inner_values(region, W)
    gaps = []
    for n in (10, 1_000, 100_000):
        m = sample_min(region, W, n, np.random.default_rng(9))
        assert m >= v - 1e-9
        gaps.append(m - v)
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] <= 5e-2


def test_prefix_property(rng):
    region = UncertaintyRegion(1.0, random_unit(rng, 2), 0.8, 0.4)
    W = random_hermitian(rng, 2)
    short = sample_min(region, W, 100_000, np.random.default_rng(1))
    long = sample_min(region, W, 300_000, np.random.default_rng(1))
    assert long <= short


def test_single_sample_matches_phase_grid(rng):
    region = UncertaintyRegion(1.0, random_unit(rng, 2), 0.5, 0.3)
    W = random_hermitian(rng, 2)
    val, h = sample_min(region, W, 1, np.random.default_rng(3), return_point=True)
    assert abs(np.vdot(h, W @ h).real - val) <= 1e-12
    # the same raw draw, swept over the error phase on a grid
    hs, es = sample_region_batch(region, np.random.default_rng(3), oracle.SAMPLE_CHUNK)
    a = np.sqrt(region.alpha) * es[0]
    u = hs[0] - a
    grid = [np.vdot(a + np.exp(1j * p) * u, W @ (a + np.exp(1j * p) * u)).real
            for p in np.linspace(0, 2 * np.pi, 20001)]
    assert val <= min(grid) + 1e-12
    assert min(grid) - val <= 1e-6
    # the sweep keeps the point in the region
    assert region.contains(h, es[0], tol=1e-12)
    with pytest.raises(ValueError):
        sample_min(region, W, 0, rng)


@given(st.integers(0, 2 ** 32 - 1))
def test_objective_phase_invariance(seed):
    rng = np.random.default_rng(seed)
    W = random_hermitian(rng, 3)
    h = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    base = np.vdot(h, W @ h).real
    for th in rng.uniform(0, 2 * np.pi, 10):
        g = np.exp(1j * th) * h
        assert abs(np.vdot(g, W @ g).real - base) <= 1e-12 * (1 + abs(base))


def test_rotation_witness_examples(rng):
    region = UncertaintyRegion(2.0, random_unit(rng, 3), 0.5, 0.2)
    hs, es = sample_region_batch(region, rng, 5)
    h, e = hs[0], es[0]
    c = np.vdot(region.h_q, e)
    h0, e0 = h * np.exp(-1j * np.angle(c)), e * np.exp(-1j * np.angle(c))
    out = phase_rotation_witness(h0, e0, region)
    assert np.allclose(out[0], h0, atol=1e-15) and np.allclose(out[1], e0, atol=1e-15)
    rot = np.exp(1j * np.pi / 3)
    again = phase_rotation_witness(rot * h0, rot * e0, region)
    assert np.allclose(again[0], out[0], atol=1e-14) and np.allclose(again[1], out[1], atol=1e-14)


def test_rotation_witness_errors(rng):
    region = UncertaintyRegion(1.0, random_unit(rng, 2), 0.2, 0.1)
    far = random_unit(rng, 2)
    far = far - np.vdot(region.h_q, far) * region.h_q
    far /= np.linalg.norm(far)
    with pytest.raises(ContractError, match="h_q"):
        phase_rotation_witness(far, far, region)
    with pytest.raises(ContractError, match="is not 1"):
        phase_rotation_witness(2 * region.h_q, 2 * region.h_q, region)
    with pytest.raises(ContractError, match="above beta"):
        phase_rotation_witness(3 * region.h_q, region.h_q, region)


def test_squared_and_original_sets_share_the_minimum(rng):
    region = UncertaintyRegion(1.2, random_unit(rng, 2), 0.6, 0.3)
    W = random_hermitian(rng, 2)
    hs, es = sample_region_batch(region, rng, 20_000)
    # random common phases leave the original set but stay in the squared one
    ph = np.exp(1j * rng.uniform(0, 2 * np.pi, len(hs)))[:, None]
    hs2, es2 = ph * hs, ph * es
    r = 1 - region.epsilon ** 2 / 2
    assert np.all(np.abs(es2 @ region.h_q.conj()) ** 2 >= r ** 2 - 1e-12)
    vals = np.einsum("si,ij,sj->s", hs2.conj(), W, hs2).real
    back = []
    for h, e in zip(hs2[:300], es2[:300]):
        h1, e1 = phase_rotation_witness(h, e, region, W)
        assert region.contains(h1, e1, tol=1e-10)
        back.append(np.vdot(h1, W @ h1).real)
    assert np.allclose(back, vals[:300], atol=1e-10)
    orig = np.einsum("si,ij,sj->s", hs.conj(), W, hs).real
    v, _, _ = inner_values(region, W)
    assert abs(vals.min() - orig.min()) <= 5e-2
    assert min(vals.min(), orig.min()) >= v - 1e-9


def test_verify_passes_and_fails_when_scaled(design):
    inst, res = design
    ok, report = verify_robust_feasibility(res.beamformers, inst, tol=1e-6, n_samples=2_000,
                                           rng=np.random.default_rng(0))
    assert ok
    for k in range(inst.k_users):
        assert abs(report.sdp_value[k] - report.dual_value[k]) <= 1e-6 * (1 + abs(report.sdp_value[k]))
        assert report.sampled_min[k] >= report.sdp_value[k] - 1e-9
        assert abs(report.margin[k] - (report.sdp_value[k] - inst.sigma2[k])) <= 1e-15
    assert len(report.lines()) == inst.k_users + 1
    half = [0.5 * w for w in res.beamformers]
    ok, report = verify_robust_feasibility(half, inst, tol=1e-6)
    assert not ok and min(report.margin) < 0


def test_sampled_sinr_meets_target(design):
    inst, res = design
    for k in range(inst.k_users):
        s = sample_min_sinr(res.beamformers, inst, k, 10_000, np.random.default_rng(k))
        assert s >= inst.gamma[k] * (1 - 1e-4)


def test_verify_zero_noise_zero_beamformers(rng):
    reg = UncertaintyRegion(0.25, random_unit(rng, 2), 0.2, 0.6)
    inst = BeamformingInstance(2, (0.0, 0.0), (1.0, 1.0), (reg, reg))
    ok, report = verify_robust_feasibility([np.zeros(2), np.zeros(2)], inst)
    assert ok and max(abs(m) for m in report.margin) <= 1e-8


def test_verify_contract(design):
    inst, res = design
    with pytest.raises(ContractError):
        verify_robust_feasibility(None, inst)
    with pytest.raises(ContractError):
        verify_robust_feasibility(res.beamformers[:2], inst)


def test_worst_case_value_per_user(design):
    inst, res = design
    for k in range(inst.k_users):
        v, dv, wit = worst_case_value(res.beamformers, inst, k)
        W = build_tilde_w(res.beamformers, k, inst.gamma[k])
        if wit is not None:
            n = inst.n_t
            assert inst.regions[k].contains(wit[:n], wit[n:], tol=1e-8)
            assert abs(np.vdot(wit[:n], W @ wit[:n]).real - v) <= 1e-6 * (1 + abs(v))
