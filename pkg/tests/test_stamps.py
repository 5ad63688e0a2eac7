import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txflow.network import BigParams, Branch, Bus, BusKind, Generator, Load, Network, Shunt, VoltageControl
from txflow.nr import residual
from txflow.stamps import (
    HomotopyConfig,
    SparseSystem,
    assemble_system,
    constant_power_current,
    effective_branches,
    stamp_big_loads,
    stamp_branches,
    stamp_pq_loads,
    stamp_pv_generators,
    stamp_shunts,
    stamp_slack,
    stamp_voltage_controls,
)
from txflow.errors import VoltageCollapseFloor
from txflow.state import SolutionState

from netgen import jacobian_mismatch, random_network, random_state


def one_branch(**kw):
    br = Branch(0, 1, kw.pop("r", 0.0), kw.pop("x", 0.1), **kw)
    return Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], [br])


def single_bus(**kw):
    return Network([Bus(0, BusKind.SLACK, kw.pop("v", 1.0), kw.pop("ang", 0.0))], **kw)


class TestBranch:
    def test_lambda_zero_keeps_original(self):
        net = one_branch(r=0.2, x=0.0)  # G_i = 5
        g, *_ = effective_branches(net.arrays, HomotopyConfig(lam=0.0))
        assert g[0] == pytest.approx(5.0, rel=1e-14)

    def test_lambda_one_scales(self):
        net = one_branch(r=0.2, x=0.0)
        g, *_ = effective_branches(net.arrays, HomotopyConfig(gamma=999, lam=1.0))
        assert g[0] == pytest.approx(5000.0)

    def test_tap_and_shift_relax(self):
        net = one_branch(tap=0.95, shift=0.5236)
        _, _, _, tap, shift = effective_branches(net.arrays, HomotopyConfig(lam=1.0))
        assert tap[0] == 1.0 and shift[0] == 0.0

    def test_split_circuit_block(self):
        net = one_branch(r=0.0, x=0.1)
        sys = SparseSystem(4)
        stamp_branches(net, HomotopyConfig(), sys)
        a = sys.dense()
        # Y = -10j: G couples like parts, B the cross parts with opposite signs
        np.testing.assert_allclose(a[:2, :2], [[0, 10], [-10, 0]])
        np.testing.assert_allclose(a[:2, 2:], [[0, -10], [10, 0]])

    def test_charging_relaxed(self):
        net = one_branch(x=0.1, b_ch=0.4)
        sys0, sys1 = SparseSystem(4), SparseSystem(4)
        stamp_branches(net, HomotopyConfig(lam=0.5, gamma=0.0), sys0)
        stamp_branches(net, HomotopyConfig(lam=0.5, gamma=0.0, shunt_relax=False), sys1)
        # diagonal susceptance: -(B_series + b/2 * factor)
        assert sys0.dense()[1, 0] == pytest.approx(-10 + 0.1)
        assert sys1.dense()[1, 0] == pytest.approx(-10 + 0.2)


class TestShunt:
    @pytest.mark.parametrize("lam, g, b", [(0.0, 0.02, 0.5), (1.0, 0.0, 0.0), (0.25, 0.015, 0.375)])
    def test_factor(self, lam, g, b):
        net = single_bus(shunts=[Shunt(0, 0.02, 0.5)])
        sys = SparseSystem(4)
        stamp_shunts(net, HomotopyConfig(lam=lam), sys)
        a = sys.dense()
        assert a[0, 0] == pytest.approx(g, abs=1e-15)
        assert a[1, 0] == pytest.approx(b, abs=1e-15)


class TestSlack:
    @pytest.mark.parametrize(
        "v, ang, vr, vi",
        [(1.0, 0.0, 1.0, 0.0), (1.05, 0.0, 1.05, 0.0), (1.0, np.pi / 6, 0.866025403784, 0.5)],
    )
    def test_rows(self, v, ang, vr, vi):
        net = single_bus(v=v, ang=ang)
        sys = SparseSystem(4)
        stamp_slack(net, sys)
        a = sys.dense()
        # constraint rows pick out V_R and V_I; the current columns feed the KCL rows with -1
        np.testing.assert_array_equal(a[2:, :2], np.eye(2))
        np.testing.assert_array_equal(a[:2, 2:], -np.eye(2))
        assert sys.rhs[2] == pytest.approx(vr, abs=1e-12)
        assert sys.rhs[3] == pytest.approx(vi, abs=1e-12)

    def test_empty_network(self):
        net = single_bus(v=1.02)
        sys = assemble_system(net, SolutionState.from_voltages(net, [1.0]))
        assert sys.n == 4
        x = np.linalg.solve(sys.dense(), sys.rhs)
        np.testing.assert_allclose(x, [1.02, 0, 0, 0], atol=1e-15)


class TestConstantPower:
    def test_unit_voltage(self):
        ir, ii, _ = constant_power_current(0.5, 0.2, 1.0, 0.0)
        assert (ir, ii) == pytest.approx((0.5, -0.2))

    def test_off_axis(self):
        # hand evaluation: (0.5*0.8 + 0.2*0.2)/0.68, (0.5*0.2 - 0.2*0.8)/0.68
        ir, ii, _ = constant_power_current(0.5, 0.2, 0.8, 0.2)
        assert ir == pytest.approx(0.647058823529, abs=1e-9)
        assert ii == pytest.approx(-0.0882352941176, abs=1e-9)

    def test_no_load_no_stamp(self):
        net = Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], loads=[Load(1, 0.0, 0.0)])
        sys = SparseSystem(net.index.n)
        stamp_pq_loads(net, SolutionState.from_voltages(net, [1, 0.9 + 0.1j]), sys)
        assert not np.any(sys.dense()) and not np.any(sys.rhs)

    def test_generator_q_derivatives(self):
        # P=1, Q=0.5 at V=1: dI_R/dQ = V_I/|V|^2 = 0, dI_I/dQ = -V_R/|V|^2 = -1
        ir, ii, d = constant_power_current(1.0, 0.5, 1.0, 0.0)
        assert (ir, ii) == pytest.approx((1.0, -0.5))
        assert (d["ir_q"], d["ii_q"]) == pytest.approx((0.0, -1.0))
        h = 1e-6
        fd = (np.array(constant_power_current(1.0, 0.5 + h, 1.0, 0.0)[:2]) - constant_power_current(1.0, 0.5 - h, 1.0, 0.0)[:2]) / (2 * h)
        np.testing.assert_allclose(fd, [0.0, -1.0], atol=1e-8)

    def test_collapse_floor(self):
        net = Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], loads=[Load(1, 0.1, 0.0)])
        with pytest.raises(VoltageCollapseFloor):
            assemble_system(net, SolutionState.from_voltages(net, [1, 0.001]), collapse_floor=1e-4)


def pv_net(remote=False):
    buses = [Bus(0, BusKind.SLACK), Bus(1, BusKind.PV, 1.02), Bus(2, BusKind.PQ)]
    target = 2 if remote else 1
    return Network(
        buses,
        [Branch(0, 1, 0.0, 0.1), Branch(1, 2, 0.0, 0.1)],
        gens=[Generator(1, 0.5, 1.02, target if remote else None)],
        controls=[VoltageControl(1, target, 1.02, 0)],
    )


class TestVoltageControl:
    @pytest.mark.parametrize("vw, expected", [(1.02, 0.0), (1.0, 0.0404)])
    def test_constraint_residual(self, vw, expected):
        net = pv_net()
        st = SolutionState.from_voltages(net, [1.0, vw, 1.0])
        f = residual(net, st)
        assert f[net.index.q(0)] == pytest.approx(expected, abs=1e-12)

    def test_local_control_has_no_virtual_branch(self):
        net = pv_net()
        st = SolutionState.from_voltages(net, [1.0, 1.0, 1.0])
        sys = SparseSystem(net.index.n)
        stamp_voltage_controls(net, HomotopyConfig(lam=1.0), st, sys)
        assert np.count_nonzero(sys.dense()[:6, :6]) == 0

    def test_remote_virtual_branch(self):
        net = pv_net(remote=True)
        st = SolutionState.from_voltages(net, [1.0, 1.0, 1.0])
        for lam, g in [(0.0, 0.0), (0.5, 50.0), (1.0, 100.0)]:
            sys = SparseSystem(net.index.n)
            stamp_voltage_controls(net, HomotopyConfig(lam=lam), st, sys)
            a = sys.dense()
            assert a[2, 2] == pytest.approx(g) and a[2, 4] == pytest.approx(-g)

    def test_pv_zeta_damps_voltage_terms_only(self):
        net = pv_net()
        st = SolutionState.from_voltages(net, [1.0, 0.9 + 0.2j, 1.0], q=[0.3])
        s1, s2 = SparseSystem(net.index.n), SparseSystem(net.index.n)
        stamp_pv_generators(net, st, s1)
        stamp_pv_generators(net, st.evolve(zeta=0.5), s2)
        a1, a2 = s1.dense(), s2.dense()
        q = net.index.q(0)
        np.testing.assert_allclose(a2[2:4, 2:4], 0.5 * a1[2:4, 2:4])
        np.testing.assert_allclose(a2[2:4, q], a1[2:4, q])


class TestBigLoad:
    def test_conductance(self):
        net = Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], loads=[Load(1, big=BigParams(0.5, 0.0))])
        sys = SparseSystem(net.index.n)
        stamp_big_loads(net, sys)
        i = sys.dense()[2:4, 2:4] @ [1.0, 0.0]
        np.testing.assert_allclose(i, [0.5, 0.0])

    def test_zero(self):
        net = Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], loads=[Load(1, big=BigParams(0.0, 0.0))])
        sys = SparseSystem(net.index.n)
        stamp_big_loads(net, sys)
        assert not np.any(sys.dense()) and not np.any(sys.rhs)

    def test_susceptance_coupling(self):
        net = Network([Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)], loads=[Load(1, big=BigParams(0.4, -0.1))])
        sys = SparseSystem(net.index.n)
        stamp_big_loads(net, sys)
        i = sys.dense()[2:4, 2:4] @ [1.0, 0.0]
        # real current G*V_R - B*V_I = 0.4, imaginary B*V_R + G*V_I = -0.1
        np.testing.assert_allclose(i, [0.4, -0.1])


class TestAssemble:
    def test_two_bus_flat_start(self, two_bus):
        st = SolutionState.from_voltages(two_bus, [1.0, 1.0])
        sys = assemble_system(two_bus, st)
        assert sys.dense().shape == (6, 6)
        x = np.linalg.solve(sys.dense(), sys.rhs)
        # the linearized problem is solved exactly: its residual at x matches the matrix prediction
        a = sys.dense()
        np.testing.assert_allclose(a @ x - sys.rhs, 0, atol=1e-12)

    def test_lambda_one_diagonal_dominance(self, three_bus):
        st = SolutionState.from_voltages(three_bus, [1.05, 1.02, 1.0])
        a = assemble_system(three_bus, st, HomotopyConfig(gamma=999, lam=1.0)).dense()
        gmax = max(abs(b.g_series) for b in three_bus.branches)
        assert np.all(np.abs(np.diag(a)[:6:2]) >= 999 * gmax)

    def test_endpoint_identity(self, three_bus):
        st = SolutionState.from_voltages(three_bus, [1.05, 1.0 + 0.1j, 0.9 - 0.1j], q=[0.2])
        a0 = assemble_system(three_bus, st, HomotopyConfig(lam=0.0, gamma=999))
        a_off = assemble_system(three_bus, st)
        for u, v in zip(a0.triplets(), a_off.triplets()):
            np.testing.assert_array_equal(u, v)
        np.testing.assert_array_equal(a0.rhs, a_off.rhs)

    def test_lambda_one_taps_neutral(self, three_bus):
        import dataclasses

        st = SolutionState.from_voltages(three_bus, [1.05, 1.0 + 0.1j, 0.9 - 0.1j], q=[0.2])
        plain = dataclasses.replace(
            three_bus, branches=[dataclasses.replace(b, tap=1.0, shift=0.0) for b in three_bus.branches]
        )
        cfg = HomotopyConfig(lam=1.0)
        np.testing.assert_allclose(assemble_system(three_bus, st, cfg).dense(), assemble_system(plain, st, cfg).dense())

    def test_double_stamp_doubles(self, three_bus):
        st = SolutionState.from_voltages(three_bus, [1.05, 1.0 + 0.1j, 0.9 - 0.1j], q=[0.2])
        once, twice = SparseSystem(9), SparseSystem(9)
        stamp_pq_loads(three_bus, st, once)
        stamp_pq_loads(three_bus, st, twice)
        stamp_pq_loads(three_bus, st, twice)
        np.testing.assert_array_equal(twice.dense(), 2 * once.dense())
        np.testing.assert_array_equal(twice.rhs, 2 * once.rhs)

    def test_sign_convention_cancels(self):
        p, q = 0.7, 0.3
        net = Network(
            [Bus(0, BusKind.SLACK)],
            gens=[Generator(0, p, 1.0)],
            loads=[Load(0, p, q)],
            controls=[VoltageControl(0, 0, 1.0, 0)],
        )
        st = SolutionState.from_voltages(net, [1.0], q=[q])
        f = residual(net, st)
        np.testing.assert_allclose(f, 0.0, atol=1e-14)

    def test_structural_symmetry(self, three_bus):
        st = SolutionState.from_voltages(three_bus, [1.05, 1.0 + 0.1j, 0.9 - 0.1j], q=[0.2])
        pat = assemble_system(three_bus, st).dense() != 0
        assert np.array_equal(pat, pat.T)

    def test_deterministic_triplets(self, three_bus):
        st = SolutionState.from_voltages(three_bus, [1.05, 1.0 + 0.1j, 0.9 - 0.1j], q=[0.2])
        a, b = assemble_system(three_bus, st), assemble_system(three_bus, st)
        for u, v in zip(a.triplets(), b.triplets()):
            np.testing.assert_array_equal(u, v)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.sampled_from([0.0, 0.3, 1.0]))
def test_jacobian_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    state = random_state(net, rng)
    cfg = HomotopyConfig(lam=lam, gamma=float(rng.uniform(0, 50)))
    bad, a, fd = jacobian_mismatch(net, state, cfg)
    assert bad.size == 0, f"mismatch at {bad[:5].tolist()}"
    sys = assemble_system(net, state, cfg)
    # matrix and history terms reproduce the exact residual at the expansion point
    np.testing.assert_allclose(a @ state.x - sys.rhs, residual(net, state, cfg), atol=1e-9)
