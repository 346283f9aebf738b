import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romgait.biped_env import BipedParams, biped_links, build_biped_world
from romgait.physics2d import (
    ArticulatedWorld,
    DegenerateLeg,
    LegSpec,
    LinkSpec,
    NonFiniteState,
    RigidBodyState,
    SpringLegWorld,
    TorqueDimensionMismatch,
    WorldConfig,
    mechanical_energy,
    step_world,
)


def point(pos, vel=(0.0, 0.0), mass=1.0):
    return RigidBodyState(pos, 0.0, vel, 0.0, mass, 1.0)


def oscillator(k=100.0, m=1.0, stretch=0.1, dt=1e-3, damping=0.0):
    cfg = WorldConfig(gravity=(0.0, 0.0), dt=dt, substeps=1)
    bodies = [point([0.0, 1.0 + stretch], mass=m), point([0.0, 0.0])]
    return SpringLegWorld(cfg, bodies, legs=[LegSpec(0, 1, 1.0, k, damping, 10.0)], anchored=[1])


def crossing_period(ys, dt):
    down = [i for i in range(1, len(ys)) if ys[i - 1] > 0 >= ys[i]]
    return float(np.mean(np.diff(down))) * dt


def test_free_fall_matches_symplectic_euler_recurrence():
    # v_n = -g n dt, y_n = y0 - g dt^2 n (n + 1) / 2 for the velocity-first update
    dt, g, n = 0.01, 9.81, 50
    w = SpringLegWorld(WorldConfig(dt=dt, substeps=1), [point([0.0, 100.0])])
    for _ in range(n):
        w.step([])
    assert w.vel[0, 1] == pytest.approx(-g * n * dt, rel=1e-12)
    assert w.pos[0, 1] == pytest.approx(100.0 - g * dt * dt * n * (n + 1) / 2, rel=1e-12)


@pytest.mark.parametrize("k,m", [(100.0, 1.0), (2000.0, 10.0), (400.0, 0.25)])
def test_oscillator_period_matches_analytic(k, m):
    w = oscillator(k=k, m=m)
    ys = []
    for _ in range(4000):
        w.step([0.0])
        ys.append(w.pos[0, 1] - 1.0)
    assert crossing_period(ys, 1e-3) == pytest.approx(2 * math.pi * math.sqrt(m / k), rel=0.01)


def test_undamped_oscillator_conserves_energy():
    w = oscillator()
    e0 = mechanical_energy(w)
    for _ in range(1000):
        w.step([0.0])
    assert abs(mechanical_energy(w) - e0) / e0 < 0.01


def test_damped_oscillator_loses_energy():
    w = oscillator(damping=2.0)
    e0 = mechanical_energy(w)
    for _ in range(1000):
        w.step([0.0])
    assert mechanical_energy(w) < 0.5 * e0


def test_conservative_flight_energy_drift():
    # body and foot joined by an undamped spring, tumbling through the air
    cfg = WorldConfig(dt=1e-3, substeps=1)
    bodies = [point([0.0, 50.0], vel=(1.0, 2.0), mass=10.0), point([0.3, 49.0], vel=(0.0, 0.0), mass=0.5)]
    w = SpringLegWorld(cfg, bodies, legs=[LegSpec(0, 1, 1.0, 2000.0, 0.0, 100.0)])
    e0 = mechanical_energy(w)
    for _ in range(1000):
        w.step([0.0])
    assert abs(mechanical_energy(w) - e0) / e0 < 0.01


def test_resting_body_does_not_sink():
    cfg = WorldConfig()
    w = SpringLegWorld(cfg, [point([0.0, 0.05])], contact_points=[(0, 0.0, -0.05)])
    for _ in range(300):
        w.step([])
    assert w.contact_positions()[0, 1] > -0.01
    assert abs(w.vel[0, 1]) < 1e-3
    c = w.contacts[0]
    assert c.in_contact
    assert c.normal_force == pytest.approx(9.81, rel=0.05)


def test_coulomb_friction_decelerates_sliding_block():
    # a block sliding on the ground slows at mu g until it stops
    mu, v0, dt = 0.5, 3.0, 1.0 / 240.0
    w = SpringLegWorld(WorldConfig(dt=dt, substeps=4, friction=mu),
                       [point([0.0, 0.0], vel=(v0, 0.0))], contact_points=[(0, 0.0, 0.0)])
    n = 60
    for _ in range(n):
        w.step([])
    assert w.vel[0, 0] == pytest.approx(v0 - mu * 9.81 * n * dt, abs=0.05)
    for _ in range(600):
        w.step([])
    assert abs(w.vel[0, 0]) < 1e-6
    assert w.pos[0, 0] == pytest.approx(v0 ** 2 / (2 * mu * 9.81), rel=0.03)


def test_hip_torque_is_clipped_and_recorded():
    w = oscillator()
    w.step([500.0])
    assert w.applied_torques[0] == 10.0


def test_torque_dimension_checked():
    w = oscillator()
    with pytest.raises(TorqueDimensionMismatch):
        w.step([1.0, 2.0])


def test_degenerate_initial_leg_rejected():
    cfg = WorldConfig()
    with pytest.raises(DegenerateLeg):
        SpringLegWorld(cfg, [point([0.0, 0.0]), point([0.0, 0.01])], legs=[LegSpec(0, 1, 1.0, 10.0, 0.0, 1.0)])


def test_nonfinite_torque_raises():
    w = oscillator()
    with pytest.raises((NonFiniteState, ValueError)):
        w.step([float("nan")])


def test_step_world_leaves_input_untouched():
    w = oscillator()
    before = w.pos.copy()
    nxt = step_world(w, [0.0])
    np.testing.assert_array_equal(w.pos, before)
    assert not np.array_equal(nxt.pos, before)


def test_hip_range_limit_holds_leg_near_bound():
    cfg = WorldConfig(gravity=(0.0, 0.0))
    bodies = [point([0.0, 1.0], mass=10.0), point([0.0, 0.0], mass=0.5)]
    leg = LegSpec(0, 1, 1.0, 2000.0, 10.0, 100.0, hip_range=(-0.5, 0.5))
    w = SpringLegWorld(cfg, bodies, legs=[leg], anchored=[0])
    for _ in range(240):
        w.step([30.0])
    angle = w.leg(0).hip_angle
    assert 0.5 < abs(angle) < 0.5 + 30.0 / 2000.0 + 0.02


def test_leg_kinematics_report_angle_and_rate():
    cfg = WorldConfig(gravity=(0.0, 0.0))
    bodies = [point([0.0, 0.0]), point([math.sin(0.3), -math.cos(0.3)], vel=(math.cos(0.3), math.sin(0.3)))]
    w = SpringLegWorld(cfg, bodies, legs=[LegSpec(0, 1, 1.0, 10.0, 0.0, 1.0)])
    leg = w.leg(0)
    assert leg.hip_angle == pytest.approx(0.3)
    assert leg.hip_angular_velocity == pytest.approx(1.0)
    assert leg.length_rate == pytest.approx(0.0, abs=1e-12)


# articulated chains --------------------------------------------------------------

def two_link(q0=None, qd0=None, gravity=(0.0, -9.81)):
    links = [LinkSpec("a", -1, (0.0, 0.0), (0.0, 0.0), 2.0, 0.1),
             LinkSpec("b", 0, (0.0, -0.3), (0.0, -0.25), 1.0, 0.05, torque_limit=50.0)]
    return ArticulatedWorld(WorldConfig(gravity=gravity, dt=1e-3, substeps=1), links, q0, qd0)


def total_com(world):
    _, _, com = world.kinematics()
    return (world.masses @ com) / world.masses.sum()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=6, max_size=6))
def test_internal_torques_leave_com_ballistic(torques):
    # joint torques are internal: the centre of mass accelerates at exactly g
    world = build_biped_world(BipedParams(), WorldConfig(dt=1e-3, substeps=1))
    world.q[1] += 5.0
    com0 = total_com(world)
    n = 100
    for _ in range(n):
        world.step(torques)
    drop = 0.5 * 9.81 * (n * 1e-3) ** 2
    np.testing.assert_allclose(total_com(world), com0 + [0.0, -drop], atol=2e-3)


def test_articulated_free_swing_conserves_energy():
    w = two_link(q0=[0.0, 5.0, 0.0, 0.8], gravity=(0.0, 0.0), qd0=[0.0, 0.0, 0.5, -1.0])
    e0 = w.mechanical_energy()
    for _ in range(1000):
        w.step([0.0])
    assert abs(w.mechanical_energy() - e0) / e0 < 0.01


def test_articulated_flight_energy_with_gravity():
    w = two_link(q0=[0.0, 20.0, 0.2, 0.8], qd0=[1.0, 0.0, 0.5, -1.0])
    e0 = w.mechanical_energy()
    for _ in range(1000):
        w.step([0.0])
    assert abs(w.mechanical_energy() - e0) / abs(e0) < 0.01


def test_mass_matrix_symmetric_positive_definite():
    world = build_biped_world(BipedParams(), WorldConfig())
    world.q[3:] = np.linspace(-0.4, 0.4, world.ndof - 3)
    M = world.mass_matrix()
    np.testing.assert_allclose(M, M.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_point_velocity_matches_finite_difference():
    w = two_link(q0=[0.1, 2.0, 0.3, -0.6], qd0=[0.4, -0.2, 0.7, 1.1])
    local = (0.05, -0.5)
    h = 1e-7
    p0 = w.point(1, local)
    w.q += h * w.qd
    fd = (w.point(1, local) - p0) / h
    w.q -= h * w.qd
    np.testing.assert_allclose(w.point_velocity(1, local), fd, atol=1e-5)


def test_standing_biped_contacts_stay_above_tolerance():
    world = build_biped_world(BipedParams(), WorldConfig())
    for _ in range(120):
        world.step(np.zeros(world.n_actuators))
    assert world.contact_positions()[:, 1].min() > -0.02


def test_biped_links_form_a_tree():
    links = biped_links(BipedParams())
    assert links[0].parent == -1
    assert all(0 <= l.parent < i for i, l in enumerate(links) if i)
