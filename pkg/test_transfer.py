from functools import partial

import numpy as np
import pytest

from btl import (
    FilterState,
    TransferChannel,
    isolated_step,
    primary_step,
    run_pair,
    run_primary,
    run_source,
    source_step,
    tl_update,
)
from core import GaussianBelief, Stage, TransferPacket
from errors import SingularSum, StalePacket
from filter_engine import measurement_update, predict, predict_observation
from fusion import MvfNoise, fuse, mvf_step
from harness import ExperimentConfig, FilterMode, FilterVariant, gen_measurements, gen_truth, substream, Stream
from models import (
    BEARING,
    CtModelConfig,
    MeasurementModel,
    ProcessModel,
    SensorModel,
    coordinated_turn_process,
    ct_transition,
    range_bearing,
    range_bearing_sensor,
    wrap_angle_residual,
)
from rules import RuleKind, RuleSpec, create_rule

X0 = np.array([1000.0, 300.0, 1000.0, 0.0, np.deg2rad(-3.0)])
P0 = np.diag([100.0, 10.0, 100.0, 10.0, 0.1])
LINEAR_STEPS = 50


@pytest.fixture
def turning_run():
    """Truth and both measurement streams of one replica of the turning scenario."""
    cfg = ExperimentConfig(
        model=CtModelConfig(),
        x0=X0,
        p0_diag=np.diag(P0),
        k_steps=100,
        mc_runs=1,
        seed=2024,
        source_sensor=SensorModel(intensity=1.0),
        primary_sensor=SensorModel(intensity=4.0),
        variants=(FilterVariant(RuleSpec(RuleKind.CKF3, 5), FilterMode.BTLF),),
    )
    truth = gen_truth(cfg, substream(cfg.seed, 0, Stream.TRUTH))
    z_star = gen_measurements(truth, cfg.source_sensor, substream(cfg.seed, 0, Stream.SOURCE_MEAS))
    z = gen_measurements(truth, cfg.primary_sensor, substream(cfg.seed, 0, Stream.PRIMARY_MEAS))
    return cfg, truth, z_star, z


def ct_states(spec, cfg, x0=X0, p0=P0):
    """Source and primary FilterStates on the coordinated-turn scenario."""
    rule = create_rule(spec)
    process = coordinated_turn_process(cfg.model)
    prior = GaussianBelief(x0, p0)
    return (
        FilterState(prior, rule, process, range_bearing_sensor(cfg.source_sensor)),
        FilterState(prior, rule, process, range_bearing_sensor(cfg.primary_sensor)),
    )


# --- linear-Gaussian oracles ---


@pytest.fixture
def linear_system():
    rng = np.random.default_rng(3)
    n, m = 4, 2
    A = rng.standard_normal((n, n))
    F = 0.95 * A / np.max(np.abs(np.linalg.eigvals(A)))
    H = rng.standard_normal((m, n))
    Q = np.diag(rng.uniform(0.01, 0.1, n))
    R = np.diag(rng.uniform(0.5, 1.0, m))
    R_star = 0.25 * R

    x = rng.standard_normal(n)
    z, z_star = [], []
    for _ in range(LINEAR_STEPS):
        x = F @ x + rng.multivariate_normal(np.zeros(n), Q)
        z.append(H @ x + rng.multivariate_normal(np.zeros(m), R))
        z_star.append(H @ x + rng.multivariate_normal(np.zeros(m), R_star))
    return dict(F=F, H=H, Q=Q, R=R, R_star=R_star, z=np.array(z), z_star=np.array(z_star), n=n)


def linear_states(system, spec):
    F, H = system["F"], system["H"]
    process = ProcessModel(lambda x: x @ F.T, system["Q"])
    prior = GaussianBelief(np.zeros(system["n"]), np.eye(system["n"]))
    rule = create_rule(spec)
    source = FilterState(prior, rule, process, MeasurementModel(lambda x: x @ H.T, system["R_star"]))
    primary = FilterState(prior, rule, process, MeasurementModel(lambda x: x @ H.T, system["R"]))
    return source, primary


def kalman_update(x, P, H, S_extra, innovation_target):
    S = H @ P @ H.T + S_extra
    K = P @ H.T @ np.linalg.inv(S)
    return x + K @ (innovation_target - H @ x), P - K @ S @ K.T


def oracle_isolated(system, x, P, z):
    """Closed form of predict + update with the propagated points reused: the innovation sees F P F^T only."""
    F, H, Q, R = system["F"], system["H"], system["Q"], system["R"]
    M = F @ P @ F.T
    xp = F @ x
    S = H @ M @ H.T + R
    K = M @ H.T @ np.linalg.inv(S)
    return xp + K @ (z - H @ xp), M + Q - K @ S @ K.T


def oracle_packet(system, x, P, R_star):
    F, H = system["F"], system["H"]
    return H @ F @ x, H @ F @ P @ F.T @ H.T + R_star


def oracle_two_likelihood(system, x, P, z, eta, eta_cov):
    """Transferred observation first (against F P F^T), then z against the redrawn (x_eta, P_eta)."""
    F, H, Q, R = system["F"], system["H"], system["Q"], system["R"]
    M = F @ P @ F.T
    xp = F @ x
    S = H @ M @ H.T + eta_cov
    K = M @ H.T @ np.linalg.inv(S)
    x_eta, P_eta = xp + K @ (eta - H @ xp), M + Q - K @ S @ K.T
    return kalman_update(x_eta, P_eta, H, R, z)


LINEAR_SPECS = [
    RuleSpec(RuleKind.UT, 4, kappa=2.0),
    RuleSpec(RuleKind.CKF3, 4),
    RuleSpec(RuleKind.CKF5, 4),
]


@pytest.mark.parametrize("spec", LINEAR_SPECS, ids=lambda s: s.label)
def test_isolated_filters_match_linear_oracle(linear_system, spec):
    _, primary = linear_states(linear_system, spec)
    beliefs = run_primary(primary, linear_system["z"], packets=())
    x, P = np.zeros(4), np.eye(4)
    for belief, z in zip(beliefs, linear_system["z"]):
        x, P = oracle_isolated(linear_system, x, P, z)
        np.testing.assert_allclose(belief.mean, x, atol=1e-6)
        np.testing.assert_allclose(belief.cov, P, atol=1e-6)


@pytest.mark.parametrize("spec", LINEAR_SPECS, ids=lambda s: s.label)
def test_transfer_filters_match_linear_oracle(linear_system, spec):
    source, primary = linear_states(linear_system, spec)
    paired = run_pair(source, primary, linear_system["z_star"], linear_system["z"])

    xs, Ps = np.zeros(4), np.eye(4)
    x, P = np.zeros(4), np.eye(4)
    eta = eta_cov = None
    for k, (z_star, z) in enumerate(zip(linear_system["z_star"], linear_system["z"])):
        if eta is None:
            x, P = oracle_isolated(linear_system, x, P, z)
        else:
            x, P = oracle_two_likelihood(linear_system, x, P, z, eta, eta_cov)
        xs, Ps = oracle_isolated({**linear_system, "R": linear_system["R_star"]}, xs, Ps, z_star)
        eta, eta_cov = oracle_packet(linear_system, xs, Ps, linear_system["R_star"])

        np.testing.assert_allclose(paired.source[k].mean, xs, atol=1e-6)
        np.testing.assert_allclose(paired.packets[k].eta_mean, eta, atol=1e-6)
        np.testing.assert_allclose(paired.packets[k].eta_cov, eta_cov, atol=1e-6)
        np.testing.assert_allclose(paired.primary[k].mean, x, atol=1e-6)
        np.testing.assert_allclose(paired.primary[k].cov, P, atol=1e-6)


# --- transfer mechanics ---


def test_transfer_channel_one_step_delay():
    channel = TransferChannel()
    assert channel.receive(1) is None
    channel.send(TransferPacket([1.0, 0.0], np.eye(2), produced_at=1))
    with pytest.raises(StalePacket):
        channel.send(TransferPacket([1.0, 0.0], np.eye(2), produced_at=2))
    assert channel.receive(2).produced_at == 1
    assert channel.receive(3) is None  # consumed exactly once

    channel.send(TransferPacket([1.0, 0.0], np.eye(2), produced_at=3))
    with pytest.raises(StalePacket):
        channel.receive(5)


def test_primary_step_rejects_stale_packet(turning_run):
    cfg, _, _, z = turning_run
    _, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    stale = TransferPacket(range_bearing(X0), np.eye(2), produced_at=5)
    with pytest.raises(StalePacket):
        primary_step(primary, z[0], stale)


def test_source_step_is_isolated_step_plus_packet(turning_run):
    cfg, _, z_star, _ = turning_run
    source, _ = ct_states(RuleSpec(RuleKind.UT, 5, kappa=2.0), cfg)
    posterior, packet = source_step(source, z_star[0])
    isolated = isolated_step(source, z_star[0])
    np.testing.assert_array_equal(posterior.mean, isolated.mean)
    np.testing.assert_array_equal(posterior.cov, isolated.cov)
    assert (packet.produced_at, packet.valid_for) == (1, 2)


def test_tl_update_stage(turning_run):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    _, packet = source_step(source, z_star[0])
    primary = primary.with_belief(isolated_step(primary, z[0]))
    posterior = primary_step(primary, z[1], packet)
    assert posterior.stage is Stage.POSTERIOR
    assert posterior.step == 2


def test_single_step_pair_equals_isolated(turning_run):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF5, 5), cfg)
    paired = run_pair(source, primary, z_star[:1], z[:1])
    isolated = isolated_step(primary, z[0])
    np.testing.assert_array_equal(paired.primary[0].mean, isolated.mean)
    np.testing.assert_array_equal(paired.primary[0].cov, isolated.cov)


def test_run_pair_length_mismatch(turning_run):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    with pytest.raises(ValueError):
        run_pair(source, primary, z_star[:3], z[:4])


@pytest.mark.parametrize("spec", LINEAR_SPECS, ids=lambda s: s.label)
def test_vague_packet_approaches_redrawn_isolated_update(linear_system, spec):
    """As the packet covariance grows the transfer step tends to predict, redraw, update."""
    source, primary = linear_states(linear_system, spec)
    source = source.with_belief(isolated_step(source, linear_system["z_star"][0]))
    primary = primary.with_belief(isolated_step(primary, linear_system["z"][0]))
    packet = predict_observation(source.belief, source.rule, source.process, source.measurement)
    z = linear_system["z"][1]

    pred, _ = predict(primary.belief, primary.rule, primary.process)
    reference = measurement_update(pred, primary.rule.generate(pred), primary.measurement, z)
    gaps = []
    for scale in (1e3, 1e6, 1e12):
        vague = TransferPacket(packet.eta_mean, packet.eta_cov * scale, produced_at=packet.produced_at)
        posterior = primary_step(primary, z, vague)
        gaps.append(np.abs(posterior.mean - reference.mean).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-8
    np.testing.assert_allclose(posterior.cov, reference.cov, atol=1e-8)


def test_noise_free_source_tracks_truth():
    model = CtModelConfig(q1=0.0, q2=0.0)
    sensor = SensorModel(intensity=1e-12)
    rule = create_rule(RuleSpec(RuleKind.CKF3, 5))
    source = FilterState(GaussianBelief(X0, np.zeros((5, 5))), rule, coordinated_turn_process(model), range_bearing_sensor(sensor))
    x = X0
    z_star = []
    truth = []
    for _ in range(10):
        x = ct_transition(x, model)
        truth.append(x)
        z_star.append(range_bearing(x))
    beliefs, packets = run_source(source, z_star)
    for belief, x, packet in zip(beliefs, truth, packets):
        np.testing.assert_allclose(belief.mean, x, rtol=1e-12)
        np.testing.assert_allclose(packet.eta_mean, range_bearing(ct_transition(x, model)), rtol=1e-12)


@pytest.mark.parametrize("mode", ["isolated", "btlf"])
def test_unscented_kappa_zero_equals_third_degree_cubature(turning_run, mode):
    cfg, _, z_star, z = turning_run
    results = []
    for spec in (RuleSpec(RuleKind.UT, 5, kappa=0.0), RuleSpec(RuleKind.CKF3, 5)):
        source, primary = ct_states(spec, cfg)
        if mode == "isolated":
            results.append(run_primary(primary, z, packets=()))
        else:
            results.append(run_pair(source, primary, z_star, z).primary)
    for ukf, ckf in zip(*results):
        np.testing.assert_allclose(ukf.mean, ckf.mean, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(ukf.cov, ckf.cov, rtol=1e-8, atol=1e-12)


# --- measurement vector fusion ---


def test_fuse_scalar():
    fused = fuse([2.0], [[4.0]], [0.0], [[4.0]])
    assert fused.z_tilde[0] == pytest.approx(1.0)
    assert fused.Q_tilde[0, 0] == pytest.approx(2.0)
    fused = fuse(np.array([0.0]), np.array([[1.0]]), np.array([2.0]), np.array([[1.0]]), angle_indices=())
    assert fused.z_tilde[0] == pytest.approx(1.0)
    assert fused.Q_tilde[0, 0] == pytest.approx(0.5)


def test_fuse_matches_information_form():
    Q_w = np.diag([400.0, 4e-5])
    eta_cov = np.array([[150.0, 0.01], [0.01, 2e-5]])
    fused = fuse(np.array([1500.0, 0.7]), Q_w, np.array([1490.0, 0.705]), eta_cov)
    expected = np.linalg.inv(np.linalg.inv(Q_w) + np.linalg.inv(eta_cov))
    np.testing.assert_allclose(fused.Q_tilde, expected, rtol=1e-7)
    np.testing.assert_array_equal(fused.Q_tilde, fused.Q_tilde.T)
    # the fused value lies between the two inputs, closer to the more certain one
    assert 1490.0 < fused.z_tilde[0] < 1495.0


def test_fuse_wraps_bearing():
    fused = fuse(
        np.array([1000.0, np.pi - 0.01]),
        np.diag([100.0, 1e-4]),
        np.array([1000.0, -np.pi + 0.01]),
        np.diag([100.0, 1e-4]),
        angle_indices=(BEARING,),
    )
    assert abs(wrap_angle_residual(fused.z_tilde[1], np.pi)) < 1e-12
    assert -np.pi < fused.z_tilde[1] <= np.pi


def test_fuse_singular_sum():
    with pytest.raises(SingularSum):
        fuse(np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)))


@pytest.mark.parametrize("noise", list(MvfNoise))
def test_mvf_step_runs_in_pair(turning_run, noise):
    cfg, truth, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.UT, 5, kappa=2.0), cfg)
    paired = run_pair(source, primary, z_star, z, step=partial(mvf_step, noise=noise))
    assert len(paired.primary) == cfg.k_steps
    assert paired.primary[-1].step == cfg.k_steps
    errors = np.hypot(*(paired.means(paired.primary)[:, [0, 2]] - truth[1:, [0, 2]]).T)
    assert errors.max() < 500.0


def test_mvf_noise_choice_changes_update(turning_run):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    _, packet = source_step(source, z_star[0])
    primary = primary.with_belief(isolated_step(primary, z[0]))
    fused = mvf_step(primary, z[1], packet, MvfNoise.FUSED)
    plain = mvf_step(primary, z[1], packet, MvfNoise.PRIMARY)
    assert np.trace(fused.cov) < np.trace(plain.cov)


def test_mvf_step_rejects_stale_packet(turning_run):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    _, packet = source_step(source, z_star[0])
    with pytest.raises(StalePacket):
        mvf_step(primary, z[0], packet)


def test_fuse_is_symmetric_and_tighter_than_either_input():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a, b = rng.standard_normal((2, 3, 3))
        Q_w = a @ a.T + 0.1 * np.eye(3)
        eta_cov = b @ b.T + 0.1 * np.eye(3)
        fused = fuse(rng.standard_normal(3), Q_w, rng.standard_normal(3), eta_cov)
        np.testing.assert_array_equal(fused.Q_tilde, fused.Q_tilde.T)
        tol = 1e-12 * (np.trace(Q_w) + np.trace(eta_cov))
        assert np.linalg.eigvalsh(Q_w - fused.Q_tilde).min() >= -tol
        assert np.linalg.eigvalsh(eta_cov - fused.Q_tilde).min() >= -tol


@pytest.mark.parametrize("spec", [RuleSpec(RuleKind.UT, 5, kappa=2.0), RuleSpec(RuleKind.CKF3, 5)], ids=lambda s: s.label)
def test_tl_update_never_grows_covariance(turning_run, spec):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(spec, cfg)
    paired = run_pair(source, primary, z_star, z)
    for belief, packet in zip(paired.primary[:-1], paired.packets[:-1]):
        pred, propagated = predict(belief, primary.rule, primary.process)
        updated = tl_update(pred, propagated, primary.measurement, packet)
        assert updated.stage is Stage.TL_UPDATED
        assert np.trace(updated.cov) <= np.trace(pred.cov) * (1.0 + 1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("step", [primary_step, mvf_step], ids=["btlf", "mvf"])
def test_shuffled_packet_stream_is_rejected(turning_run, seed, step):
    cfg, _, z_star, z = turning_run
    source, primary = ct_states(RuleSpec(RuleKind.CKF3, 5), cfg)
    _, packets = run_source(source, z_star[:12])
    order = np.random.default_rng(seed).permutation(len(packets))
    if np.array_equal(order, np.arange(len(packets))):
        order = order[::-1]
    with pytest.raises(StalePacket):
        run_primary(primary, z[:12], [packets[i] for i in order], step)
