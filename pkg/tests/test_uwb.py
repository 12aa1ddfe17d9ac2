import itertools
import json
import math
import threading

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hybridnav.errors import (DegenerateGeometryError, DomainError, InsufficientGeometryError,
                              NoConvergenceError)
from hybridnav.geo import FrameOrigin, GeoPosition, LocalPosition, enu_to_geodetic, geodetic_to_enu
from hybridnav.gps import GpsNoiseModel, GpsSample, simulate_gps_track
from hybridnav.uwb import (Anchor, AnchorKind, AnchorRegistry, UwbRange, dump_anchor_set, gdop,
                           load_anchor_set, multilaterate, refine_anchor_position, simulate_range,
                           update_car)

ORIGIN = FrameOrigin(GeoPosition(53.3, -6.22))


def fixed(i, e, n, u=0.0):
    return Anchor(f"a{i}", LocalPosition(e, n, u))


def exact_pairs(anchors, p):
    return [(a, UwbRange(a.id, float(np.linalg.norm(p - a.position())))) for a in anchors]


# ---- eligibility

def test_car_eligibility_rule():
    car = Anchor.parked_car("c", LocalPosition(), threshold_s=300)
    assert not car.eligible
    car = update_car(car, False, 100.0)
    assert car.stationary_since == 100.0 and not car.eligible
    assert not update_car(car, False, 399.0).eligible
    assert update_car(car, False, 401.0).eligible
    moved = update_car(update_car(car, False, 401.0), True, 402.0)
    assert not moved.eligible and moved.stationary_since is None


def test_fixed_always_eligible_and_eligibility_not_trusted():
    assert fixed(0, 1, 1).eligible
    assert Anchor("x", LocalPosition(), AnchorKind.FIXED, eligible=False).eligible
    forged = Anchor("c", LocalPosition(), AnchorKind.PARKED_CAR, eligible=True)
    assert not forged.eligible


def test_time_regression_rejected():
    car = update_car(Anchor.parked_car("c", LocalPosition()), False, 10.0)
    with pytest.raises(DomainError):
        update_car(car, False, 9.0)


@given(st.lists(st.tuples(st.booleans(), st.floats(0, 200)), min_size=1, max_size=40))
def test_eligibility_monotone_until_moving(steps):
    car = Anchor.parked_car("c", LocalPosition(), threshold_s=120.0)
    t = 0.0
    was_eligible = False
    for moving, dt in steps:
        t += dt
        car = update_car(car, moving, t)
        if moving:
            assert not car.eligible
        elif was_eligible:
            assert car.eligible
        # invariant: eligible iff parked long enough
        assert car.eligible == (car.stationary_since is not None and t - car.stationary_since >= 120.0)
        was_eligible = car.eligible


# ---- georeferencing

def test_refine_single_and_zero_noise():
    truth = LocalPosition(12.0, -7.0, 1.0)
    g = enu_to_geodetic(truth, ORIGIN)
    car = Anchor.parked_car("c", LocalPosition(0, 0, 1.0))
    one = refine_anchor_position(car, [GpsSample(0, g, 2.0)], ORIGIN)
    assert one.pos_estimate.east_m == pytest.approx(12.0, abs=1e-6)
    track = simulate_gps_track(g, 3600, 10, GpsNoiseModel(base_sigma_m=0.0), seed=1)
    exact = refine_anchor_position(car, track, ORIGIN)
    assert math.dist(exact.pos_estimate.as_array(), truth.as_array()) < 1e-6
    with pytest.raises(DomainError):
        refine_anchor_position(car, [], ORIGIN)


def test_refine_variance_shrinks_with_samples():
    g = ORIGIN.origin
    track = simulate_gps_track(g, 3600, 10, seed=2)
    car = Anchor.parked_car("c", LocalPosition())
    v = [refine_anchor_position(car, track[:n], ORIGIN).pos_variance_m2[0] for n in range(1, len(track) + 1)]
    assert all(b < a for a, b in zip(v, v[1:]))


def test_refine_beats_single_sample_over_seeds():
    truth = GeoPosition(53.301, -6.221)
    wins = 0
    for seed in range(100):
        track = simulate_gps_track(truth, 4 * 3600, 10, seed=seed)
        local_truth = geodetic_to_enu(truth, ORIGIN).as_array()
        car = Anchor.parked_car("c", LocalPosition())
        est = refine_anchor_position(car, track, ORIGIN).pos_estimate.as_array()
        single = geodetic_to_enu(track[0].pos, ORIGIN).as_array()
        wins += np.linalg.norm(est - local_truth) < np.linalg.norm(single - local_truth)
    assert wins >= 95


# ---- ranging

def test_simulate_range_examples():
    a = fixed(0, 3, 4)
    assert simulate_range(LocalPosition(), a, 0.0).range_m == 5.0
    assert simulate_range(LocalPosition(3, 4), a, 0.0).range_m == 0.0
    assert simulate_range(LocalPosition(), a, 0.1, seed=7) == simulate_range(LocalPosition(), a, 0.1, seed=7)
    near = [simulate_range(LocalPosition(3, 4), a, 1.0, seed=s).range_m for s in range(50)]
    assert min(near) >= 0.0


def test_range_invariants():
    with pytest.raises(DomainError):
        UwbRange("a", -1.0)
    with pytest.raises(DomainError):
        UwbRange("a", 1.0, sigma_m=0.0)


# ---- multilateration

SQUARE = [fixed(0, 0, 0), fixed(1, 2, 0), fixed(2, 0, 2), fixed(3, 2, 2)]


def test_square_symmetric_case():
    pairs = [(a, UwbRange(a.id, math.sqrt(2))) for a in SQUARE]
    sol = multilaterate(pairs)
    assert sol.pos.east_m == pytest.approx(1.0, abs=1e-6)
    assert sol.pos.north_m == pytest.approx(1.0, abs=1e-6)
    assert sol.residual_rms_m < 1e-9


def test_too_few_and_degenerate():
    p = np.array([1.0, 1.0, 0.0])
    with pytest.raises(InsufficientGeometryError):
        multilaterate(exact_pairs(SQUARE[:2], p))
    line = [fixed(i, float(i), 0) for i in range(4)]
    with pytest.raises(DegenerateGeometryError):
        multilaterate(exact_pairs(line, p))
    planar = [fixed(i, *xy) for i, xy in enumerate([(0, 0), (5, 0), (0, 5), (5, 5)])]
    with pytest.raises(DegenerateGeometryError):
        multilaterate(exact_pairs(planar, p), dims=3)


def test_ineligible_anchors_ignored():
    p = np.array([1.0, 1.5, 0.0])
    cars = [Anchor.parked_car(f"c{i}", a.pos_estimate) for i, a in enumerate(SQUARE)]
    with pytest.raises(InsufficientGeometryError):
        multilaterate(exact_pairs(cars, p))


def test_no_convergence_carries_best():
    p = np.array([1.3, 0.4, 0.0])
    noisy = [(a, UwbRange(a.id, r.range_m + 0.05 * (-1) ** i)) for i, (a, r) in enumerate(exact_pairs(SQUARE, p))]
    with pytest.raises(NoConvergenceError) as ei:
        multilaterate(noisy, guess=LocalPosition(9, -7), max_iterations=1)
    assert ei.value.best is not None


def random_instance(rng, dims):
    while True:
        n = rng.integers(dims + 1, 8)
        A = rng.uniform(-20, 20, (n, 3))
        if dims == 2:
            A[:, 2] = rng.uniform(0, 3, n)
        p = rng.uniform(-15, 15, 3)
        if dims == 2:
            p[2] = 1.0
        anchors = [Anchor(f"a{i}", LocalPosition(*row)) for i, row in enumerate(A)]
        g = gdop(anchors, LocalPosition(*p), dims)
        if g < 20:
            return anchors, p


@pytest.mark.parametrize("dims", [2, 3])
def test_noiseless_recovery_random(dims):
    rng = np.random.default_rng(100 + dims)
    for _ in range(200):
        anchors, p = random_instance(rng, dims)
        # 2-D holds height at the guess, so hand it the true height
        guess = LocalPosition(0, 0, p[2]) if dims == 2 else None
        sol = multilaterate(exact_pairs(anchors, p), guess=guess, dims=dims)
        assert np.linalg.norm(sol.pos.as_array() - p) <= 1e-6


def test_noiseless_recovery_from_nearby_guess():
    rng = np.random.default_rng(8)
    for _ in range(200):
        anchors, p = random_instance(rng, 2)
        guess = LocalPosition(*(p[:2] + rng.normal(0, 0.5, 2)), p[2])
        sol = multilaterate(exact_pairs(anchors, p), guess=guess)
        assert np.linalg.norm(sol.pos.as_array() - p) <= 1e-6


def test_residual_never_worse_than_guess_and_cov_psd():
    rng = np.random.default_rng(3)
    for _ in range(200):
        anchors, p = random_instance(rng, 2)
        pairs = [(a, UwbRange(a.id, max(0.0, r.range_m + rng.normal(0, 0.3)), 0.3)) for a, r in exact_pairs(anchors, p)]
        guess = LocalPosition(*rng.uniform(-20, 20, 2), p[2])
        sol = multilaterate(pairs, guess=guess)

        def cost(x):
            return sum(((np.linalg.norm(x - a.position()) - r.range_m) / r.sigma_m) ** 2 for a, r in pairs)

        assert cost(sol.pos.as_array()) <= cost(guess.as_array()) + 1e-12
        C = sol.covariance
        assert np.allclose(C, C.T)
        assert np.linalg.eigvalsh(C).min() >= -1e-12


def test_anchor_variance_inflates_covariance():
    p = np.array([0.7, 1.2, 0.0])
    base = multilaterate(exact_pairs(SQUARE, p))
    fuzzy = [Anchor(a.id, a.pos_estimate, pos_variance_m2=(0.5, 0.5, 0.0)) for a in SQUARE]
    wide = multilaterate(exact_pairs(fuzzy, p))
    assert np.trace(wide.covariance) > np.trace(base.covariance)


def test_mc_oracle_rmse_20m_square():
    # oracle: the same Monte Carlo experiment with scipy's least_squares
    from scipy.optimize import least_squares

    square = [fixed(i, *xy) for i, xy in enumerate([(0, 0), (20, 0), (0, 20), (20, 20)])]
    A = np.array([a.position() for a in square])
    rng = np.random.default_rng(77)
    err_ours, err_ref = [], []
    for _ in range(300):
        p = np.array([*rng.uniform(0, 20, 2), 0.0])
        r = np.linalg.norm(p - A, axis=1) + rng.normal(0, 0.1, 4)
        sol = multilaterate([(a, UwbRange(a.id, max(x, 0.0), 0.1)) for a, x in zip(square, r)])
        ref = least_squares(lambda q: np.linalg.norm(np.r_[q, 0.0] - A, axis=1) - r, A[:, :2].mean(axis=0),
                            xtol=1e-12, ftol=1e-12)
        err_ours.append(np.linalg.norm(sol.pos.as_array()[:2] - p[:2]))
        err_ref.append(np.linalg.norm(ref.x - p[:2]))
    ours = math.sqrt(np.mean(np.square(err_ours)))
    ref = math.sqrt(np.mean(np.square(err_ref)))
    assert ours == pytest.approx(ref, rel=1e-3)
    assert ref <= 0.15


# ---- gdop

def test_gdop_square_centre_frozen():
    pos = LocalPosition(1, 1)
    diff = pos.as_array()[:2] - np.array([a.position()[:2] for a in SQUARE])
    H = diff / np.linalg.norm(diff, axis=1)[:, None]
    oracle = math.sqrt(np.trace(np.linalg.inv(H.T @ H)))
    assert gdop(SQUARE, pos) == pytest.approx(oracle, abs=1e-12)
    assert gdop(SQUARE, pos) == pytest.approx(1.0, abs=1e-12)


def test_gdop_degenerate_and_errors():
    line = [fixed(i, float(i), 0) for i in range(3)]
    assert gdop(line, LocalPosition(10, 0)) == math.inf
    with pytest.raises(DomainError):
        gdop(SQUARE[:1], LocalPosition())


def test_adding_anchor_never_increases_gdop_enumeration():
    grid = [(x, y) for x in range(0, 9, 2) for y in range(0, 9, 2)]
    pos = LocalPosition(3.3, 4.1)
    for combo in itertools.combinations(grid[::3], 3):
        base = [fixed(i, *xy) for i, xy in enumerate(combo)]
        g0 = gdop(base, pos)
        for xy in grid[1::4]:
            g1 = gdop(base + [fixed(9, *xy)], pos)
            assert g1 <= g0 * (1 + 1e-9) or g0 == math.inf


# ---- registry and JSON

def test_registry_snapshots_are_stable():
    reg = AnchorRegistry([fixed(0, 0, 0)])
    reg.upsert(Anchor.parked_car("c", LocalPosition(5, 5)))
    snap = reg.snapshot()
    reg.update_car("c", False, 0.0)
    reg.update_car("c", False, 400.0)
    assert len(snap) == 2 and not [a for a in snap if a.id == "c"][0].eligible
    assert {a.id for a in reg.eligible()} == {"a0", "c"}
    reg.remove("a0")
    assert [a.id for a in reg.snapshot()] == ["c"]


def test_registry_concurrent_readers():
    reg = AnchorRegistry()
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            s = reg.snapshot()
            seen.append(len(s))

    th = [threading.Thread(target=reader) for _ in range(4)]
    for t in th:
        t.start()
    for i in range(300):
        reg.upsert(fixed(i, i, 0))
    stop.set()
    for t in th:
        t.join()
    assert len(reg.snapshot()) == 300
    assert all(0 <= n <= 300 for n in seen)


def test_anchor_json_round_trip():
    anchors = [fixed(0, 1.5, -2.25, 3.0), Anchor.parked_car("car", LocalPosition(4, 5, 1), threshold_s=120.0)]
    text = dump_anchor_set(anchors)
    data = json.loads(text)
    assert set(data[0]) == {"id", "east_m", "north_m", "up_m", "kind", "eligible_threshold_s"}
    back = load_anchor_set(text)
    assert [(a.id, a.pos_estimate, a.kind, a.eligibility_threshold_s) for a in back] == \
        [(a.id, a.pos_estimate, a.kind, a.eligibility_threshold_s) for a in anchors]
    with pytest.raises(DomainError):
        load_anchor_set('[{"id": "x"}]')
    with pytest.raises(DomainError):
        load_anchor_set('{"id": "x"}')
