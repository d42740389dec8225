import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import plr_mixture
from uedhvac.building_env import observed_weather_bounds
from uedhvac.neural import AdamState, init_network, mc_uncertainty
from uedhvac.ou_weather import LOWER_BOUNDS, UPPER_BOUNDS
from uedhvac.ued import (
    LevelBuffer,
    MultiplierState,
    PLRConfig,
    PPOConfig,
    SearchConfig,
    Trainer,
    TrainConfig,
    active_search,
    default_plr,
    distance,
    domain_randomize,
    extragradient_step,
    objective,
    params_digest,
    plr_probabilities,
    plr_sample,
    sample_replay_decision,
    stream_rng,
    train_strategy,
)


def buffer_of(scores, timestamps, counter):
    b = LevelBuffer()
    for i, s in enumerate(scores):
        b.insert(np.full(5, float(i)))
        b.update_score(i, s)
        b.timestamps[i] = timestamps[i]
    b.counter = counter
    return b


def quadratic(center):
    center = np.asarray(center, dtype=float)

    def fn(phi, rng):
        d = phi - center
        return -float(d @ d), -2.0 * d

    return fn


def tiny_train_config(strategy, **kw):
    base = dict(strategy=strategy, seed=3, total_steps=4 * 96, episode_steps=96, normalizer_episodes=1,
                ppo=PPOConfig(hidden=(16, 16), inner_steps=2, minibatch=48),
                plr=PLRConfig(rho=0.1, beta=0.1, n_plr=2),
                search=SearchConfig(n_iters=5))
    base.update(kw)
    return TrainConfig(**base)


class TestReplayDecision:
    def test_empty_buffer_never_replays(self, rng):
        assert all(sample_replay_decision(0, 10, rng) == 0 for _ in range(1000))

    def test_half(self, rng):
        n = 10_000
        hits = sum(sample_replay_decision(5, 10, rng) for _ in range(n))
        assert abs(hits / n - 0.5) <= 3 * math.sqrt(0.25 / n)

    def test_full_buffer_always_replays(self, rng):
        assert all(sample_replay_decision(12, 10, rng) == 1 for _ in range(1000))

    def test_denominator_validated(self, rng):
        with pytest.raises(ValueError):
            sample_replay_decision(1, 0.5, rng)


class TestPLRSampling:
    def test_single_level(self, rng):
        b = buffer_of([0.3], [0], 4)
        assert all(plr_sample(b, PLRConfig(), rng) == 0 for _ in range(20))

    def test_two_level_rank_weights(self):
        b = buffer_of([10.0, 1.0], [0, 0], 0)
        np.testing.assert_allclose(plr_probabilities(b, PLRConfig(rho=0.0, beta=1.0)), [2 / 3, 1 / 3])

    def test_ties_broken_by_index(self):
        b = buffer_of([1.0, 1.0], [0, 0], 0)
        np.testing.assert_allclose(plr_probabilities(b, PLRConfig(rho=0.0, beta=1.0)), [2 / 3, 1 / 3])

    def test_pure_staleness(self, rng):
        b = buffer_of([5.0, 1.0], [0, 7], 7)
        for _ in range(20):
            b.timestamps[:] = [0, 7]
            assert plr_sample(b, PLRConfig(rho=1.0), rng) == 0

    def test_touch_on_sample(self, rng):
        b = buffer_of([1.0, 2.0, 3.0], [0, 0, 0], 9)
        i = plr_sample(b, PLRConfig(), rng)
        assert b.timestamps[i] == 9

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            plr_sample(LevelBuffer(), PLRConfig(), rng)

    def test_matches_exact_mixture(self):
        scores, stamps, counter = [0.5, 2.0, 0.1, 1.2, 0.9], [3, 0, 8, 5, 1], 10
        cfg = PLRConfig(rho=0.3, beta=0.7)
        expect = plr_mixture(scores, stamps, counter, cfg.rho, cfg.beta)
        np.testing.assert_allclose(plr_probabilities(buffer_of(scores, stamps, counter), cfg), expect, rtol=1e-12)
        b = buffer_of(scores, stamps, counter)
        rng = np.random.default_rng(0)
        counts = np.zeros(5)
        for _ in range(20_000):
            i = plr_sample(b, cfg, rng)
            counts[i] += 1
            b.timestamps[i] = stamps[i]
        assert stats.chisquare(counts, expect * counts.sum()).pvalue > 0.01


class TestBuffer:
    def test_round_trip_and_errors(self):
        b = LevelBuffer()
        i = b.insert([1, 2, 3, 4, 5])
        np.testing.assert_array_equal(b.levels[i], [1, 2, 3, 4, 5])
        assert (b.scores[i], b.timestamps[i]) == (0.0, 0)
        b.update_score(i, 0.7)
        b.counter = 4
        b.touch(i)
        assert (b.scores[i], b.timestamps[i]) == (0.7, 4)
        with pytest.raises(IndexError):
            b.update_score(3, 1.0)
        with pytest.raises(IndexError):
            b.touch(-1)
        with pytest.raises(ValueError):
            b.update_score(i, -1.0)
        again = LevelBuffer.from_state(b.state_dict())
        assert again.state_dict() == b.state_dict()

    def test_score_update_changes_sampling(self):
        b = buffer_of([1.0, 0.0], [0, 0], 0)
        cfg = PLRConfig(rho=0.0, beta=1.0)
        assert plr_probabilities(b, cfg)[0] > 0.5
        b.update_score(1, 5.0)
        assert plr_probabilities(b, cfg)[1] > 0.5

    def test_config_validation(self):
        for kw in ({"rho": 1.5}, {"beta": 0.0}, {"n_plr": 0.5}):
            with pytest.raises(ValueError):
                PLRConfig(**kw)
        with pytest.raises(ValueError):
            SearchConfig(lower=np.ones(5), upper=np.zeros(5))
        with pytest.raises(ValueError):
            SearchConfig(eta=0.0)


class TestDomainRandomization:
    def test_bounds_mean_determinism(self):
        a, b = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 10.0, 3.0])
        draws = np.array([domain_randomize(a, b, np.random.default_rng(i)) for i in range(10_000)])
        assert np.all(draws >= a) and np.all(draws <= b)
        se = (b - a) / math.sqrt(12) / 100
        assert np.all(np.abs(draws.mean(axis=0) - (a + b) / 2) < 3 * se)
        np.testing.assert_array_equal(domain_randomize(a, b, np.random.default_rng(5)), draws[5])


class TestObjective:
    @pytest.fixture
    def critic_fn(self):
        net = init_network([5, 16, 16, 1], 0.2, np.random.default_rng(0), dtype=np.float64)

        def fn(phi, rng):
            return mc_uncertainty(np.asarray(phi), net, 10, rng), np.zeros(5)

        return fn

    def test_gamma_zero_is_uncertainty(self, critic_fn):
        phi = np.array([0.5, -0.2, 0.1, 0.3, 0.0])
        assert objective(phi, np.zeros(5), 0.0, critic_fn, np.random.default_rng(1)) == \
            critic_fn(phi, np.random.default_rng(1))[0]

    def test_at_base_level_gamma_irrelevant(self, critic_fn):
        phi0 = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        vals = {objective(phi0, phi0, g, critic_fn, np.random.default_rng(2)) for g in (0.0, 0.5, 100.0)}
        assert len(vals) == 1

    def test_decreasing_in_gamma(self, critic_fn):
        phi, phi0 = np.ones(5), np.zeros(5)
        vals = [objective(phi, phi0, g, critic_fn, np.random.default_rng(2)) for g in (0.0, 0.1, 1.0, 10.0)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_distance(self):
        assert distance([3.0, 4.0], [0.0, 0.0]) == 5.0
        assert distance([3.0, 4.0], [0.0, 0.0], squared=True) == 25.0


class TestExtragradient:
    def _run(self, center, lo, hi, steps=500, eta=0.01):
        phi = np.zeros(1)
        mult = MultiplierState.zeros(1)
        adam = AdamState.zeros_like([np.zeros(3)])
        for _ in range(steps):
            phi, mult, adam = extragradient_step(phi, mult, lambda p: -2.0 * (p - center), eta,
                                                 np.array([lo]), np.array([hi]), adam)
            assert lo <= phi[0] <= hi and mult.lam[0] >= 0 and mult.nu[0] >= 0
        return phi[0]

    def test_interior_optimum(self):
        assert self._run(1.0, 0.0, 5.0) == pytest.approx(1.0, abs=1e-3)

    def test_active_bound(self):
        assert self._run(3.0, 0.0, 2.0) == pytest.approx(2.0, abs=1e-3)

    def test_zero_field(self):
        phi = np.array([0.3, -0.2])
        new, mult, _ = extragradient_step(phi, MultiplierState.zeros(2), lambda p: np.zeros(2), 0.1,
                                          -np.ones(2), np.ones(2))
        np.testing.assert_array_equal(new, phi)
        assert not mult.lam.any() and not mult.nu.any()

    def test_non_finite_aborts(self):
        from uedhvac.ued import SearchAborted
        with pytest.raises(SearchAborted):
            extragradient_step(np.zeros(2), MultiplierState.zeros(2), lambda p: np.array([np.nan, 0.0]), 0.1,
                               -np.ones(2), np.ones(2))

    @settings(max_examples=60, deadline=None)
    @given(center=st.lists(st.floats(-20, 20), min_size=3, max_size=3),
           eta=st.floats(1e-3, 2.0), adaptive=st.booleans())
    def test_projection_contract(self, center, eta, adaptive):
        a, b = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 0.5, 9.0])
        c = np.array(center)
        phi, mult = a.copy(), MultiplierState.zeros(3)
        adam = AdamState.zeros_like([np.zeros(9)]) if adaptive else None
        for _ in range(25):
            phi, mult, adam = extragradient_step(phi, mult, lambda p: -2.0 * (p - c), eta, a, b, adam)
            assert np.all(phi >= a) and np.all(phi <= b)
            assert np.all(mult.lam >= 0) and np.all(mult.nu >= 0)


class TestActiveSearch:
    def test_no_iterations_returns_base(self):
        phi0 = np.array([0.1, 0.0, -0.1, 0.0, 0.2])
        out = active_search(quadratic(np.ones(5)), phi0, SearchConfig(n_iters=0), np.random.default_rng(0),
                            -np.ones(5), np.ones(5))
        np.testing.assert_array_equal(out, phi0)

    def test_finds_surrogate_maximizer(self):
        c = np.array([0.4, -0.3, 0.2, 0.1, -0.2])
        out = active_search(quadratic(c), np.zeros(5), SearchConfig(gamma=0.0), np.random.default_rng(0),
                            -np.ones(5), np.ones(5))
        np.testing.assert_allclose(out, c, atol=5e-2)

    def test_huge_gamma_stays_at_base(self):
        c = np.array([0.4, -0.3, 0.2, 0.1, -0.2])
        phi0 = np.array([0.05, 0.0, 0.0, -0.05, 0.0])
        out = active_search(quadratic(c), phi0, SearchConfig(gamma=1e6), np.random.default_rng(0),
                            -np.ones(5), np.ones(5))
        np.testing.assert_allclose(out, phi0, atol=1e-2)

    def test_monotone_surface_improves(self):
        w = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        noise = np.random.default_rng(0)

        def fn(phi, rng):
            return float(w @ phi) + 1e-3 * rng.standard_normal(), w + 1e-3 * rng.standard_normal(5)

        cfg = SearchConfig(gamma=0.0)
        out = active_search(fn, np.zeros(5), cfg, noise, -np.ones(5), np.ones(5))
        assert w @ out > w @ np.zeros(5)

    def test_respects_bounds_and_scale(self):
        lo, hi = np.full(5, -0.5), np.full(5, 0.5)
        out = active_search(quadratic(np.full(5, 10.0)), np.zeros(5), SearchConfig(gamma=0.0, eta=0.5),
                            np.random.default_rng(0), lo, hi, scale=np.array([1, 2, 3, 4, 5.0]))
        assert np.all(out >= lo) and np.all(out <= hi)
        np.testing.assert_allclose(out, hi, atol=1e-9)

    def test_nan_gradient_returns_best_point(self):
        calls = []

        def fn(phi, rng):
            calls.append(phi.copy())
            if len(calls) > 6:
                return math.nan, np.full(5, math.nan)
            return float(phi.sum()), np.ones(5)

        lo, hi = -np.ones(5), np.ones(5)
        out = active_search(fn, np.zeros(5), SearchConfig(gamma=0.0), np.random.default_rng(0), lo, hi)
        best = max(calls[:6], key=lambda p: p.sum())
        np.testing.assert_allclose(out, best)


@pytest.fixture(scope="module")
def runs(base_year):
    out = {}
    for kind in ("vanilla", "dr", "plr", "rplr", "active_rl", "active_plr"):
        tr = Trainer(tiny_train_config(kind), base_year)
        out[kind] = (tr, tr.run())
    return out


class TestTrainer:
    def test_vanilla_uses_base_level(self, runs):
        _, recs = runs["vanilla"]
        assert all(r["phi"] == [0.0] * 5 and r["source"] == "generated" for r in recs)

    def test_every_level_in_bounds(self, runs, base_year):
        lo, hi = observed_weather_bounds(base_year.values[0])
        for kind, (_, recs) in runs.items():
            for r in recs:
                phi = np.array(r["phi"])
                assert np.all(phi >= lo - 1e-9) and np.all(phi <= hi + 1e-9), kind
                obs_w = base_year.values[0] + phi
                assert np.all(obs_w >= LOWER_BOUNDS - 1e-9) and np.all(obs_w <= UPPER_BOUNDS + 1e-9)

    def test_episode_bookkeeping(self, runs):
        for kind, (tr, recs) in runs.items():
            assert [r["episode"] for r in recs] == list(range(4))
            assert recs[-1]["step"] == 4 * 96
            if kind in ("plr", "rplr", "active_plr"):
                assert tr.buffer.counter == 4
                assert len(tr.buffer) == sum(r["source"] == "generated" for r in recs)

    def test_replay_appears_once_buffer_fills(self, runs):
        _, recs = runs["plr"]
        assert recs[0]["source"] == "generated"
        assert any(r["source"] == "replay" for r in recs)

    def test_rplr_skips_updates_on_generated_levels(self, base_year):
        tr = Trainer(tiny_train_config("rplr"), base_year)
        for _ in range(4):
            before = params_digest(tr.policy)
            rec = tr.run_episode()
            after = params_digest(tr.policy)
            assert rec["updated"] == (rec["source"] == "replay")
            assert (before == after) == (rec["source"] == "generated")

    def test_active_plr_with_huge_denominator_is_active_rl(self, base_year):
        cfg = tiny_train_config("active_plr", plr=PLRConfig(n_plr=1e12))
        recs = Trainer(cfg, base_year).run()
        assert all(r["source"] == "generated" for r in recs)
        ref = Trainer(tiny_train_config("active_rl"), base_year).run()
        assert [r["phi"] for r in recs] == [r["phi"] for r in ref]

    def test_search_moves_away_from_base_without_penalty(self, base_year):
        cfg = tiny_train_config("active_rl", search=SearchConfig(n_iters=20, gamma=0.0, eta=0.05))
        recs = Trainer(cfg, base_year).run()
        assert any(np.linalg.norm(r["phi"]) > 0 for r in recs)

    def test_deterministic(self, runs, base_year):
        for kind in ("dr", "active_plr"):
            again = Trainer(tiny_train_config(kind), base_year).run()
            assert again == runs[kind][1]

    def test_checkpoint_resume_matches_uninterrupted(self, base_year, tmp_path):
        cfg = tiny_train_config("active_plr", total_steps=6 * 96)
        full = Trainer(cfg, base_year).run()
        first = Trainer(cfg, base_year)
        head = [first.run_episode() for _ in range(3)]
        first.save(tmp_path / "ck.bin")
        second = Trainer(cfg, base_year)
        second.load(tmp_path / "ck.bin")
        tail = second.run()
        assert head + tail == full

    def test_train_strategy(self, base_year):
        policy, recs = train_strategy("dr", tiny_train_config("vanilla", total_steps=96), base_year)
        assert len(recs) == 1 and recs[0]["strategy"] == "dr"
        assert policy.actor.hidden_sizes == [16, 16]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="paired")
        with pytest.raises(ValueError):
            TrainConfig(total_steps=0)
        with pytest.raises(ValueError):
            PPOConfig(clip=1.5)


def test_strategy_specific_plr_defaults():
    assert default_plr("plr") == default_plr("rplr") == PLRConfig(rho=0.045, beta=0.0015, n_plr=10)
    assert TrainConfig(strategy="active_plr").plr == PLRConfig(rho=0.1, beta=0.1, n_plr=100)
    assert TrainConfig(strategy="rplr", plr=PLRConfig(n_plr=3)).plr.n_plr == 3


def test_stream_rng_independent_and_reproducible():
    a = stream_rng(1, "levels").random(4)
    np.testing.assert_array_equal(a, stream_rng(1, "levels").random(4))
    assert not np.array_equal(a, stream_rng(1, "rollout").random(4))
    assert not np.array_equal(a, stream_rng(2, "levels").random(4))
