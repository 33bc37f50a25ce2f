import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fairorder.clock_stats import EmpiricalOffset, GaussianOffset, model_to_dict, offset_cdf
from fairorder.fair_order import Message
from fairorder.sim import (
    CSV_COLUMNS,
    ConfigError,
    SimConfig,
    Sweep,
    build_online_events,
    generate_workload,
    ras,
    run_sweep,
    run_trial,
    sample_offsets,
    summarize,
    trial_rng,
    truetime_rank,
    wfo_order,
    wfo_rank,
)
from fairorder.online import Heartbeat, MessageArrival

from .conftest import DICE, dice_model


def brute_ras(ranks, truth):
    total = 0
    for a, b in itertools.combinations(truth, 2):
        if truth[a] > truth[b]:
            a, b = b, a
        total += int(np.sign(ranks[b] - ranks[a]))
    return total


def offsets_by_client(messages):
    out = {}
    for m in messages:
        out.setdefault(m.client, []).append(m.true_ts - m.local_ts)
    return {c: np.array(v) for c, v in out.items()}


class TestSimConfig:
    @pytest.mark.parametrize(
        "kw, field",
        [
            ({"n_clients": 0}, "n_clients"),
            ({"sigma_range": (2.0, 1.0)}, "sigma_range"),
            ({"mean_gap_us": 0.0}, "mean_gap_us"),
            ({"gap_model": "poisson"}, "gap_model"),
            ({"threshold": 1.0}, "threshold"),
            ({"p_safe": 0.5}, "p_safe"),
            ({"baselines": ("tommy", "lamport")}, "baselines"),
            ({"mode": "batch"}, "mode"),
            ({"network_delay_us": -1.0}, "network_delay_us"),
            ({"models": {"a": {"kind": "gaussian", "mean": 0, "std": 1}}}, "models"),
        ],
    )
    def test_validation_names_field(self, kw, field):
        with pytest.raises(ConfigError, match=f"^{field}:"):
            SimConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = SimConfig(n_clients=3, sigma_range=(0.1, 0.2), baselines=("tommy",), seed=9)
        assert SimConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="^colour: unknown"):
            SimConfig.from_dict({"colour": "blue"})


class TestWorkload:
    def test_zero_sigma_is_exact(self):
        msgs, _ = generate_workload(SimConfig(n_clients=5, n_messages_per_client=10, sigma_scale=0.0))
        assert all(m.local_ts == m.true_ts for m in msgs)

    def test_deterministic(self):
        cfg = SimConfig(n_clients=7, n_messages_per_client=5, seed=3)
        assert generate_workload(cfg, 2) == generate_workload(cfg, 2)
        assert generate_workload(cfg, 2) != generate_workload(cfg, 3)

    def test_shape_and_per_client_increasing_truth(self):
        cfg = SimConfig(n_clients=6, n_messages_per_client=8, seed=1)
        msgs, models = generate_workload(cfg)
        assert len(msgs) == 48 and len(models) == 6
        assert len({m.id for m in msgs}) == 48
        for c in models:
            t = [m.true_ts for m in msgs if m.client == c]
            assert len(t) == 8 and all(a < b for a, b in zip(t, t[1:]))

    def test_fixed_gap(self):
        msgs, _ = generate_workload(SimConfig(n_clients=3, n_messages_per_client=4, gap_model="fixed", mean_gap_us=2.5))
        assert sorted(m.true_ts for m in msgs) == pytest.approx([2.5 * (k + 1) for k in range(12)])

    def test_explicit_models(self):
        models = {"east": model_to_dict(GaussianOffset(1.0, 0.0)), "west": model_to_dict(dice_model(DICE["X"]))}
        msgs, got = generate_workload(SimConfig(n_clients=2, n_messages_per_client=50, models=models))
        assert set(got) == {"east", "west"}
        for m in msgs:
            if m.client == "east":
                assert m.true_ts - m.local_ts == pytest.approx(1.0)

    def test_empirical_sampler_matches_cdf(self):
        model = EmpiricalOffset(np.array([-1.0, 0.0, 0.5, 3.0]), np.array([0.3, 0.0, 0.28]))
        x = sample_offsets(model, np.random.default_rng(4), 20_000)
        assert np.all((x >= -1.0) & (x <= 3.0))
        assert not np.any((x > 0.0) & (x < 0.5))
        res = stats.kstest(x, lambda v: np.array([offset_cdf(model, float(u)) for u in np.atleast_1d(v)]))
        assert res.pvalue > 1e-3

    @pytest.mark.xfail(
        strict=True,
        reason=(
            "a per-client 5% bound on the sample std at 1e3 samples is about a 2.2-sigma event, "
            "so roughly 2.5% of 500 correctly sampled clients exceed it"
        ),
    )
    def test_sample_moments_every_client_within_5pct(self, large_workload):
        msgs, models = large_workload
        for c, th in offsets_by_client(msgs).items():
            assert abs(th.mean() / models[c].mean - 1) <= 0.05
            assert abs(th.std(ddof=1) / models[c].std - 1) <= 0.05

    def test_sample_moments_calibrated(self, large_workload):
        msgs, models = large_workload
        by = offsets_by_client(msgs)
        assert all(abs(th.mean() / models[c].mean - 1) <= 0.05 for c, th in by.items())
        n = len(next(iter(by.values())))
        # exact chance that a correct sampler's std lands outside 5%: (n-1) s^2 / sigma^2 ~ chi2(n-1)
        chi = stats.chi2(n - 1)
        p_out = chi.cdf((n - 1) * 0.95**2) + chi.sf((n - 1) * 1.05**2)
        outside = sum(abs(th.std(ddof=1) / models[c].std - 1) > 0.05 for c, th in by.items())
        lo, hi = stats.binom(len(by), p_out).ppf([0.0005, 0.9995])
        assert lo <= outside <= hi


@pytest.fixture(scope="module")
def large_workload():
    cfg = SimConfig(n_clients=500, n_messages_per_client=1000, mean_range=(5.0, 20.0), seed=0)
    return generate_workload(cfg)


class TestTrueTime:
    def test_zero_sigma_distinct(self):
        msgs = [Message("b", "c", 2.0), Message("a", "c", 1.0), Message("z", "c", 3.0)]
        assert truetime_rank(msgs, {"c": GaussianOffset(0, 0)}) == {"a": 0, "b": 1, "z": 2}

    def test_overlap_merge(self):
        # std 1/3 with width 3 gives intervals [0,2], [1,3], [10,12]
        msgs = [Message("a", "c", 1.0), Message("b", "c", 2.0), Message("c", "c", 11.0)]
        assert truetime_rank(msgs, {"c": GaussianOffset(0, 1 / 3)}) == {"a": 0, "b": 0, "c": 1}

    def test_transitive_chain(self):
        msgs = [Message(str(k), "c", float(k)) for k in range(5)]
        assert set(truetime_rank(msgs, {"c": GaussianOffset(0, 0.2)}).values()) == {0}

    def test_huge_sigma_all_one_rank(self):
        msgs, models = generate_workload(SimConfig(n_clients=5, n_messages_per_client=5, sigma_scale=1e6))
        r = truetime_rank(msgs, models)
        assert set(r.values()) == {0}
        assert ras(r, {m.id: m.true_ts for m in msgs}) == 0

    def test_empirical_uses_mean_and_std(self):
        model = EmpiricalOffset(np.array([0.0, 2.0]), np.array([0.5]))
        r = truetime_rank([Message("a", "c", 0.0), Message("b", "c", 3.5)], {"c": model})
        assert r == {"a": 0, "b": 1}
        r = truetime_rank([Message("a", "c", 0.0), Message("b", "c", 3.4)], {"c": model})
        assert r == {"a": 0, "b": 0}

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 5)), min_size=1, max_size=25))
    def test_matches_overlap_components(self, intervals):
        msgs = [Message(f"m{k}", f"c{k}", t) for k, (t, _) in enumerate(intervals)]
        models = {f"c{k}": GaussianOffset(0.0, s) for k, (_, s) in enumerate(intervals)}
        r = truetime_rank(msgs, models)
        iv = [(t - 3 * s, t + 3 * s) for t, s in intervals]
        # connected components of the interval intersection graph, by repeated relabeling
        comp = list(range(len(iv)))
        changed = True
        while changed:
            changed = False
            for a, b in itertools.combinations(range(len(iv)), 2):
                if iv[a][0] <= iv[b][1] and iv[b][0] <= iv[a][1] and comp[a] != comp[b]:
                    lo = min(comp[a], comp[b])
                    comp = [lo if c in (comp[a], comp[b]) else c for c in comp]
                    changed = True
        for a, b in itertools.combinations(range(len(iv)), 2):
            same = comp[a] == comp[b]
            assert (r[f"m{a}"] == r[f"m{b}"]) == same
            if not same and iv[a][1] < iv[b][0]:
                assert r[f"m{a}"] < r[f"m{b}"]


class TestWFO:
    def test_single_client_fifo(self):
        msgs = [Message(k, "c", float(t)) for k, t in zip("abc", [1, 2, 3])]
        assert wfo_order({"c": msgs}) == ["a", "b", "c"]

    def test_interleaved(self):
        streams = {
            "x": [Message("1", "x", 1.0), Message("3", "x", 3.0)],
            "y": [Message("2", "y", 2.0), Message("4", "y", 4.0)],
        }
        assert wfo_order(streams) == ["1", "2", "3", "4"]

    def test_ties_by_client_id(self):
        streams = {"zz": [Message("p", "zz", 5.0)], "aa": [Message("q", "aa", 5.0)]}
        assert wfo_order(streams) == ["q", "p"]

    def test_equals_global_sort(self):
        rng = np.random.default_rng(2)
        msgs = [Message(f"m{k}", f"c{rng.integers(4)}", float(rng.uniform(0, 50))) for k in range(40)]
        r = wfo_rank(msgs)
        assert sorted(r, key=r.get) == [m.id for m in sorted(msgs, key=lambda m: m.local_ts)]


class TestRAS:
    def test_perfect(self):
        truth = {str(k): float(k) for k in range(10)}
        assert ras({k: int(k) for k in truth}, truth) == 45

    def test_single_batch(self):
        truth = {str(k): float(k) for k in range(10)}
        assert ras({k: 0 for k in truth}, truth) == 0

    def test_one_adjacent_inversion(self):
        assert ras({"a": 0, "b": 2, "c": 1}, {"a": 1.0, "b": 2.0, "c": 3.0}) == 1

    def test_errors(self):
        with pytest.raises(KeyError):
            ras({"a": 0}, {"a": 1.0, "b": 2.0})
        with pytest.raises(ValueError):
            ras({"a": 0, "b": 1}, {"a": 1.0, "b": 1.0})

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=0, max_size=30), st.randoms())
    def test_matches_pair_enumeration(self, ranks, rnd):
        ids = [f"m{k}" for k in range(len(ranks))]
        times = list(range(len(ranks)))
        rnd.shuffle(times)
        truth = {i: float(t) for i, t in zip(ids, times)}
        r = dict(zip(ids, ranks))
        n = len(ids)
        value = ras(r, truth)
        assert value == brute_ras(r, truth)
        assert abs(value) <= n * (n - 1) // 2

    def test_chunked_path(self):
        rng = np.random.default_rng(0)
        n = 5000
        truth = {f"m{k}": float(t) for k, t in enumerate(rng.permutation(n))}
        ranks = {k: int(rng.integers(0, 50)) for k in truth}
        t = np.array([truth[k] for k in truth])
        r = np.array([ranks[k] for k in truth])[np.argsort(t)]
        expected = 0
        for i in range(n):
            expected += int(np.sign(r[i + 1 :] - r[i]).sum())
        assert ras(ranks, truth) == expected


class TestRunTrial:
    def test_perfect_clocks(self):
        res = run_trial(SimConfig(n_clients=10, n_messages_per_client=10, sigma_scale=0.0, mean_gap_us=5.0))
        assert res.ras == {"tommy": res.max_ras, "truetime": res.max_ras, "wfo": res.max_ras}

    def test_tiny_sigma_large_gap(self):
        res = run_trial(SimConfig(n_clients=10, n_messages_per_client=10, sigma_scale=1e-3, mean_gap_us=100.0))
        assert res.ras["tommy"] == res.ras["truetime"] == res.max_ras

    def test_deterministic(self):
        cfg = SimConfig(n_clients=8, n_messages_per_client=6, seed=11)
        a, b = run_trial(cfg, 4), run_trial(cfg, 4)
        assert a.to_row() == b.to_row()

    def test_row_columns(self):
        row = run_trial(SimConfig(n_clients=3, n_messages_per_client=3)).to_row()
        assert tuple(row) == CSV_COLUMNS
        assert row["violations_online"] is None

    def test_baseline_subset(self):
        res = run_trial(SimConfig(n_clients=3, n_messages_per_client=3, baselines=("wfo",)))
        assert set(res.ras) == {"wfo"} and res.batches_tommy is None

    def test_threshold_limit(self):
        base = SimConfig(n_clients=10, n_messages_per_client=5, sigma_scale=10.0, seed=5)
        counts, scores = [], []
        for th in (0.5, 0.75, 0.9, 0.99, 0.999999):
            res = run_trial(replace(base, threshold=th))
            counts.append(res.batches_tommy)
            scores.append(res.ras["tommy"])
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[-1] == 1 and scores[-1] == 0

    def test_extreme_sigma(self):
        res = run_trial(SimConfig(n_clients=20, n_messages_per_client=10, sigma_scale=1000.0, mean_gap_us=0.1))
        assert res.ras["truetime"] == 0

    def test_online_trial(self):
        cfg = SimConfig(n_clients=6, n_messages_per_client=8, mode="online", network_delay_us=2.0, network_jitter_us=1.0)
        res = run_trial(cfg, 0)
        assert res.unemitted_online == 0 and res.forced_online == 0
        assert res.violations_online is not None and res.late_inversions is not None
        assert res.batches_tommy >= 1
        assert run_trial(cfg, 0).to_row() == res.to_row()
        # the workload is shared with offline mode
        off = run_trial(replace(cfg, mode="offline"), 0)
        assert off.ras["truetime"] == res.ras["truetime"] and off.ras["wfo"] == res.ras["wfo"]


class TestOnlineEvents:
    def test_per_client_order_and_sorted_arrivals(self):
        cfg = SimConfig(n_clients=4, n_messages_per_client=6, network_delay_us=1.0, network_jitter_us=3.0)
        msgs, models = generate_workload(cfg)
        timed = build_online_events(msgs, models, cfg, trial_rng(0, 0, 1))
        times = [t for t, _ in timed]
        assert times == sorted(times)
        last = {}
        for _, ev in timed:
            if isinstance(ev, (MessageArrival, Heartbeat)):
                c = ev.message.client if isinstance(ev, MessageArrival) else ev.client
                ts = ev.message.local_ts if isinstance(ev, MessageArrival) else ev.local_ts
                assert ts >= last.get(c, -np.inf)
                last[c] = ts
        delivered = [ev.message.id for _, ev in timed if isinstance(ev, MessageArrival)]
        assert sorted(delivered) == sorted(m.id for m in msgs)


class TestSweep:
    def test_points_grid_major(self):
        sw = Sweep(SimConfig(n_clients=2, n_messages_per_client=2), (0.5, 2.0), (1.0, 3.0), trials=2)
        pts = [(c.sigma_scale, c.mean_gap_us, t) for c, t in sw.points()]
        assert pts == [(s, g, t) for s in (0.5, 2.0) for g in (1.0, 3.0) for t in range(2)]

    def test_parallel_matches_serial(self):
        sw = Sweep(SimConfig(n_clients=4, n_messages_per_client=4), (0.5, 2.0), (1.0,), trials=2)
        serial = [r.to_row() for r in run_sweep(sw, jobs=1)]
        parallel = [r.to_row() for r in run_sweep(sw, jobs=2)]
        assert serial == parallel

    def test_summarize(self):
        sw = Sweep(SimConfig(n_clients=3, n_messages_per_client=3), (1.0,), (1.0, 2.0), trials=3)
        results = run_sweep(sw)
        summary = summarize(results)
        assert set(summary) == {(1.0, 1.0), (1.0, 2.0)}
        pt = [r.ras["tommy"] for r in results if r.config.mean_gap_us == 2.0]
        assert summary[(1.0, 2.0)]["tommy"] == pytest.approx(np.mean(pt))
        assert summary[(1.0, 2.0)]["max_ras"] == 36
