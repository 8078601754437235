from memforest import bench
from memforest.synth import MigrationSpec


def test_lazy_gap_widens_with_size():
    res = bench.lazy_vs_eager(sizes=(16, 256), k=8)
    small, large = res.rows
    assert small["lazy_calls"] < small["eager_calls"]
    assert large["eager_calls"] - large["lazy_calls"] > small["eager_calls"] - small["lazy_calls"]
    assert res.summary["ratio_nondecreasing"]


def test_level_parallel_speedup_is_monotone():
    res = bench.level_parallel(sizes=(64, 256, 1024), k=8, workers=16)
    assert res.summary["speedup_nondecreasing"]
    assert all(r["depth"] <= r["height"] for r in res.rows)


def test_simulated_speedup_counts_rounds():
    assert bench.simulated_speedup({0: 32, 1: 4, 2: 1}, 16) == (37, 4, 37 / 4)
    assert bench.simulated_speedup({}, 4) == (0, 0, 1.0)


def test_k_sweep_heights_match_ceil_log():
    res = bench.k_sweep(ks=(2, 4, 8), sizes=(256,), probes=8)
    assert res.summary["heights_exact"] and res.summary["calls_decreasing"]


def test_migration_merge_is_cheaper_at_five_instances():
    res = bench.migration(instances=5, spec=MigrationSpec(instances=5))
    last = res.rows[-1]
    assert last["mig_cost"] < last["seq_cost"]
    assert all(r["facts_identical"] for r in res.rows)
    assert res.csv().splitlines()[0].startswith("instances,seq_cost,mig_cost,ratio")
