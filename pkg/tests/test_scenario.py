"""Scripted cluster runs and the schedule fuzzer."""

import pytest

from replog.scenario import (
    FuzzReport,
    ScenarioError,
    SimCluster,
    fuzz_schedule,
    load_scenario,
    run_scenario,
)

DIVERGING = "scenarios/diverging_history.toml"


def write_scenario(tmp_path, body: str) -> str:
    path = tmp_path / "case.toml"
    path.write_text(body)
    return str(path)


MINI = """
[cluster]
nodes = ["a", "b"]
capacity = 8192
write_quorum = 2

[[event]]
op = "elect"
node = "a"

[[event]]
op = "create"

[[event]]
op = "append"
data = "hello"
repeat = 3
{extra}
"""


class TestSimCluster:
    def test_needs_two_machines(self):
        with pytest.raises(ValueError):
            SimCluster(["solo"])

    def test_crashing_the_primary_drops_the_log(self):
        cluster = SimCluster(["a", "b"])
        cluster.elect("a")
        cluster.create_log()
        cluster.append(b"x")
        cluster.crash_machine("a", seed=1)
        assert cluster.log is None

    def test_crashing_a_backup_keeps_the_log(self):
        cluster = SimCluster(["a", "b", "c"])
        cluster.elect("a")
        cluster.create_log()
        cluster.crash_machine("b", seed=1)
        assert cluster.log is not None
        cluster.append(b"still up")

    def test_elect_unknown_machine(self):
        cluster = SimCluster(["a", "b"])
        with pytest.raises(ScenarioError):
            cluster.elect("z")

    def test_failover_keeps_acked_records(self):
        cluster = SimCluster(["a", "b", "c"])
        cluster.elect("a")
        cluster.create_log()
        for i in range(4):
            cluster.append(b"rec%d" % i)
        cluster.crash_machine("a", seed=9)
        cluster.elect("b")
        log = cluster.open_log()
        assert [d for _, d in log.records()] == [b"rec%d" % i for i in range(4)]


class TestScriptedScenarios:
    def test_diverging_history_scenario_passes(self):
        result = run_scenario(DIVERGING)
        assert result.ok, result.failures
        assert any("epoch is 2" in s for s in result.steps)
        assert any("epoch is 3" in s for s in result.steps)

    def test_load_rejects_empty_event_list(self, tmp_path):
        path = tmp_path / "empty.toml"
        path.write_text('[cluster]\nnodes = ["a", "b"]\n')
        with pytest.raises(ScenarioError):
            load_scenario(str(path))

    def test_failed_expectation_is_reported_not_raised(self, tmp_path):
        extra = """
[[event]]
op = "expect_records"
count = 99
"""
        result = run_scenario(write_scenario(tmp_path, MINI.format(extra=extra)))
        assert not result.ok
        assert "expect_records" in result.failures[0]

    def test_expected_error_that_never_happens_fails(self, tmp_path):
        extra = """
[[event]]
op = "append"
data = "fine"
expect_error = "Quorum"
"""
        result = run_scenario(write_scenario(tmp_path, MINI.format(extra=extra)))
        assert not result.ok
        assert "expected Quorum" in result.failures[0]

    def test_unknown_op_fails_the_run(self, tmp_path):
        extra = """
[[event]]
op = "frobnicate"
"""
        result = run_scenario(write_scenario(tmp_path, MINI.format(extra=extra)))
        assert not result.ok

    def test_lsn_and_data_expectations(self, tmp_path):
        extra = """
[[event]]
op = "expect_records"
count = 3
lsns = [1, 2, 3]
data = ["hello", "hello", "hello"]
"""
        result = run_scenario(write_scenario(tmp_path, MINI.format(extra=extra)))
        assert result.ok, result.failures


class TestFuzzSchedules:
    def test_handful_of_seeds_hold_the_contract(self):
        for seed in range(8):
            report = fuzz_schedule(seed, machines=3, steps=25)
            assert report.ok, (seed, report.violations)

    def test_five_machine_cluster(self):
        report = fuzz_schedule(104, machines=5, steps=25)
        assert report.ok, report.violations

    def test_two_machine_full_quorum(self):
        report = fuzz_schedule(901, machines=2, write_quorum=2, steps=25)
        assert report.ok, report.violations

    def test_same_seed_same_story(self):
        a = fuzz_schedule(7, machines=3, steps=30)
        b = fuzz_schedule(7, machines=3, steps=30)
        assert a == b == FuzzReport(
            seed=7, ops=a.ops, appends=a.appends, acked=a.acked,
            recoveries=a.recoveries, recovery_crashes=a.recovery_crashes,
            machine_crashes=a.machine_crashes, violations=[])

    def test_mid_recovery_crashes_do_get_injected(self):
        crashes = sum(
            fuzz_schedule(seed, machines=3, steps=30).recovery_crashes
            for seed in range(10))
        assert crashes > 0

    def test_schedules_actually_recover(self):
        report = fuzz_schedule(3, machines=3, steps=30)
        assert report.recoveries > 0
        assert report.acked > 0
