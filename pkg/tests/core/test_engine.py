import csv
import json
import threading
import time

import numpy as np
import pytest

from canids.engine import (
    VERDICT_COLUMNS,
    DetectionPipeline,
    Verdict,
    measure_batch_latency,
    replay,
    report_to_json,
    summarize,
    write_verdicts_csv,
)
from canids.exceptions import (
    DimensionMismatch,
    EmptyDatasetError,
    PipelineShutDown,
    ValidationError,
)
from canids.quant import (
    qforward_batch,
)
from canids.tools.builder import (
    short_log,
)
from canids.typing import (
    ReplayMode,
)
from canids.window import (
    WindowConfig,
    window_arrays,
    windows_of,
)


@pytest.fixture(scope="module")
def log():
    return short_log(duration=0.5)


def test_verdicts_follow_submission_order(pair, log):
    features = windows_of(log)[:200]
    with DetectionPipeline(pair, queue_depth=4) as pipeline:
        tickets = [pipeline.submit(feature) for feature in features]
        pipeline.shutdown()
        verdicts = list(pipeline.collect())
    assert tickets == list(range(len(features)))
    assert [verdict.message_index for verdict in verdicts] == tickets
    assert pipeline.submitted == pipeline.delivered == len(features)
    assert [verdict.timestamp for verdict in verdicts] == [
        feature.newest_timestamp for feature in features
    ]


def test_scores_match_batch_inference(pair, log):
    features = windows_of(log)[:100]
    matrix = np.stack([feature.values for feature in features])
    with DetectionPipeline(pair, threshold=0.5) as pipeline:
        for feature in features:
            pipeline.submit(feature)
        pipeline.shutdown()
        verdicts = list(pipeline.collect())

    expected_1 = qforward_batch(pair.detector_1, matrix).tolist()
    expected_2 = qforward_batch(pair.detector_2, matrix).tolist()
    assert [verdict.score_1 for verdict in verdicts] == expected_1
    assert [verdict.score_2 for verdict in verdicts] == expected_2
    for verdict in verdicts:
        assert verdict.flags == (verdict.score_1 >= 0.5, verdict.score_2 >= 0.5)
        assert verdict.attack == any(verdict.flags)
        assert verdict.latency >= 0


def test_slow_detector_does_not_reorder(pair, log):
    features = windows_of(log)[:20]

    def stall_first_detector_early(index, ticket):
        return 0.05 if index == 0 and ticket < 3 else 0.0

    with DetectionPipeline(
        pair, queue_depth=2, injected_delay=stall_first_detector_early
    ) as pipeline:
        for feature in features:
            pipeline.submit(feature)
        pipeline.shutdown()
        indices = [verdict.message_index for verdict in pipeline.collect()]
    assert indices == list(range(20))
    # the stalled detector's inbox fills, so ingestion has to wait
    assert pipeline.stalls > 0


def test_collect_with_limit_then_resume(pair, log):
    features = windows_of(log)[:10]
    with DetectionPipeline(pair) as pipeline:
        for feature in features:
            pipeline.submit(feature)
        head = [verdict.message_index for verdict in pipeline.collect(limit=4)]
        pipeline.shutdown()
        rest = [verdict.message_index for verdict in pipeline.collect()]
    assert head == [0, 1, 2, 3]
    assert rest == list(range(4, 10))


def test_submit_after_shutdown(pair, log):
    feature = windows_of(log)[0]
    with DetectionPipeline(pair) as pipeline:
        pipeline.submit(feature)
        pipeline.shutdown()
        pipeline.shutdown()
        with pytest.raises(PipelineShutDown):
            pipeline.submit(feature)
        assert len(list(pipeline.collect())) == 1


def test_empty_pipeline_drains(pair):
    with DetectionPipeline(pair) as pipeline:
        pipeline.shutdown()
        assert list(pipeline.collect()) == []


def test_detector_failure_reaches_the_collector(pair, log):
    features = windows_of(log)[:5]

    def fail_at_last_ticket(index, ticket):
        if index == 1 and ticket == 4:
            raise RuntimeError("detector fault")
        return 0.0

    with DetectionPipeline(pair, injected_delay=fail_at_last_ticket) as pipeline:
        for feature in features:
            pipeline.submit(feature)
        pipeline.shutdown()
        with pytest.raises(RuntimeError, match="detector fault"):
            list(pipeline.collect())


def test_submit_after_a_detector_failure(pair, log):
    features = windows_of(log)[:50]

    def fail_first_ticket(index, ticket):
        if index == 0 and ticket == 0:
            raise RuntimeError("detector fault")
        return 0.0

    with DetectionPipeline(
        pair, queue_depth=1, injected_delay=fail_first_ticket
    ) as pipeline:
        with pytest.raises(PipelineShutDown):
            for feature in features:
                pipeline.submit(feature)
        pipeline.shutdown()
        with pytest.raises(RuntimeError, match="detector fault"):
            list(pipeline.collect())


@pytest.mark.parametrize("queue_depth", (1, 64))
def test_detector_failure_with_a_full_inbox_ends_the_replay(pair, log, queue_depth):
    def stall_then_fail(index, ticket):
        if index == 1 and ticket == 0:
            time.sleep(0.05)
            raise RuntimeError("detector fault")
        return 0.0

    outcome = []

    def run():
        try:
            replay(log, pair, queue_depth=queue_depth, injected_delay=stall_then_fail)
        except RuntimeError as exc:
            outcome.append(exc)

    runner = threading.Thread(target=run, daemon=True)
    runner.start()
    runner.join(timeout=10)
    assert not runner.is_alive()
    assert [str(exc) for exc in outcome] == ["detector fault"]


def test_queue_depth_must_be_positive(pair):
    with pytest.raises(ValidationError):
        DetectionPipeline(pair, queue_depth=0)


def test_replay_max_rate(pair, log):
    report = replay(log, pair, ReplayMode.MAX_RATE)
    assert report.total_messages == len(log)
    assert report.verdict_count == len(log) - 3
    assert report.warm_up_skipped == 3
    assert [verdict.message_index for verdict in report.verdicts] == list(
        range(report.verdict_count)
    )
    assert report.latency_min <= report.latency_p50 <= report.latency_p99
    assert report.latency_p99 <= report.latency_max
    assert report.throughput > 0
    assert report.line_rate_kbps == pytest.approx(report.throughput * 0.135)

    flags = np.array([verdict.flags for verdict in report.verdicts])
    assert report.attack_counts == (
        int(flags[:, 0].sum()),
        int(flags[:, 1].sum()),
        int(flags.any(axis=1).sum()),
    )


def test_replay_scores_match_offline_windows(pair, log):
    report = replay(log, pair)
    matrix = window_arrays(log).features
    assert [verdict.score_1 for verdict in report.verdicts] == (
        qforward_batch(pair.detector_1, matrix).tolist()
    )


def test_replay_of_a_log_shorter_than_the_window(pair, log):
    report = replay(log[:3], pair)
    assert report.verdict_count == 0
    assert report.warm_up_skipped == 3
    assert report.latency_p99 is None
    assert report.throughput == 0.0
    assert report.attack_counts == (0, 0, 0)


def test_replay_rejects_bad_input(pair, log):
    with pytest.raises(EmptyDatasetError):
        replay((), pair)
    with pytest.raises(ValidationError):
        replay(log, pair, speed=0)
    with pytest.raises(DimensionMismatch):
        replay(log, pair, window_config=WindowConfig(depth=2))


def test_replay_timestamped_keeps_log_pacing(pair, log):
    span = log[-1].timestamp - log[0].timestamp
    report = replay(log, pair, ReplayMode.TIMESTAMPED, speed=5.0)
    assert report.mode is ReplayMode.TIMESTAMPED
    assert report.verdict_count == len(log) - 3
    assert report.elapsed >= span / 5.0


def test_summarize():
    verdicts = [
        Verdict(0, 0.1, 0.9, 0.1, (True, False), 0.002),
        Verdict(1, 0.2, 0.2, 0.7, (False, True), 0.004),
        Verdict(2, 0.3, 0.1, 0.1, (False, False), 0.006),
    ]
    report = summarize(
        verdicts,
        mode=ReplayMode.MAX_RATE,
        total_messages=6,
        warm_up_skipped=3,
        elapsed=0.5,
    )
    assert report.throughput == 6.0
    assert report.latency_mean == pytest.approx(0.004)
    assert report.latency_p50 == pytest.approx(0.004)
    assert report.latency_min == 0.002 and report.latency_max == 0.006
    assert report.attack_counts == (1, 1, 2)


def test_exports(pair, log, tmp_path):
    report = replay(log[:40], pair)
    path = tmp_path / "verdicts.csv"
    write_verdicts_csv(report.verdicts, path)
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == VERDICT_COLUMNS
    assert len(rows) == 1 + report.verdict_count
    first = report.verdicts[0]
    assert float(rows[1][2]) == first.score_1
    assert rows[1][4] == "".join("1" if flag else "0" for flag in first.flags)

    document = json.loads(report_to_json(report, detector_1="abc"))
    assert document["detector_1"] == "abc"
    assert document["verdict_count"] == report.verdict_count
    assert document["attack_counts"]["combined"] == report.attack_counts[2]
    assert "verdicts" not in document


def test_measure_batch_latency(pair, log):
    features = window_arrays(log).features[:300]
    timing = measure_batch_latency(pair, features, batch_size=128)
    assert timing.batches == 3
    assert timing.batch_size == 128
    assert timing.per_message_seconds > 0
    with pytest.raises(EmptyDatasetError):
        measure_batch_latency(pair, features[:0])
    with pytest.raises(ValidationError):
        measure_batch_latency(pair, features, batch_size=0)


@pytest.mark.slow
def test_max_rate_throughput_floor(pair):
    long_log = short_log(duration=20.0, seed=4)[:10000]
    report = replay(long_log, pair, ReplayMode.MAX_RATE)
    assert report.verdict_count == 10000 - 3
    assert report.latency_p99 is not None
    assert report.throughput >= 4166


def test_replay_modes_agree_on_verdicts(pair, log):
    head = log[:120]
    fast = replay(head, pair, ReplayMode.MAX_RATE)
    paced = replay(head, pair, ReplayMode.TIMESTAMPED, speed=10.0)

    def values(report):
        return [(v.score_1, v.score_2, v.flags) for v in report.verdicts]

    assert values(fast) == values(paced)
