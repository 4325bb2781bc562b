"""
Concurrent dual-detector inference over a stream of window features.

One ingestion context submits features; two detector threads, each with a
bounded inbox, score every feature with their own quantized model; a
collection context reassembles both scores per message and delivers
verdicts strictly in submission order.
"""
import csv
from dataclasses import (
    dataclass,
    field,
)
import json
from pathlib import (
    Path,
)
import queue
import threading
import time
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from eth_utils import (
    get_extended_debug_logger,
)
import numpy as np
from sortedcontainers import (
    SortedDict,
)

from canids.constants import (
    DEFAULT_QUEUE_DEPTH,
    DEFAULT_THRESHOLD,
    MAX_BASE_FRAME_BITS,
)
from canids.exceptions import (
    DimensionMismatch,
    EmptyDatasetError,
    PipelineShutDown,
    ValidationError,
)
from canids.quant import (
    QuantModel,
    qforward,
    qforward_batch,
)
from canids.typing import (
    LabeledFrame,
    ReplayMode,
    WindowFeature,
)
from canids.window import (
    FrameWindow,
    WindowConfig,
)

logger = get_extended_debug_logger("canids.engine")

DETECTOR_COUNT = 2

InjectedDelay = Callable[[int, int], float]
"""
(detector index, ticket) -> seconds to stall before scoring; test hook
"""


class DetectorPair(NamedTuple):
    detector_1: QuantModel
    """
    Flooding and fuzzing detector
    """

    detector_2: QuantModel
    """
    RPM and gear spoofing detector
    """

    @property
    def input_width(self) -> int:
        return self.detector_1.input_width


def validate_pair(
    pair: DetectorPair, window_config: WindowConfig = WindowConfig()
) -> None:
    for detector in pair:
        if detector.input_width != window_config.width:
            raise DimensionMismatch((window_config.width,), (detector.input_width,))


class Verdict(NamedTuple):
    message_index: int
    """
    Submission ticket, equal to the position in the verdict stream
    """

    timestamp: float
    score_1: float
    score_2: float
    flags: Tuple[bool, bool]
    latency: float
    """
    Seconds from the frame's hand-off to both scores being ready
    """

    @property
    def attack(self) -> bool:
        return any(self.flags)


class _Job(NamedTuple):
    ticket: int
    feature: WindowFeature
    ingested_at: float


class _Score(NamedTuple):
    ticket: int
    detector_index: int
    score: float
    finished_at: float
    ingested_at: float
    timestamp: float


class _DetectorFailed(NamedTuple):
    detector_index: int
    error: BaseException


class _DetectorDone(NamedTuple):
    detector_index: int


_STOP = object()

# seconds a blocked submit waits before re-checking for a failed detector
_PUT_POLL = 0.05


class DetectionPipeline:
    """
    Usage::

        with DetectionPipeline(pair) as pipeline:
            for feature in features:
                pipeline.submit(feature)
            pipeline.shutdown()
            verdicts = list(pipeline.collect())

    ``submit`` never waits on inference; it only blocks while a detector's
    inbox is full, so frames are delayed rather than dropped under overload.
    """

    def __init__(
        self,
        pair: DetectorPair,
        *,
        threshold: float = DEFAULT_THRESHOLD,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        injected_delay: Optional[InjectedDelay] = None,
        clock: Callable[[], float] = time.perf_counter,
    ) -> None:
        if queue_depth < 1:
            raise ValidationError(f"Queue depth must be at least 1, got {queue_depth}")
        self.pair = pair
        self.threshold = threshold
        self._clock = clock
        self._injected_delay = injected_delay

        self._inboxes: Tuple["queue.Queue[Any]", ...] = tuple(
            queue.Queue(maxsize=queue_depth) for _ in range(DETECTOR_COUNT)
        )
        self._results: "queue.Queue[Any]" = queue.Queue()
        self._threads = tuple(
            threading.Thread(
                target=self._run_detector,
                args=(index, detector),
                name=f"canids-detector-{index + 1}",
                daemon=True,
            )
            for index, detector in enumerate(pair)
        )

        self._submit_lock = threading.Lock()
        self._failed = threading.Event()
        self._next_ticket = 0
        self._next_delivery = 0
        self._shut_down = False
        self._started = False
        self._stalls = 0

        # reorder buffer: ticket -> scores received so far, by detector index
        self._pending: SortedDict = SortedDict()
        self._done_detectors: set = set()

    def __repr__(self) -> str:
        return (
            f"DetectionPipeline<submitted={self._next_ticket}, "
            f"delivered={self._next_delivery}, shut_down={self._shut_down}>"
        )

    def __enter__(self) -> "DetectionPipeline":
        self.start()
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        self.shutdown()
        self.join()

    @property
    def submitted(self) -> int:
        return self._next_ticket

    @property
    def delivered(self) -> int:
        return self._next_delivery

    @property
    def stalls(self) -> int:
        """
        Submissions that found a detector inbox full and had to wait
        """
        return self._stalls

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for thread in self._threads:
            thread.start()

    def submit(
        self, feature: WindowFeature, ingested_at: Optional[float] = None
    ) -> int:
        """
        Hand a feature to both detectors.

        :return: the feature's ticket; tickets count up from 0
        :raises PipelineShutDown: after :meth:`shutdown`, or once a detector has
            failed
        """
        with self._submit_lock:
            if self._shut_down:
                raise PipelineShutDown("Cannot submit to a pipeline that was shut down")
            if self._failed.is_set():
                raise PipelineShutDown("A detector failed; no more features accepted")
            if not self._started:
                self.start()
            ticket = self._next_ticket
            self._next_ticket += 1
            job = _Job(
                ticket, feature, self._clock() if ingested_at is None else ingested_at
            )
            for inbox in self._inboxes:
                if inbox.full():
                    self._stalls += 1
                    logger.debug2("Detector inbox full at ticket %d; waiting", ticket)
                self._put(inbox, job)
        return ticket

    def shutdown(self) -> None:
        """
        Stop accepting features. Everything already submitted is still
        scored and delivered by :meth:`collect`. Idempotent.
        """
        with self._submit_lock:
            if self._shut_down:
                return
            self._shut_down = True
            if not self._started:
                self.start()
            for inbox in self._inboxes:
                inbox.put(_STOP)
        if self._stalls:
            logger.info(
                "Ingestion waited on a full detector inbox %d times", self._stalls
            )

    def _put(self, inbox: "queue.Queue[Any]", job: _Job) -> None:
        while True:
            try:
                inbox.put(job, timeout=_PUT_POLL)
                return
            except queue.Full:
                if self._failed.is_set():
                    raise PipelineShutDown(
                        f"A detector failed while ticket {job.ticket} was waiting"
                    ) from None

    def join(self, timeout: Optional[float] = None) -> None:
        for thread in self._threads:
            thread.join(timeout)

    def _run_detector(self, index: int, detector: QuantModel) -> None:
        inbox = self._inboxes[index]
        while True:
            job = inbox.get()
            if job is _STOP:
                self._results.put(_DetectorDone(index))
                return
            try:
                if self._injected_delay is not None:
                    delay = self._injected_delay(index, job.ticket)
                    if delay > 0:
                        time.sleep(delay)
                score = qforward(detector, job.feature.values)
            except BaseException as exc:
                self._results.put(_DetectorFailed(index, exc))
                self._failed.set()
                self._drain(index)
                return
            self._results.put(
                _Score(
                    job.ticket,
                    index,
                    score,
                    self._clock(),
                    job.ingested_at,
                    job.feature.newest_timestamp,
                )
            )

    def _drain(self, index: int) -> None:
        """
        Discard jobs until the stop marker so a submitter or
        :meth:`shutdown` blocked on this inbox can finish.
        """
        inbox = self._inboxes[index]
        while inbox.get() is not _STOP:
            pass
        self._results.put(_DetectorDone(index))

    def _accept(self, item: Any) -> None:
        if isinstance(item, _Score):
            self._pending.setdefault(item.ticket, {})[item.detector_index] = item
        elif isinstance(item, _DetectorDone):
            self._done_detectors.add(item.detector_index)
        elif isinstance(item, _DetectorFailed):
            raise item.error
        else:
            raise Exception(f"Invariant: unexpected pipeline message {item!r}")

    def _ready(self) -> Optional[Verdict]:
        if not self._pending:
            return None
        ticket, scores = self._pending.peekitem(0)
        if ticket != self._next_delivery or len(scores) < DETECTOR_COUNT:
            return None

        del self._pending[ticket]
        self._next_delivery += 1
        first, second = scores[0], scores[1]
        finished_at = max(first.finished_at, second.finished_at)
        return Verdict(
            message_index=ticket,
            timestamp=first.timestamp,
            score_1=first.score,
            score_2=second.score,
            flags=(first.score >= self.threshold, second.score >= self.threshold),
            latency=max(0.0, finished_at - first.ingested_at),
        )

    def collect(self, limit: Optional[int] = None) -> Iterator[Verdict]:
        """
        Yield verdicts in ticket order, whatever order the detectors finish
        in. Stops after ``limit`` verdicts, or once the pipeline is shut down
        and every submitted feature has been delivered.
        """
        yielded = 0
        while limit is None or yielded < limit:
            verdict = self._ready()
            if verdict is not None:
                yield verdict
                yielded += 1
                continue
            if (
                len(self._done_detectors) == DETECTOR_COUNT
                and self._next_delivery == self._next_ticket
            ):
                return
            self._accept(self._results.get())


#
# Replay
#
@dataclass(frozen=True)
class ReplayReport:
    mode: ReplayMode
    total_messages: int
    warm_up_skipped: int
    verdict_count: int
    elapsed: float
    throughput: float
    """
    Verdicts per second of wall time
    """

    latency_mean: Optional[float]
    latency_p50: Optional[float]
    latency_p99: Optional[float]
    latency_max: Optional[float]
    latency_min: Optional[float]
    attack_counts: Tuple[int, int, int]
    """
    Messages flagged by detector 1, by detector 2, and by either
    """

    frame_bits: int = MAX_BASE_FRAME_BITS
    verdicts: Tuple[Verdict, ...] = field(default=(), repr=False, compare=False)

    @property
    def line_rate_kbps(self) -> float:
        """
        CAN bit rate whose back-to-back maximum-size frames this run keeps up with
        """
        return self.throughput * self.frame_bits / 1000

    def as_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "total_messages": self.total_messages,
            "warm_up_skipped": self.warm_up_skipped,
            "verdict_count": self.verdict_count,
            "elapsed_seconds": self.elapsed,
            "throughput_messages_per_second": self.throughput,
            "latency_seconds": {
                "mean": self.latency_mean,
                "p50": self.latency_p50,
                "p99": self.latency_p99,
                "max": self.latency_max,
                "min": self.latency_min,
            },
            "attack_counts": {
                "detector_1": self.attack_counts[0],
                "detector_2": self.attack_counts[1],
                "combined": self.attack_counts[2],
            },
            "frame_bits": self.frame_bits,
            "line_rate_kbps": self.line_rate_kbps,
        }


def summarize(
    verdicts: Sequence[Verdict],
    *,
    mode: ReplayMode,
    total_messages: int,
    warm_up_skipped: int,
    elapsed: float,
) -> ReplayReport:
    count = len(verdicts)
    if count:
        latencies = np.array([verdict.latency for verdict in verdicts])
        p50, p99 = np.percentile(latencies, [50, 99])
        stats = (
            float(latencies.mean()),
            float(p50),
            float(p99),
            float(latencies.max()),
            float(latencies.min()),
        )
    else:
        stats = (None,) * 5

    attack_counts = (
        sum(verdict.flags[0] for verdict in verdicts),
        sum(verdict.flags[1] for verdict in verdicts),
        sum(verdict.attack for verdict in verdicts),
    )
    throughput = count / elapsed if count and elapsed > 0 else 0.0
    return ReplayReport(
        mode,
        total_messages,
        warm_up_skipped,
        count,
        elapsed,
        throughput,
        *stats,
        attack_counts=attack_counts,
        verdicts=tuple(verdicts),
    )


def replay(
    log: Sequence[LabeledFrame],
    pair: DetectorPair,
    mode: ReplayMode = ReplayMode.MAX_RATE,
    *,
    window_config: WindowConfig = WindowConfig(),
    threshold: float = DEFAULT_THRESHOLD,
    queue_depth: int = DEFAULT_QUEUE_DEPTH,
    injected_delay: Optional[InjectedDelay] = None,
    speed: float = 1.0,
) -> ReplayReport:
    """
    Feed a log through window -> submit -> collect end to end.

    MAX_RATE hands frames over back to back; TIMESTAMPED waits until each
    frame's offset from the first timestamp (divided by ``speed``) has
    elapsed. Latency runs from a frame's hand-off to the window until both
    detector scores for it are ready.

    :raises EmptyDatasetError: on an empty log
    """
    if len(log) == 0:
        raise EmptyDatasetError("Cannot replay an empty log")
    if speed <= 0:
        raise ValidationError(f"Replay speed must be positive, got {speed}")
    validate_pair(pair, window_config)

    clock = time.perf_counter
    ingest_errors: List[BaseException] = []
    pipeline = DetectionPipeline(
        pair,
        threshold=threshold,
        queue_depth=queue_depth,
        injected_delay=injected_delay,
        clock=clock,
    )

    def ingest(started_at: float) -> None:
        window = FrameWindow(window_config)
        first_timestamp = log[0].timestamp
        try:
            for frame in log:
                if mode is ReplayMode.TIMESTAMPED:
                    due = started_at + (frame.timestamp - first_timestamp) / speed
                    wait = due - clock()
                    if wait > 0:
                        time.sleep(wait)
                arrived = clock()
                feature = window.push(frame)
                if feature is not None:
                    pipeline.submit(feature, ingested_at=arrived)
        except BaseException as exc:
            ingest_errors.append(exc)
        finally:
            pipeline.shutdown()

    with pipeline:
        started_at = clock()
        producer = threading.Thread(
            target=ingest, args=(started_at,), name="canids-ingest", daemon=True
        )
        producer.start()
        try:
            verdicts = tuple(pipeline.collect())
            elapsed = clock() - started_at
        finally:
            producer.join()

    if ingest_errors:
        raise ingest_errors[0]

    report = summarize(
        verdicts,
        mode=mode,
        total_messages=len(log),
        warm_up_skipped=len(log) - len(verdicts),
        elapsed=elapsed,
    )
    logger.info(
        "Replayed %d messages (%s): %d verdicts, %.0f msg/s, p99 latency %s",
        report.total_messages,
        mode.value,
        report.verdict_count,
        report.throughput,
        "n/a" if report.latency_p99 is None else f"{report.latency_p99 * 1e6:.1f}us",
    )
    return report


#
# Batch latency
#
class BatchLatency(NamedTuple):
    batch_size: int
    batches: int
    mean_batch_seconds: float
    per_message_seconds: float


def measure_batch_latency(
    pair: DetectorPair,
    features: np.ndarray,
    batch_size: int = 256,
) -> BatchLatency:
    """
    Time both detectors over ``features`` in batches, for comparison with
    the per-message latency of :func:`replay`.
    """
    if batch_size < 1:
        raise ValidationError(f"Batch size must be at least 1, got {batch_size}")
    matrix = np.asarray(features)
    if len(matrix) == 0:
        raise EmptyDatasetError("Cannot time inference on no features")

    durations = []
    for start in range(0, len(matrix), batch_size):
        batch = matrix[start : start + batch_size]
        began = time.perf_counter()
        for detector in pair:
            qforward_batch(detector, batch)
        durations.append(time.perf_counter() - began)

    total = float(np.sum(durations))
    return BatchLatency(
        batch_size, len(durations), total / len(durations), total / len(matrix)
    )


#
# Export
#
VERDICT_COLUMNS = (
    "message_index",
    "timestamp",
    "score_1",
    "score_2",
    "flags",
    "latency_us",
)


def _flags_text(flags: Tuple[bool, bool]) -> str:
    return "".join("1" if flag else "0" for flag in flags)


def write_verdicts_csv(verdicts: Iterable[Verdict], path: Union[str, Path]) -> None:
    """
    Scores are written with ``repr`` so they read back bit-exact; flags are
    two digits, detector 1 first.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(VERDICT_COLUMNS)
        for verdict in verdicts:
            writer.writerow(
                (
                    verdict.message_index,
                    f"{verdict.timestamp:.6f}",
                    repr(verdict.score_1),
                    repr(verdict.score_2),
                    _flags_text(verdict.flags),
                    f"{verdict.latency * 1e6:.3f}",
                )
            )


def report_to_json(report: ReplayReport, **extra: Any) -> str:
    return json.dumps({**report.as_dict(), **extra}, indent=2, sort_keys=True)
