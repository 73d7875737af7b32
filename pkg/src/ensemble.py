"""
Lazily persisted deep ensembles.

A LazyEnsemble is only a directory handle: atomic model i lives in
<path>/model_<i>.uwm and is loaded inside a task, never kept between
operations. Work is submitted as supplier, mapper or consumer tasks and run by
`run_pool`, either sequentially in the calling process (num_processes=0) or in
worker processes that a context handler initializes and that are replaced
after `models_per_process_before_respawn` tasks. Models cross process
boundaries only through their files.
"""
import functools
import glob
import logging
import os
import time
import traceback
import uuid
from collections import Counter, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from multiprocessing import get_context
from multiprocessing.connection import wait
from typing import Callable, Dict, List, Optional

import numpy as np

from src.config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_MODELS_PER_PROCESS,
    DEVICE_ENV_VAR,
    LOCK_NAME,
    MAX_TASK_ATTEMPTS,
    MODEL_FILE_TEMPLATE,
    WORKER_START_METHOD,
)
from src.errors import (
    AssemblyError,
    ContextConfigError,
    EnsembleError,
    EnsembleLockedError,
    MissingModelError,
    PointPredictorOnEnsembleError,
    TaskFailedError,
    ValidationError,
)
from src.persist import load_model, read_manifest, save_model, write_manifest
from src.quantifiers import convert_score, resolve_quantifiers
from src.tasks import forward_consumer
from src.utils import configure_logging, derive_seed

logger = logging.getLogger(__name__)

SUPPLIER = "supplier"
MAPPER = "mapper"
CONSUMER = "consumer"
TASK_KINDS = (SUPPLIER, MAPPER, CONSUMER)


# ---------------------------------------------------------------------------
# Context handlers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceSlot:
    device_id: str
    capacity: Optional[int] = None  # None: unlimited
    memory_hint: Optional[int] = None


class ContextHandler:
    """
    Decides how many workers may run on which device slot and prepares each
    worker process. Subclasses must be importable by worker processes.
    """

    name = "context"

    def validate(self, num_processes):
        pass

    def slots(self):
        return [DeviceSlot("shared")]

    def acquire_slot(self, occupancy):
        """
        Returns the device id for the next worker, or None when every slot is full.
        """
        for slot in self.slots():
            if slot.capacity is None or occupancy.get(slot.device_id, 0) < slot.capacity:
                return slot.device_id
        return None

    def initialize_worker(self, device_id):
        os.environ[DEVICE_ENV_VAR] = device_id
        configure_logging()
        logger.debug("Worker %d initialized on slot %s by %s", os.getpid(), device_id, self.name)


class NoneContext(ContextHandler):
    """
    Everything runs in the calling process.
    """

    name = "none_context"

    def validate(self, num_processes):
        if num_processes != 0:
            raise ContextConfigError(f"none_context only supports num_processes=0, got {num_processes}")

    def slots(self):
        return [DeviceSlot("main", capacity=1)]


class DynamicGrowthContext(ContextHandler):
    """
    All workers share one slot without a concurrency cap.
    """

    name = "dynamic_growth_context"


class DeviceAllocatorContext(ContextHandler):
    name = "device_allocator_context"

    def __init__(self, device_slots):
        self.device_slots = [slot if isinstance(slot, DeviceSlot) else DeviceSlot(*slot) for slot in device_slots]
        if not self.device_slots:
            raise ContextConfigError("device_allocator_context needs at least one device slot")
        ids = [slot.device_id for slot in self.device_slots]
        if len(set(ids)) != len(ids):
            raise ContextConfigError(f"Duplicate device ids in {ids}")
        for slot in self.device_slots:
            if slot.capacity is None or slot.capacity < 1:
                raise ContextConfigError(f"Device slot {slot.device_id} needs a capacity >= 1")

    def validate(self, num_processes):
        total = sum(slot.capacity for slot in self.device_slots)
        if total < num_processes:
            raise ContextConfigError(
                f"Device slots offer {total} concurrent workers but num_processes is {num_processes}"
            )

    def slots(self):
        return list(self.device_slots)

    def initialize_worker(self, device_id):
        super().initialize_worker(device_id)
        slot = next(s for s in self.device_slots if s.device_id == device_id)
        if slot.memory_hint is not None:
            logger.debug("Slot %s memory hint %s (not enforced)", device_id, slot.memory_hint)


def default_context(num_processes):
    return NoneContext() if num_processes == 0 else DynamicGrowthContext()


def make_context(name, device_slots=None):
    """
    Builds a context from its short name: none, dynamic or device.
    """
    if name in ("none", NoneContext.name):
        return NoneContext()
    if name in ("dynamic", DynamicGrowthContext.name):
        return DynamicGrowthContext()
    if name in ("device", DeviceAllocatorContext.name):
        return DeviceAllocatorContext(device_slots or [])
    raise ContextConfigError(f"Unknown context '{name}', expected none, dynamic or device")


# ---------------------------------------------------------------------------
# Pool
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolConfig:
    num_processes: int = 0
    models_per_process_before_respawn: int = DEFAULT_MODELS_PER_PROCESS
    base_seed: int = 0

    def validate(self):
        if self.num_processes < 0:
            raise ValidationError(f"num_processes must be >= 0, got {self.num_processes}")
        if self.models_per_process_before_respawn < 1:
            raise ValidationError(
                f"models_per_process_before_respawn must be >= 1, got {self.models_per_process_before_respawn}"
            )
        if self.base_seed < 0:
            raise ValidationError(f"base_seed must be non-negative, got {self.base_seed}")


@dataclass
class PoolStats:
    worker_incarnations: int = 0
    worker_pids: List[int] = field(default_factory=list)
    peak_slot_occupancy: Dict[str, int] = field(default_factory=dict)
    occupancy_log: List[tuple] = field(default_factory=list)
    peak_concurrent_models: int = 0

    def record_occupancy(self, device_id, occupancy):
        self.occupancy_log.append((time.monotonic(), device_id, occupancy))
        self.peak_slot_occupancy[device_id] = max(self.peak_slot_occupancy.get(device_id, 0), occupancy)


class ModelTracker:
    """
    Counts atomic models held in memory across all processes of one run.
    """

    def __init__(self, mp_context=None):
        mp_context = mp_context or get_context(WORKER_START_METHOD)
        self._current = mp_context.Value("i", 0)
        self._peak = mp_context.Value("i", 0)

    @contextmanager
    def holding(self):
        with self._current.get_lock():
            self._current.value += 1
            if self._current.value > self._peak.value:
                self._peak.value = self._current.value
        try:
            yield
        finally:
            with self._current.get_lock():
                self._current.value -= 1

    @property
    def peak(self):
        return self._peak.value


@dataclass
class _Incarnation:
    process: object
    device_id: str
    assigned: List[int]
    done: set = field(default_factory=set)


def _worker_main(conn, context, device_id, task, assignments):
    context.initialize_worker(device_id)
    try:
        for model_id, seed in assignments:
            try:
                message = (model_id, True, task(model_id, seed))
            except Exception:
                message = (model_id, False, traceback.format_exc())
            try:
                conn.send(message)
            except Exception as e:
                conn.send((model_id, False, f"Result of model {model_id} could not be sent back: {e}"))
    finally:
        conn.close()


def _run_sequential(task, ids, seeds):
    results, failures = {}, {}
    for model_id in ids:
        try:
            results[model_id] = task(model_id, seeds[model_id])
        except Exception:
            failures[model_id] = traceback.format_exc()
    return results, failures


def _finish_incarnation(incarnation, pending, attempts, failures, occupancy, stats):
    incarnation.process.join()
    occupancy[incarnation.device_id] -= 1
    stats.record_occupancy(incarnation.device_id, occupancy[incarnation.device_id])
    exitcode = incarnation.process.exitcode
    for model_id in incarnation.assigned:
        if model_id in incarnation.done:
            continue
        if attempts[model_id] < MAX_TASK_ATTEMPTS:
            logger.warning("Worker %s died (exit code %s) on model %d; retrying on a fresh worker",
                           incarnation.process.pid, exitcode, model_id)
            pending.append(model_id)
        else:
            failures[model_id] = f"Worker process exited with code {exitcode} while running model {model_id}"


def _run_workers(task, ids, seeds, pool, context, stats):
    mp_context = get_context(WORKER_START_METHOD)
    pending = deque(ids)
    attempts = Counter()
    results, failures = {}, {}
    occupancy = {slot.device_id: 0 for slot in context.slots()}
    live = {}

    try:
        while pending or live:
            while pending and len(live) < pool.num_processes:
                device_id = context.acquire_slot(occupancy)
                if device_id is None:
                    break
                count = min(pool.models_per_process_before_respawn, len(pending))
                batch = [pending.popleft() for _ in range(count)]
                attempts.update(batch)

                receiver, sender = mp_context.Pipe(duplex=False)
                process = mp_context.Process(
                    target=_worker_main,
                    args=(sender, context, device_id, task, [(i, seeds[i]) for i in batch]),
                    daemon=True,
                )
                process.start()
                sender.close()
                live[receiver] = _Incarnation(process, device_id, batch)
                occupancy[device_id] = occupancy.get(device_id, 0) + 1
                stats.worker_incarnations += 1
                stats.worker_pids.append(process.pid)
                stats.record_occupancy(device_id, occupancy[device_id])
                logger.debug("Started worker %d on slot %s for models %s", process.pid, device_id, batch)

            if not live:
                raise ContextConfigError(f"{context.name} offered no device slot for pending models")

            for receiver in wait(list(live)):
                incarnation = live[receiver]
                try:
                    model_id, ok, payload = receiver.recv()
                except EOFError:
                    del live[receiver]
                    receiver.close()
                    _finish_incarnation(incarnation, pending, attempts, failures, occupancy, stats)
                    continue
                incarnation.done.add(model_id)
                if ok:
                    results[model_id] = payload
                else:
                    failures[model_id] = payload
    finally:
        for incarnation in live.values():
            if incarnation.process.is_alive():
                incarnation.process.terminate()
                incarnation.process.join()

    return results, failures


def run_pool(task, ids, pool=None, context=None, stats=None):
    """
    Runs task(model_id, seed) for every id and returns the results ordered by id.
    Seeds derive from (pool.base_seed, model_id). Failed tasks are collected and
    raised together as TaskFailedError once every worker has finished; a task
    whose worker dies is retried once on a fresh worker.
    """
    pool = pool or PoolConfig()
    pool.validate()
    context = context or default_context(pool.num_processes)
    context.validate(pool.num_processes)
    stats = stats if stats is not None else PoolStats()

    ids = sorted(int(i) for i in ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("Task ids must be unique")
    seeds = {model_id: derive_seed(pool.base_seed, model_id) for model_id in ids}

    started = time.perf_counter()
    if pool.num_processes == 0:
        results, failures = _run_sequential(task, ids, seeds)
    else:
        if pool.num_processes > len(ids):
            logger.warning("%d processes requested for %d tasks; extra workers stay idle",
                           pool.num_processes, len(ids))
        results, failures = _run_workers(task, ids, seeds, pool, context, stats)

    if failures:
        for model_id, reason in sorted(failures.items()):
            logger.error("Task for model %d failed:\n%s", model_id, reason)
        raise TaskFailedError(failures)

    logger.info("Pool finished %d tasks with %d processes in %.2fs",
                len(ids), pool.num_processes, time.perf_counter() - started)
    return [results[model_id] for model_id in ids]


# ---------------------------------------------------------------------------
# Lazy ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LazyEnsemble:
    path: str
    num_models: int
    default_context: Optional[ContextHandler] = None
    save_fn: Optional[Callable] = None
    load_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.num_models < 2:
            raise ValidationError(f"An ensemble needs num_models > 1, got {self.num_models}")

    def model_path(self, model_id):
        return os.path.join(self.path, MODEL_FILE_TEMPLATE.format(model_id))

    def model_paths(self):
        return [self.model_path(i) for i in range(self.num_models)]


def open_ensemble(path, **kwargs):
    manifest = read_manifest(path)
    return LazyEnsemble(path, manifest["num_models"], **kwargs)


@contextmanager
def ensemble_lock(directory):
    lock_path = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise EnsembleLockedError(
            f"{directory} is in use by another pool run; remove {lock_path} if no run is active"
        )
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        try:
            os.remove(lock_path)
        except FileNotFoundError:
            pass


@dataclass
class EnsembleTask:
    """
    Picklable wrapper that loads, runs and re-persists one atomic model.
    """

    kind: str
    function: Callable
    directory: str
    tracker: ModelTracker
    save_fn: Callable = save_model
    load_fn: Callable = load_model

    def _path(self, model_id):
        return os.path.join(self.directory, MODEL_FILE_TEMPLATE.format(model_id))

    def _persist(self, model, path):
        temp_path = f"{path}.tmp-{os.getpid()}"
        self.save_fn(model, temp_path)
        os.replace(temp_path, path)

    def __call__(self, model_id, seed):
        path = self._path(model_id)
        with self.tracker.holding():
            if self.kind == SUPPLIER:
                model, result = _model_and_result(self.function(model_id, seed), model_id, SUPPLIER)
                self._persist(model, path)
            elif self.kind == MAPPER:
                model, result = _model_and_result(self.function(model_id, self.load_fn(path)), model_id, MAPPER)
                self._persist(model, path)
            else:
                result = self.function(model_id, self.load_fn(path))
        return result


def _model_and_result(returned, model_id, kind):
    if not isinstance(returned, tuple) or len(returned) != 2:
        raise EnsembleError(f"The {kind} for model {model_id} must return (model, result)")
    return returned


def _require_models(ensemble):
    missing = [i for i, path in enumerate(ensemble.model_paths()) if not os.path.exists(path)]
    if missing:
        raise MissingModelError(f"Ensemble {ensemble.path} lacks model files for ids {missing}")


def _remove_model_files(ensemble, model_ids):
    for model_id in model_ids:
        path = ensemble.model_path(model_id)
        for leftover in [path] + glob.glob(f"{path}.tmp-*"):
            if os.path.exists(leftover):
                os.remove(leftover)


def _checked_setup(ensemble, pool, context):
    pool = pool or PoolConfig()
    pool.validate()
    context = context or ensemble.default_context or default_context(pool.num_processes)
    context.validate(pool.num_processes)
    return pool, context


def _run_ensemble_task(ensemble, kind, function, pool, context, stats):
    pool, context = _checked_setup(ensemble, pool, context)
    stats = stats if stats is not None else PoolStats()
    tracker = ModelTracker()
    task = EnsembleTask(
        kind=kind,
        function=function,
        directory=ensemble.path,
        tracker=tracker,
        save_fn=ensemble.save_fn or save_model,
        load_fn=ensemble.load_fn or load_model,
    )
    try:
        return run_pool(task, range(ensemble.num_models), pool, context, stats)
    finally:
        stats.peak_concurrent_models = tracker.peak


def create(ensemble, supplier, pool=None, context=None, stats=None):
    """
    Calls supplier(model_id, seed) once per atomic model and persists the returned model.
    Returns the suppliers' results in model-id order.
    """
    pool, context = _checked_setup(ensemble, pool, context)
    os.makedirs(ensemble.path, exist_ok=True)
    with ensemble_lock(ensemble.path):
        existing = [path for path in ensemble.model_paths() if os.path.exists(path)]
        if existing:
            raise EnsembleError(f"{ensemble.path} already contains model files, e.g. {existing[0]}")
        write_manifest(ensemble.path, ensemble.num_models, pool.base_seed)
        try:
            results = _run_ensemble_task(ensemble, SUPPLIER, supplier, pool, context, stats)
        except TaskFailedError as e:
            _remove_model_files(ensemble, e.failed_ids)
            raise
    logger.info("Created ensemble of %d models at %s", ensemble.num_models, ensemble.path)
    return results


def modify(ensemble, mapper, pool=None, context=None, stats=None):
    """
    Passes every atomic model through mapper(model_id, model) -> (model, result) and re-persists it.
    """
    _checked_setup(ensemble, pool, context)
    _require_models(ensemble)
    with ensemble_lock(ensemble.path):
        return _run_ensemble_task(ensemble, MAPPER, mapper, pool, context, stats)


def consume(ensemble, consumer, pool=None, context=None, stats=None):
    """
    Runs consumer(model_id, model) on every atomic model; no model file is written.
    """
    _checked_setup(ensemble, pool, context)
    _require_models(ensemble)
    with ensemble_lock(ensemble.path):
        return _run_ensemble_task(ensemble, CONSUMER, consumer, pool, context, stats)


# ---------------------------------------------------------------------------
# Quantification
# ---------------------------------------------------------------------------

def assemble_samples(outputs):
    """
    Stacks per-model (N, C) outputs into (N, S, C), S ordered by model id.
    """
    arrays = [np.asarray(output, dtype=np.float64) for output in outputs]
    wrong_rank = [i for i, array in enumerate(arrays) if array.ndim != 2]
    if wrong_rank:
        raise AssemblyError(f"Models {wrong_rank} returned outputs that are not 2-axis arrays", wrong_rank)
    expected, _ = Counter(array.shape for array in arrays).most_common(1)[0]
    offending = [i for i, array in enumerate(arrays) if array.shape != expected]
    if offending:
        shapes = ", ".join(f"model {i}: {arrays[i].shape}" for i in offending)
        raise AssemblyError(f"Output shapes differ from {expected}: {shapes}", offending)
    return np.stack(arrays, axis=1)


def _sampling_descriptors(quantifiers, registry):
    descriptors, single = resolve_quantifiers(quantifiers, registry)
    for descriptor in descriptors:
        if not descriptor.is_sampling_based:
            raise PointPredictorOnEnsembleError(
                f"'{descriptor.canonical_name}' is a point-predictor quantifier; point predictors are "
                f"single-model, quantify on a single atomic model instead"
            )
    problem_types = {descriptor.problem_type for descriptor in descriptors}
    if len(problem_types) > 1:
        names = ", ".join(descriptor.canonical_name for descriptor in descriptors)
        raise ValidationError(f"Quantifiers {names} mix classification and regression")
    return descriptors, single


def _quantify(outputs, descriptors, single, as_confidence):
    samples = assemble_samples(outputs)
    results = [convert_score(descriptor(samples), as_confidence) for descriptor in descriptors]
    return results[0] if single else results


def quantify_predictions(ensemble, quantifiers, consumer, pool=None, as_confidence=None, context=None,
                         registry=None, stats=None):
    """
    Quantifies the outputs returned by consumer(model_id, model), one sample per atomic model.
    """
    descriptors, single = _sampling_descriptors(quantifiers, registry)
    outputs = consume(ensemble, consumer, pool, context, stats)
    return _quantify(outputs, descriptors, single, as_confidence)


def ensemble_predict_quantified(ensemble, x, quantifiers, pool=None, as_confidence=None, context=None,
                                batch_size=DEFAULT_BATCH_SIZE, registry=None, stats=None):
    """
    Forward pass of x through every atomic model, quantified over the ensemble axis.
    """
    descriptors, single = _sampling_descriptors(quantifiers, registry)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"Inputs must be a 2-axis array, got shape {x.shape}")
    if len(x) == 0:
        raise ValidationError("At least one input is required")

    inputs_path = os.path.join(ensemble.path, f".inputs-{uuid.uuid4().hex}.npy")
    np.save(inputs_path, x)
    try:
        consumer = functools.partial(
            forward_consumer,
            inputs_path=inputs_path,
            batch_size=batch_size,
            problem_type=descriptors[0].problem_type,
        )
        outputs = consume(ensemble, consumer, pool, context, stats)
    finally:
        os.remove(inputs_path)
    return _quantify(outputs, descriptors, single, as_confidence)
