import logging
import os
import sys
import tempfile
import time

from src.ensemble import LazyEnsemble, NoneContext, PoolConfig, PoolStats, create
from views.reports import BENCH_FIELDS, write_report
from views.train import build_context, training_supplier

logger = logging.getLogger(__name__)


def benchmark_configuration(args, num_processes, supplier):
    """
    Creates a fresh ensemble in a temp dir and times it.
    """
    context = NoneContext() if num_processes == 0 else build_context(args, num_processes)
    pool = PoolConfig(
        num_processes=num_processes,
        models_per_process_before_respawn=args.models_per_process,
        base_seed=args.seed,
    )
    stats = PoolStats()
    with tempfile.TemporaryDirectory(prefix="uqwiz-bench-") as directory:
        ensemble = LazyEnsemble(os.path.join(directory, "ensemble"), args.num_models)
        started = time.perf_counter()
        create(ensemble, supplier, pool, context=context, stats=stats)
        elapsed = time.perf_counter() - started

    occupancy = dict(stats.peak_slot_occupancy) if num_processes else {"main": 1}
    logger.info("%d processes with %s: %.3fs", num_processes, context.name, elapsed)
    return {
        "num_processes": num_processes,
        "context": context.name,
        "wall_clock_seconds": elapsed,
        "reduction_percent": None,
        "peak_concurrent_models": stats.peak_concurrent_models,
        "per_slot_occupancy": occupancy,
    }


def cmd_benchmark(args):
    cores = os.cpu_count() or 1
    if cores < 2:
        logger.warning("Only %d CPU core available; parallel timings will not be meaningful", cores)

    process_counts = list(args.processes_list)
    if 0 not in process_counts:
        process_counts.insert(0, 0)

    supplier = training_supplier(args)
    rows = [benchmark_configuration(args, k, supplier) for k in process_counts]

    baseline = next(row for row in rows if row["num_processes"] == 0)["wall_clock_seconds"]
    for row in rows:
        if row["num_processes"] and baseline > 0:
            row["reduction_percent"] = round(100.0 * (1.0 - row["wall_clock_seconds"] / baseline), 2)
            print(
                f"{row['num_processes']} processes ({row['context']}): "
                f"{row['wall_clock_seconds']:.2f}s, {row['reduction_percent']:.1f}% less than sequential",
                file=sys.stderr,
            )

    write_report(rows, BENCH_FIELDS, args.output, args.format)
    return 0
