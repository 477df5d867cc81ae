"""Synthetic scaling benchmark: many client processes against a small
cluster, timing every API call.

Each cell of the (clients x shards) matrix gets a freshly launched
cluster. The model and script are stored in the cluster before any client
starts. Every client process owns one connection handle and runs the same
loop: put a tensor, transform it with the stored script, feed the result
to the stored model, fetch the model output; each of the four calls is
individually timed with a monotonic clock.

Client keys carry a per-client hash tag, so one client's working set
co-locates on one shard and clients spread across the cluster; latency
then measures orchestration cost, not accidental key collisions. The
stand-in model is a small dense network: the harness characterizes
request handling, not model arithmetic.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import client as client_mod
from .engine import Affine, Dense, ModelSpec, ScriptSpec, Step, Tanh, dump_model, dump_script
from .errors import EmptyGroup
from .launcher import launch_orchestrator

MODEL_NAME = "bench-model"
SCRIPT_NAME = "bench-script"
APIS = ("put_tensor", "run_script", "run_model", "unpack_tensor")

DEFAULT_BATCH_SIZE = 10_000
CLIENT_TIMEOUT = 300.0


@dataclass(frozen=True)
class TimingRecord:
    clients: int
    shards: int
    client_id: int
    iteration: int
    api: str
    elapsed: float  # seconds


@dataclass
class BenchConfig:
    clients: list[int]
    shards: list[int]
    iterations: int = 10
    # the default payload keeps execution light on purpose: the harness
    # measures request orchestration, and a heavy model would just saturate
    # the CPU with arithmetic and mask the queueing behavior under study
    rows: int = 8
    width: int = 16
    batch_size: int = DEFAULT_BATCH_SIZE
    out_dir: Path = Path("bench-out")
    base_port: int | None = None  # None: pick free ports per cell

    def __post_init__(self):
        if not self.clients or min(self.clients) < 1:
            raise ValueError("client counts must be positive")
        if not self.shards or min(self.shards) < 1:
            raise ValueError("shard counts must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        self.out_dir = Path(self.out_dir)


@dataclass
class BenchResult:
    records: list[TimingRecord] = field(default_factory=list)
    failed_cells: dict[tuple[int, int], str] = field(default_factory=dict)


def bench_model(width: int = 16, seed: int = 0) -> bytes:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(width)
    layers = (
        Dense(width, width, rng.normal(0, scale, (width, width)).astype(np.float32),
              rng.normal(0, 0.1, width).astype(np.float32)),
        Tanh(),
        Dense(width, width, rng.normal(0, scale, (width, width)).astype(np.float32),
              rng.normal(0, 0.1, width).astype(np.float32)),
    )
    return dump_model(ModelSpec(MODEL_NAME, layers))


def bench_script() -> bytes:
    spec = ScriptSpec(SCRIPT_NAME, 1, (Step(0, "affine", {"a": 0.5, "b": 0.01}),), "single")
    return dump_script(spec)


def identity_model() -> bytes:
    return dump_model(ModelSpec(MODEL_NAME, (Affine(1.0, 0.0),)))


def identity_script() -> bytes:
    return dump_script(ScriptSpec(SCRIPT_NAME, 1, (), "single"))


def client_loop(
    handle: client_mod.Client,
    iterations: int,
    client_id: int = 0,
    cell: tuple[int, int] = (1, 1),
    rows: int = 8,
    width: int = 16,
    warmup: int = 1,
) -> list[TimingRecord]:
    """Run the four-call loop ``iterations`` times, timing each call.

    ``warmup`` untimed rounds run first so connection setup and first-touch
    costs on the fresh cluster stay out of the recorded distribution.
    """
    clients, shards = cell
    tag = f"{{c{client_id}}}"
    key_in, key_script, key_model = tag + "x", tag + "s", tag + "m"
    rng = np.random.default_rng(client_id)
    payload = rng.normal(0, 1, (rows, width)).astype(np.float32)
    records = []

    def one_round(i: int, timed: bool) -> None:
        def call(api: str, fn) -> None:
            start = time.perf_counter()
            fn()
            if timed:
                records.append(
                    TimingRecord(clients, shards, client_id, i, api, time.perf_counter() - start)
                )

        call("put_tensor", lambda: handle.put_tensor(key_in, payload))
        call("run_script", lambda: handle.run_script(SCRIPT_NAME, [key_in], key_script))
        call("run_model", lambda: handle.run_model(MODEL_NAME, [key_script], [key_model]))
        call("unpack_tensor", lambda: handle.get_tensor(key_model))

    for i in range(warmup):
        one_round(i, timed=False)
    for i in range(iterations):
        one_round(i, timed=True)
    return records


def _client_proc(seed_address, client_id, iterations, cell, rows, width, csv_path) -> None:
    with client_mod.connect(seed_address) as handle:
        records = client_loop(handle, iterations, client_id, cell, rows, width)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        for r in records:
            writer.writerow([r.clients, r.shards, r.client_id, r.iteration, r.api, repr(r.elapsed)])


def _load_client_csv(path: Path) -> list[TimingRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            records.append(
                TimingRecord(int(row[0]), int(row[1]), int(row[2]), int(row[3]), row[4], float(row[5]))
            )
    return records


def run_cell(
    n_clients: int,
    n_shards: int,
    config: BenchConfig,
    scratch: Path,
) -> list[TimingRecord]:
    """Launch a fresh cluster, preset model and script, run all clients
    concurrently, tear down, and return the records."""
    scratch.mkdir(parents=True, exist_ok=True)
    base_port = config.base_port
    with launch_orchestrator(n_shards, base_port=base_port, run_dir=scratch / "cluster") as orch:
        seed = orch.seed_address
        with client_mod.connect(seed) as admin:
            admin.set_model(MODEL_NAME, bench_model(config.width), batch_size=config.batch_size)
            admin.set_script(SCRIPT_NAME, bench_script())
        ctx = multiprocessing.get_context("fork")
        procs = []
        csv_paths = []
        for cid in range(n_clients):
            path = scratch / f"client{cid}.csv"
            csv_paths.append(path)
            p = ctx.Process(
                target=_client_proc,
                args=(seed, cid, config.iterations, (n_clients, n_shards), config.rows,
                      config.width, path),
            )
            p.start()
            procs.append(p)
        deadline = time.monotonic() + CLIENT_TIMEOUT
        for p in procs:
            p.join(max(0.1, deadline - time.monotonic()))
            if p.is_alive():
                p.terminate()
                p.join()
                raise RuntimeError("client process timed out")
            if p.exitcode != 0:
                raise RuntimeError(f"client process exited with {p.exitcode}")
    records = []
    for path in csv_paths:
        records.extend(_load_client_csv(path))
    return records


def run_matrix(config: BenchConfig) -> BenchResult:
    """All (clients, shards) cells, each against a fresh cluster; a failed
    cell is recorded and the rest of the matrix continues."""
    result = BenchResult()
    config.out_dir.mkdir(parents=True, exist_ok=True)
    for n_shards in config.shards:
        for n_clients in config.clients:
            scratch = config.out_dir / "scratch" / f"c{n_clients}_s{n_shards}"
            try:
                result.records.extend(run_cell(n_clients, n_shards, config, scratch))
            except Exception as e:  # CellFailed: mark and continue
                result.failed_cells[(n_clients, n_shards)] = f"{type(e).__name__}: {e}"
    return result


# --- statistics -----------------------------------------------------------------


def six_stats(values: list[float]) -> dict[str, float]:
    """mean/median/q1/q3/min/max with linearly interpolated quartiles."""
    if not values:
        raise EmptyGroup("no samples to summarize")
    arr = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    return {
        "mean": float(arr.mean()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def summarize(records: list[TimingRecord]) -> list[dict]:
    """One summary row per (cell, api), sorted for stable output."""
    groups: dict[tuple[int, int, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.clients, r.shards, r.api), []).append(r.elapsed)
    rows = []
    for (clients, shards, api) in sorted(groups, key=lambda k: (k[0], k[1], APIS.index(k[2]))):
        stats = six_stats(groups[(clients, shards, api)])
        rows.append({"clients": clients, "shards": shards, "api": api, **stats})
    return rows


def mean_latency(records: list[TimingRecord], clients: int, shards: int, api: str) -> float:
    samples = [r.elapsed for r in records
               if r.clients == clients and r.shards == shards and r.api == api]
    if not samples:
        raise EmptyGroup(f"no samples for cell ({clients}, {shards}) api {api}")
    return float(np.mean(samples))


# --- output files ------------------------------------------------------------------

SUMMARY_COLUMNS = ["clients", "shards", "api", "mean", "median", "q1", "q3", "min", "max"]
BOXPLOT_COLUMNS = ["clients", "shards", "api", "whisker_lo", "q1", "median", "q3", "whisker_hi", "mean"]
RECORD_COLUMNS = ["clients", "shards", "client_id", "iteration", "api", "elapsed"]


def emit(summary_rows: list[dict], out_dir: Path) -> tuple[Path, Path]:
    """Write summary.csv plus a whisker-data file for box plots.

    Byte-identical for identical input: rows are pre-sorted and floats are
    written with repr (shortest round-trip form).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary_rows:
            writer.writerow([row["clients"], row["shards"], row["api"]]
                            + [repr(row[c]) for c in SUMMARY_COLUMNS[3:]])
    boxplot_path = out_dir / "boxplot.csv"
    with open(boxplot_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BOXPLOT_COLUMNS)
        for row in summary_rows:
            writer.writerow(
                [row["clients"], row["shards"], row["api"],
                 repr(row["min"]), repr(row["q1"]), repr(row["median"]),
                 repr(row["q3"]), repr(row["max"]), repr(row["mean"])]
            )
    return summary_path, boxplot_path


def write_records(records: list[TimingRecord], out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "records.csv"
    ordered = sorted(records, key=lambda r: (r.clients, r.shards, r.client_id, r.iteration,
                                             APIS.index(r.api)))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RECORD_COLUMNS)
        for r in ordered:
            writer.writerow([r.clients, r.shards, r.client_id, r.iteration, r.api, repr(r.elapsed)])
    return path


# --- CLI -------------------------------------------------------------------------


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="Latency scaling benchmark.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run the full (clients x shards) matrix")
    p_run.add_argument("--clients", type=_parse_int_list, default=[2, 8, 32],
                       help="comma-separated client counts")
    p_run.add_argument("--shards", type=_parse_int_list, default=[1, 4],
                       help="comma-separated shard counts")
    p_run.add_argument("--iters", type=int, default=10)
    p_run.add_argument("--out", default="bench-out")
    p_run.add_argument("--rows", type=int, default=8)
    p_run.add_argument("--width", type=int, default=16)
    p_run.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p_run.add_argument("--base-port", type=int, default=None)
    args = parser.parse_args(argv)

    config = BenchConfig(
        clients=args.clients,
        shards=args.shards,
        iterations=args.iters,
        rows=args.rows,
        width=args.width,
        batch_size=args.batch_size,
        out_dir=Path(args.out),
        base_port=args.base_port,
    )
    result = run_matrix(config)
    write_records(result.records, config.out_dir)
    emit(summarize(result.records), config.out_dir)
    for cell, reason in sorted(result.failed_cells.items()):
        print(f"cell {cell}: FAILED ({reason})")
    done = len(config.clients) * len(config.shards) - len(result.failed_cells)
    print(f"{done} cell(s) complete, {len(result.failed_cells)} failed; "
          f"{len(result.records)} records -> {config.out_dir}")
    return 1 if result.failed_cells else 0


if __name__ == "__main__":
    raise SystemExit(main())
