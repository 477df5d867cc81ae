"""Stand-alone cluster runner: bring up N shards and hold until killed.

Used by out-of-process clients (and their test suites) that need a live
cluster without driving the Python launcher API themselves. Prints one
READY line with the topology file path once every shard answers PING.
"""

from __future__ import annotations

import argparse
import signal
import threading

from .launcher import launch_orchestrator


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tensorgrid-cluster", description="Run a local cluster.")
    parser.add_argument("--shards", type=int, default=1)
    parser.add_argument("--base-port", type=int, default=None)
    parser.add_argument("--run-dir", default="cluster-run")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    orch = launch_orchestrator(
        args.shards, base_port=args.base_port, run_dir=args.run_dir, workers=args.workers
    )
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    addresses = ",".join(s.address for s in orch.topology.shards)
    print(f"READY {orch.topology_path} {addresses}", flush=True)
    try:
        stop.wait()
    finally:
        orch.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
