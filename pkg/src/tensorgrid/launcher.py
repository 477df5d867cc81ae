"""Experiment orchestration: parameter sweeps, input-file generation,
local process launch/monitor/stop/restart, and cluster bring-up.

Only a local launcher is provided; batch-system settings are carried as
inert metadata so configurations stay portable. Template files use
``;name;`` placeholder tokens. Member stdout/stderr always land in
``<member>.out`` / ``<member>.err`` inside the member directory.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import re
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol
from .errors import (
    AlreadyRunning,
    EmptyParams,
    MissingParam,
    NotGenerated,
    PortInUse,
    ShardStartTimeout,
    SpawnFailed,
    TemplateNotFound,
    UnequalLengths,
)
from .protocol import Command
from .routing import ClusterTopology, plan_topology

STATUS_CREATED = "created"
STATUS_GENERATED = "generated"
STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"
STATUS_STOPPED = "stopped"

_TERMINAL = {STATUS_COMPLETED, STATUS_FAILED, STATUS_STOPPED}

_TOKEN = re.compile(r";([A-Za-z_][A-Za-z0-9_]*);")


@dataclass
class RunSettings:
    executable: str
    args: list[str] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)
    working_dir: str | None = None
    processes: int = 1

    def __post_init__(self):
        if not self.executable:
            raise SpawnFailed("RunSettings.executable must be non-empty")
        if self.processes < 1:
            raise SpawnFailed("RunSettings.processes must be >= 1")


@dataclass
class BatchSettings:
    """Recorded, never acted on: keeps configs portable to batch systems."""

    account: str = ""
    queue: str = ""
    wall_time: str = ""


class ModelHandle:
    def __init__(
        self,
        name: str,
        run_settings: RunSettings,
        params: dict | None = None,
        templates: list[str] | None = None,
    ):
        self.name = name
        self.run_settings = run_settings
        self.params = dict(params or {})
        self.templates = list(templates or [])
        self.status = STATUS_CREATED
        self.run_dir: Path | None = None
        self.procs: list[subprocess.Popen] = []
        self.exit_codes: list[int | None] = []

    def __repr__(self):
        return f"ModelHandle({self.name!r}, status={self.status})"


class Ensemble:
    def __init__(self, name: str, members: list[ModelHandle], strategy: str):
        self.name = name
        self.members = members
        self.strategy = strategy

    def __repr__(self):
        return f"Ensemble({self.name!r}, {len(self.members)} members)"


def _permute(params: dict, strategy: str, replicas: int) -> list[dict]:
    if strategy == "all-permutations":
        if not params:
            raise EmptyParams("all-permutations needs at least one parameter")
        names = list(params)
        combos = itertools.product(*(params[n] for n in names))
        return [dict(zip(names, combo)) for combo in combos]
    if strategy == "step":
        if not params:
            raise EmptyParams("step needs at least one parameter")
        lengths = {len(v) for v in params.values()}
        if len(lengths) != 1:
            raise UnequalLengths(f"step needs equal-length lists, got lengths {sorted(lengths)}")
        n = lengths.pop()
        return [{name: values[i] for name, values in params.items()} for i in range(n)]
    if strategy == "replicas":
        if replicas < 1:
            raise EmptyParams(f"replicas needs n >= 1, got {replicas}")
        # every replica shares the same (single-valued) parameters
        fixed = {}
        for name, values in params.items():
            vals = values if isinstance(values, (list, tuple)) else [values]
            if len(vals) != 1:
                raise UnequalLengths(f"replicas takes single-valued params, {name!r} has {len(vals)}")
            fixed[name] = vals[0]
        return [dict(fixed) for _ in range(replicas)]
    raise EmptyParams(f"unknown strategy {strategy!r}")


class Experiment:
    """Creates entities, writes their input trees, and drives processes."""

    def __init__(self, name: str, exp_path: str | Path):
        self.name = name
        self.path = Path(exp_path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._entities: dict[str, ModelHandle | Ensemble] = {}

    # --- construction ---------------------------------------------------------

    def create_model(
        self,
        name: str,
        run_settings: RunSettings,
        params: dict | None = None,
        templates: list[str] | None = None,
    ) -> ModelHandle:
        handle = ModelHandle(name, run_settings, params, templates)
        self._entities[name] = handle
        return handle

    def create_ensemble(
        self,
        name: str,
        params: dict,
        strategy: str,
        run_settings: RunSettings,
        templates: list[str] | None = None,
        replicas: int = 0,
        batch_settings: BatchSettings | None = None,
    ) -> Ensemble:
        member_params = _permute(params, strategy, replicas)
        members = []
        for i, p in enumerate(member_params):
            members.append(ModelHandle(f"{name}_{i}", run_settings, p, templates))
        ensemble = Ensemble(name, members, strategy)
        ensemble.batch_settings = batch_settings or BatchSettings()
        self._entities[name] = ensemble
        return ensemble

    # --- generation -------------------------------------------------------------

    def _members(self, entity: ModelHandle | Ensemble) -> list[ModelHandle]:
        return entity.members if isinstance(entity, Ensemble) else [entity]

    def generate(self, entity: ModelHandle | Ensemble) -> None:
        """Write one directory per member with templates substituted.

        Deterministic: regenerating produces a byte-identical tree.
        """
        for member in self._members(entity):
            member_dir = self.path / member.name
            member_dir.mkdir(parents=True, exist_ok=True)
            for template in member.templates:
                src = Path(template)
                if not src.is_file():
                    raise TemplateNotFound(f"template {template!r} does not exist")
                text = src.read_text(encoding="utf-8")
                for name, value in member.params.items():
                    text = text.replace(f";{name};", str(value))
                leftover = _TOKEN.search(text)
                if leftover:
                    raise MissingParam(
                        f"template {src.name!r} token ;{leftover.group(1)}; has no parameter"
                    )
                (member_dir / src.name).write_text(text, encoding="utf-8")
            member.run_dir = member_dir
            if member.status == STATUS_CREATED:
                member.status = STATUS_GENERATED
        self._write_manifest()

    # --- launch / monitor ----------------------------------------------------------

    def start(self, entity: ModelHandle | Ensemble, block: bool = True) -> dict[str, str]:
        for member in self._members(entity):
            if member.status == STATUS_RUNNING:
                raise AlreadyRunning(f"{member.name} is already running")
            if member.status == STATUS_CREATED:
                raise NotGenerated(f"{member.name} must be generated before start")
        for member in self._members(entity):
            self._spawn(member)
        self._write_manifest()
        if block:
            self.wait(entity)
        return self.poll(entity)

    def _spawn(self, member: ModelHandle) -> None:
        rs = member.run_settings
        run_dir = Path(rs.working_dir) if rs.working_dir else (member.run_dir or self.path / member.name)
        run_dir.mkdir(parents=True, exist_ok=True)
        env = dict(os.environ)
        env.update(rs.env)
        member.procs = []
        member.exit_codes = []
        for idx in range(rs.processes):
            suffix = f".{idx}" if rs.processes > 1 else ""
            out = open(run_dir / f"{member.name}{suffix}.out", "wb")
            err = open(run_dir / f"{member.name}{suffix}.err", "wb")
            try:
                proc = subprocess.Popen(
                    [rs.executable, *[str(a) for a in rs.args]],
                    cwd=str(run_dir),
                    env=env,
                    stdout=out,
                    stderr=err,
                )
            except OSError as e:
                out.close()
                err.close()
                member.status = STATUS_FAILED
                raise SpawnFailed(f"cannot start {member.name}: {e}") from None
            finally:
                out.close()
                err.close()
            member.procs.append(proc)
            member.exit_codes.append(None)
        member.run_dir = run_dir
        member.status = STATUS_RUNNING

    def _refresh(self, member: ModelHandle) -> None:
        if member.status != STATUS_RUNNING:
            return
        all_done = True
        for i, proc in enumerate(member.procs):
            code = proc.poll()
            member.exit_codes[i] = code
            if code is None:
                all_done = False
        if all_done and member.procs:
            member.status = (
                STATUS_COMPLETED if all(c == 0 for c in member.exit_codes) else STATUS_FAILED
            )

    def poll(self, entity: ModelHandle | Ensemble) -> dict[str, str]:
        statuses = {}
        for member in self._members(entity):
            self._refresh(member)
            statuses[member.name] = member.status
        self._write_manifest()
        return statuses

    def wait(self, entity: ModelHandle | Ensemble, timeout: float | None = None) -> dict[str, str]:
        deadline = None if timeout is None else time.monotonic() + timeout
        for member in self._members(entity):
            for proc in member.procs:
                remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
                try:
                    proc.wait(timeout=remaining)
                except subprocess.TimeoutExpired:
                    break
        return self.poll(entity)

    def stop(self, entity: ModelHandle | Ensemble) -> None:
        for member in self._members(entity):
            self._refresh(member)
            if member.status != STATUS_RUNNING:
                continue
            for proc in member.procs:
                if proc.poll() is None:
                    proc.terminate()
            for proc in member.procs:
                try:
                    proc.wait(timeout=5.0)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
            member.exit_codes = [p.returncode for p in member.procs]
            member.status = STATUS_STOPPED
        self._write_manifest()

    def restart(self, entity: ModelHandle | Ensemble, block: bool = True) -> dict[str, str]:
        for member in self._members(entity):
            self._refresh(member)
            if member.status == STATUS_RUNNING:
                raise AlreadyRunning(f"{member.name} is still running")
            if member.status in _TERMINAL:
                member.status = STATUS_GENERATED
        return self.start(entity, block=block)

    # --- manifest ---------------------------------------------------------------

    def _write_manifest(self) -> None:
        doc = {"experiment": self.name, "entities": []}
        for name, entity in self._entities.items():
            members = []
            for m in self._members(entity):
                members.append(
                    {
                        "name": m.name,
                        "params": {k: v for k, v in m.params.items()},
                        "status": m.status,
                        "pids": [p.pid for p in m.procs if p.poll() is None],
                        "exit_codes": m.exit_codes,
                        "run_dir": str(m.run_dir) if m.run_dir else None,
                    }
                )
            doc["entities"].append(
                {
                    "name": name,
                    "kind": "ensemble" if isinstance(entity, Ensemble) else "model",
                    "members": members,
                }
            )
        (self.path / "manifest").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    # --- cluster bring-up ----------------------------------------------------------

    def launch_orchestrator(
        self, n_shards: int, base_port: int | None = None, workers: int = 1
    ) -> "Orchestrator":
        return launch_orchestrator(
            n_shards, base_port=base_port, run_dir=self.path / "orchestrator", workers=workers
        )


def free_ports(n: int) -> list[int]:
    """Reserve n distinct free TCP ports by binding and releasing them."""
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


class Orchestrator:
    """Handle to a launched shard cluster."""

    def __init__(self, topology: ClusterTopology, procs: list[subprocess.Popen], run_dir: Path):
        self.topology = topology
        self.procs = procs
        self.run_dir = run_dir
        self.topology_path = run_dir / "topology.json"

    @property
    def seed_address(self) -> str:
        return self.topology.shards[0].address

    def shutdown(self) -> None:
        for proc in self.procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self) -> "Orchestrator":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def _ping_until(address: str, deadline: float) -> bool:
    host, _, port = address.rpartition(":")
    while time.monotonic() < deadline:
        try:
            with socket.create_connection((host, int(port)), timeout=0.5) as sock:
                sock.sendall(protocol.pack_request(Command.PING, 1))
                protocol.read_frame(sock)
                return True
        except OSError:
            time.sleep(0.05)
    return False


def launch_orchestrator(
    n_shards: int,
    base_port: int | None = None,
    run_dir: str | Path | None = None,
    workers: int = 1,
) -> Orchestrator:
    """Start n shard processes with a generated topology; confirm readiness
    by PINGing each one."""
    if base_port is None:
        ports = free_ports(n_shards)
    else:
        ports = list(range(base_port, base_port + n_shards))
        for port in ports:
            probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                probe.bind(("127.0.0.1", port))
            except OSError:
                raise PortInUse(f"port {port} is already bound") from None
            finally:
                probe.close()
    addresses = [f"127.0.0.1:{p}" for p in ports]
    topology = plan_topology(n_shards, addresses)
    run_dir = Path(run_dir) if run_dir else Path.cwd() / "orchestrator"
    run_dir.mkdir(parents=True, exist_ok=True)
    topo_path = run_dir / "topology.json"
    topo_path.write_text(topology.to_json() + "\n", encoding="utf-8")
    procs = []
    try:
        for shard in topology.shards:
            log = open(run_dir / f"shard{shard.shard_id}.log", "wb")
            try:
                proc = subprocess.Popen(
                    [
                        sys.executable,
                        "-m",
                        "tensorgrid.server",
                        "--listen",
                        shard.address,
                        "--shard-id",
                        str(shard.shard_id),
                        "--topology",
                        str(topo_path),
                        "--workers",
                        str(workers),
                    ],
                    stdout=log,
                    stderr=subprocess.STDOUT,
                )
            finally:
                log.close()
            procs.append(proc)
        deadline = time.monotonic() + 15.0
        for shard in topology.shards:
            if not _ping_until(shard.address, deadline):
                raise ShardStartTimeout(f"shard {shard.shard_id} at {shard.address} never answered")
    except BaseException:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        raise
    return Orchestrator(topology, procs, run_dir)


# --- CLI -----------------------------------------------------------------------


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _experiment_from_config(config: dict) -> tuple[Experiment, Ensemble]:
    exp = Experiment(config["name"], config.get("path", config["name"]))
    ens_cfg = config["ensemble"]
    run_cfg = ens_cfg["run"]
    rs = RunSettings(
        executable=run_cfg["executable"],
        args=[str(a) for a in run_cfg.get("args", [])],
        env={str(k): str(v) for k, v in run_cfg.get("env", {}).items()},
        processes=int(run_cfg.get("processes", 1)),
    )
    strategy = ens_cfg.get("strategy", "all-permutations")
    ensemble = exp.create_ensemble(
        ens_cfg["name"],
        params=ens_cfg.get("params", {}),
        strategy=strategy,
        run_settings=rs,
        templates=ens_cfg.get("templates", []),
        replicas=int(ens_cfg.get("replicas", 0)),
    )
    return exp, ensemble


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    exp, ensemble = _experiment_from_config(config)
    exp.generate(ensemble)
    statuses = exp.start(ensemble, block=not args.no_block)
    for name, status in statuses.items():
        print(f"{name}: {status}")
    if args.no_block:
        print(f"launched; poll with: experiment status {exp.path}")
        return 0
    return 0 if all(s == STATUS_COMPLETED for s in statuses.values()) else 1


def _read_manifest(exp_path: str) -> dict:
    manifest = Path(exp_path) / "manifest"
    if not manifest.is_file():
        raise SystemExit(f"no manifest under {exp_path!r}")
    return json.loads(manifest.read_text(encoding="utf-8"))


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def _cmd_status(args: argparse.Namespace) -> int:
    doc = _read_manifest(args.exp_path)
    for entity in doc["entities"]:
        for member in entity["members"]:
            status = member["status"]
            if status == STATUS_RUNNING and not any(_pid_alive(p) for p in member["pids"]):
                status += " (pids gone)"
            print(f"{member['name']}: {status}")
    return 0


def _cmd_stop(args: argparse.Namespace) -> int:
    doc = _read_manifest(args.exp_path)
    stopped = 0
    for entity in doc["entities"]:
        for member in entity["members"]:
            for pid in member["pids"]:
                if _pid_alive(pid):
                    os.kill(pid, signal.SIGTERM)
                    stopped += 1
    print(f"sent SIGTERM to {stopped} process(es)")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="experiment", description="Run and manage experiments.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="create, generate and start from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--no-block", action="store_true", help="return right after launch")
    p_run.set_defaults(func=_cmd_run)
    p_status = sub.add_parser("status", help="print member statuses from a manifest")
    p_status.add_argument("exp_path")
    p_status.set_defaults(func=_cmd_status)
    p_stop = sub.add_parser("stop", help="terminate live members recorded in a manifest")
    p_stop.add_argument("exp_path")
    p_stop.set_defaults(func=_cmd_stop)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
