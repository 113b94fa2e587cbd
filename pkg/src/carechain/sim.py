"""Deterministic discrete-event benchmark of single-chain vs per-hospital chains.

Each chain is an ordering service feeding one serial committer:

* the orderer cuts a block when ``block_size`` txs are pending, when the
  batch timeout since the oldest pending tx expires, or when the workload
  has sent its last create;
* a block of ``k`` txs takes ``t_cons(q) + k * t_val`` to endorse, order
  and commit, where ``q`` is the endorsement quorum (majority of the
  chain's miners) and ``t_cons(q) = t_cons_base + q * t_cons_per_endorser``;
* blocks are served FIFO, one at a time.

Queries do not pass through ordering; a peer answers them from committed
state with a scan cost proportional to the chain height.

All times are simulated seconds. Nothing here touches the wall clock.
"""

from __future__ import annotations

import configparser
import hashlib
import heapq
import random
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .consortium import ChainSpec, ChainTopology, TopologyConfig, create_topology
from .errors import ConfigError
from .ledger import Role

DEFAULT_SEND_RATES = (20, 30, 40, 50, 60)

CSV_COLUMNS = (
    "scenario", "chains", "miners_per_chain", "send_rate_tps", "tx_count", "throughput_tps",
    "total_time_s", "avg_latency_s", "p95_latency_s", "cpu_units", "energy_units", "ram_mib_model",
)


@dataclass(frozen=True)
class CostModel:
    # calibrated so the 60 TPS, 2000-tx sweep point lands near the reference
    # 188.68 s / 83.34 s and 2227.2 / 3594.55 MiB baseline figures
    t_val_ms: float = 50.0
    t_cons_base_ms: float = 195.5
    t_cons_per_endorser_ms: float = 27.5
    batch_timeout_s: float = 2.0
    t_query_ms: float = 5.0
    t_read_block_ms: float = 4.0
    t_read_tx_ms: float = 1.5
    cpu_per_validation: float = 1.0
    cpu_per_consensus_round: float = 2.0
    cpu_per_block_read: float = 0.05
    energy_per_cpu_unit: float = 1.0
    ram_per_pooled_tx_mib: float = 0.25
    ram_per_chain_mib: float = 1479.0
    ram_per_miner_mib: float = 21.0

    def block_service_s(self, quorum: int, k: int) -> float:
        return (self.t_cons_base_ms + quorum * self.t_cons_per_endorser_ms + k * self.t_val_ms) / 1000.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    topology: ChainTopology
    tx_count: int = 2000
    send_rate: float = 60.0
    create_fraction: float = 1.0
    block_size: int = 10
    seed: int = 42
    cost: CostModel = field(default_factory=CostModel)

    @property
    def chains(self) -> int:
        return len(self.topology.chains)

    @property
    def miners_per_chain(self) -> int:
        return len(self.topology.chains[0].miners)

    @property
    def total_miners(self) -> int:
        return self.topology.miner_count()

    def validate(self):
        if self.tx_count <= 0:
            raise ConfigError("tx_count must be positive")
        if not self.send_rate > 0:
            raise ConfigError("send_rate must be positive")
        if not 0.0 < self.create_fraction <= 1.0:
            raise ConfigError("create_fraction must be in (0, 1]")
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if not self.topology.chains:
            raise ConfigError("topology has no health chains")
        for spec in self.topology.chains:
            if not spec.miners:
                raise ConfigError(f"chain {spec.chain_id} has no miners")
            if not spec.hospitals:
                raise ConfigError(f"chain {spec.chain_id} serves no hospital")
        for f in fields(self.cost):
            if getattr(self.cost, f.name) < 0:
                raise ConfigError(f"cost coefficient {f.name} is negative")


def sharded_topology(hospitals: int, chains: int, total_miners: int) -> ChainTopology:
    """``hospitals`` split evenly over ``chains``, miners split evenly too."""
    if chains < 1 or hospitals % chains or total_miners % chains:
        raise ConfigError("hospitals and miners must divide evenly over the chains")
    per_chain = total_miners // chains
    names = [f"H{i + 1}" for i in range(hospitals)]
    specs = []
    for c in range(chains):
        served = tuple(names[c::chains])
        miners = tuple((f"c{c + 1}-m{i + 1:02d}", Role.HOSPITAL) for i in range(per_chain))
        specs.append(ChainSpec(f"chain-{c + 1}", served, miners))
    return ChainTopology(tuple(specs), None, ())


def baseline_variants(base: ScenarioConfig) -> list[ScenarioConfig]:
    """The two-hospital comparison: one chain of 16 vs one chain of 8 per hospital."""
    return [
        replace(base, name="1x16", topology=sharded_topology(2, 1, 16)),
        replace(base, name="2x8", topology=sharded_topology(2, 2, 16)),
    ]


@dataclass
class MetricsRow:
    scenario: str
    chains: int
    miners_per_chain: int
    send_rate_tps: float
    tx_count: int
    throughput_tps: float
    total_time_s: float
    avg_latency_s: float
    p95_latency_s: float
    cpu_units: float
    energy_units: float
    ram_mib_model: float
    # not part of the CSV
    catchup_read_s: float = 0.0
    query_throughput_tps: float = 0.0
    query_count: int = 0
    avg_query_latency_s: float = 0.0
    committed: int = 0
    trace_hash: str = ""

    @property
    def cpu_rate(self) -> float:
        return self.cpu_units / self.total_time_s if self.total_time_s else 0.0

    def csv_values(self) -> list[str]:
        return [
            self.scenario, str(self.chains), str(self.miners_per_chain), f"{self.send_rate_tps:g}",
            str(self.tx_count), f"{self.throughput_tps:.6f}", f"{self.total_time_s:.6f}",
            f"{self.avg_latency_s:.6f}", f"{self.p95_latency_s:.6f}", f"{self.cpu_units:.3f}",
            f"{self.energy_units:.3f}", f"{self.ram_mib_model:.3f}",
        ]


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def row(self, scenario: str, send_rate: Optional[float] = None) -> MetricsRow:
        for r in self.rows:
            if r.scenario == scenario and (send_rate is None or r.send_rate_tps == send_rate):
                return r
        raise KeyError((scenario, send_rate))


@dataclass
class SimulationResult:
    row: MetricsRow
    submit_times: dict
    commit_times: dict
    trace_hash: str
    committed_order: list


class _Chain:
    def __init__(self, spec: ChainSpec):
        self.spec = spec
        self.miners = len(spec.miners)
        self.quorum = self.miners // 2 + 1
        self.pending: list[int] = []
        self.batch_seq = 0
        self.queue: list[list[int]] = []
        self.busy = False
        self.height = 0
        self.committed = 0
        self.pool = 0
        self.peak_pool = 0


_ARRIVAL, _TIMEOUT, _BLOCK_DONE = 0, 1, 2


class _Simulator:

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.cost = cfg.cost
        self.chains = [_Chain(spec) for spec in cfg.topology.chains]
        self.chain_of_hospital = {h: i for i, c in enumerate(self.chains) for h in c.spec.hospitals}
        self.events: list = []
        self.seq = 0
        self.trace = hashlib.sha256()
        self.submit_times: dict[int, float] = {}
        self.commit_times: dict[int, float] = {}
        self.committed_order: list[int] = []
        self.cpu = 0.0
        self.peak_ram = 0.0
        self.query_latencies: list[float] = []
        self.query_answers: list[int] = []

    def push(self, t: float, kind: int, a: int, b=None):
        heapq.heappush(self.events, (t, self.seq, kind, a, b))
        self.seq += 1

    def log(self, t: float, what: str):
        self.trace.update(f"{t:.9f} {what}\n".encode())

    def workload(self):
        """Arrival i happens at (i + 1) / rate: the last one lands exactly at N / rate."""
        cfg = self.cfg
        rng = random.Random(cfg.seed)
        hospitals = [h for c in self.chains for h in c.spec.hospitals]
        n_creates = cfg.tx_count
        n_queries = round(n_creates * (1 - cfg.create_fraction) / cfg.create_fraction)
        targets = [hospitals[i % len(hospitals)] for i in range(n_creates)]
        rng.shuffle(targets)
        ops = [("create", h) for h in targets]
        for _ in range(n_queries):
            ops.insert(rng.randrange(len(ops) + 1), ("query", rng.choice(hospitals)))
        last_create = max(i for i, (op, _) in enumerate(ops) if op == "create")
        return ops, last_create

    def record_ram(self):
        c = self.cost
        ram = sum(c.ram_per_chain_mib + ch.miners * c.ram_per_miner_mib + ch.pool * c.ram_per_pooled_tx_mib
                  for ch in self.chains)
        self.peak_ram = max(self.peak_ram, ram)

    def cut(self, t: float, ci: int, reason: str):
        ch = self.chains[ci]
        block, ch.pending = ch.pending[:self.cfg.block_size], ch.pending[self.cfg.block_size:]
        ch.batch_seq += 1
        ch.queue.append(block)
        self.log(t, f"cut {ci} {len(block)} {reason}")
        if ch.pending:
            self.push(t + self.cost.batch_timeout_s, _TIMEOUT, ci, ch.batch_seq)
        self.start_service(t, ci)

    def start_service(self, t: float, ci: int):
        ch = self.chains[ci]
        if ch.busy or not ch.queue:
            return
        ch.busy = True
        block = ch.queue.pop(0)
        self.push(t + self.cost.block_service_s(ch.quorum, len(block)), _BLOCK_DONE, ci, block)

    def run(self) -> SimulationResult:
        cfg, cost = self.cfg, self.cost
        ops, last_create = self.workload()
        for i in range(len(ops)):
            self.push((i + 1) / cfg.send_rate, _ARRIVAL, i)
        self.record_ram()

        while self.events:
            t, _, kind, a, b = heapq.heappop(self.events)
            if kind == _ARRIVAL:
                op, hospital = ops[a]
                ci = self.chain_of_hospital[hospital]
                ch = self.chains[ci]
                if op == "create":
                    self.submit_times[a] = t
                    ch.pending.append(a)
                    ch.pool += 1
                    ch.peak_pool = max(ch.peak_pool, ch.pool)
                    self.log(t, f"submit {a} {ci}")
                    if len(ch.pending) == 1:
                        self.push(t + cost.batch_timeout_s, _TIMEOUT, ci, ch.batch_seq)
                    if len(ch.pending) >= cfg.block_size:
                        self.cut(t, ci, "size")
                    if a == last_create:
                        for cj, other in enumerate(self.chains):
                            while other.pending:
                                self.cut(t, cj, "drain")
                else:
                    latency = (cost.t_query_ms + ch.height * cost.t_read_block_ms) / 1000.0
                    self.query_latencies.append(latency)
                    self.query_answers.append(ch.committed)
                    self.cpu += 1 + ch.height * cost.cpu_per_block_read
                    self.log(t, f"query {a} {ci} {ch.committed}")
            elif kind == _TIMEOUT:
                ch = self.chains[a]
                if b == ch.batch_seq and ch.pending:
                    self.cut(t, a, "timeout")
            else:
                ch = self.chains[a]
                ch.busy = False
                ch.height += 1
                ch.committed += len(b)
                ch.pool -= len(b)
                for tx in b:
                    self.commit_times[tx] = t
                    self.committed_order.append(tx)
                self.cpu += ch.miners * (len(b) * cost.cpu_per_validation + cost.cpu_per_consensus_round)
                self.log(t, f"commit {a} {ch.height} {len(b)}")
                self.start_service(t, a)
            self.record_ram()

        return self.result()

    def result(self) -> SimulationResult:
        cfg, cost = self.cfg, self.cost
        ids = sorted(self.submit_times)
        latencies = np.array([self.commit_times[i] - self.submit_times[i] for i in ids])
        total_time = max(self.commit_times.values())
        committed = len(self.commit_times)

        catchup = [(ch.height * cost.t_read_block_ms + ch.committed * cost.t_read_tx_ms) / 1000.0
                   for ch in self.chains]
        catchup_s = max(catchup)
        trace_hash = self.trace.hexdigest()
        row = MetricsRow(
            scenario=cfg.name,
            chains=len(self.chains),
            miners_per_chain=self.chains[0].miners,
            send_rate_tps=cfg.send_rate,
            tx_count=cfg.tx_count,
            throughput_tps=committed / total_time,
            total_time_s=total_time,
            avg_latency_s=float(latencies.sum() / len(latencies)),
            p95_latency_s=float(np.percentile(latencies, 95)),
            cpu_units=self.cpu,
            energy_units=self.cpu * cost.energy_per_cpu_unit,
            ram_mib_model=self.peak_ram,
            catchup_read_s=catchup_s,
            query_throughput_tps=committed / catchup_s if catchup_s else 0.0,
            query_count=len(self.query_latencies),
            avg_query_latency_s=float(np.mean(self.query_latencies)) if self.query_latencies else 0.0,
            committed=committed,
            trace_hash=trace_hash,
        )
        return SimulationResult(row, self.submit_times, self.commit_times, trace_hash, self.committed_order)


def simulate(cfg: ScenarioConfig) -> SimulationResult:
    cfg.validate()
    return _Simulator(cfg).run()


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    return MetricsReport([simulate(cfg).row])


def run_comparison(base: ScenarioConfig, variants: Optional[list] = None,
                   send_rates=DEFAULT_SEND_RATES) -> MetricsReport:
    """One row per (variant, send rate), variants in the order given."""
    variants = baseline_variants(base) if variants is None else list(variants)
    if not variants:
        raise ConfigError("no variants to compare")
    miners = {v.total_miners for v in variants}
    counts = {v.tx_count for v in variants} | {base.tx_count}
    if len(miners) != 1 or len(counts) != 1:
        raise ConfigError("variants must share tx_count and total miner count")
    report = MetricsReport()
    for v in variants:
        for rate in send_rates:
            report.rows.append(simulate(replace(v, send_rate=float(rate))).row)
    return report


# -- scenario files ------------------------------------------------------------

_SCENARIO_KEYS = {"name", "tx_count", "send_rate", "send_rates", "create_fraction", "block_size", "seed"}


def _cost_from(section) -> CostModel:
    known = {f.name for f in fields(CostModel)}
    unknown = set(section.keys()) - known - set(section.parser.defaults())
    if unknown:
        raise ConfigError(f"unknown cost keys: {', '.join(sorted(unknown))}")
    try:
        return CostModel(**{k: float(section[k]) for k in section.keys() if k in known})
    except ValueError as exc:
        raise ConfigError(f"bad cost value: {exc}") from None


def load_scenario(path) -> tuple[ScenarioConfig, tuple, list]:
    """Read a scenario file; returns (config, send-rate sweep, comparison variants).

    Sections: ``[scenario]``, ``[topology]`` (see TopologyConfig), optional
    ``[cost]``, and any number of ``[variant NAME]`` sections whose keys
    override ``[topology]`` for that variant.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed scenario file {path}: {exc}") from None
    for required in ("scenario", "topology"):
        if not parser.has_section(required):
            raise ConfigError(f"{path} has no [{required}] section")
    for name in parser.sections():
        if name not in ("scenario", "topology", "cost") and not name.startswith("variant "):
            raise ConfigError(f"unknown section [{name}]")
    s = parser["scenario"]
    unknown = set(s.keys()) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    cost = _cost_from(parser["cost"]) if parser.has_section("cost") else CostModel()
    topo_cfg = TopologyConfig.from_section(parser["topology"])
    try:
        cfg = ScenarioConfig(
            name=s.get("name", "scenario"),
            topology=create_topology(topo_cfg),
            tx_count=s.getint("tx_count", 2000),
            send_rate=s.getfloat("send_rate", 60.0),
            create_fraction=s.getfloat("create_fraction", 1.0),
            block_size=s.getint("block_size", topo_cfg.block_size),
            seed=s.getint("seed", 42),
            cost=cost,
        )
        rates = tuple(float(r) for r in s.get("send_rates", ",".join(map(str, DEFAULT_SEND_RATES))).split(","))
    except ValueError as exc:
        raise ConfigError(f"bad scenario value: {exc}") from None
    cfg.validate()

    variants = []
    for name in parser.sections():
        if not name.startswith("variant "):
            continue
        merged = configparser.ConfigParser()
        merged.read_dict({"topology": {**dict(parser["topology"]), **dict(parser[name])}})
        topo = create_topology(TopologyConfig.from_section(merged["topology"]))
        variants.append(replace(cfg, name=name.removeprefix("variant ").strip(), topology=topo))
    return cfg, rates, variants
