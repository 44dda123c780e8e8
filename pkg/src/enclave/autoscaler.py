"""Elastic pool manager over a simulated cloud provider.

Two pools back the two queue tiers: Test keeps a warm on-demand floor of one
instance so small jobs start immediately, Production buys spot capacity with
a cheapest-of-four-zones bid and tolerates interruptions (the broker's
visibility timeout redelivers whatever an interrupted instance was holding).

Everything runs on the injected logical clock. Spot prices come from seeded
mean-reverting walks so whole simulations replay exactly.
"""

from __future__ import annotations

import csv
import json
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Optional

from .errors import BidTooLow

ON_DEMAND = "on_demand"
SPOT = "spot"

PROVISIONING = "provisioning"
READY = "ready"
BUSY = "busy"
DRAINING = "draining"
TERMINATED = "terminated"

ZONES = (1, 2, 3, 4)

# policy defaults: scale up past 2 queued jobs per live instance, drain after
# 10 idle minutes, bid 1.25x the cheapest current zone price
BACKLOG_PER_INSTANCE = 2
IDLE_TIMEOUT_SECONDS = 600.0
BID_MARGIN = 1.25

PRICE_STEP_SECONDS = 10.0

# hourly on-demand rates; spot traces revert to a fraction of these
ON_DEMAND_PRICES = {
    "t2.medium": 0.052,
    "c3.8xlarge": 1.68,
    "i2.8xlarge": 6.82,
}
SPOT_MEAN_FRACTION = 0.25
SPOT_PRICE_CAP_FRACTION = 0.9   # market never clears above 90% of on-demand


@dataclass(frozen=True)
class InstanceSpec:
    name: str
    vcpus: int
    ram_gb: int
    market: str                      # on_demand | spot
    provision_delay_seconds: float


SPEC_CATALOG = {
    "t2.medium": InstanceSpec("t2.medium", 2, 4, ON_DEMAND, 90.0),
    "c3.8xlarge": InstanceSpec("c3.8xlarge", 32, 60, SPOT, 240.0),
    "i2.8xlarge": InstanceSpec("i2.8xlarge", 36, 244, SPOT, 240.0),
}


@dataclass
class WorkerInstance:
    instance_id: str
    pool: str
    zone: int
    spec: InstanceSpec
    state: str
    launched_at: float
    price_per_hour: float
    bid_price: Optional[float] = None     # spot only
    ready_at: Optional[float] = None      # scheduled, while provisioning
    decided_at: float = 0.0               # when evaluate approved the launch
    became_ready_at: Optional[float] = None
    idle_since: Optional[float] = None
    billed_until: float = 0.0

    @property
    def live(self) -> bool:
        return self.state not in (DRAINING, TERMINATED)


@dataclass
class Pool:
    name: str
    spec: InstanceSpec
    min_instances: int
    backlog_per_instance: int = BACKLOG_PER_INSTANCE
    idle_timeout_seconds: float = IDLE_TIMEOUT_SECONDS
    bid_margin: float = BID_MARGIN
    instances: list[WorkerInstance] = field(default_factory=list)

    def live_instances(self) -> list[WorkerInstance]:
        return [i for i in self.instances if i.live]

    def non_terminated(self) -> list[WorkerInstance]:
        return [i for i in self.instances if i.state != TERMINATED]


@dataclass(frozen=True)
class ProvisioningAction:
    kind: str                 # launch | drain
    pool: str
    count: int = 0
    instance_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class ProvisionEvent:
    """One launch decision with the market snapshot it saw."""
    t: float
    pool: str
    spec: str
    market: str
    zone: int
    bid: Optional[float]
    zone_prices: tuple[float, ...]
    instance_id: str


class SpotMarket:
    """Seeded per-(spec, zone) price traces on a fixed time step.

    Traces are mean-reverting walks extended lazily, so price(spec, zone, t)
    is pure: the same seed and time always give the same price.
    """

    def __init__(self, seed: int = 7, kappa: float = 0.2, sigma: float = 0.08):
        self.seed = seed
        self.kappa = kappa
        self.sigma = sigma
        self._traces: dict[tuple[str, int], list[float]] = {}
        self._rngs: dict[tuple[str, int], random.Random] = {}
        self._lock = threading.Lock()

    def _mean(self, spec_name: str) -> float:
        return ON_DEMAND_PRICES[spec_name] * SPOT_MEAN_FRACTION

    def _cap(self, spec_name: str) -> float:
        return ON_DEMAND_PRICES[spec_name] * SPOT_PRICE_CAP_FRACTION

    def price(self, spec_name: str, zone: int, t: float) -> float:
        if zone not in ZONES:
            raise ValueError(f"zone must be one of {ZONES}, got {zone}")
        idx = int(t // PRICE_STEP_SECONDS)
        key = (spec_name, zone)
        with self._lock:
            trace = self._traces.get(key)
            if trace is None:
                mu = self._mean(spec_name)
                self._rngs[key] = random.Random(f"{self.seed}:{spec_name}:{zone}")
                trace = [mu]
                self._traces[key] = trace
            rng = self._rngs[key]
            mu = self._mean(spec_name)
            cap = self._cap(spec_name)
            while len(trace) <= idx:
                p = trace[-1]
                p = p + self.kappa * (mu - p) + self.sigma * mu * rng.gauss(0.0, 1.0)
                trace.append(min(max(p, 0.01), cap))
            return trace[idx]

    def zone_prices(self, spec_name: str, t: float) -> tuple[float, ...]:
        return tuple(self.price(spec_name, z, t) for z in ZONES)


class Autoscaler:
    """Single periodic control loop: evaluate -> apply -> tick."""

    def __init__(self, clock, market: SpotMarket, pools: dict[str, Pool],
                 broker=None):
        self._clock = clock
        self.market = market
        self.pools = pools
        self._broker = broker
        self._lock = threading.RLock()
        self._counter = 0
        self.provisioning_events: list[ProvisionEvent] = []
        self.cost_rows: list[tuple[float, str, int, float]] = []   # t, pool, live, spend
        self._spend: dict[str, float] = {name: 0.0 for name in pools}

    # --- policy ----------------------------------------------------------------

    def evaluate(self, queue_depths: dict[str, int],
                 now: Optional[float] = None) -> list[ProvisioningAction]:
        """Pure policy decision; does not mutate pool state."""
        now = self._clock.now() if now is None else now
        actions = []
        with self._lock:
            for pool in self.pools.values():
                live = pool.live_instances()
                backlog = queue_depths.get(pool.name, 0)
                desired = math.ceil(backlog / pool.backlog_per_instance)
                desired = max(desired, pool.min_instances)
                if desired > len(live):
                    actions.append(ProvisioningAction("launch", pool.name,
                                                      count=desired - len(live)))
                # drain idle capacity beyond what's needed and past the timeout
                idle = [i for i in live if i.state == READY and i.idle_since is not None
                        and now - i.idle_since > pool.idle_timeout_seconds]
                idle.sort(key=lambda i: i.idle_since)
                spare = len(live) - desired
                victims = idle[:max(spare, 0)] if spare > 0 else []
                if victims:
                    actions.append(ProvisioningAction(
                        "drain", pool.name,
                        instance_ids=tuple(i.instance_id for i in victims)))
        return actions

    def apply(self, actions: list[ProvisioningAction]) -> list[WorkerInstance]:
        launched = []
        for action in actions:
            if action.kind == "launch":
                for _ in range(action.count):
                    try:
                        launched.append(self.provision(action.pool))
                    except BidTooLow:
                        continue    # market moved against us; retry next loop
            elif action.kind == "drain":
                for instance_id in action.instance_ids:
                    self.drain(instance_id)
        return launched

    def run_once(self, queue_depths: Optional[dict[str, int]] = None) -> list[ProvisioningAction]:
        """One control-loop pass; returns the actions it took."""
        if queue_depths is None:
            if self._broker is None:
                raise RuntimeError("no broker attached; pass queue_depths explicitly")
            queue_depths = {name: self._broker.queue_depth(name) for name in self.pools}
        actions = self.evaluate(queue_depths)
        self.apply(actions)
        self.tick()
        return actions

    # --- bidding and lifecycle -----------------------------------------------------

    def select_spot_bid(self, spec: InstanceSpec,
                        now: Optional[float] = None) -> tuple[int, float]:
        """Cheapest zone right now; ties go to the lowest zone index."""
        now = self._clock.now() if now is None else now
        best_zone = ZONES[0]
        best_price = self.market.price(spec.name, ZONES[0], now)
        for zone in ZONES[1:]:
            p = self.market.price(spec.name, zone, now)
            if p < best_price:
                best_zone, best_price = zone, p
        return best_zone, best_price * BID_MARGIN

    def provision(self, pool_name: str, zone: Optional[int] = None,
                  bid: Optional[float] = None) -> WorkerInstance:
        with self._lock:
            pool = self.pools[pool_name]
            now = self._clock.now()
            spec = pool.spec
            if spec.market == SPOT:
                if bid is None:
                    if zone is None:
                        zone, bid = self.select_spot_bid(spec, now)
                    else:
                        bid = self.market.price(spec.name, zone, now) * pool.bid_margin
                price_now = self.market.price(spec.name, zone, now)
                if bid < price_now:
                    raise BidTooLow(f"bid {bid:.4f} below market {price_now:.4f} in zone {zone}")
                hourly = price_now
                snapshot = self.market.zone_prices(spec.name, now)
            else:
                zone = zone or ZONES[0]
                bid = None
                hourly = ON_DEMAND_PRICES[spec.name]
                snapshot = ()
            self._counter += 1
            instance = WorkerInstance(
                instance_id=f"i-{self._counter:06d}",
                pool=pool_name, zone=zone, spec=spec, state=PROVISIONING,
                launched_at=now, price_per_hour=hourly, bid_price=bid,
                ready_at=now + spec.provision_delay_seconds,
                decided_at=now, billed_until=now,
            )
            pool.instances.append(instance)
            self.provisioning_events.append(ProvisionEvent(
                t=now, pool=pool_name, spec=spec.name, market=spec.market,
                zone=zone, bid=bid, zone_prices=snapshot,
                instance_id=instance.instance_id))
            return instance

    def drain(self, instance_id: str) -> None:
        with self._lock:
            instance = self._find(instance_id)
            if instance is None or instance.state != READY:
                return
            instance.state = DRAINING
            if self._broker is not None:
                self._broker.unregister_instance(instance_id)

    def handle_interruption(self, instance_id: str) -> bool:
        """Spot reclaim: terminate the instance, leaving any delivery it held
        to lapse back onto the queue. On-demand instances are not eligible."""
        with self._lock:
            instance = self._find(instance_id)
            if instance is None or instance.spec.market != SPOT or instance.state == TERMINATED:
                return False
            self._terminate(instance)
            return True

    def _terminate(self, instance: WorkerInstance) -> None:
        self._bill(instance, self._clock.now())
        instance.state = TERMINATED
        if self._broker is not None:
            self._broker.unregister_instance(instance.instance_id)

    def _find(self, instance_id: str) -> Optional[WorkerInstance]:
        for pool in self.pools.values():
            for instance in pool.instances:
                if instance.instance_id == instance_id:
                    return instance
        return None

    # --- clock-driven state advancement -------------------------------------------

    def tick(self) -> None:
        now = self._clock.now()
        with self._lock:
            busy = self._broker.busy_instances() if self._broker is not None else set()
            for pool in self.pools.values():
                for instance in pool.instances:
                    if instance.state == PROVISIONING and now >= instance.ready_at:
                        instance.state = READY
                        instance.became_ready_at = instance.ready_at
                        instance.idle_since = instance.ready_at
                        if self._broker is not None:
                            self._broker.register_instance(instance.instance_id, pool.name)
                    if instance.state in (READY, BUSY):
                        if instance.instance_id in busy:
                            instance.state = BUSY
                            instance.idle_since = None
                        else:
                            if instance.state == BUSY:
                                instance.idle_since = now
                            instance.state = READY
                            if instance.idle_since is None:
                                instance.idle_since = now
                    if (instance.spec.market == SPOT and instance.live
                            and instance.state != PROVISIONING
                            and self.market.price(instance.spec.name, instance.zone, now)
                            > instance.bid_price):
                        self._terminate(instance)
                    if instance.state == DRAINING and instance.instance_id not in busy:
                        self._terminate(instance)
                    if instance.state != TERMINATED:
                        self._bill(instance, now)
                self.cost_rows.append((now, pool.name, len(pool.live_instances()),
                                       self._spend[pool.name]))

    def _bill(self, instance: WorkerInstance, now: float) -> None:
        if now > instance.billed_until:
            hours = (now - instance.billed_until) / 3600.0
            self._spend[instance.pool] += hours * instance.price_per_hour
            instance.billed_until = now

    def total_spend(self, pool_name: Optional[str] = None) -> float:
        with self._lock:
            if pool_name is not None:
                return self._spend[pool_name]
            return sum(self._spend.values())

    def export_cost_report(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "pool", "instances", "spend"])
            for row in self.cost_rows:
                writer.writerow([f"{row[0]:.1f}", row[1], row[2], f"{row[3]:.6f}"])


# --- configuration ---------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 7,
    "pools": {
        "Test": {"spec": "t2.medium", "min_instances": 1},
        "Production": {"spec": "c3.8xlarge", "min_instances": 0},
    },
    "policy": {
        "backlog_per_instance": BACKLOG_PER_INSTANCE,
        "idle_timeout_seconds": IDLE_TIMEOUT_SECONDS,
        "bid_margin": BID_MARGIN,
    },
}


def build_pools(config: Optional[dict] = None) -> tuple[SpotMarket, dict[str, Pool]]:
    """Instantiate the market and pools from a config dict (see DEFAULT_CONFIG)."""
    cfg = dict(DEFAULT_CONFIG)
    if config:
        cfg = {**DEFAULT_CONFIG, **config}
        cfg["pools"] = {**DEFAULT_CONFIG["pools"], **config.get("pools", {})}
        cfg["policy"] = {**DEFAULT_CONFIG["policy"], **config.get("policy", {})}
    policy = cfg["policy"]
    pools = {}
    for name, p in cfg["pools"].items():
        spec = SPEC_CATALOG[p["spec"]]
        pools[name] = Pool(
            name=name, spec=spec, min_instances=p["min_instances"],
            backlog_per_instance=policy["backlog_per_instance"],
            idle_timeout_seconds=policy["idle_timeout_seconds"],
            bid_margin=policy["bid_margin"],
        )
    return SpotMarket(seed=cfg["seed"]), pools


def load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
