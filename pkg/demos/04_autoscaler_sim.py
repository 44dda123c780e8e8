#!/usr/bin/env python3
"""One simulated hour of bursty load against the autoscaler.

The Test pool runs a warm floor of cheap on-demand instances; the
Production pool rides the spot market, bidding 25% over the cheapest
zone's current price. Bursts of work arrive at random, capacity chases
ceil(backlog/2), and instances idle past the timeout get drained. Spot
reclaims happen whenever the market moves above an instance's standing bid.

Writes a per-pool cost report to spend.csv at the end.
"""

import random

from enclave.autoscaler import Autoscaler, build_pools
from enclave.clock import LogicalClock

STEP = 10.0                 # control-loop cadence in seconds
HOUR = int(3600 / STEP)


def main():
    clock = LogicalClock()
    market, pools = build_pools()
    scaler = Autoscaler(clock, market, pools)
    rng = random.Random(11)

    backlog = {"Test": 0, "Production": 0}
    reclaims = launches = 0
    for step in range(HOUR):
        if rng.random() < 0.02:
            burst = rng.randint(6, 24)
            backlog["Production"] += burst
            print(f"[t={clock.now():5.0f}s] burst of {burst} production jobs "
                  f"(backlog {backlog['Production']})")

        # live capacity works the backlog down between control passes
        for name, pool in pools.items():
            ready = sum(1 for i in pool.live_instances() if i.ready_at <= clock.now())
            backlog[name] = max(0, backlog[name] - ready)

        actions = scaler.run_once(dict(backlog))
        for action in actions:
            if action.kind == "launch":
                launches += action.count
                event = scaler.provisioning_events[-1]
                if event.market == "spot":
                    print(f"[t={clock.now():5.0f}s] launch {action.count} in "
                          f"{action.pool}: zone {event.zone} at "
                          f"{event.zone_prices[event.zone - 1]:.3f}/h, "
                          f"bid {event.bid:.3f}")
            elif action.kind == "drain":
                print(f"[t={clock.now():5.0f}s] drain {len(action.instance_ids)} "
                      f"idle in {action.pool}")

        for pool in pools.values():
            for instance in pool.live_instances():
                if instance.bid_price is None or instance.ready_at > clock.now():
                    continue
                price = market.price(instance.spec.name, instance.zone, clock.now())
                if price > instance.bid_price and scaler.handle_interruption(
                        instance.instance_id):
                    reclaims += 1
                    print(f"[t={clock.now():5.0f}s] spot reclaim: "
                          f"{instance.instance_id} (market {price:.3f} > "
                          f"bid {instance.bid_price:.3f})")
        clock.advance(STEP)

    print(f"\nafter one hour: {launches} launches, {reclaims} spot reclaims")
    print("(the 25% bid margin makes reclaims rare; a lowball bid is not so lucky)")

    print("\n== a deliberately thin bid gets reclaimed ==")
    spec = pools["Production"].spec
    price = market.price(spec.name, 1, clock.now())
    victim = scaler.provision("Production", zone=1, bid=price * 1.001)
    print(f"provisioned {victim.instance_id} in zone 1 at {price:.3f}/h, "
          f"bid only {victim.bid_price:.3f}")
    while market.price(spec.name, 1, clock.now()) <= victim.bid_price:
        clock.advance(STEP)
        scaler.tick()
    price = market.price(spec.name, 1, clock.now())
    scaler.handle_interruption(victim.instance_id)
    print(f"[t={clock.now():5.0f}s] market hit {price:.3f} > bid: "
          f"{victim.instance_id} is now {victim.state}")

    for name, pool in pools.items():
        live = len(pool.live_instances())
        print(f"  {name:<10} live={live}  spend=${scaler.total_spend(name):.3f}")
    scaler.export_cost_report("spend.csv")
    print("cost report written to spend.csv")


if __name__ == "__main__":
    main()
