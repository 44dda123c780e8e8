#!/usr/bin/env python3
"""Cold and hot storage under a tiny hot-tier budget.

Everything lands in cold storage on write. Reads promote objects into the
bounded hot tier, and the least recently used resident is evicted whenever
the budget would overflow. With a 3 KB budget and 1 KB objects, the hot
tier can hold three at a time; watch the hot set roll over as the read
pattern shifts.
"""

import tempfile

from enclave import Enclave, LogicalClock

KB = 1024


def hot(catalog):
    return sorted(uri.rsplit("/", 1)[1] for uri in catalog.hot_set())


def main():
    clock = LogicalClock()
    with tempfile.TemporaryDirectory() as root:
        enclave = Enclave(root, clock=clock, persist_jobs=False,
                          hot_capacity_bytes=3 * KB)
        enclave.add_role("analyst")
        enclave.add_user("alice", {"analyst"})
        catalog = enclave.catalog
        catalog.grant("s3://datasets", "analyst", ["read", "write"])

        uris = [f"s3://datasets/block-{n}.bin" for n in range(5)]
        for n, uri in enumerate(uris):
            catalog.put_object("alice", uri, bytes([n]) * KB)
        print(f"wrote {len(uris)} objects of 1 KB; hot set: {hot(catalog) or '{}'}")
        print(f"(writes land cold; hot bytes in use: {catalog.hot_bytes_in_use()})")

        def read(uri):
            clock.advance(1)
            request = catalog.sign_url("alice", uri, "read", ttl_seconds=60)
            catalog.get_object(request)

        print("\n== reads promote, three fit ==")
        for uri in uris[:3]:
            read(uri)
        print(f"read block-0..2: hot set {hot(catalog)}")

        print("\n== a fourth read evicts the least recently used ==")
        read(uris[3])
        print(f"read block-3:   hot set {hot(catalog)} (block-0 evicted)")

        print("\n== touching an old resident saves it from eviction ==")
        read(uris[1])            # block-1 becomes most recent
        read(uris[4])            # needs room: block-2 is now the LRU
        print(f"read block-1 then block-4: hot set {hot(catalog)}")

        states = [catalog.tier_state(uri) for uri in uris]
        print("\naccess counts:",
              {s.uri.rsplit('/', 1)[1]: s.access_count for s in states})
        print("tiers:        ",
              {s.uri.rsplit('/', 1)[1]: s.tier for s in states})

        enclave.close()


if __name__ == "__main__":
    main()
