#!/usr/bin/env python3
"""Plain Python functions, executed inside the enclave.

Requires the kotta client package (pip install -e pyclient). The decorator
cans a function with its arguments, ships it as a job, and either blocks for
the deserialized return value or hands back a future. Functions must be
self-contained: import inside the body, since only builtins travel along.
"""

import sys
import tempfile

try:
    import kotta
except ImportError:
    sys.exit("kotta is not installed; run: pip install -e pyclient")

from enclave import Enclave
from enclave.auth import write_token_file


def my_sum(data):
    return sum(data)


def my_sqrt(values):
    return [v ** 0.5 for v in values]


def unlucky():
    raise ValueError("thirteen")


def main():
    with tempfile.TemporaryDirectory() as root:
        enclave = Enclave(root, persist_jobs=False)
        enclave.add_role("analyst")
        stops = [enclave.start_worker_thread(enclave.spawn_worker(
                     "Test", runners={"canned_function": [sys.executable, "-m",
                                                          "kotta.runner"]}))
                 for _ in range(3)]
        port = enclave.start_gateway("127.0.0.1", 0)
        token_file = f"{root}/token"
        write_token_file(token_file, enclave.add_user("nb-user", {"analyst"}))
        conn = kotta.Connection(f"http://127.0.0.1:{port}", token_file=token_file,
                                poll_initial=0.05)
        print(f"gateway up on port {port}, 3 workers polling")

        print("\n== blocking call ==")
        remote_sum = kotta.kottajob(conn=conn, queue="Test",
                                    walltime_minutes=1)(my_sum)
        print(f"my_sum(range(100)) remotely = {remote_sum(range(100))}")

        print("\n== five futures in flight ==")
        remote_sqrt = kotta.kottajob(conn=conn, queue="Test", walltime_minutes=1,
                                     block=False)(my_sqrt)
        values = list(range(100))
        futures = [remote_sqrt(values[i:i + 20]) for i in range(0, 100, 20)]
        print(f"submitted {len(futures)} chunks, states: "
              f"{[f.state for f in futures]}")
        gathered = []
        for future in futures:
            gathered.extend(future.result(timeout=60))
        print(f"all resolved; results match local: {gathered == my_sqrt(values)}")

        print("\n== remote failures raise, with the remote streams attached ==")
        remote_boom = kotta.kottajob(conn=conn, queue="Test",
                                     walltime_minutes=1)(unlucky)
        try:
            remote_boom()
        except kotta.RemoteExecutionError as exc:
            print(f"raised RemoteExecutionError; remote stderr says: "
                  f"{exc.stderr.strip().splitlines()[-1]}")

        for stop in stops:
            stop.set()
        enclave.close()


if __name__ == "__main__":
    main()
