#!/usr/bin/env python3
"""A script job travels the whole pipeline.

Alice stores a protected input, submits a job that reads it, and a worker
instance picks the job up. The instance holds no data rights of its own: it
assumes alice's role for the duration of the job, stages the input into the
sandbox by basename, runs the script, stages declared outputs back, and
releases the role. The audit trail shows the whole sandwich.
"""

import tempfile

from enclave import Enclave, LogicalClock

SCRIPT = """#!/bin/sh
tr a-z A-Z < report.txt > loud-report.txt
echo "shouted $(wc -c < report.txt) bytes"
"""


def main():
    clock = LogicalClock()
    with tempfile.TemporaryDirectory() as root:
        enclave = Enclave(root, clock=clock, persist_jobs=False)
        enclave.add_role("analyst")
        refresh = enclave.add_user("alice", {"analyst"})
        token = enclave.access_token_for(refresh)

        print("== stage a protected input ==")
        input_uri = "s3://klab-jobs/report.txt"
        enclave.catalog.grant(input_uri, "analyst", ["read", "write"])
        enclave.catalog.put_object("alice", input_uri, b"quarterly numbers\n")
        print(f"stored {input_uri} (readable only by the analyst role)")

        print("\n== submit and run ==")
        job_id = enclave.broker.submit_job(token, {
            "jobtype": "script",
            "jobname": "shout",
            "queue": "Test",
            "walltime_minutes": 5,
            "executable": "/bin/sh shout.sh",
            "script_name": "shout.sh",
            "script": SCRIPT,
            "inputs": [input_uri],
            "outputs": ["s3://klab-jobs/loud-report.txt"],
        })
        print(f"submitted {job_id}")
        agent = enclave.spawn_worker("Test", instance_id="i-demo")
        agent.process_one()

        record = enclave.broker.record(job_id)
        print(f"status: {record.status}")
        print(f"stdout: {record.stdout.decode().strip()!r}")
        print(f"history: {[s for s, _ in record.status_history]}")
        print(f"result object: {record.result_uri}")

        print("\n== the delegation sandwich in the audit trail ==")
        for event in enclave.audit.events():
            if event.actor == "i-demo" or event.target == job_id:
                print(f"  seq={event.seq:<3} actor={event.actor:<7} "
                      f"role={event.effective_role:<15} action={event.action:<14} "
                      f"target={event.target}")
        check = enclave.audit.verify()
        print(f"\nhash chain intact: {check.ok}")

        enclave.close()


if __name__ == "__main__":
    main()
