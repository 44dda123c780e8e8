"""Job descriptions shared across test modules."""

HELLO_SCRIPT = "#!/bin/bash\necho 'Hello world'\n"


def hello_job(queue: str = "Test", walltime: int = 1, **overrides) -> dict:
    job = {
        "jobtype": "script",
        "jobname": "hello",
        "queue": queue,
        "walltime_minutes": walltime,
        "executable": "/bin/bash hello.sh",
        "script_name": "hello.sh",
        "script": HELLO_SCRIPT,
    }
    job.update(overrides)
    return job
