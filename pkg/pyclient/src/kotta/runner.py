"""Worker-side runner for canned-function payloads.

Invoked inside the job sandbox as:

    python -m kotta.runner <payload-file> <args-file> <result-file>

The payload file holds a canned envelope, the args file a JSON manifest with
job_id/jobname/inputs/outputs, and the result file is where the pickled
return value must land. Exit codes are diagnostic:

    0  success, result file written
    1  the function raised (traceback on stderr)
    2  a declared input is missing from the sandbox
    3  the envelope would not deserialize
    4  unsupported envelope format version
    64 usage error
"""

from __future__ import annotations

import json
import os
import pickle
import sys
import traceback

from .canning import uncan
from .errors import DeserializationError, VersionMismatch


def main(argv: list[str]) -> int:
    if len(argv) != 3:
        print("usage: kotta-runner <payload-file> <args-file> <result-file>",
              file=sys.stderr)
        return 64
    payload_file, args_file, result_file = argv
    with open(payload_file, "rb") as fh:
        blob = fh.read()
    with open(args_file, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    try:
        func, args, kwargs = uncan(blob)
    except VersionMismatch as exc:
        print(f"VersionMismatch: {exc}", file=sys.stderr)
        return 4
    except DeserializationError as exc:
        print(f"DeserializationError: {exc}", file=sys.stderr)
        return 3

    missing = [uri for uri in manifest.get("inputs", [])
               if not os.path.exists(os.path.basename(uri))]
    if missing:
        print(f"staged inputs missing from sandbox: {', '.join(missing)}",
              file=sys.stderr)
        return 2

    try:
        value = func(*args, **kwargs)
    except BaseException:
        traceback.print_exc()
        return 1

    with open(result_file, "wb") as fh:
        pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
    return 0


def cli() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    cli()
