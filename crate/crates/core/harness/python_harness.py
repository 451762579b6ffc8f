# Test harness for candidate solutions.
# argv: candidate.py cases.json results.jsonl entry_point per_case_limit_s
# Writes one JSON object per test case to results.jsonl:
#   {"index": i, "status": "passed"|"wrong_answer"|"error"|"timeout", "cpu_ms": float, "detail": str}
import io
import json
import signal
import sys
import time

candidate_path, cases_path, results_path, entry, limit = sys.argv[1:6]
limit = float(limit)
sys.setrecursionlimit(100000)


class CaseTimeout(BaseException):
    pass


def on_alarm(signum, frame):
    raise CaseTimeout()


signal.signal(signal.SIGALRM, on_alarm)

with open(cases_path) as f:
    cases = json.load(f)
with open(candidate_path) as f:
    source = f.read()

out = open(results_path, "w")
real_stdout = sys.stdout
sys.stdout = io.StringIO()


def emit(record):
    out.write(json.dumps(record) + "\n")
    out.flush()


namespace = {"__name__": "candidate"}
load_error = None
try:
    exec("from typing import *\nimport collections, heapq, math, bisect, itertools, functools", namespace)
    exec(compile(source, "candidate.py", "exec"), namespace)
except BaseException as e:  # noqa: BLE001
    load_error = repr(e)[:500]


def resolve():
    if "Solution" in namespace:
        return getattr(namespace["Solution"](), entry)
    return namespace[entry]


for i, case in enumerate(cases):
    if load_error is not None:
        emit({"index": i, "status": "error", "cpu_ms": 0.0, "detail": load_error})
        continue
    start = time.process_time()
    try:
        fn = resolve()
        signal.setitimer(signal.ITIMER_REAL, limit)
        try:
            start = time.process_time()
            result = fn(*case["input"])
        finally:
            elapsed = time.process_time() - start
            signal.setitimer(signal.ITIMER_REAL, 0)
        got = json.loads(json.dumps(result))
        status = "passed" if got == case["expected"] else "wrong_answer"
        emit({"index": i, "status": status, "cpu_ms": elapsed * 1000.0, "detail": "" if status == "passed" else repr(got)[:200]})
    except CaseTimeout:
        emit({"index": i, "status": "timeout", "cpu_ms": (time.process_time() - start) * 1000.0, "detail": "time limit"})
    except BaseException as e:  # noqa: BLE001
        emit({"index": i, "status": "error", "cpu_ms": (time.process_time() - start) * 1000.0, "detail": repr(e)[:500]})

sys.stdout = real_stdout
out.close()
