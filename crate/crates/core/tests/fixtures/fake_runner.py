#!/usr/bin/env python3
"""Test double for the sandbox runner: reads one request from stdin, runs the script with
the interpreter from CHARTFORGE_SANDBOX_PY (default: this interpreter) and prints one
result object."""
import json
import os
import subprocess
import sys
import time

req = json.load(sys.stdin)

workdir = req["workdir"]
path = os.path.join(workdir, "script.py")
with open(path, "w") as f:
    f.write(req["script"])
python = os.environ.get("CHARTFORGE_SANDBOX_PY", sys.executable)
start = time.time()
proc = subprocess.Popen([python, path], cwd=workdir, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
try:
    _, err = proc.communicate(timeout=req["timeout_s"])
    code = proc.returncode
    status = None
except subprocess.TimeoutExpired:
    proc.kill()
    _, err = proc.communicate()
    code = None
    status = "timeout"
figure = os.path.join(workdir, "figure.png")
if status is None:
    if code != 0:
        status = "exec_error"
    elif not os.path.exists(figure):
        status = "no_figure"
    else:
        status = "ok"
print(json.dumps({
    "status": status,
    "exit_code": code,
    "stderr_tail": err.decode("utf-8", "replace")[-4096:],
    "figure_file": "figure.png" if status == "ok" else None,
    "wall_time_ms": int((time.time() - start) * 1000),
}))
