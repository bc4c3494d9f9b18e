#!/usr/bin/env python3
"""Drives the patchvlm binary: exit codes, no partial output, and a recount of
the reported tables from the per-sample records."""

import csv
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

BINARY, CACHE = sys.argv[1], sys.argv[2]
failures = []


def check(ok, what):
    print(("ok   " if ok else "FAIL ") + what)
    if not ok:
        failures.append(what)


def run(*args, env=None):
    return subprocess.run([BINARY, *args], capture_output=True, text=True, env=env)


def recount(records):
    tp = sum(r["label"] and r["predicted"] for r in records)
    fp = sum(not r["label"] and r["predicted"] for r in records)
    fn = sum(r["label"] and not r["predicted"] for r in records)
    tn = len(records) - tp - fp - fn
    ratio = lambda a, b: a / b if b else 0.0
    p, r = ratio(tp, tp + fp), ratio(tp, tp + fn)
    return {"accuracy": ratio(tp + tn, len(records)), "precision": p, "recall": r,
            "f1": 2 * p * r / (p + r) if p + r > 0 else 0.0}


def cells(records):
    out = {"cd_ci": 0, "cd_wi": 0, "wd_ci": 0, "wd_wi": 0}
    for r in records:
        key = ("cd_" if r["detection_correct"] else "wd_") + \
              ("ci" if r["label"] == r["predicted"] else "wi")
        out[key] += 1
    return out


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    bad = tmp / "bad.json"
    bad.write_text("{ \"seed\": ")
    out = tmp / "corrupt"
    res = run("gen", "-c", str(bad), "-o", str(out))
    check(res.returncode == 2, f"corrupt config exits 2 (got {res.returncode})")
    check(not out.exists(), "corrupt config leaves no output directory")

    res = run("gen", "-o", str(out), "--set", "corpus.scenez=3")
    check(res.returncode == 2 and "scenez" in res.stderr, "unknown key exits 2 and is named")
    res = run("train", "-o", str(out), "--set", "train.epochs=0")
    check(res.returncode == 2, "epochs=0 exits 2")
    check(not out.exists(), "rejected configs write nothing")

    run_dir = tmp / "runs" / "r"
    env = dict(os.environ, PATCHVLM_OUTPUT_ROOT=str(tmp / "runs"))
    common = ["-o", "r", "--set", f'cache_dir="{CACHE}"', "--set", "corpus.scenes=30",
              "--set", "oracle.p_miss=0.3", "--set", "oracle.p_false=0.3",
              "--set", "train.epochs=1", "--set", "train.n=4"]
    res = run("train", *common, env=env)
    check(res.returncode == 1 and "manifest.json" in res.stderr,
          f"train before gen exits 1 naming the manifest (got {res.returncode})")
    for cmd in ("gen", "train", "eval", "report"):
        res = run(cmd, *common, env=env)
        check(res.returncode == 0, f"{cmd} exits 0 under the output root")
        if res.returncode != 0:
            print(res.stderr)
        check((run_dir / f"config.{cmd}.json").exists(), f"{cmd} echoes its config")

    eval_dir = run_dir / "eval"
    rows = json.loads((eval_dir / "rows.json").read_text())
    with open(eval_dir / "results.tsv") as f:
        table = {r["name"]: r for r in csv.DictReader(f, delimiter="\t")}
    with open(eval_dir / "contingency.tsv") as f:
        contingency = {r["method"]: r for r in csv.DictReader(f, delimiter="\t")}
    qa_lines = (run_dir / "data" / "qa.jsonl").read_text().splitlines()[1:]
    test_ids = {json.loads(l)["id"] for l in qa_lines if json.loads(l)["split"] == "test"}

    for row in rows:
        lines = (eval_dir / row["records"]).read_text().splitlines()
        header, records = json.loads(lines[0]), [json.loads(l) for l in lines[1:]]
        tag = row["tag"]
        check(header["count"] == len(records), f"{tag}: record count matches header")
        check({r["sample_id"] for r in records} == test_ids, f"{tag}: records cover the test split")
        reported = table[tag]
        check(int(reported["samples"]) == len(records), f"{tag}: sample count")
        for k, v in recount(records).items():
            check(float(reported[k]) == v, f"{tag}: {k} recount {v} vs {reported[k]}")
        for k, v in cells(records).items():
            check(int(contingency[tag][k]) == v, f"{tag}: {k} recount")

    report = (run_dir / "report" / "report.txt").read_text()
    check(all(r["tag"] in report for r in rows), "report lists every eval row")

print(f"{len(failures)} failure(s)")
sys.exit(1 if failures else 0)
