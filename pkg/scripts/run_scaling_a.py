#!/usr/bin/env python3
"""Orchestrator stage timings for growing local star deployments; writes scaling_a.csv.

Usage: python3 scripts/run_scaling_a.py [--out DIR] [options of `qdnet-harness scaling-a`]
"""
import argparse
import sys

from qdnet.harness import main


def run(argv):
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--out", default="results")
    parser.add_argument("--state-dir")
    known, rest = parser.parse_known_args(argv)
    head = ["--out", known.out] + (["--state-dir", known.state_dir] if known.state_dir else [])
    return main([*head, "scaling-a", *rest])


if __name__ == "__main__":
    raise SystemExit(run(sys.argv[1:]))
