"""Serve the fact-world oracle over stdin/stdout, one JSON record per line.

Reference peer for :class:`entailrl.rewards.SubprocessJudge`; an external
classifier only has to speak the same protocol.
"""
from __future__ import annotations

import argparse
import json
import sys

from .rewards import OracleJudge, RewardConfig
from .synthtask import FactWorld


def serve(judge, stdin=sys.stdin, stdout=sys.stdout) -> int:
    n = 0
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        j = judge(req["document"], req["summary"])
        stdout.write(json.dumps({"prob_entailed": j.prob_entailed}) + "\n")
        stdout.flush()
        n += 1
    return n


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m entailrl.judge_server")
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--attributes", type=int, default=10)
    p.add_argument("--values", type=int, default=30)
    p.add_argument("--beta", type=float, default=4.0)
    args = p.parse_args(argv)
    world = FactWorld(args.entities, args.attributes, args.values)
    serve(OracleJudge(world, RewardConfig(oracle_beta=args.beta)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
