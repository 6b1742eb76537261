#!/usr/bin/env python3
"""Stand-in exploit script staged onto the attacker."""

import argparse

parser = argparse.ArgumentParser()
parser.add_argument("--rhost", required=True)
print("exploit ->", parser.parse_args().rhost)
