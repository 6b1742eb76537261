#!/usr/bin/env python3
"""Stand-in exfiltration helper staged onto the server."""

import sys

print("exfil", *sys.argv[1:])
