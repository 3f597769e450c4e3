"""Run one backup replica as its own process.

    python -m replog.backup_server --capacity 1048576 --port 7700 \
        --backing /tmp/replica.img

Prints ``listening <port>`` once the socket is bound so a parent process
can wait for readiness.  A shutdown frame (or SIGTERM) saves the region
to the backing file, fault bookkeeping included, so a later process can
reload it and see the same crash behavior.
"""

from __future__ import annotations

import argparse
import os
import sys

from .pmem import Region
from .transport import BackupServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="replog-backup", description="serve one backup region over TCP")
    parser.add_argument("--capacity", type=int, default=1 << 20)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--backing", default=None,
                        help="image file to load if present and save on exit")
    parser.add_argument("--min-generation", type=int, default=0)
    args = parser.parse_args(argv)

    if args.backing and os.path.exists(args.backing):
        region = Region.load(args.backing)
    else:
        region = Region(args.capacity)

    server = BackupServer(region, host=args.host, port=args.port,
                          min_generation=args.min_generation,
                          backing=args.backing)
    print(f"listening {server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
