"""Reference embedding plugin: serves mock embeddings over stdin/stdout.

Run as ``python -m t2ireid.plugin_server --dim 64 --seed 0``.  Real model
wrappers implement the same loop around their own encoders.
"""

import argparse
import json
import sys

from .errors import T2IError
from .scorer import ImageRecord, MockBackend, decode_image_payload


def serve(backend, stdin=sys.stdin, stdout=sys.stdout):
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        try:
            if req["kind"] == "text":
                vec = backend.embed_text(req["payload"])
            elif req["kind"] == "image":
                vec = backend.embed_image(ImageRecord(req["id"], data=decode_image_payload(req["payload"])))
            else:
                raise ValueError(f"unknown kind {req['kind']!r}")
            msg = {"id": req["id"], "vector": [float(x) for x in vec]}
        except (T2IError, ValueError, KeyError) as exc:
            msg = {"id": req.get("id"), "error": str(exc)}
        stdout.write(json.dumps(msg, separators=(",", ":")) + "\n")
        stdout.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    serve(MockBackend(args.dim, args.seed))


if __name__ == "__main__":
    main()
