"""Regenerate the bundled model asset (src/facefit/data/sphere_head.p3dm).

The asset is fully determined by ``synth.make_sphere_head`` so rerunning this
script must reproduce the committed file byte for byte.
"""
import argparse
import hashlib
import os

from facefit.io import encode_p3dm
from facefit.synth import make_sphere_head

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_OUT = os.path.join(HERE, os.pardir, "src", "facefit", "data", "sphere_head.p3dm")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=DEFAULT_OUT)
    ap.add_argument("--check", action="store_true", help="compare against the existing file instead of writing")
    args = ap.parse_args(argv)
    blob = encode_p3dm(make_sphere_head())
    digest = hashlib.sha256(blob).hexdigest()
    if args.check:
        with open(args.out, "rb") as f:
            same = f.read() == blob
        print(("OK " if same else "DIFFERS ") + digest)
        return 0 if same else 1
    with open(args.out, "wb") as f:
        f.write(blob)
    print(f"wrote {os.path.normpath(args.out)} sha256={digest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
