"""Write the golden codec fixtures under tests/testdata and their SHA256SUMS.

Fixture contents are fixed arrays or come from a seeded generator, so the
files are reproducible; the checksums pin the on-disk bytes.
"""
import argparse
import hashlib
import os

import numpy as np

from facefit.io import encode_p3dm, encode_pfm, encode_pgm
from facefit.maps import MapImage
from facefit.synth import make_sphere_head

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_DIR = os.path.join(HERE, os.pardir, "tests", "testdata")


def fixtures():
    rng = np.random.default_rng(20261016)
    out = {}
    out["one_pixel.pfm"] = encode_pfm(MapImage(np.full((1, 1, 1), 0.5), np.ones((1, 1), bool)))
    rgb = rng.standard_normal((5, 7, 3)).astype(np.float32)
    valid = rng.random((5, 7)) > 0.2
    out["color_le.pfm"] = encode_pfm(MapImage(rgb, valid), scale=-1.0)
    out["color_be.pfm"] = encode_pfm(MapImage(rgb, valid), scale=1.0)
    gray = rng.random((6, 4, 1)).astype(np.float32)
    out["gray_be.pfm"] = encode_pfm(MapImage(gray, np.ones((6, 4), bool)), scale=2.0)
    yy, xx = np.mgrid[0:8, 0:10]
    out["checker.pgm"] = encode_pgm((yy + xx) % 2 == 0)
    out["sphere_head.p3dm"] = encode_p3dm(make_sphere_head())
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dir", default=DEFAULT_DIR)
    args = ap.parse_args(argv)
    os.makedirs(args.dir, exist_ok=True)
    lines = []
    for name, blob in sorted(fixtures().items()):
        with open(os.path.join(args.dir, name), "wb") as f:
            f.write(blob)
        lines.append(f"{hashlib.sha256(blob).hexdigest()}  {name}")
    with open(os.path.join(args.dir, "SHA256SUMS"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
