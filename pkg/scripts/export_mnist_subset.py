"""Write the 5,000-image MNIST sample shipped inside the mlxtend wheel as IDX files.

Usage: python scripts/export_mnist_subset.py [WHEEL] [OUTDIR]

Without WHEEL the wheel is fetched with ``pip download``. The CSV inside holds
one image per row: 784 pixel bytes followed by the label.
"""

import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from advcritic.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", dest, "mlxtend==0.24.0"],
        check=True,
    )
    return glob.glob(f"{dest}/mlxtend-*.whl")[0]


def main(argv):
    wheel = argv[1] if len(argv) > 1 else None
    out = Path(argv[2] if len(argv) > 2 else "data/mnist5k")
    with tempfile.TemporaryDirectory() as tmp:
        wheel = wheel or fetch_wheel(tmp)
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", images)
    write_idx(out / "labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(sys.argv)
